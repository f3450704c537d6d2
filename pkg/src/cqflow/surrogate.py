"""Convex quadratic surrogates of power-flow quantities.

The base learner is ridge-regularized degree-two polynomial regression
whose Hessian is projected onto the positive semidefinite cone, with the
affine part refit afterwards. Two ensembles are built on it: gradient
boosting with closed-form nonnegative step sizes, and bagging over
bootstrap resamples. Every model collapses to a single convex quadratic
(A, B, c) over a subset of the voltage components, which is what the
optimization layer consumes.
"""

from __future__ import annotations

import json
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import acpf


def loss(y, y_hat):
    """Squared-error loss, 0.5 * (y - y_hat)^2, elementwise."""
    return 0.5 * (np.asarray(y) - np.asarray(y_hat)) ** 2


def nearest_psd(m):
    """Frobenius-nearest positive semidefinite matrix.

    Eigendecomposition with negative eigenvalues clipped to zero; the
    input must be symmetric (skew beyond 1e-9 is rejected).
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("nearest_psd expects a square matrix")
    if m.size and np.abs(m - m.T).max() > 1e-9:
        raise ValueError("nearest_psd expects a symmetric matrix")
    m = (m + m.T) / 2.0
    w, v = np.linalg.eigh(m)
    if w.size and w[0] >= 0:
        return m
    out = (v * np.clip(w, 0.0, None)) @ v.T
    return (out + out.T) / 2.0


# ---------------------------------------------------------------------------
# feature patterns

@dataclass(frozen=True, eq=False)
class FeaturePattern:
    """Which monomials of which voltage components a surrogate may use.

    variable_map indexes the full voltage vector; pairs are local (a, b)
    index pairs with a <= b, in lexicographic order, selecting the
    quadratic monomials.
    """

    kind: str  # "dense" or "admittance-sparse"
    variable_map: np.ndarray
    pairs: tuple

    @property
    def dimension(self):
        return len(self.variable_map)

    @property
    def feature_count(self):
        return 1 + self.dimension + len(self.pairs)


def _all_pairs(d):
    return tuple((a, b) for a in range(d) for b in range(a, d))


def dense_pattern(variable_map):
    vm = np.asarray(variable_map, dtype=int)
    return FeaturePattern(kind="dense", variable_map=vm, pairs=_all_pairs(len(vm)))


def feature_pattern(target, adm, kind="auto"):
    """Build the feature pattern for a target quantity.

    "auto" resolves to admittance-sparse for bus injections and dense
    (over the branch's own terminal components) for branch flows.
    """
    t = acpf.parse_target(target)
    if t.family == "bus":
        vm = acpf.bus_variable_map(adm, adm.bus_index(t.bus), t.phase)
        if kind == "dense":
            return dense_pattern(np.arange(2 * adm.size))
        if kind in ("auto", "admittance-sparse"):
            exact = acpf.injection_matrix(t, adm)
            local = exact[np.ix_(vm, vm)]
            pairs = tuple(
                (a, b)
                for a in range(len(vm))
                for b in range(a, len(vm))
                if local[a, b] != 0.0
            )
            return FeaturePattern(kind="admittance-sparse", variable_map=vm, pairs=pairs)
        raise ValueError(f"unknown pattern kind {kind!r}")
    vm = acpf.branch_variable_map(adm.branches[t.branch])
    if kind in ("auto", "dense"):
        return dense_pattern(vm)
    if kind == "admittance-sparse":
        exact = acpf.injection_matrix(t, adm)
        local = exact[np.ix_(vm, vm)]
        pairs = tuple(
            (a, b)
            for a in range(len(vm))
            for b in range(a, len(vm))
            if local[a, b] != 0.0
        )
        return FeaturePattern(kind="admittance-sparse", variable_map=vm, pairs=pairs)
    raise ValueError(f"unknown pattern kind {kind!r}")


def quadratic_features(x, pattern):
    """Feature vector [1, x_1..x_d, selected monomials x_a x_b]."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or len(x) != pattern.dimension:
        raise ValueError(
            f"pattern expects {pattern.dimension} variables, got shape {x.shape}"
        )
    out = np.empty(pattern.feature_count)
    out[0] = 1.0
    out[1:1 + len(x)] = x
    for k, (a, b) in enumerate(pattern.pairs):
        out[1 + len(x) + k] = x[a] * x[b]
    return out


def _feature_matrix(states, pattern):
    """(m, feature_count) design matrix from full state rows."""
    xs = np.atleast_2d(np.asarray(states, dtype=float))[:, pattern.variable_map]
    m, d = xs.shape
    out = np.empty((m, pattern.feature_count))
    out[:, 0] = 1.0
    out[:, 1:1 + d] = xs
    for k, (a, b) in enumerate(pattern.pairs):
        out[:, 1 + d + k] = xs[:, a] * xs[:, b]
    return out, xs


# ---------------------------------------------------------------------------
# convex quadratic model

@dataclass(frozen=True, eq=False)
class ConvexQuadratic:
    """y ~ x^T A x + B x + c over the mapped voltage components."""

    target_id: str
    variable_map: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: float

    def __post_init__(self):
        d = len(self.variable_map)
        if self.a.shape != (d, d) or self.b.shape != (d,):
            raise ValueError("inconsistent model dimensions")
        if d and np.abs(self.a - self.a.T).max() > 1e-12:
            raise ValueError("Hessian must be symmetric")
        if self.min_eigenvalue() < -1e-9:
            raise ValueError("Hessian must be positive semidefinite")

    def min_eigenvalue(self):
        if not len(self.variable_map):
            return 0.0
        return float(np.linalg.eigvalsh(self.a)[0])

    def predict(self, states):
        arr = np.asarray(states, dtype=float)
        single = arr.ndim == 1
        xs = np.atleast_2d(arr)[:, self.variable_map]
        vals = np.einsum("mi,ij,mj->m", xs, self.a, xs) + xs @ self.b + self.c
        return float(vals[0]) if single else vals


# ---------------------------------------------------------------------------
# ridge designs (reused across boosting iterations)

class _Design:
    """Cached least-squares machinery for one (states, pattern, lambda).

    Constant feature columns (the slack components and their pure
    products) are dropped before solving and their coefficients restored
    as zeros. With lam > 0 the solve is a precomputed pseudoinverse of
    the penalty-stacked design, so refits against new right-hand sides
    are single mat-vecs.
    """

    def __init__(self, states, pattern, lam=None):
        f, xs = _feature_matrix(states, pattern)
        self.pattern = pattern
        self.xs = xs
        m, nf = f.shape
        spread = f.max(axis=0) - f.min(axis=0)
        keep = spread > 0.0
        keep[0] = True  # intercept
        # products with a pinned variable are collinear with the linear
        # column of the free factor; drop them so lambda = 0 stays solvable
        var_const = (xs.max(axis=0) - xs.min(axis=0)) == 0.0
        d = xs.shape[1]
        for k, (a, b) in enumerate(pattern.pairs):
            if var_const[a] or var_const[b]:
                keep[1 + d + k] = False
        self.keep = keep
        fk = f[:, keep]
        n_pen = int(keep.sum()) - 1
        if lam is None:
            lam = 1e-4 * float(np.sum(fk[:, 1:] ** 2)) / max(n_pen, 1)
        if lam < 0:
            raise ValueError("ridge weight must be nonnegative")
        self.lam = float(lam)
        self.quad_solver = self._solver(fk)
        self.f_kept = fk

        # affine-only design for the post-projection refit
        d = xs.shape[1]
        lin = np.empty((m, d + 1))
        lin[:, 0] = 1.0
        lin[:, 1:] = xs
        lin_spread = lin.max(axis=0) - lin.min(axis=0)
        keep_lin = lin_spread > 0.0
        keep_lin[0] = True
        self.keep_lin = keep_lin
        self.lin_kept = lin[:, keep_lin]
        self.lin_solver = self._solver(self.lin_kept)

    def _solver(self, fk):
        m, k = fk.shape
        if self.lam == 0.0:
            rank = np.linalg.matrix_rank(fk)
            if rank < k:
                raise ValueError(
                    "underdetermined fit with lambda = 0: add samples, set a "
                    "positive ridge weight, or use the admittance-sparse pattern"
                )
            pinv = np.linalg.pinv(fk)
            return lambda y: pinv @ y
        stacked = np.vstack([fk, np.sqrt(self.lam) * np.eye(k)[1:]])
        pinv = np.linalg.pinv(stacked)[:, :m]  # zero rhs rows drop out
        return lambda y: pinv @ y

    def solve_quadratic(self, y):
        w = np.zeros(self.pattern.feature_count)
        w[self.keep] = self.quad_solver(y)
        return w

    def solve_affine(self, y):
        d = self.xs.shape[1]
        coef = np.zeros(d + 1)
        coef[self.keep_lin] = self.lin_solver(y)
        return coef[1:], coef[0]


def _coefficients_to_hessian(w, pattern):
    d = pattern.dimension
    a = np.zeros((d, d))
    for k, (i, j) in enumerate(pattern.pairs):
        v = w[1 + d + k]
        if i == j:
            a[i, i] = v
        else:
            a[i, j] = v / 2.0
            a[j, i] = v / 2.0
    return a


def _quad_values(xs, a):
    return np.einsum("mi,ij,mj->m", xs, a, xs)


def _fit_on_design(design, y, target_id, project=True):
    w = design.solve_quadratic(np.asarray(y, dtype=float))
    a_tilde = _coefficients_to_hessian(w, design.pattern)
    a = nearest_psd(a_tilde) if project else (a_tilde + a_tilde.T) / 2.0
    b, c = design.solve_affine(y - _quad_values(design.xs, a))
    if project:
        return ConvexQuadratic(
            target_id=target_id,
            variable_map=design.pattern.variable_map,
            a=a,
            b=b,
            c=float(c),
        )
    return target_id, design.pattern.variable_map, a, b, float(c)


def fit_quadratic(states, y, pattern, ridge=None, target_id="y"):
    """Fit one convex quadratic to raw (states, values) data."""
    design = _Design(states, pattern, ridge)
    return _fit_on_design(design, y, target_id)


def _check_sample_guidance(dataset):
    need = (2 if dataset.phase_count == 1 else 6) * dataset.n
    if dataset.count < need:
        warnings.warn(
            f"only {dataset.count} samples for {dataset.n} buses; "
            f"guidance is at least {need}",
            stacklevel=3,
        )


def fit_base_learner(train, target, pattern, ridge=None):
    """Polynomial-regression base learner on one dataset target."""
    _check_sample_guidance(train)
    return fit_quadratic(train.x, train.column(target), pattern, ridge, target_id=target)


# ---------------------------------------------------------------------------
# ensembles

@dataclass(frozen=True, eq=False)
class BoostedModel:
    """Gradient-boosted stack: gamma + sum of beta_t * learner_t."""

    target_id: str
    gamma: float
    betas: tuple
    learners: tuple
    psd_mode: str  # "per-learner" or "final"
    meta: dict = field(default_factory=dict)

    @property
    def kind(self):
        return "gb"

    def predict(self, states):
        arr = np.asarray(states, dtype=float)
        single = arr.ndim == 1
        out = np.full(1 if single else len(arr), self.gamma)
        for beta, h in zip(self.betas, self.learners):
            if beta != 0.0:
                out = out + beta * np.atleast_1d(h.predict(states))
        return float(out[0]) if single else out

    def prefix(self, t):
        """The model truncated to its first t stages."""
        return BoostedModel(
            target_id=self.target_id,
            gamma=self.gamma,
            betas=self.betas[:t],
            learners=self.learners[:t],
            psd_mode=self.psd_mode,
            meta=dict(self.meta, T=t),
        )


@dataclass(frozen=True, eq=False)
class BaggedModel:
    """Uniform average over learners fit on bootstrap resamples."""

    target_id: str
    learners: tuple
    mprime: int
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def kind(self):
        return "bag"

    def predict(self, states):
        arr = np.asarray(states, dtype=float)
        single = arr.ndim == 1
        acc = np.zeros(1 if single else len(arr))
        for h in self.learners:
            acc = acc + np.atleast_1d(h.predict(states))
        acc /= len(self.learners)
        return float(acc[0]) if single else acc

    def prefix(self, bt):
        return BaggedModel(
            target_id=self.target_id,
            learners=self.learners[:bt],
            mprime=self.mprime,
            seed=self.seed,
            meta=dict(self.meta, BT=bt),
        )


_STALL_EPS = 1e-12
_MAX_STALLS = 5


def gb_fit(train, target, t_count, *, pattern, ridge=None, beta="search",
           psd="per-learner"):
    """Gradient boosting with the squared loss.

    The initial constant is the target mean; each stage fits the
    current residual and takes either the closed-form step clipped at
    zero (beta="search") or a supplied constant step. Five consecutive
    zero steps stop the loop early. psd="final" skips the per-learner
    projection; collapse() then projects the summed Hessian once.
    """
    if t_count < 1:
        raise ValueError("learner count must be at least 1")
    if psd not in ("per-learner", "final"):
        raise ValueError(f"unknown psd mode {psd!r}")
    _check_sample_guidance(train)
    y = np.asarray(train.column(target), dtype=float)
    if not len(y):
        raise ValueError("empty training set")
    design = _Design(train.x, pattern, ridge)

    gamma = float(np.mean(y))
    pred = np.full(len(y), gamma)
    betas = []
    learners = []
    stalls = 0
    total_stalls = 0
    for t in range(t_count):
        residual = y - pred
        try:
            if psd == "per-learner":
                h = _fit_on_design(design, residual, target, project=True)
                h_vals = h.predict(train.x)
            else:
                tid, vm, a, b, c = _fit_on_design(design, residual, target, project=False)
                h = _RawQuadratic(tid, vm, a, b, c)
                h_vals = h.predict(train.x)
        except ValueError as exc:
            raise ValueError(f"base learner failed at iteration {t}: {exc}") from exc
        if beta == "search":
            denom = float(h_vals @ h_vals)
            step = max(0.0, float(residual @ h_vals) / denom) if denom > 0 else 0.0
        else:
            step = float(beta)
            if step < 0:
                raise ValueError("constant step size must be nonnegative")
        if step < _STALL_EPS:
            step = 0.0
            stalls += 1
            total_stalls += 1
        else:
            stalls = 0
            pred = pred + step * h_vals
        betas.append(step)
        learners.append(h)
        if stalls >= _MAX_STALLS:
            break
    return BoostedModel(
        target_id=target,
        gamma=gamma,
        betas=tuple(betas),
        learners=tuple(learners),
        psd_mode=psd,
        meta={
            "T": t_count,
            "T_used": len(betas),
            "stalls": total_stalls,
            "lambda": design.lam,
            "train_fingerprint": train.fingerprint(),
        },
    )


@dataclass(frozen=True, eq=False)
class _RawQuadratic:
    """Unprojected quadratic used only inside psd="final" boosting."""

    target_id: str
    variable_map: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: float

    def predict(self, states):
        arr = np.asarray(states, dtype=float)
        single = arr.ndim == 1
        xs = np.atleast_2d(arr)[:, self.variable_map]
        vals = _quad_values(xs, self.a) + xs @ self.b + self.c
        return float(vals[0]) if single else vals


def default_ridge(states, pattern):
    """The automatic ridge weight for a (states, pattern) design."""
    return _Design(states, pattern, None).lam


def bagging_fit(train, target, bt_count, mprime=None, seed=0, *, pattern,
                ridge=None, resample=None):
    """Bagging: average of learners on with-replacement resamples.

    Resampling streams derive from (seed, crc32(target), bt), so models
    do not depend on scheduling or on other targets being fit. The
    resample hook replaces the index draw and exists for degenerate
    setups in tests (such as forcing the identity permutation). An
    automatic ridge weight is set once from the full training set so
    every member shares it.
    """
    if bt_count < 1:
        raise ValueError("bootstrap count must be at least 1")
    _check_sample_guidance(train)
    m = train.count
    if mprime is None:
        mprime = m
    if not 1 <= mprime <= m:
        raise ValueError(f"bootstrap size {mprime} outside 1..{m}")
    if ridge is None:
        ridge = default_ridge(train.x, pattern)
    y = np.asarray(train.column(target), dtype=float)
    tkey = zlib.crc32(str(target).encode())
    learners = []
    for bt in range(bt_count):
        rng = np.random.default_rng([seed, tkey, bt])
        if resample is None:
            rows = rng.integers(0, m, size=mprime)
        else:
            rows = np.asarray(resample(bt, rng, m, mprime), dtype=int)
        design = _Design(train.x[rows], pattern, ridge)
        learners.append(_fit_on_design(design, y[rows], target, project=True))
    return BaggedModel(
        target_id=target,
        learners=tuple(learners),
        mprime=int(mprime),
        seed=seed,
        meta={
            "BT": bt_count,
            "mprime": int(mprime),
            "seed": seed,
            "lambda": float(ridge),
            "train_fingerprint": train.fingerprint(),
        },
    )


def collapse(model):
    """Flatten any model to a single convex quadratic.

    Boosting sums beta-weighted members onto the constant; bagging
    averages members. For psd="final" boosted models the summed Hessian
    is projected here (their members are unprojected, so the collapsed
    prediction is the projected approximation, not the stage-wise sum).
    """
    if isinstance(model, ConvexQuadratic):
        return model
    if isinstance(model, BoostedModel):
        vm = model.learners[0].variable_map
        d = len(vm)
        a = np.zeros((d, d))
        b = np.zeros(d)
        c = model.gamma
        for beta, h in zip(model.betas, model.learners):
            if beta == 0.0:
                continue
            a += beta * h.a
            b += beta * h.b
            c += beta * h.c
        if model.psd_mode == "final":
            a = nearest_psd(a)
        return ConvexQuadratic(
            target_id=model.target_id, variable_map=vm, a=a, b=b, c=float(c)
        )
    if isinstance(model, BaggedModel):
        vm = model.learners[0].variable_map
        w = 1.0 / len(model.learners)
        a = sum(h.a for h in model.learners) * w
        b = sum(h.b for h in model.learners) * w
        c = sum(h.c for h in model.learners) * w
        return ConvexQuadratic(
            target_id=model.target_id, variable_map=vm, a=a, b=b, c=float(c)
        )
    raise TypeError(f"cannot collapse {type(model).__name__}")


# ---------------------------------------------------------------------------
# evaluation

def target_family(target):
    """'p', 'q', 'pij', 'qij', 'pji' or 'qji'."""
    t = acpf.parse_target(target)
    if t.family == "bus":
        return t.kind
    return f"{t.kind}{t.side}"


def rmse(model, dataset, family=None):
    """Root-mean-square prediction error in per unit.

    A single model is scored on its own target. A mapping of target id
    to model is scored as the mean per-target RMSE over the given
    family ('p', 'q', 'pij', 'qij', 'pji', 'qji').
    """
    if dataset.count == 0:
        raise ValueError("empty dataset")
    if hasattr(model, "predict"):
        y = dataset.column(model.target_id)
        err = model.predict(dataset.x) - y
        return float(np.sqrt(np.mean(err * err)))
    if family is None:
        raise ValueError("family is required when scoring a model collection")
    targets = [t for t in model if target_family(t) == family]
    if not targets:
        raise ValueError(f"no models for family {family!r}")
    return float(np.mean([rmse(model[t], dataset) for t in targets]))


def family_targets(dataset, family):
    """All target ids of one family present in a dataset."""
    phases = ("a", "b", "c")[: dataset.phase_count]
    if family in ("p", "q"):
        return [
            f"{family}:bus{b}:{ph}" for b in dataset.bus_ids for ph in phases
        ]
    if family in ("pij", "qij", "pji", "qji"):
        kind, side = family[0], family[1:]
        return [
            f"{kind}:br{k}:{side}:{ph}"
            for k in range(dataset.branch_count)
            for ph in phases
        ]
    raise ValueError(f"unknown family {family!r}")


def tune_sweep(train, test, family, sweep, *, adm, method="gb", ridge=None,
               seed=0, mprime=None, pattern_kind="auto", psd="per-learner"):
    """Train/test family RMSE at growing ensemble sizes.

    Fits each target of the family once at the largest sweep size and
    scores prefix truncations, so the curve grows incrementally
    (ensemble t+1 extends ensemble t). Returns rows of
    {size, train_rmse, test_rmse, train_log10_rmse, test_log10_rmse}.
    """
    sweep = [int(s) for s in sweep]
    if not sweep or min(sweep) < 1:
        raise ValueError("sweep sizes must be positive integers")
    full = max(sweep)
    models = {}
    for target in family_targets(train, family):
        pattern = feature_pattern(target, adm, pattern_kind)
        if method == "gb":
            models[target] = gb_fit(
                train, target, full, pattern=pattern, ridge=ridge, psd=psd
            )
        elif method == "bag":
            models[target] = bagging_fit(
                train, target, full, mprime, seed, pattern=pattern, ridge=ridge
            )
        else:
            raise ValueError(f"unknown method {method!r}")
    rows = []
    for size in sweep:
        cut = {t: m.prefix(size) for t, m in models.items()}
        tr = rmse(cut, train, family)
        te = rmse(cut, test, family)
        rows.append(
            {
                "size": size,
                "train_rmse": tr,
                "test_rmse": te,
                "train_log10_rmse": float(np.log10(tr)) if tr > 0 else float("-inf"),
                "test_log10_rmse": float(np.log10(te)) if te > 0 else float("-inf"),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# persistence

def _lower_triangle(a):
    d = a.shape[0]
    return [float(a[i, j]) for i in range(d) for j in range(i + 1)]


def _from_lower_triangle(values, d):
    a = np.zeros((d, d))
    it = iter(values)
    for i in range(d):
        for j in range(i + 1):
            v = float(next(it))
            a[i, j] = v
            a[j, i] = v
    return a


def write_model(model, path, extra_meta=None):
    """Persist a model as JSON (always in collapsed form)."""
    quad = collapse(model)
    meta = dict(getattr(model, "meta", {}) or {})
    if extra_meta:
        meta.update(extra_meta)
    kind = getattr(model, "kind", "pr")
    doc = {
        "kind": kind,
        "target_id": quad.target_id,
        "variable_map": [int(v) for v in quad.variable_map],
        "A": _lower_triangle(quad.a),
        "B": [float(v) for v in quad.b],
        "c": float(quad.c),
        "meta": meta,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def read_model(path):
    """Load a collapsed model; returns (kind, ConvexQuadratic, meta)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    vm = np.asarray(doc["variable_map"], dtype=int)
    quad = ConvexQuadratic(
        target_id=doc["target_id"],
        variable_map=vm,
        a=_from_lower_triangle(doc["A"], len(vm)),
        b=np.asarray(doc["B"], dtype=float),
        c=float(doc["c"]),
    )
    return doc["kind"], quad, doc.get("meta", {})
