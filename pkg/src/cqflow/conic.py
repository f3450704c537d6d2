"""Second-order-cone programming with an embedded interior-point solver.

Problems are min c'x subject to A x = b and G x + s = h with s in a
product of nonnegative, second-order and rotated second-order cone
blocks. The solver runs a Mehrotra predictor-corrector on the
homogeneous self-dual embedding with Nesterov-Todd scaling, so primal
or dual infeasibility surfaces as a certificate instead of an
iteration failure. Everything is dense: the intended problems are
desk-scale optimal power flow instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_KINDS = ("nonneg", "soc", "rsoc")
_SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True, eq=False)
class ConeBlock:
    """One cone constraint block: h - G x in the cone named by kind."""

    kind: str
    g: np.ndarray
    h: np.ndarray
    tag: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown cone kind {self.kind!r}")
        if self.g.ndim != 2 or self.h.shape != (self.g.shape[0],):
            raise ValueError("cone block G/h dimensions disagree")
        if self.kind == "soc" and self.g.shape[0] < 2:
            raise ValueError("second-order cone blocks need size >= 2")
        if self.kind == "rsoc" and self.g.shape[0] < 3:
            raise ValueError("rotated cone blocks need size >= 3")
        if not self.tag:
            raise ValueError("every cone block needs a provenance tag")

    @property
    def size(self):
        return self.g.shape[0]


@dataclass(frozen=True, eq=False)
class ConicProblem:
    variable_names: tuple
    c: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    blocks: tuple
    objective_offset: float = 0.0

    def __post_init__(self):
        n = len(self.variable_names)
        if self.c.shape != (n,):
            raise ValueError("objective length disagrees with variables")
        if self.a_eq.ndim != 2 or self.a_eq.shape[1] != n:
            raise ValueError("equality matrix width disagrees with variables")
        if self.b_eq.shape != (self.a_eq.shape[0],):
            raise ValueError("equality rhs length disagrees with matrix")
        if not self.blocks:
            raise ValueError("a conic problem needs at least one cone block")
        for blk in self.blocks:
            if blk.g.shape[1] != n:
                raise ValueError(f"block {blk.tag!r} width disagrees with variables")

    @property
    def nvar(self):
        return len(self.variable_names)


@dataclass(frozen=True, eq=False)
class ConicSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    objective: float
    status: str
    residuals: dict
    iterations: int


def quad_to_soc(quad, bound_coef, bound_const, *, nvar, x_index=None, tag):
    """Cone block for x'Ax + Bx + c <= bound_coef . v + bound_const.

    A is factored as F F' by eigendecomposition (eigenvalues below
    1e-12 truncated) and the inequality becomes the rotated cone
    ||F'x||^2 <= 2 u v with u the slack of the bound minus the affine
    part and v = 1/2. Rank-zero A degenerates to a plain linear row.
    """
    a = quad.a
    d = a.shape[0]
    x_index = np.asarray(
        quad.variable_map if x_index is None else x_index, dtype=int
    )
    if x_index.shape != (d,):
        raise ValueError("variable index map does not match the quadratic")
    bound_coef = np.asarray(bound_coef, dtype=float)
    if bound_coef.shape != (nvar,):
        raise ValueError("bound coefficient length disagrees with nvar")

    lin = bound_coef.copy()
    np.subtract.at(lin, x_index, quad.b)
    const = float(bound_const) - quad.c

    if d:
        w, v = np.linalg.eigh(a)
        if w[0] < -1e-9:
            raise ValueError("quadratic is not positive semidefinite")
        keep = w > 1e-12
        f = v[:, keep] * np.sqrt(w[keep])
    else:
        f = np.zeros((0, 0))
    rank = f.shape[1]
    if rank == 0:
        g = np.zeros((1, nvar))
        g[0] = -lin
        return ConeBlock(kind="nonneg", g=g, h=np.array([const]), tag=tag)
    g = np.zeros((2 + rank, nvar))
    h = np.zeros(2 + rank)
    g[0] = -lin
    h[0] = const
    h[1] = 0.5
    g[2:, x_index] = -f.T
    return ConeBlock(kind="rsoc", g=g, h=h, tag=tag)


# ---------------------------------------------------------------------------
# internal cone layout

def _rsoc_rotation(k):
    t = np.eye(k)
    t[0, 0] = t[0, 1] = t[1, 0] = 1.0 / _SQRT2
    t[1, 1] = -1.0 / _SQRT2
    return t


class _Cone:
    """Stacked internal layout: nonneg rows first, then SOC blocks.

    Rotated blocks enter as plain second-order blocks through the
    symmetric orthogonal rotation ((u+v)/sqrt2, (u-v)/sqrt2, w).
    """

    def __init__(self, problem):
        gs_lin, hs_lin = [], []
        gs_soc, hs_soc = [], []
        dims = []
        placement = []  # (kind, "lin"/"soc", offset) per original block
        lin_off = 0
        soc_off = 0
        for blk in problem.blocks:
            if blk.kind == "nonneg":
                gs_lin.append(blk.g)
                hs_lin.append(blk.h)
                placement.append(("nonneg", lin_off, blk.size))
                lin_off += blk.size
            else:
                if blk.kind == "rsoc":
                    t = _rsoc_rotation(blk.size)
                    gs_soc.append(t @ blk.g)
                    hs_soc.append(t @ blk.h)
                else:
                    gs_soc.append(blk.g)
                    hs_soc.append(blk.h)
                placement.append((blk.kind, soc_off, blk.size))
                dims.append(blk.size)
                soc_off += blk.size
        self.l = lin_off
        self.dims = dims
        self.placement = placement
        n = problem.nvar
        parts_g = gs_lin + gs_soc
        parts_h = hs_lin + hs_soc
        self.g = np.vstack(parts_g) if parts_g else np.zeros((0, n))
        self.h = np.concatenate(parts_h) if parts_h else np.zeros(0)
        self.m = self.g.shape[0]
        self.degree = self.l + len(dims)
        self._starts = []
        off = self.l
        for k in dims:
            self._starts.append(off)
            off += k

    def blocks_of(self, v):
        for start, k in zip(self._starts, self.dims):
            yield v[start:start + k]

    def identity(self):
        e = np.zeros(self.m)
        e[: self.l] = 1.0
        for b in self.blocks_of(e):
            b[0] = 1.0
        return e

    def inside(self, v, margin=0.0):
        if self.l and v[: self.l].min() <= margin:
            return False
        for b in self.blocks_of(v):
            if b[0] - np.linalg.norm(b[1:]) <= margin:
                return False
        return True

    def shift_interior(self, v):
        out = v.copy()
        if self.l:
            m = out[: self.l].min()
            if m <= 0:
                out[: self.l] += 1.0 - m
        for b in self.blocks_of(out):
            margin = b[0] - np.linalg.norm(b[1:])
            if margin <= 0:
                b[0] += 1.0 - margin
        return out

    def product(self, u, v):
        out = np.empty(self.m)
        out[: self.l] = u[: self.l] * v[: self.l]
        for start, k in zip(self._starts, self.dims):
            ub, vb = u[start:start + k], v[start:start + k]
            out[start] = ub @ vb
            out[start + 1:start + k] = ub[0] * vb[1:] + vb[0] * ub[1:]
        return out

    def arrow_solve(self, lam, r):
        """u with lam o u = r (Jordan product inverse application)."""
        out = np.empty(self.m)
        out[: self.l] = r[: self.l] / lam[: self.l]
        for start, k in zip(self._starts, self.dims):
            lb, rb = lam[start:start + k], r[start:start + k]
            det = lb[0] ** 2 - lb[1:] @ lb[1:]
            u0 = (lb[0] * rb[0] - lb[1:] @ rb[1:]) / det
            out[start] = u0
            out[start + 1:start + k] = (rb[1:] - u0 * lb[1:]) / lb[0]
        return out

    def step_to_boundary(self, v, dv):
        """Largest alpha with v + alpha dv still in the cone."""
        alpha = np.inf
        if self.l:
            neg = dv[: self.l] < 0
            if neg.any():
                alpha = min(alpha, float(np.min(-v[: self.l][neg] / dv[: self.l][neg])))
        for start, k in zip(self._starts, self.dims):
            vb, db = v[start:start + k], dv[start:start + k]
            a = db[0] ** 2 - db[1:] @ db[1:]
            b = 2.0 * (vb[0] * db[0] - vb[1:] @ db[1:])
            c = max(vb[0] ** 2 - vb[1:] @ vb[1:], 0.0)
            roots = []
            if abs(a) > 1e-300:
                disc = b * b - 4.0 * a * c
                if disc >= 0:
                    sq = np.sqrt(disc)
                    roots = [(-b - sq) / (2 * a), (-b + sq) / (2 * a)]
            elif b < 0:
                roots = [-c / b]
            if db[0] < 0:
                roots.append(-vb[0] / db[0])
            pos = [r for r in roots if r >= 0.0]
            if pos:
                alpha = min(alpha, min(pos))
        return alpha


class _Scaling:
    """Nesterov-Todd scaling point for the current (s, z) pair.

    For each second-order block, wbar is the unit-hyperbolic-norm
    scaling point and W = eta * Wbar with
    Wbar = [[w0, w1'], [w1, I + w1 w1' / (1 + w0)]], whose square is
    2 wbar wbar' - J. This gives W z = W^-1 s = lambda exactly.
    """

    def __init__(self, cone, s, z):
        self.cone = cone
        l = cone.l
        if np.any(s[:l] <= 0.0) or np.any(z[:l] <= 0.0):
            raise ArithmeticError("scaling point undefined: iterate left the cone interior")
        self.w_lin = np.sqrt(s[:l] / z[:l])
        self.eta = []
        self.wbar = []
        for start, k in zip(cone._starts, cone.dims):
            sb = s[start:start + k]
            zb = z[start:start + k]
            det_s = sb[0] ** 2 - sb[1:] @ sb[1:]
            det_z = zb[0] ** 2 - zb[1:] @ zb[1:]
            if det_s <= 0.0 or det_z <= 0.0 or sb[0] <= 0.0 or zb[0] <= 0.0:
                raise ArithmeticError("scaling point undefined: iterate left the cone interior")
            ds = np.sqrt(det_s)
            dz = np.sqrt(det_z)
            sn, zn = sb / ds, zb / dz
            gamma = np.sqrt((1.0 + sn @ zn) / 2.0)
            wb = (sn + _j(zn)) / (2.0 * gamma)
            self.eta.append(np.sqrt(ds / dz))
            self.wbar.append(wb)

    @staticmethod
    def _wbar_apply(wb, v, invert):
        v0, v1 = v[0], v[1:]
        dot = wb[1:] @ v1
        sign = -1.0 if invert else 1.0
        head = wb[0] * v0 + sign * dot
        tail = sign * v0 * wb[1:] + v1 + (dot / (1.0 + wb[0])) * wb[1:]
        out = np.empty_like(v)
        out[0] = head
        out[1:] = tail
        return out

    def _soc_apply(self, v, invert):
        out = v.copy()
        for (start, k), eta, wb in zip(
            zip(self.cone._starts, self.cone.dims), self.eta, self.wbar
        ):
            b = self._wbar_apply(wb, v[start:start + k], invert)
            out[start:start + k] = b / eta if invert else b * eta
        return out

    def w_apply(self, v):
        out = self._soc_apply(v, invert=False)
        out[: self.cone.l] = self.w_lin * v[: self.cone.l]
        return out

    def w_inv_apply(self, v):
        out = self._soc_apply(v, invert=True)
        out[: self.cone.l] = v[: self.cone.l] / self.w_lin
        return out

    def w_inv_matrix(self, g):
        """W^-1 G, applied blockwise to a dense matrix."""
        out = g.copy()
        l = self.cone.l
        out[:l] = g[:l] / self.w_lin[:, None]
        for (start, k), eta, wb in zip(
            zip(self.cone._starts, self.cone.dims), self.eta, self.wbar
        ):
            blk = g[start:start + k]
            dot = wb[1:] @ blk[1:]
            out[start] = (wb[0] * blk[0] - dot) / eta
            out[start + 1:start + k] = (
                -np.outer(wb[1:], blk[0])
                + blk[1:]
                + np.outer(wb[1:], dot) / (1.0 + wb[0])
            ) / eta
        return out

    def lam(self, z):
        return self.w_apply(z)


def _j(v):
    out = -v
    out[0] = v[0]
    return out


# ---------------------------------------------------------------------------
# the solver

def _kkt_factor(h_mat, a_eq):
    p = a_eq.shape[0]
    n = h_mat.shape[0]
    k = np.zeros((n + p, n + p))
    k[:n, :n] = h_mat
    if p:
        k[:n, n:] = a_eq.T
        k[n:, :n] = a_eq
    return k


def _solve_kkt(kmat, n, p, bx, by, bz, gt_wi2, wig):
    rhs = np.concatenate([bx + gt_wi2 @ bz, by])
    try:
        sol = np.linalg.solve(kmat, rhs)
    except np.linalg.LinAlgError:
        reg = np.zeros(n + p)
        reg[:n] = 1e-10
        reg[n:] = -1e-10
        sol = np.linalg.solve(kmat + np.diag(reg), rhs)
    if not np.all(np.isfinite(sol)):
        reg = np.zeros(n + p)
        reg[:n] = 1e-10
        reg[n:] = -1e-10
        sol = np.linalg.solve(kmat + np.diag(reg), rhs)
    ux = sol[:n]
    uy = sol[n:]
    uz = wig @ ux - bz  # still W^-1-scaled; caller maps back
    return ux, uy, uz


def solve_ipm(problem, tol=1e-8, max_iter=200, trace=None):
    """Interior-point solve on the homogeneous self-dual embedding.

    Returns status "optimal", "infeasible" (primal), "unbounded"
    (dual infeasible) or "max-iter". Deterministic: no randomized
    pivoting or restarts. trace, if given, collects per-iteration
    (pcost, dcost, pres, dres, relgap) tuples.
    """
    cone = _Cone(problem)
    c = np.asarray(problem.c, dtype=float)
    a = np.asarray(problem.a_eq, dtype=float)
    b = np.asarray(problem.b_eq, dtype=float)
    g, h = cone.g, cone.h
    n, p, m = problem.nvar, a.shape[0], cone.m

    norm_b = max(1.0, np.linalg.norm(b))
    norm_h = max(1.0, np.linalg.norm(h))
    norm_c = max(1.0, np.linalg.norm(c))

    def kkt_with(scaling):
        if scaling is None:
            wig = g.copy()
        else:
            wig = scaling.w_inv_matrix(g)
        h_mat = wig.T @ wig
        kmat = _kkt_factor(h_mat, a)
        gt_wi2 = wig.T  # used as G' W^-1 (second W^-1 applied to bz first)
        return kmat, wig, gt_wi2

    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")

    # initial point: two identity-scaled solves shifted into the cone
    kmat0, _, _ = kkt_with(None)

    def solve0(bx, by, bz):
        return _solve_kkt(kmat0, n, p, bx, by, bz, g.T, g)

    x, _, zt = solve0(np.zeros(n), b, h)
    s = cone.shift_interior(-zt)
    _, y, zd = solve0(-c, np.zeros(p), np.zeros(m))
    z = cone.shift_interior(zd)
    tau, kappa = 1.0, 1.0

    status = "max-iter"
    iters = 0
    residuals = {}
    best = None
    for it in range(max_iter):
        iters = it
        r1 = a.T @ y + g.T @ z + c * tau
        r2 = -(a @ x) + b * tau
        r3 = -(g @ x) + h * tau - s
        r4 = -(c @ x) - (b @ y) - (h @ z) - kappa
        mu = (s @ z + tau * kappa) / (cone.degree + 1)

        pcost = (c @ x) / tau
        dcost = -((b @ y) + (h @ z)) / tau
        gap = (s @ z) / tau**2
        relgap = gap / max(1.0, abs(pcost))
        pres = max(np.linalg.norm(r2) / norm_b, np.linalg.norm(r3) / norm_h) / tau
        dres = np.linalg.norm(r1) / (norm_c * tau)
        if trace is not None:
            trace.append((pcost, dcost, pres, dres, relgap))
        residuals = {"primal": float(pres), "dual": float(dres), "gap": float(relgap)}

        score = max(pres, dres, relgap)
        if not np.isfinite(score):
            break
        if best is None or score < best[0]:
            best = (score, (x.copy(), y.copy(), z.copy(), s.copy(),
                            tau, kappa, dict(residuals)))

        if pres <= tol and dres <= tol and relgap <= tol:
            status = "optimal"
            break
        by_hz = (b @ y) + (h @ z)
        if by_hz < 0:
            cert = np.linalg.norm(a.T @ y + g.T @ z) / (-by_hz) / norm_c
            if cert <= tol:
                status = "infeasible"
                y = y / -by_hz
                z = z / -by_hz
                break
        cx = c @ x
        if cx < 0:
            cert = (
                max(np.linalg.norm(a @ x), np.linalg.norm(g @ x + s))
                / (-cx)
                / max(norm_b, norm_h)
            )
            if cert <= tol:
                status = "unbounded"
                x = x / -cx
                s = s / -cx
                break

        try:
            scaling = _Scaling(cone, s, z)
        except ArithmeticError:
            break
        lam = scaling.lam(z)
        kmat, wig, gt_wi = kkt_with(scaling)

        def ksolve(bx, by, bz):
            # W^-2 folded in: pass W^-1 bz through the cached W^-1 G
            bz_s = scaling.w_inv_apply(bz)
            ux, uy, uz_s = _solve_kkt(kmat, n, p, bx, by, bz_s, gt_wi, wig)
            return ux, uy, scaling.w_inv_apply(uz_s)

        x1, y1, z1 = ksolve(-c, b, h)
        xi = (c @ x1) + (b @ y1) + (h @ z1)

        lam_lam = cone.product(lam, lam)

        def direction(sigma, corr, corr_tk):
            v_target = cone.arrow_solve(
                lam, -lam_lam + sigma * mu * cone.identity() - corr
            )
            wv = scaling.w_apply(v_target)
            f = 1.0 - sigma
            x2, y2, z2 = ksolve(-f * r1, f * r2, f * r3 - wv)
            rho = (c @ x2) + (b @ y2) + (h @ z2)
            d_tau = -tau * kappa + sigma * mu - corr_tk
            denom = kappa - tau * xi
            dtau = (-tau * f * r4 + tau * rho + d_tau) / denom
            dx = x2 + dtau * x1
            dy = y2 + dtau * y1
            dz = z2 + dtau * z1
            # recover ds from the primal cone row rather than the scaled
            # complementarity elimination: algebraically identical, but
            # avoids the W^2 error amplification that otherwise corrupts
            # the primal residual once mu is tiny
            ds = -(g @ dx) + h * dtau + f * r3
            dkappa = (d_tau - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkappa

        def boundary(dz, ds, dtau, dkappa):
            alpha = min(cone.step_to_boundary(s, ds), cone.step_to_boundary(z, dz))
            if dtau < 0:
                alpha = min(alpha, -tau / dtau)
            if dkappa < 0:
                alpha = min(alpha, -kappa / dkappa)
            return alpha

        dxa, dya, dza, dsa, dta, dka = direction(0.0, np.zeros(m), 0.0)
        alpha_aff = min(1.0, boundary(dza, dsa, dta, dka))
        sigma = float(np.clip((1.0 - alpha_aff) ** 3, 0.0, 1.0))

        corr = cone.product(scaling.w_inv_apply(dsa), scaling.w_apply(dza))
        dx, dy, dz, ds, dtau, dkappa = direction(sigma, corr, dta * dka)
        alpha = min(1.0, 0.99 * boundary(dz, ds, dtau, dkappa))

        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkappa
        iters = it + 1

    if status == "max-iter" and best is not None:
        x, y, z, s, tau, kappa, residuals = best[1]

    if status == "infeasible":
        x_out = np.full(n, np.nan)
        s_out, z_out = _split_back(cone, s, z)
        obj = float("nan")
    elif status == "unbounded":
        x_out = x
        s_out, z_out = _split_back(cone, s, z)
        obj = float("nan")
    else:
        x_out = x / tau
        s_out, z_out = _split_back(cone, s / tau, z / tau)
        obj = float(c @ x_out + problem.objective_offset)
    return ConicSolution(
        x=x_out,
        y=y if status in ("infeasible",) else y / tau,
        z=z_out,
        s=s_out,
        objective=obj,
        status=status,
        residuals=residuals,
        iterations=iters,
    )


def _split_back(cone, s, z):
    """Map internal (rotated) slacks/duals back to original block order."""
    s_out = np.empty(cone.m)
    z_out = np.empty(cone.m)
    lin_seen = 0
    pos = 0
    for kind, off, size in cone.placement:
        if kind == "nonneg":
            src = slice(off, off + size)
            s_out[pos:pos + size] = s[src]
            z_out[pos:pos + size] = z[src]
            lin_seen += size
        else:
            src = slice(cone.l + off, cone.l + off + size)
            sb, zb = s[src], z[src]
            if kind == "rsoc":
                t = _rsoc_rotation(size)
                sb, zb = t @ sb, t @ zb
            s_out[pos:pos + size] = sb
            z_out[pos:pos + size] = zb
        pos += size
    return s_out, z_out


def problem_stack(problem):
    """Original-order stacked (G, h) across all blocks."""
    g = np.vstack([blk.g for blk in problem.blocks])
    h = np.concatenate([blk.h for blk in problem.blocks])
    return g, h


def kkt_residuals(problem, solution):
    """(primal, dual, gap) residuals recomputed from first principles."""
    g, h = problem_stack(problem)
    x, y, z, s = solution.x, solution.y, solution.z, solution.s
    if len(s) != len(h) or len(x) != problem.nvar:
        raise ValueError("solution dimensions do not match the problem")
    c = problem.c
    pres_parts = [np.linalg.norm(g @ x + s - h) / max(1.0, np.linalg.norm(h))]
    if len(problem.b_eq):
        pres_parts.append(
            np.linalg.norm(problem.a_eq @ x - problem.b_eq)
            / max(1.0, np.linalg.norm(problem.b_eq))
        )
    pres = max(pres_parts)
    dres = np.linalg.norm(problem.a_eq.T @ y + g.T @ z + c) / max(
        1.0, np.linalg.norm(c)
    )
    pcost = float(c @ x)
    gap = float(s @ z) / max(1.0, abs(pcost))
    return float(pres), float(dres), float(gap)


# ---------------------------------------------------------------------------
# plain-text export for external cross-checks

def write_conic(problem, path):
    """conic-export v1: bit-exact text form of a problem."""
    def fmt(values):
        return " ".join(f"{float(v):.17g}" for v in values)

    lines = ["conic-export v1", f"vars {problem.nvar}"]
    for i, name in enumerate(problem.variable_names):
        lines.append(f"var {i} {name}")
    lines.append(f"obj {fmt(problem.c)}")
    lines.append(f"offset {problem.objective_offset:.17g}")
    lines.append(f"eq {problem.a_eq.shape[0]}")
    for row, rhs in zip(problem.a_eq, problem.b_eq):
        lines.append(f"eqrow {fmt(row)} | {float(rhs):.17g}")
    lines.append(f"cones {len(problem.blocks)}")
    for blk in problem.blocks:
        lines.append(f"block {blk.kind} {blk.size} {blk.tag}")
        for row, rhs in zip(blk.g, blk.h):
            lines.append(f"gram {fmt(row)} | {float(rhs):.17g}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_conic(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != "conic-export v1":
        raise ValueError("not a conic-export v1 file")
    pos = 1

    def take(prefix):
        nonlocal pos
        if pos >= len(lines) or not lines[pos].startswith(prefix):
            raise ValueError(f"expected {prefix!r} at line {pos + 1}")
        out = lines[pos][len(prefix):].strip()
        pos += 1
        return out

    def row_and_rhs(text):
        left, right = text.rsplit("|", 1)
        return (
            np.array([float(v) for v in left.split()]),
            float(right),
        )

    nvar = int(take("vars "))
    names = []
    for _ in range(nvar):
        idx, name = take("var ").split(maxsplit=1)
        if int(idx) != len(names):
            raise ValueError("variable indices out of order")
        names.append(name)
    c = np.array([float(v) for v in take("obj ").split()])
    offset = float(take("offset "))
    neq = int(take("eq "))
    a_rows, b_vals = [], []
    for _ in range(neq):
        row, rhs = row_and_rhs(take("eqrow "))
        a_rows.append(row)
        b_vals.append(rhs)
    nblocks = int(take("cones "))
    blocks = []
    for _ in range(nblocks):
        head = take("block ").split(maxsplit=2)
        kind, size = head[0], int(head[1])
        tag = head[2] if len(head) > 2 else ""
        g_rows, h_vals = [], []
        for _ in range(size):
            row, rhs = row_and_rhs(take("gram "))
            g_rows.append(row)
            h_vals.append(rhs)
        blocks.append(
            ConeBlock(kind=kind, g=np.array(g_rows), h=np.array(h_vals), tag=tag)
        )
    return ConicProblem(
        variable_names=tuple(names),
        c=c,
        a_eq=np.array(a_rows) if a_rows else np.zeros((0, nvar)),
        b_eq=np.array(b_vals),
        blocks=tuple(blocks),
        objective_offset=offset,
    )
