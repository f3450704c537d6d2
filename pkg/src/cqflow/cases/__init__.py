"""Bundled network case files.

The .m files are MATPOWER-format transmission cases; the .json files use
the native case schema documented in docs/case-format.md.
"""

from importlib import resources

_BUILTIN = {
    "case5": "case5.m",
    "case9": "case9.m",
    "case57": "case57.m",
    "case118": "case118.m",
    "feeder4": "feeder4.json",
}


def builtin_case_names():
    """Names accepted by builtin_case_path, in a stable order."""
    return tuple(sorted(_BUILTIN))


def builtin_case_path(name):
    """Return a filesystem path to a bundled case file.

    Accepts either a bare case name ("case9") or a bundled file name
    ("case9.m"). Raises KeyError for unknown names.
    """
    fname = _BUILTIN.get(name)
    if fname is None:
        if name in _BUILTIN.values():
            fname = name
        else:
            raise KeyError(
                f"unknown builtin case {name!r}; available: {', '.join(sorted(_BUILTIN))}"
            )
    path = resources.files(__package__).joinpath(fname)
    return str(path)


def load_builtin(name):
    """Parse a bundled case by name, dispatching on the file extension."""
    from .. import netmodel

    path = builtin_case_path(name)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".json"):
        return netmodel.parse_json_case(text)
    return netmodel.parse_matpower_case(text)
