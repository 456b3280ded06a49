import functools
import os

import pytest

from tagged_mftg.lq import solve_lq
from tagged_mftg.lsmc import solve_equilibrium
from tagged_mftg.scenarios import builtin

os.environ.setdefault("TAGGED_MFTG_WORKERS", "1")


@functools.lru_cache(maxsize=None)
def _solved(name: str, solver: str, overrides: tuple):
    spec = builtin(name)
    if overrides:
        spec = spec.with_overrides(dict(overrides))
    fn = solve_lq if solver == "lq" else solve_equilibrium
    return fn(spec)


def solved(name: str, solver: str = "lsmc", **overrides):
    """Session-cached solve of a built-in scenario; keyword keys use '__' for '.'."""
    items = tuple(sorted((k.replace("__", "."), v) for k, v in overrides.items()))
    return _solved(name, solver, items)


@pytest.fixture(scope="session")
def solve_cached():
    return solved
