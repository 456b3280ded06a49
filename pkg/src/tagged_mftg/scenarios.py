"""Scenario definitions, the built-in experiments and the scenario file format.

A scenario file is UTF-8 text with one ``key.path = value`` entry per line.
Values are JSON literals (numbers, strings in double quotes, lists). Blank
lines and lines starting with ``#`` are ignored. The serializer writes every
field in sorted key order, so its output is canonical and diffable.

    kind = "keep_together"
    horizon = 1.0
    tagged.cont = 50.0
    tagged.yT.mean = [2.0, 2.0]
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Optional

from .lq import VELOCITY_KINDS, DesiredVelocityLaw
from .lsmc import PicardConfig

KINDS = ("keep_together", "desired_velocity", "bidirectional")
BUILTINS = ("kt_set1", "kt_set2", "dv_set1", "dv_set2", "dv_set3", "dv_set4", "bidir", "twist")
HEADER = "# tagged-mftg scenario"


class ScenarioError(ValueError):
    """Validation failure, anchored to a key path and, when known, a line."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"'{key}'")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")
        self.key = key
        self.line = line


@dataclass(frozen=True)
class TaggedBlock:
    cont: float
    yT_mean: tuple[float, ...]
    noise: float = 0.0
    des: float = 0.0
    attr: float = 0.0
    rep: float = 0.0
    rep_crowd: float = 0.0
    init: float = 0.0
    q: tuple[float, ...] = ()
    y0_mean: tuple[float, ...] = ()
    y0_std: float = 0.0
    yT_std: float = 0.0
    v_des: DesiredVelocityLaw = field(default_factory=DesiredVelocityLaw)


@dataclass(frozen=True)
class OrdinaryBlock:
    sigma: float
    cont: float
    term: float
    x0_mean: tuple[float, ...]
    xT: tuple[float, ...]
    rep: float = 0.0
    x0_std: float = 0.0


@dataclass(frozen=True)
class SolverBlock:
    steps: int = 100
    paths: int = 10_000
    seed: int = 0
    degree: int = 1
    picard: PicardConfig = field(default_factory=PicardConfig)


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    horizon: float
    tagged: TaggedBlock
    dim: int = 2
    name: str = ""
    ordinary: Optional[OrdinaryBlock] = None
    solver: SolverBlock = field(default_factory=SolverBlock)

    def with_overrides(self, overrides: dict[str, Any]) -> "ScenarioSpec":
        flat = to_flat(self)
        for key, value in overrides.items():
            flat[key] = value
        return from_flat(flat)


# ---------------------------------------------------------------------------
# flat schema

REQUIRED = object()

# key -> (type tag, default)
SCHEMA: dict[str, tuple[str, Any]] = {
    "name": ("str", ""),
    "kind": ("str", REQUIRED),
    "dim": ("int", 2),
    "horizon": ("float", REQUIRED),
    "tagged.noise": ("float", 0.0),
    "tagged.cont": ("float", REQUIRED),
    "tagged.des": ("float", 0.0),
    "tagged.attr": ("float", 0.0),
    "tagged.rep": ("float", 0.0),
    "tagged.rep_crowd": ("float", 0.0),
    "tagged.init": ("float", 0.0),
    "tagged.q": ("vec", None),
    "tagged.y0.mean": ("vec", None),
    "tagged.y0.std": ("float", 0.0),
    "tagged.yT.mean": ("vec", REQUIRED),
    "tagged.yT.std": ("float", 0.0),
    "tagged.v_des.kind": ("str", "none"),
    "tagged.v_des.magnitude": ("vec", REQUIRED),
    "tagged.v_des.direction": ("vec", REQUIRED),
    "tagged.v_des.times": ("list", REQUIRED),
    "tagged.v_des.values": ("table", REQUIRED),
    "ordinary.sigma": ("float", REQUIRED),
    "ordinary.cont": ("float", REQUIRED),
    "ordinary.rep": ("float", 0.0),
    "ordinary.term": ("float", REQUIRED),
    "ordinary.x0.mean": ("vec", REQUIRED),
    "ordinary.x0.std": ("float", 0.0),
    "ordinary.xT": ("vec", REQUIRED),
    "solver.steps": ("int", 100),
    "solver.paths": ("int", 10_000),
    "solver.seed": ("int", 0),
    "solver.degree": ("int", 1),
    "solver.max_iters": ("int", PicardConfig.max_iters),
    "solver.damping": ("float", PicardConfig.damping),
    "solver.tol": ("float", PicardConfig.tol),
    "solver.ridge": ("float", PicardConfig.ridge),
    "solver.exploration": ("float", PicardConfig.exploration),
    "solver.inner": ("int", PicardConfig.inner),
}

VELOCITY_KEYS = {
    "none": (),
    "piecewise_sign": ("tagged.v_des.magnitude",),
    "arctan_profile": ("tagged.v_des.direction",),
    "table": ("tagged.v_des.times", "tagged.v_des.values"),
}


def _coerce(key: str, value: Any, tag: str, line: Optional[int]) -> Any:
    def bad(expected: str) -> ScenarioError:
        return ScenarioError(f"expected {expected}, got {json.dumps(value)}", key, line)

    def num(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise bad("a number")
        return float(v)

    if tag == "str":
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise bad("an integer")
        return int(value)
    if tag == "float":
        return num(value)
    if tag in ("vec", "list"):
        if not isinstance(value, list):
            raise bad("a list of numbers")
        return tuple(num(v) for v in value)
    if tag == "table":
        if not isinstance(value, list) or not all(isinstance(r, list) for r in value):
            raise bad("a list of rows")
        return tuple(tuple(num(v) for v in r) for r in value)
    raise AssertionError(tag)


def _parse_lines(text: str) -> tuple[dict[str, Any], dict[str, int]]:
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ScenarioError("expected 'key = value'", None, no)
        key, _, rhs = s.partition("=")
        key = key.strip()
        if key in values:
            raise ScenarioError(f"duplicate key (first on line {lines[key]})", key, no)
        try:
            values[key] = json.loads(rhs.strip())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"cannot read value: {exc.msg}", key, no) from None
        lines[key] = no
    return values, lines


def from_flat(raw: dict[str, Any], lines: Optional[dict[str, int]] = None) -> ScenarioSpec:
    """Build and validate a scenario from a flat key-path mapping."""
    lines = lines or {}
    for key in raw:
        if key not in SCHEMA:
            raise ScenarioError("unknown key", key, lines.get(key))
    v = {k: _coerce(k, val, SCHEMA[k][0], lines.get(k)) for k, val in raw.items()}

    kind = v.get("kind")
    vkind = v.get("tagged.v_des.kind", "none")
    needed = set(k for k, (_, dflt) in SCHEMA.items() if dflt is REQUIRED)
    needed -= {"tagged.v_des.magnitude", "tagged.v_des.direction", "tagged.v_des.times", "tagged.v_des.values"}
    ordinary_keys = {k for k in SCHEMA if k.startswith("ordinary.")}
    if kind == "bidirectional":
        pass
    else:
        needed -= ordinary_keys
        for key in ordinary_keys & set(v):
            raise ScenarioError("ordinary crowd keys require kind \"bidirectional\"", key, lines.get(key))
    if vkind not in VELOCITY_KINDS:
        raise ScenarioError(f"unknown desired-velocity kind; choose from {list(VELOCITY_KINDS)}",
                            "tagged.v_des.kind", lines.get("tagged.v_des.kind"))
    needed |= set(VELOCITY_KEYS[vkind])
    for key in [k for k in v if k.startswith("tagged.v_des.") and k != "tagged.v_des.kind"]:
        if key not in VELOCITY_KEYS[vkind]:
            raise ScenarioError(f"not used by desired-velocity kind {vkind!r}", key, lines.get(key))
    for key in sorted(needed):
        if key not in v:
            raise ScenarioError(f"missing required field '{key}'", key)

    def get(key):
        return v.get(key, SCHEMA[key][1])

    def check(cond: bool, key: str, message: str) -> None:
        if not cond:
            raise ScenarioError(message, key, lines.get(key))

    check(kind in KINDS, "kind", f"kind must be one of {list(KINDS)}")
    dim = get("dim")
    check(dim >= 1, "dim", "dimension must be >= 1")
    T = get("horizon")
    check(T > 0, "horizon", "horizon must be positive")

    def vec(key, default_zero=True):
        val = v.get(key)
        if val is None:
            return (0.0,) * dim
        check(len(val) == dim, key, f"expected {dim} components, got {len(val)}")
        return val

    for key in ("tagged.cont", "tagged.des"):
        check(get(key) >= 0, key, "sign violation: control weights must be >= 0")
    check(get("tagged.cont") + get("tagged.des") > 0, "tagged.cont",
          "sign violation: cont + des must be positive for a concave Hamiltonian")
    for key in ("tagged.init", "tagged.y0.std", "tagged.yT.std", "tagged.attr"):
        check(get(key) >= 0, key, "sign violation: must be >= 0")

    vel = DesiredVelocityLaw(kind=vkind, dim=dim, horizon=T)
    if vkind == "piecewise_sign":
        vel = replace(vel, magnitude=vec("tagged.v_des.magnitude"))
    elif vkind == "arctan_profile":
        vel = replace(vel, direction=vec("tagged.v_des.direction"))
    elif vkind == "table":
        times, vals = get("tagged.v_des.times"), get("tagged.v_des.values")
        check(len(times) >= 1 and len(times) == len(vals), "tagged.v_des.values", "need one row per time")
        check(all(b > a for a, b in zip(times, times[1:])), "tagged.v_des.times", "times must increase")
        check(all(len(r) == dim for r in vals), "tagged.v_des.values", f"rows must have {dim} components")
        vel = replace(vel, times=times, values=vals)

    tagged = TaggedBlock(
        cont=get("tagged.cont"), yT_mean=vec("tagged.yT.mean"), noise=get("tagged.noise"),
        des=get("tagged.des"), attr=get("tagged.attr"), rep=get("tagged.rep"),
        rep_crowd=get("tagged.rep_crowd"), init=get("tagged.init"), q=vec("tagged.q"),
        y0_mean=vec("tagged.y0.mean"), y0_std=get("tagged.y0.std"), yT_std=get("tagged.yT.std"), v_des=vel,
    )
    check(kind == "bidirectional" or tagged.rep_crowd == 0, "tagged.rep_crowd",
          "repulsion from the ordinary crowd requires kind \"bidirectional\"")
    ordinary = None
    if kind == "bidirectional":
        check(get("ordinary.cont") > 0, "ordinary.cont", "sign violation: ordinary control weight must be positive")
        for key in ("ordinary.sigma", "ordinary.term", "ordinary.x0.std"):
            check(get(key) >= 0, key, "sign violation: must be >= 0")
        ordinary = OrdinaryBlock(
            sigma=get("ordinary.sigma"), cont=get("ordinary.cont"), term=get("ordinary.term"),
            x0_mean=vec("ordinary.x0.mean"), xT=vec("ordinary.xT"), rep=get("ordinary.rep"),
            x0_std=get("ordinary.x0.std"),
        )

    for key in ("solver.steps", "solver.paths", "solver.max_iters", "solver.inner"):
        check(get(key) >= 1, key, "must be >= 1")
    check(get("solver.degree") >= 0, "solver.degree", "must be >= 0")
    check(0 <= get("solver.seed") < 2**64, "solver.seed", "seed must lie in [0, 2**64)")
    check(0 < get("solver.damping") <= 1, "solver.damping", "damping must lie in (0, 1]")
    check(get("solver.tol") > 0, "solver.tol", "tol must be positive")
    check(get("solver.ridge") >= 0, "solver.ridge", "ridge must be >= 0")
    check(get("solver.exploration") >= 0, "solver.exploration", "must be >= 0")
    picard = PicardConfig(
        max_iters=get("solver.max_iters"), damping=get("solver.damping"), tol=get("solver.tol"),
        ridge=get("solver.ridge"), exploration=get("solver.exploration"), inner=get("solver.inner"),
    )
    solver = SolverBlock(steps=get("solver.steps"), paths=get("solver.paths"), seed=get("solver.seed"),
                         degree=get("solver.degree"), picard=picard)
    return ScenarioSpec(kind=kind, horizon=T, tagged=tagged, dim=dim, name=get("name"),
                        ordinary=ordinary, solver=solver)


def to_flat(spec: ScenarioSpec) -> dict[str, Any]:
    """Every field of the scenario as a flat key-path mapping."""
    tg, vel, sv = spec.tagged, spec.tagged.v_des, spec.solver
    out: dict[str, Any] = {
        "name": spec.name,
        "kind": spec.kind,
        "dim": spec.dim,
        "horizon": spec.horizon,
        "tagged.noise": tg.noise,
        "tagged.cont": tg.cont,
        "tagged.des": tg.des,
        "tagged.attr": tg.attr,
        "tagged.rep": tg.rep,
        "tagged.rep_crowd": tg.rep_crowd,
        "tagged.init": tg.init,
        "tagged.q": list(tg.q),
        "tagged.y0.mean": list(tg.y0_mean),
        "tagged.y0.std": tg.y0_std,
        "tagged.yT.mean": list(tg.yT_mean),
        "tagged.yT.std": tg.yT_std,
        "tagged.v_des.kind": vel.kind,
        "solver.steps": sv.steps,
        "solver.paths": sv.paths,
        "solver.seed": sv.seed,
        "solver.degree": sv.degree,
        "solver.max_iters": sv.picard.max_iters,
        "solver.damping": sv.picard.damping,
        "solver.tol": sv.picard.tol,
        "solver.ridge": sv.picard.ridge,
        "solver.exploration": sv.picard.exploration,
        "solver.inner": sv.picard.inner,
    }
    if vel.kind == "piecewise_sign":
        out["tagged.v_des.magnitude"] = list(vel.magnitude)
    elif vel.kind == "arctan_profile":
        out["tagged.v_des.direction"] = list(vel.direction)
    elif vel.kind == "table":
        out["tagged.v_des.times"] = list(vel.times)
        out["tagged.v_des.values"] = [list(r) for r in vel.values]
    od = spec.ordinary
    if od is not None:
        out.update({
            "ordinary.sigma": od.sigma,
            "ordinary.cont": od.cont,
            "ordinary.rep": od.rep,
            "ordinary.term": od.term,
            "ordinary.x0.mean": list(od.x0_mean),
            "ordinary.x0.std": od.x0_std,
            "ordinary.xT": list(od.xT),
        })
    return out


def _literal(tag: str, value: Any) -> str:
    if tag == "float":
        return json.dumps(float(value))
    if tag in ("vec", "list"):
        return json.dumps([float(x) for x in value])
    if tag == "table":
        return json.dumps([[float(x) for x in r] for r in value])
    return json.dumps(value)


def serialize_scenario(spec: ScenarioSpec) -> str:
    """Canonical text form: header, then sorted ``key = value`` lines."""
    flat = to_flat(spec)
    body = [f"{key} = {_literal(SCHEMA[key][0], flat[key])}" for key in sorted(flat)]
    return "\n".join([HEADER] + body) + "\n"


def parse_scenario(text: str) -> ScenarioSpec:
    """Parse and validate scenario text; errors name the key path and line."""
    values, lines = _parse_lines(text)
    return from_flat(values, lines)


def parse_override(item: str) -> tuple[str, Any]:
    """``key.path=value`` from the command line; bare words count as strings."""
    if "=" not in item:
        raise ScenarioError(f"override {item!r} is not of the form key=value")
    key, _, rhs = item.partition("=")
    key, rhs = key.strip(), rhs.strip()
    if key not in SCHEMA:
        raise ScenarioError("unknown key", key)
    try:
        value = json.loads(rhs)
    except json.JSONDecodeError:
        value = rhs
    return key, value


def builtin_text(name: str) -> str:
    if name not in BUILTINS:
        raise ScenarioError(f"unknown scenario {name!r}; valid names: {', '.join(BUILTINS)}")
    return resources.files(__package__).joinpath("data", "builtin", f"{name}.scn").read_text("utf-8")


def builtin(name: str) -> ScenarioSpec:
    """One of the built-in experiments, read from the bundled parameter table."""
    return parse_scenario(builtin_text(name))


def list_scenarios() -> list[str]:
    return list(BUILTINS)
