"""Hamiltonians, closed-form controls, adjoint drifts and the spike check.

Conventions. The tagged crowd moves with drift ``u + noise * B^y`` and pays

    f^y = 1/2 [cont |u|^2 + des |u - v_des|^2 + attr |y - E Y|^2
               + rep |y - Q|^2 + rep_crowd |y - E X|^2],
    h^y = 1/2 init |Y_0 - y0|^2   (at the start).

The ordinary crowd moves with drift ``u`` and diffusion ``sigma`` and pays

    f^x = 1/2 [cont |u|^2 + rep |x - y|^2],   h^x = 1/2 term |X_T - xT|^2,

with ``y`` the tagged position on the same path. Negative weights repel.
Laws enter only through their means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Ensemble, InvalidArgument, SolveResult, path_mean, stream
from .lq import DesiredVelocityLaw, UnsupportedScenario, eval_desired_velocity


@dataclass(frozen=True)
class CoefficientSet:
    dim: int
    # tagged crowd
    noise: float
    cont: float
    des: float = 0.0
    attr: float = 0.0
    rep: float = 0.0
    rep_crowd: float = 0.0
    init: float = 0.0
    q: tuple[float, ...] = ()
    v_des: DesiredVelocityLaw = field(default_factory=DesiredVelocityLaw)
    # ordinary crowd
    has_ordinary: bool = False
    sigma: float = 0.0
    x_cont: float = 1.0
    x_rep: float = 0.0
    x_term: float = 0.0
    xT: tuple[float, ...] = ()

    @classmethod
    def from_spec(cls, spec) -> "CoefficientSet":
        tg, od = spec.tagged, spec.ordinary
        kw = dict(
            dim=spec.dim, noise=tg.noise, cont=tg.cont, des=tg.des, attr=tg.attr, rep=tg.rep,
            rep_crowd=tg.rep_crowd, init=tg.init, q=tuple(tg.q), v_des=tg.v_des,
        )
        if od is not None:
            kw.update(has_ordinary=True, sigma=od.sigma, x_cont=od.cont, x_rep=od.rep,
                      x_term=od.term, xT=tuple(od.xT))
        return cls(**kw)

    # quadratic-in-control structure: total weight on |u|^2 in each running cost
    @property
    def tagged_control_weight(self) -> float:
        return self.cont + self.des

    @property
    def ordinary_control_weight(self) -> float:
        return self.x_cont

    @property
    def is_concave(self) -> bool:
        ok = self.tagged_control_weight > 0
        return ok and (not self.has_ordinary or self.ordinary_control_weight > 0)

    @property
    def qv(self) -> np.ndarray:
        return np.asarray(self.q, dtype=float) if self.q else np.zeros(self.dim)

    @property
    def xTv(self) -> np.ndarray:
        return np.asarray(self.xT, dtype=float) if self.xT else np.zeros(self.dim)

    # ---- dynamics
    def v(self, t) -> np.ndarray:
        return eval_desired_velocity(self.v_des, t)

    def b_y(self, t, u, by):
        return u + self.noise * by

    def b_x(self, t, u):
        return u

    def sigma_x(self, w_x: Optional[int] = None) -> np.ndarray:
        w = self.dim if w_x is None else w_x
        return self.sigma * np.eye(self.dim, w)

    # ---- costs (per path; last axis is space)
    def f_y(self, t, y, mean_y, u, mean_x=None):
        q = self.qv
        out = self.cont * _sq(u) + self.des * _sq(u - self.v(t))
        out = out + self.attr * _sq(y - mean_y) + self.rep * _sq(y - q)
        if self.rep_crowd:
            out = out + self.rep_crowd * _sq(y - mean_x)
        return 0.5 * out

    def f_x(self, t, x, y, u):
        return 0.5 * (self.x_cont * _sq(u) + self.x_rep * _sq(x - y))

    def h_y(self, y0_state, y0_pref):
        return 0.5 * self.init * _sq(y0_state - y0_pref)

    def h_x(self, xT_state):
        return 0.5 * self.x_term * _sq(xT_state - self.xTv)

    # ---- adjoint data used by the solvers
    def tagged_adjoint_drift(self, t, y, mean_y, mean_x=None):
        """Drift of p^{yy}: -(d_y H^y + E*[d_mu H^y])."""
        return assemble_adjoint_steps(self, AdjointPoint(t=t, y=y, mean_y=mean_y, mean_x=mean_x)).pyy

    def ordinary_adjoint_drift(self, t, x, y):
        """Drift of p^{xx}: -(d_x H^x + E*[d_mu H^x])."""
        return self.x_rep * (x - y)

    def tagged_control(self, t, p):
        w = self.tagged_control_weight
        if w <= 0:
            raise UnsupportedScenario("tagged Hamiltonian is not strictly concave in the control")
        return (np.asarray(p, dtype=float) + self.des * self.v(t)) / w

    def ordinary_control(self, t, p):
        if self.x_cont <= 0:
            raise UnsupportedScenario("ordinary Hamiltonian is not strictly concave in the control")
        return np.asarray(p, dtype=float) / self.x_cont

    def initial_adjoint(self, y0_state, y0_pref):
        """p^{yy}_0 = d_y h^y (+ a zero mean-field term)."""
        return self.init * (y0_state - y0_pref)

    def terminal_adjoint(self, xT_state):
        """p^{xx}_T = -d_x h^x (+ a zero mean-field term)."""
        return -self.x_term * (xT_state - self.xTv)


def _sq(a) -> np.ndarray:
    return np.sum(np.square(a), axis=-1)


def _dot(a, b) -> np.ndarray:
    return np.sum(np.asarray(a) * np.asarray(b), axis=-1)


# ---------------------------------------------------------------------------
# Hamiltonians


@dataclass(frozen=True)
class HamiltonianPoint:
    """Arguments of a Hamiltonian; arrays share leading (path) axes."""

    t: float
    y: np.ndarray
    mean_y: np.ndarray
    u_y: np.ndarray
    x: Optional[np.ndarray] = None
    mean_x: Optional[np.ndarray] = None
    u_x: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    by: Optional[np.ndarray] = None  # tagged noise B^y_t entering b^y


@dataclass(frozen=True)
class Adjoints:
    """(p^{ix}, p^{iy}, q^{ix}) for player i."""

    p_x: Optional[np.ndarray]
    p_y: Optional[np.ndarray]
    q_x: Optional[np.ndarray] = None


@dataclass(frozen=True)
class HamiltonianValue:
    value: np.ndarray
    dy: np.ndarray
    dx: np.ndarray
    dz: np.ndarray
    du: np.ndarray


def _zeros_like(a, fallback):
    return np.zeros_like(np.asarray(fallback if a is None else a, dtype=float))


def eval_hamiltonian(i: str, coeffs: CoefficientSet, point: HamiltonianPoint, adj: Adjoints) -> HamiltonianValue:
    """H^i = b^x p^{ix} + b^y p^{iy} + sigma^x : q^{ix} - f^i, with its gradients."""
    c, pt = coeffs, point
    y = np.asarray(pt.y, dtype=float)
    by = _zeros_like(pt.by, y) if pt.by is None else np.asarray(pt.by, dtype=float)
    x = y if pt.x is None else np.asarray(pt.x, dtype=float)
    ux = _zeros_like(pt.u_x, y) if pt.u_x is None else np.asarray(pt.u_x, dtype=float)
    mean_x = np.zeros(c.dim) if pt.mean_x is None else pt.mean_x
    z = _zeros_like(None, y)[..., None] if pt.z is None else np.asarray(pt.z, dtype=float)
    px = _zeros_like(adj.p_x, y) if adj.p_x is None else np.asarray(adj.p_x, dtype=float)
    py = _zeros_like(adj.p_y, y) if adj.p_y is None else np.asarray(adj.p_y, dtype=float)
    value = _dot(c.b_x(pt.t, ux), px) + _dot(c.b_y(pt.t, pt.u_y, by), py)
    if adj.q_x is not None and c.has_ordinary:
        sig = c.sigma_x(np.shape(adj.q_x)[-1])
        value = value + np.sum(sig * np.asarray(adj.q_x), axis=(-2, -1))
    q = c.qv
    if i == "y":
        value = value - c.f_y(pt.t, y, pt.mean_y, pt.u_y, mean_x)
        dy = -(c.attr * (y - pt.mean_y) + c.rep * (y - q) + c.rep_crowd * (y - mean_x))
        dx = np.zeros_like(y)
        du = py - (c.cont * pt.u_y + c.des * (pt.u_y - c.v(pt.t)))
    elif i == "x":
        value = value - c.f_x(pt.t, x, y, ux)
        dy = c.x_rep * (x - y)
        dx = -c.x_rep * (x - y)
        du = px - c.x_cont * ux
    else:
        raise InvalidArgument(f"player must be 'x' or 'y', got {i!r}")
    return HamiltonianValue(value, dy, dx, np.zeros_like(z), du)


def argmax_control(i: str, coeffs: CoefficientSet, point: HamiltonianPoint, adj: Adjoints) -> np.ndarray:
    """Maximizer of the Hamiltonian over unconstrained controls."""
    if i == "y":
        return coeffs.tagged_control(point.t, adj.p_y)
    if i == "x":
        return coeffs.ordinary_control(point.t, adj.p_x)
    raise InvalidArgument(f"player must be 'x' or 'y', got {i!r}")


# ---------------------------------------------------------------------------
# measure derivatives of mean-dependent quadratics


def mean_derivative_quadratic(form: str, samples: np.ndarray, c=None) -> np.ndarray:
    """E*[d_mu g] for g depending on the law only through its mean.

    ``dist_to_mean``: g = |y - m|^2 with y drawn from the same law. The lifted
    derivative at y~ is -2(y - m); averaging over y gives -2(E Y - m) = 0.
    ``mean_to_point``: g = |m - c|^2, derivative 2(m - c).
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] == 0:
        raise InvalidArgument("empty slice")
    m = path_mean(s)
    if form == "dist_to_mean":
        return -2.0 * (path_mean(s) - m)
    if form == "mean_to_point":
        if c is None:
            raise InvalidArgument("mean_to_point needs a point c")
        return 2.0 * (m - np.asarray(c, dtype=float))
    raise InvalidArgument(f"unknown quadratic form {form!r}")


# ---------------------------------------------------------------------------
# adjoint system


@dataclass(frozen=True)
class AdjointPoint:
    t: float
    y: np.ndarray
    mean_y: np.ndarray
    x: Optional[np.ndarray] = None
    mean_x: Optional[np.ndarray] = None
    y_samples: Optional[np.ndarray] = None  # slice for mean-field derivatives


@dataclass(frozen=True)
class AdjointDrifts:
    pyy: np.ndarray
    pxx: Optional[np.ndarray]
    pxy: Optional[np.ndarray]
    pyx: Optional[np.ndarray]


def assemble_adjoint_steps(coeffs: CoefficientSet, pt: AdjointPoint) -> AdjointDrifts:
    """Adjoint drifts -(d H + E*[d_mu H]) at one grid time.

    p^{yy} and p^{xy} run forward from zero-based initial data; p^{xx} and
    p^{yx} run backward from terminal data. Their integrands for the
    forward ones are -d_z H, which vanishes here.
    """
    c = coeffs
    y = np.asarray(pt.y, dtype=float)
    q = c.qv
    slice_ = y if pt.y_samples is None else pt.y_samples
    mean_x = pt.mean_x if pt.mean_x is not None else np.zeros(c.dim)

    # tagged: -d_y H^y = d_y f^y; the attraction term's measure part is
    # -1/2 attr * E*[d_mu |y - m|^2], which vanishes identically
    pyy = c.attr * (y - pt.mean_y) + c.rep * (y - q)
    if c.rep_crowd:
        pyy = pyy + c.rep_crowd * (y - mean_x)
    if c.attr:
        pyy = pyy + 0.5 * c.attr * mean_derivative_quadratic("dist_to_mean", slice_)
    if not c.has_ordinary or pt.x is None:
        return AdjointDrifts(pyy, None, None, None)

    x = np.asarray(pt.x, dtype=float)
    pxx = c.x_rep * (x - y)
    pxy = -c.x_rep * (x - y)
    # H^y depends on the ordinary law through -1/2 rep_crowd |y - E X|^2;
    # averaging its lifted derivative over the tagged slice gives rep_crowd (E Y - E X)
    e_star = -0.5 * c.rep_crowd * mean_derivative_quadratic("mean_to_point", x, c=pt.mean_y)
    pyx = np.broadcast_to(-e_star, y.shape).copy()
    return AdjointDrifts(pyy, pxx, pxy, pyx)


def adjoint_boundaries(coeffs: CoefficientSet, Y0, y0_pref, XT=None) -> dict:
    """Boundary rows: p^{yy}_0, p^{xy}_0 at the start and p^{xx}_T, p^{yx}_T at the end."""
    out = {"pyy_0": coeffs.initial_adjoint(Y0, y0_pref)}
    if coeffs.has_ordinary and XT is not None:
        out["pxx_T"] = coeffs.terminal_adjoint(XT)
        out["pxy_0"] = np.zeros_like(np.asarray(Y0, dtype=float))
        out["pyx_T"] = np.zeros_like(np.asarray(XT, dtype=float))
    return out


# ---------------------------------------------------------------------------
# costs and the spike check


def _tagged_rows(coeffs: CoefficientSet, t, Y, Uy, X, rows: range) -> np.ndarray:
    """Running tagged cost f^y on the given grid rows, shape (len(rows), N)."""
    out = np.empty((len(rows), Y.shape[1]))
    for i, k in enumerate(rows):
        mx = path_mean(X[k]) if X is not None else np.zeros(Y.shape[-1])
        out[i] = coeffs.f_y(t[k], Y[k], path_mean(Y[k]), Uy[k], mx)
    return out


def _ordinary_rows(coeffs: CoefficientSet, t, X, Y, Ux, rows: range) -> np.ndarray:
    out = np.empty((len(rows), X.shape[1]))
    for i, k in enumerate(rows):
        out[i] = coeffs.f_x(t[k], X[k], Y[k], Ux[k])
    return out


def crowd_costs(
    coeffs: CoefficientSet,
    ens: Ensemble,
    y0_pref: np.ndarray,
    Y: Optional[np.ndarray] = None,
    Uy: Optional[np.ndarray] = None,
    X: Optional[np.ndarray] = None,
    Ux: Optional[np.ndarray] = None,
) -> dict:
    """Per-path costs with left-point quadrature; overrides replace ensemble arrays."""
    grid = ens.grid
    M, dt, t = grid.steps, grid.dt, grid.times
    Y = ens.Y if Y is None else Y
    Uy = ens.Uy if Uy is None else Uy
    X = ens.X if X is None else X
    Ux = ens.Ux if Ux is None else Ux
    rows = _tagged_rows(coeffs, t, Y, Uy, X, range(M))
    jy = coeffs.h_y(Y[0], y0_pref)
    for k in range(M):
        jy = jy + rows[k] * dt
    out = {"tagged": jy}
    if X is not None and coeffs.has_ordinary:
        rows = _ordinary_rows(coeffs, t, X, Y, Ux, range(M))
        jx = coeffs.h_x(X[M])
        for k in range(M):
            jx = jx + rows[k] * dt
        out["ordinary"] = jx
    return out


def _bump_paths(M: int, start: int, length: int, bump: np.ndarray) -> np.ndarray:
    """Deterministic control bump, shape (M+1, d): ``bump`` on steps [start, start+length)."""
    out = np.zeros((M + 1, bump.size))
    out[start:start + length] = bump
    return out


def shift_tagged(Y: np.ndarray, du: np.ndarray, dt: float) -> np.ndarray:
    """Tagged response to a deterministic control change du (M+1, d).

    Y_k = E[Y_{k+1} - (u_k + ...) dt | F_k] with Y_M fixed, so a deterministic
    change moves Y_k by -sum_{i>=k} du_i dt. A regression basis with a constant
    reproduces this exactly.
    """
    M = Y.shape[0] - 1
    tail = np.zeros_like(du)
    tail[:M] = np.cumsum(du[:M][::-1], axis=0)[::-1]
    return Y - tail[:, None, :] * dt


def shift_ordinary(X: np.ndarray, du: np.ndarray, dt: float) -> np.ndarray:
    """Ordinary response: X_k moves by sum_{i<k} du_i dt, X_0 fixed."""
    head = np.zeros_like(du)
    head[1:] = np.cumsum(du[:-1], axis=0)
    return X + head[:, None, :] * dt


@dataclass(frozen=True)
class SpikeTrial:
    crowd: str
    start: int
    length: int
    bump: tuple[float, ...]
    delta: float
    se: float

    @property
    def passed(self) -> bool:
        return self.delta >= -3.0 * self.se


@dataclass(frozen=True)
class SpikeReport:
    trials: tuple[SpikeTrial, ...]
    offset: tuple[float, ...] = ()

    @property
    def passed(self) -> bool:
        return all(tr.passed for tr in self.trials)

    @property
    def failures(self) -> int:
        return sum(not tr.passed for tr in self.trials)

    def worst(self) -> Optional[SpikeTrial]:
        if not self.trials:
            return None
        return min(self.trials, key=lambda tr: tr.delta / max(tr.se, 1e-300))

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "failures": self.failures,
            "offset": list(self.offset),
            "trials": [
                {"crowd": tr.crowd, "start": tr.start, "length": tr.length, "bump": list(tr.bump),
                 "delta": tr.delta, "se": tr.se, "passed": tr.passed}
                for tr in self.trials
            ],
        }


def spike_variation_check(
    result: SolveResult,
    trials: int = 200,
    eps: float = 0.1,
    seed: int = 0,
    crowds: tuple[str, ...] = ("tagged", "ordinary"),
    magnitude: tuple[float, float] = (0.5, 2.0),
    offset=None,
    offset_crowd: str = "tagged",
) -> SpikeReport:
    """Open-loop spike variations around a solved candidate.

    Each trial picks a crowd, a random window of length ``eps`` and a random
    constant bump, moves only that crowd's control, recomputes its states
    and reports the per-path mean cost change with its standard error.
    ``offset`` detunes the candidate first by adding a constant to the
    control of ``offset_crowd``.
    """
    coeffs = CoefficientSet.from_spec(result.spec)
    ens = result.ensemble
    grid = ens.grid
    M, dt, d = grid.steps, grid.dt, ens.dim
    y0_pref = result.samples.y0
    crowds = tuple(cr for cr in crowds if cr == "tagged" or ens.X is not None)
    if not crowds:
        raise InvalidArgument("no crowd to perturb")

    Y, Uy, X, Ux = ens.Y, ens.Uy, ens.X, ens.Ux
    if offset is not None:
        off = np.broadcast_to(np.asarray(offset, dtype=float), (M + 1, d))
        if offset_crowd == "tagged":
            Uy = Uy + off[:, None, :]
            Y = shift_tagged(Y, off, dt)
        else:
            Ux = Ux + off[:, None, :]
            X = shift_ordinary(X, off, dt)
    # baseline running costs per row; each trial only recomputes the rows it moves
    t = grid.times
    base_y = _tagged_rows(coeffs, t, Y, Uy, X, range(M))
    base_x = _ordinary_rows(coeffs, t, X, Y, Ux, range(M)) if X is not None else None

    length = int(round(eps / dt))
    rng = stream(seed, "spike", 0, 0)
    out = []
    for _ in range(trials):
        crowd = crowds[int(rng.integers(len(crowds)))]
        r = rng.uniform(*magnitude)
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        bump = r * direction
        start = int(rng.integers(0, M - length + 1)) if length > 0 else 0
        du = _bump_paths(M, start, length, bump)
        end = start + length
        if crowd == "tagged":
            rows = range(0, end)
            Yn = shift_tagged(Y, du, dt)
            new = _tagged_rows(coeffs, t, Yn, Uy + du[:, None, :], X, rows)
            diff = coeffs.h_y(Yn[0], y0_pref) - coeffs.h_y(Y[0], y0_pref)
            old = base_y
        else:
            rows = range(start, M)
            Xn = shift_ordinary(X, du, dt)
            new = _ordinary_rows(coeffs, t, Xn, Y, Ux + du[:, None, :], rows)
            diff = coeffs.h_x(Xn[M]) - coeffs.h_x(X[M])
            old = base_x
        for i, k in enumerate(rows):
            diff = diff + (new[i] - old[k]) * dt
        n = diff.size
        delta = float(path_mean(diff))
        se = float(np.sqrt(path_mean((diff - delta) ** 2) * n / max(n - 1, 1) / n))
        out.append(SpikeTrial(crowd, start, length, tuple(map(float, bump)), delta, se))
    off_t = () if offset is None else tuple(np.broadcast_to(np.asarray(offset, dtype=float), (d,)).tolist())
    return SpikeReport(tuple(out), off_t)
