"""Closed-form machinery for linear-quadratic tagged-crowd problems.

The optimal tagged state is sought in the affine form
``Y = gamma(t) p + eta(t) B^y + theta(t)``. Matching coefficients with the
backward dynamics and the forward adjoint gives a terminal-value ODE
system, integrated here with classical RK4 from T back to 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    AdjointEnsemble,
    Ensemble,
    InvalidArgument,
    Samples,
    SolveResult,
    TimeGrid,
    make_grid,
    path_mean,
    sample_brownian,
    sample_gaussian,
)

BLOWUP_BOUND = 1e6


class UnsupportedScenario(ValueError):
    """The scenario falls outside what a solver or evaluator can handle."""


class MatchingBlowUp(ArithmeticError):
    """The Riccati factor left the bounded regime before reaching t = 0."""

    def __init__(self, time: float):
        super().__init__(f"Riccati factor blew up at t = {time:.6g}")
        self.time = time


# ---------------------------------------------------------------------------
# desired velocity


VELOCITY_KINDS = ("none", "piecewise_sign", "arctan_profile", "table")


@dataclass(frozen=True)
class DesiredVelocityLaw:
    """Desired walking velocity as a function of time.

    ``piecewise_sign``: sign(t - T/2) * magnitude.
    ``arctan_profile``: max{0.1, arctan(pi t - 1.6)} * direction.
    ``table``: linear interpolation of ``values`` (rows) over ``times``.
    """

    kind: str = "none"
    dim: int = 2
    horizon: float = 1.0
    magnitude: tuple[float, ...] = ()
    direction: tuple[float, ...] = ()
    times: tuple[float, ...] = ()
    values: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in VELOCITY_KINDS:
            raise InvalidArgument(f"unknown desired-velocity kind {self.kind!r}")


def arctan_profile(t):
    """Scalar speed profile max{0.1, arctan(pi t - 1.6)}."""
    return np.maximum(0.1, np.arctan(np.pi * np.asarray(t, dtype=float) - 1.6))


def eval_desired_velocity(law: DesiredVelocityLaw, t) -> np.ndarray:
    """Desired velocity at time(s) t: shape (d,) for scalar t, else (len(t), d)."""
    tt = np.asarray(t, dtype=float)
    ts = np.atleast_1d(tt)
    d = law.dim
    if law.kind == "none":
        out = np.zeros((ts.size, d))
    elif law.kind == "piecewise_sign":
        out = np.sign(ts - law.horizon / 2)[:, None] * np.asarray(law.magnitude, dtype=float)
    elif law.kind == "arctan_profile":
        out = arctan_profile(ts)[:, None] * np.asarray(law.direction, dtype=float)
    else:
        grid = np.asarray(law.times, dtype=float)
        vals = np.asarray(law.values, dtype=float)
        out = np.stack([np.interp(ts, grid, vals[:, j]) for j in range(d)], axis=-1)
    return out[0] if tt.ndim == 0 else out


# ---------------------------------------------------------------------------
# matching ODE


@dataclass(frozen=True)
class LQCoefficients:
    """Weights of a crowd-only LQ problem with deterministic terminal point."""

    horizon: float
    noise: float
    cont: float
    des: float
    rep: float
    attr: float
    init: float
    q: np.ndarray
    yT: np.ndarray
    y0_mean: np.ndarray
    v_des: DesiredVelocityLaw = field(default_factory=DesiredVelocityLaw)

    @property
    def dim(self) -> int:
        return self.yT.size


def lq_coefficients(spec) -> LQCoefficients:
    """Extract LQ weights from a scenario; raises when matching does not apply."""
    tg = spec.tagged
    if spec.ordinary is not None:
        raise UnsupportedScenario("matching solver handles a single tagged crowd only")
    if tg.yT_std > 0:
        raise UnsupportedScenario("matching solver needs a deterministic terminal point")
    if tg.rep_crowd != 0:
        raise UnsupportedScenario("repulsion from another crowd is not an LQ crowd-only term")
    if tg.rep != 0 and tg.attr != 0:
        raise UnsupportedScenario("point repulsion together with attraction is not supported by matching")
    return LQCoefficients(
        horizon=spec.horizon,
        noise=tg.noise,
        cont=tg.cont,
        des=tg.des,
        rep=tg.rep,
        attr=tg.attr,
        init=tg.init,
        q=np.asarray(tg.q, dtype=float),
        yT=np.asarray(tg.yT_mean, dtype=float),
        y0_mean=np.asarray(tg.y0_mean, dtype=float),
        v_des=tg.v_des,
    )


@dataclass(frozen=True)
class LQMatchingSolution:
    grid: TimeGrid
    gamma: np.ndarray  # (M+1,)
    eta: np.ndarray  # (M+1,)
    theta: np.ndarray  # (M+1, d)
    mean_p: np.ndarray  # (d,) constant mean adjoint, zero unless attraction is on
    coeffs: LQCoefficients

    @property
    def Z(self) -> np.ndarray:
        """Loading of Y on its own Brownian motion, equal to eta."""
        return self.eta


def _matching_rhs(c: LQCoefficients, t: float, s: np.ndarray, mean_p: np.ndarray) -> np.ndarray:
    g, e, th = s[0], s[1], s[2:]
    a = c.rep + c.attr
    w = c.cont + c.des
    v = eval_desired_velocity(c.v_des, t)
    dg = -a * g * g + 1.0 / w
    de = -a * g * e + c.noise
    dth = -c.rep * g * (th - c.q) + c.attr * g * g * mean_p + c.des * v / w
    return np.concatenate([[dg, de], dth])


def _integrate(c: LQCoefficients, grid: TimeGrid, mean_p: np.ndarray) -> np.ndarray:
    M, h = grid.steps, -grid.dt
    t = grid.times
    out = np.empty((M + 1, 2 + c.dim))
    out[M] = np.concatenate([[0.0, 0.0], c.yT])
    s = out[M]
    for k in range(M, 0, -1):
        tk = t[k]
        k1 = _matching_rhs(c, tk, s, mean_p)
        k2 = _matching_rhs(c, tk + h / 2, s + h / 2 * k1, mean_p)
        k3 = _matching_rhs(c, tk + h / 2, s + h / 2 * k2, mean_p)
        k4 = _matching_rhs(c, t[k - 1], s + h * k3, mean_p)
        s = s + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(s)) or abs(s[0]) > BLOWUP_BOUND:
            raise MatchingBlowUp(t[k - 1])
        out[k - 1] = s
    return out


def integrate_matching(
    coeffs: LQCoefficients, grid: TimeGrid, mean_y0: Optional[np.ndarray] = None
) -> LQMatchingSolution:
    """Solve the matching ODE system backward from T.

    With attraction to the crowd mean, theta depends on the (constant) mean
    adjoint, which in turn is fixed by the initial condition. theta is affine
    in that mean, so two integrations pin it down.
    """
    c = coeffs
    if c.cont + c.des <= 0:
        raise UnsupportedScenario("control weight cont + des must be positive")
    if c.rep != 0 and c.attr != 0:
        raise UnsupportedScenario("point repulsion together with attraction is not supported by matching")
    d = c.dim
    base = _integrate(c, grid, np.zeros(d))
    mean_p = np.zeros(d)
    if c.attr != 0 and c.init != 0:
        unit = _integrate(c, grid, np.ones(d))
        slope = unit[0, 2:] - base[0, 2:]
        ey0 = c.y0_mean if mean_y0 is None else np.asarray(mean_y0, dtype=float)
        g0 = base[0, 0]
        mean_p = c.init * (base[0, 2:] - ey0) / (1 - c.init * g0 - c.init * slope)
        base = _integrate(c, grid, mean_p)
    base[-1] = np.concatenate([[0.0, 0.0], c.yT])
    return LQMatchingSolution(grid, base[:, 0].copy(), base[:, 1].copy(), base[:, 2:].copy(), mean_p, c)


def optimal_control_lq(sol: LQMatchingSolution, p, t) -> np.ndarray:
    """Stationary point (p + des * v_des(t)) / (cont + des) of the Hamiltonian."""
    c = sol.coeffs
    if c.cont + c.des <= 0:
        raise UnsupportedScenario("control weight cont + des must be positive")
    v = eval_desired_velocity(c.v_des, t)
    return (np.asarray(p, dtype=float) + c.des * v) / (c.cont + c.des)


def initial_adjoint(sol: LQMatchingSolution, y0: np.ndarray) -> np.ndarray:
    """Per-path p_0 solving p_0 = init * (gamma_0 p_0 + theta_0 - y0)."""
    c = sol.coeffs
    return c.init * (sol.theta[0] - y0) / (1 - c.init * sol.gamma[0])


# ---------------------------------------------------------------------------
# deterministic keep-together reduction


@dataclass(frozen=True)
class KeepTogetherOracle:
    Y0: np.ndarray
    control: np.ndarray
    cost: float


def keep_together_deterministic_oracle(
    cont: float, init: float, y0: Sequence[float], yT: Sequence[float], T: float
) -> KeepTogetherOracle:
    """Optimal start for cont|yT - Y0|^2/(2T) + init|Y0 - y0|^2/2 with straight-line walking."""
    y0 = np.asarray(y0, dtype=float)
    yT = np.asarray(yT, dtype=float)
    if math.isinf(init):
        Y0 = y0.copy()
    else:
        Y0 = (cont * yT / T + init * y0) / (cont / T + init)
    u = (yT - Y0) / T
    diff0 = Y0 - y0
    init_cost = 0.0 if math.isinf(init) else 0.5 * init * float(diff0 @ diff0)
    cost = 0.5 * cont * float(u @ u) * T + init_cost
    return KeepTogetherOracle(Y0, u, cost)


def keep_together_oracle_for(spec) -> KeepTogetherOracle:
    tg = spec.tagged
    if tg.noise != 0 or tg.attr != 0 or tg.des != 0 or tg.rep != 0 or tg.yT_std != 0 or tg.y0_std != 0:
        raise UnsupportedScenario("deterministic oracle needs zero noise, no attraction and fixed boundary points")
    return keep_together_deterministic_oracle(tg.cont, tg.init, tg.y0_mean, tg.yT_mean, spec.horizon)


# ---------------------------------------------------------------------------
# simulation


def solve_lq(spec, grid: Optional[TimeGrid] = None, n_paths: Optional[int] = None,
             seed: Optional[int] = None, workers: Optional[int] = None) -> SolveResult:
    """Simulate the matching solution on Brownian paths."""
    coeffs = lq_coefficients(spec)
    grid = grid or make_grid(spec.horizon, spec.solver.steps)
    N = n_paths or spec.solver.paths
    seed = spec.solver.seed if seed is None else seed
    d, M, dt = coeffs.dim, grid.steps, grid.dt
    tg = spec.tagged

    bundle = sample_brownian(grid, N, (0, d), seed, workers)
    y0 = sample_gaussian(tg.y0_mean, tg.y0_std, N, seed, "initial_y", workers)
    yT = np.broadcast_to(coeffs.yT, (N, d)).copy()
    sol = integrate_matching(coeffs, grid, mean_y0=path_mean(y0))

    t = grid.times
    B = bundle.By
    Y = np.empty((M + 1, N, d))
    P = np.empty((M + 1, N, d))
    U = np.empty((M + 1, N, d))
    P[0] = initial_adjoint(sol, y0)
    for k in range(M + 1):
        if k == M:
            Y[M] = yT
        else:
            Y[k] = sol.gamma[k] * P[k] + sol.eta[k] * B[k] + sol.theta[k]
        if k == 0:
            P[0] = coeffs.init * (Y[0] - y0)
        U[k] = optimal_control_lq(sol, P[k], t[k])
        if k < M:
            drift = coeffs.rep * (Y[k] - coeffs.q) + coeffs.attr * (Y[k] - path_mean(Y[k]))
            P[k + 1] = P[k] + drift * dt

    Z = np.zeros((M + 1, N, d, d))
    for j in range(d):
        Z[:, :, j, j] = sol.eta[:, None]
    ens = Ensemble(grid=grid, Y=Y, Z=Z, Uy=U)
    adj = AdjointEnsemble(pyy=P, qyy=np.zeros((M + 1, N, d, d)))
    diag = {"solver": "lq", "gamma0": float(sol.gamma[0]), "eta0": float(sol.eta[0]),
            "theta0": sol.theta[0].tolist(), "mean_p": sol.mean_p.tolist()}
    return SolveResult(spec, "lq", ens, adj, Samples(y0=y0, yT=yT), bundle, True, diag)
