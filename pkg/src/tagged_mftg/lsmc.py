"""Least-squares Monte Carlo: regressions, forward/backward stepping, equilibrium.

Conditional expectations are L2 projections onto polynomial features of
per-coordinate state inputs. Normal equations are assembled chunk by chunk
with matrix products and combined by the pairwise tree from ``core``, so fitted
coefficients do not depend on the worker count.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .core import (
    AdjointEnsemble,
    BrownianBundle,
    Ensemble,
    InvalidArgument,
    Samples,
    SolveResult,
    TimeGrid,
    make_grid,
    map_chunks,
    path_mean,
    sample_brownian,
    sample_gaussian,
    stream_normals,
    tree_sum,
)
from .game import CoefficientSet, assemble_adjoint_steps, AdjointPoint
from .lq import UnsupportedScenario

COND_LIMIT = 1e12

__all__ = [
    "AdjointEnsemble",
    "BackwardSolution",
    "DegenerateRegression",
    "FittedRegression",
    "ForwardBlowUp",
    "PicardConfig",
    "RegressionBasis",
    "backward_lsmc",
    "forward_euler",
    "regress_conditional",
    "solve_equilibrium",
]


class DegenerateRegression(np.linalg.LinAlgError):
    """Rank-deficient design and no ridge to fall back on."""


class ForwardBlowUp(ArithmeticError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# bases and regression


@dataclass(frozen=True)
class RegressionBasis:
    """Monomials of total degree <= ``degree`` in the selected inputs.

    ``family="none"`` keeps only the constant, which turns conditional
    expectations into plain means.
    """

    family: str = "polynomial"
    degree: int = 2
    inputs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.family not in ("polynomial", "none"):
            raise InvalidArgument(f"unknown basis family {self.family!r}")
        if self.degree < 0:
            raise InvalidArgument("basis degree must be >= 0")

    def exponents(self, r: int) -> list[tuple[int, ...]]:
        deg = self.degree if self.family == "polynomial" else 0
        terms: list[tuple[int, ...]] = [()]
        for k in range(1, deg + 1):
            terms.extend(itertools.combinations_with_replacement(range(r), k))
        return terms

    def size(self, r: int) -> int:
        return len(self.exponents(r))

    def design(self, inputs: np.ndarray) -> np.ndarray:
        """Feature matrix (..., K) for inputs of shape (..., r)."""
        x = np.asarray(inputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        cols = []
        for term in self.exponents(x.shape[-1]):
            col = np.ones(x.shape[:-1])
            for i in term:
                col = col * x[..., i]
            cols.append(col)
        return np.stack(cols, axis=-1)


def _gram(A: np.ndarray, T: np.ndarray, workers=None):
    """Chunked A^T A and A^T T per coordinate: A (N, c, K), T (N, c, m)."""
    AT = np.concatenate([A, T], axis=-1)

    def part(s):
        return np.matmul(A[s].transpose(1, 2, 0), AT[s].transpose(1, 0, 2))

    G = tree_sum(map_chunks(part, A.shape[0], workers))
    K = A.shape[-1]
    return G[..., :K], G[..., K:]


def _scales(A: np.ndarray, workers=None) -> np.ndarray:
    sq = tree_sum(map_chunks(lambda s: np.square(A[s]).sum(axis=0), A.shape[0], workers))
    s = np.sqrt(sq / A.shape[0])
    return np.where(s > 0, s, 1.0), sq > 0


def _condition(G: np.ndarray, live: np.ndarray) -> np.ndarray:
    """Condition number per coordinate over columns that are not identically zero."""
    out = np.empty(G.shape[0])
    for i in range(G.shape[0]):
        idx = np.flatnonzero(live[i])
        out[i] = np.linalg.cond(G[i][np.ix_(idx, idx)]) if idx.size else np.inf
    return out


def fit_batched(A: np.ndarray, T: np.ndarray, ridge: float, workers=None):
    """Least squares per coordinate; returns coefficients (c, K, m) and condition numbers (c,).

    Column 0 must be the constant. Columns are scaled to unit RMS first;
    identically zero columns get a zero coefficient. Without a ridge, a
    singular design is an error.
    """
    N = A.shape[0]
    s, live = _scales(A, workers)
    As = A / s
    G, b = _gram(As, T, workers)
    G = G / N
    b = b / N
    cond = _condition(G, live)
    K = G.shape[-1]
    if ridge == 0:
        if not (np.all(live) and np.all(cond < COND_LIMIT)):
            raise DegenerateRegression(f"design is rank deficient (condition number {np.max(cond):.3g})")
    # the ridge spares column 0, the intercept, so constants and means are reproduced
    pen = ridge * np.eye(K)
    pen[0, 0] = 0.0
    coef = np.linalg.solve(G + pen, b)
    return coef / s[..., None], cond


def evaluate(A: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Fitted values (N, c, m) from a design (N, c, K)."""
    return np.matmul(A.transpose(1, 0, 2), coef).transpose(1, 0, 2)


@dataclass(frozen=True)
class FittedRegression:
    basis: RegressionBasis
    coef: np.ndarray  # (K, m)
    condition: float
    vector: bool = True

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        A = self.basis.design(inputs)
        out = A @ self.coef
        return out if self.vector else out[:, 0]


def regress_conditional(
    targets: np.ndarray,
    basis: RegressionBasis,
    inputs: np.ndarray,
    ridge: float = 1e-8,
    workers: Optional[int] = None,
) -> tuple[FittedRegression, np.ndarray]:
    """Project targets on the span of the basis evaluated at ``inputs``."""
    T = np.asarray(targets, dtype=float)
    vector = T.ndim == 2
    T2 = T if vector else T[:, None]
    A = basis.design(inputs)
    if A.shape[0] != T2.shape[0]:
        raise InvalidArgument("targets and inputs disagree on the number of paths")
    if A.shape[0] <= A.shape[1]:
        raise InvalidArgument(f"need more paths ({A.shape[0]}) than basis functions ({A.shape[1]})")
    coef, cond = fit_batched(A[:, None, :], T2[:, None, :], ridge, workers)
    fn = FittedRegression(basis, coef[0], float(cond[0]), vector)
    fitted = A @ coef[0]
    return fn, fitted if vector else fitted[:, 0]


# ---------------------------------------------------------------------------
# forward and backward stepping


def _increments(dB) -> np.ndarray:
    if isinstance(dB, BrownianBundle):
        return dB.increments
    return np.asarray(dB, dtype=float)


def forward_euler(
    x0: np.ndarray,
    drift: Union[Callable, np.ndarray],
    diffusion,
    dB,
    grid: TimeGrid,
) -> np.ndarray:
    """Euler-Maruyama: X[k+1] = X[k] + b dt + sigma dB[k], with X[0] = x0 exactly.

    ``drift`` is a callable (k, t, x) -> (N, d), an array (M, N, d) or a
    constant vector; ``diffusion`` a scalar or a (d, w) matrix.
    """
    x0 = np.asarray(x0, dtype=float)
    N, d = x0.shape
    M, dt, t = grid.steps, grid.dt, grid.times
    inc = _increments(dB)
    sig = np.asarray(diffusion, dtype=float)
    if sig.ndim == 0:
        sig = sig * np.eye(d, inc.shape[-1])
    X = np.empty((M + 1, N, d))
    X[0] = x0
    for k in range(M):
        if callable(drift):
            b = drift(k, t[k], X[k])
        else:
            b = np.asarray(drift, dtype=float)
            b = b[k] if b.ndim == 3 else b
        X[k + 1] = X[k] + b * dt + np.einsum("dw,nw->nd", sig, inc[k])
        if not np.isfinite(X[k + 1]).all():
            raise ForwardBlowUp(k + 1)
    return X


@dataclass(frozen=True)
class BackwardSolution:
    Y: np.ndarray  # (M+1, N, d)
    Z: np.ndarray  # (M+1, N, d, w)
    condition: np.ndarray  # (M,) worst condition number per step


def backward_lsmc(
    terminal: np.ndarray,
    driver,
    basis: RegressionBasis,
    inputs,
    dB,
    grid: TimeGrid,
    ridge: float = 1e-8,
    workers: Optional[int] = None,
) -> BackwardSolution:
    """Y_k = E[Y_{k+1} - b_k dt | inputs_k],  Z_k = E[(Y_{k+1} - Y_k) dB_k^T | inputs_k] / dt.

    ``driver`` is None, a callable (k, t) -> (N, d) or an array with M rows.
    ``inputs`` is an array with M+1 rows or a callable k -> array; each row
    is (N, r) (one basis shared by all coordinates) or (N, d, r) (one basis
    per coordinate). Y_M equals ``terminal`` exactly.
    """
    YT = np.asarray(terminal, dtype=float)
    if YT.ndim == 1:
        YT = YT[:, None]
    if not np.isfinite(YT).all():
        raise InvalidArgument("terminal samples must be finite")
    N, d = YT.shape
    M, dt, t = grid.steps, grid.dt, grid.times
    inc = _increments(dB)
    w = inc.shape[-1]
    Y = np.empty((M + 1, N, d))
    Z = np.zeros((M + 1, N, d, w))
    cond = np.zeros(M)
    Y[M] = YT
    for k in range(M - 1, -1, -1):
        S = inputs(k) if callable(inputs) else np.asarray(inputs)[k]
        S = np.asarray(S, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        if driver is None:
            b = 0.0
        elif callable(driver):
            b = driver(k, t[k])
        else:
            b = np.asarray(driver, dtype=float)[k]
        ty = Y[k + 1] - b * dt
        if S.ndim == 2:
            A = basis.design(S)[:, None, :]
            coef, cnd = fit_batched(A, ty[:, None, :], ridge, workers)
            Y[k] = evaluate(A, coef)[:, 0, :]
        else:
            A = basis.design(S)
            coef, cnd = fit_batched(A, ty[..., None], ridge, workers)
            Y[k] = evaluate(A, coef)[..., 0]
        # Y_k is F_k-measurable, so subtracting it is a zero-mean control variate
        tz = (Y[k + 1] - Y[k])[:, :, None] * inc[k][:, None, :]
        if S.ndim == 2:
            coef, _ = fit_batched(A, tz.reshape(N, 1, d * w), ridge, workers)
            Z[k] = evaluate(A, coef)[:, 0, :].reshape(N, d, w) / dt
        else:
            coef, _ = fit_batched(A, tz, ridge, workers)
            Z[k] = evaluate(A, coef) / dt
        cond[k] = np.max(cnd)
    Z[M] = Z[M - 1]
    return BackwardSolution(Y, Z, cond)


# ---------------------------------------------------------------------------
# equilibrium


@dataclass(frozen=True)
class PicardConfig:
    """Outer fixed-point settings.

    ``damping`` relaxes the frozen mean-field moments between iterations,
    ``exploration`` sets the spread added to the regression cloud so that
    every input stays identifiable.
    """

    max_iters: int = 100
    damping: float = 0.5
    tol: float = 1e-6
    ridge: float = 1e-8
    exploration: float = 0.5
    inner: int = 3

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise InvalidArgument("max_iters must be >= 1")
        if not 0 < self.damping <= 1:
            raise InvalidArgument("damping must lie in (0, 1]")
        if not self.tol > 0:
            raise InvalidArgument("tol must be positive")
        if self.ridge < 0:
            raise InvalidArgument("ridge must be >= 0")
        if self.exploration < 0 or self.inner < 1:
            raise InvalidArgument("exploration must be >= 0 and inner >= 1")


@dataclass
class _Problem:
    c: CoefficientSet
    grid: TimeGrid
    basis: RegressionBasis
    cfg: PicardConfig
    ordinary: bool
    random_yT: bool
    y0: np.ndarray
    yT: np.ndarray
    x0: Optional[np.ndarray]
    By: np.ndarray
    dBy: np.ndarray
    dBx: Optional[np.ndarray]
    jitter: np.ndarray
    workers: Optional[int]
    cond: np.ndarray = field(default=None)

    def stack(self, X, P, B) -> np.ndarray:
        cols = ([X] if self.ordinary else []) + [P, B] + ([self.yT] if self.random_yT else [])
        return np.stack(cols, axis=-1)

    def design(self, X, P, B) -> np.ndarray:
        return self.basis.design(self.stack(X, P, B))


def _jittered(v: np.ndarray, noise: np.ndarray, scale: float) -> np.ndarray:
    rms = np.sqrt(path_mean(v * v))
    return v + scale * (1.0 + rms) * noise


def _sweep(pb: _Problem, Xc, Pc, my, mx):
    """Backward pass over the cloud: coefficients of Y_k and p^{xx}_k in the features."""
    c, g = pb.c, pb.grid
    M, dt, t = g.steps, g.dt, g.times
    d = pb.y0.shape[1]
    psi: list = [None] * (M + 1)
    phi: list = [None] * (M + 1)
    cond = np.zeros(M)
    for k in range(M - 1, -1, -1):
        Xk = Xc[k] if pb.ordinary else None
        A = pb.design(Xk, Pc[k], pb.By[k])
        if k + 1 < M:
            yg = evaluate(A, psi[k + 1])[..., 0]
            pg = evaluate(A, phi[k + 1])[..., 0] if pb.ordinary else None
        else:
            yg = pb.yT
            pg = c.terminal_adjoint(Xk) if pb.ordinary else None
        Bn = pb.By[k] + pb.dBy[k]
        for _ in range(pb.cfg.inner):
            D = c.tagged_adjoint_drift(t[k], yg, my[k], mx[k])
            pp = Pc[k] + D * dt
            uy = c.tagged_control(t[k], pp)
            Xn = None
            if pb.ordinary:
                Xn = Xk + c.b_x(t[k], c.ordinary_control(t[k], pg)) * dt + c.sigma * pb.dBx[k]
            if k + 1 == M:
                Yn = pb.yT
                Pn = c.terminal_adjoint(Xn) if pb.ordinary else None
            else:
                An = pb.design(Xn, pp, Bn)
                Yn = evaluate(An, psi[k + 1])[..., 0]
                Pn = evaluate(An, phi[k + 1])[..., 0] if pb.ordinary else None
            targets = [Yn - c.b_y(t[k], uy, pb.By[k]) * dt]
            if pb.ordinary:
                G = c.ordinary_adjoint_drift(t[k + 1], Xn, Yn) if k + 1 < M else 0.0
                targets.append(Pn - G * dt)
            coef, cnd = fit_batched(A, np.stack(targets, axis=-1), pb.cfg.ridge, pb.workers)
            fit = evaluate(A, coef)
            yg = fit[..., 0]
            pg = fit[..., 1] if pb.ordinary else None
        psi[k] = coef[..., 0:1]
        phi[k] = coef[..., 1:2] if pb.ordinary else None
        cond[k] = np.max(cnd)
    return psi, phi, cond


def _initial_adjoint(pb: _Problem, psi0, X0) -> tuple[np.ndarray, int]:
    """Solve p = init * (Y_0(p) - y0) path by path with Newton steps."""
    c = pb.c
    p = np.zeros_like(pb.y0)
    if c.init == 0:
        return p, 0
    B0 = pb.By[0]

    def resid(q):
        return q - c.initial_adjoint(evaluate(pb.design(X0, q, B0), psi0)[..., 0], pb.y0)

    for it in range(1, 31):
        h = 1e-6 * (1.0 + np.abs(p))
        slope = (resid(p + h) - resid(p - h)) / (2 * h)
        step = resid(p) / slope
        p = p - step
        if np.all(np.abs(step) <= 1e-13 * (1.0 + np.abs(p))):
            return p, it
    return p, 30


def _forward(pb: _Problem, psi, phi, my, mx):
    c, g = pb.c, pb.grid
    M, dt, t = g.steps, g.dt, g.times
    N, d = pb.y0.shape
    Y = np.empty((M + 1, N, d))
    P = np.empty((M + 1, N, d))
    Uy = np.empty((M + 1, N, d))
    X = Pxx = Ux = None
    if pb.ordinary:
        X = np.empty((M + 1, N, d))
        Pxx = np.empty((M + 1, N, d))
        Ux = np.empty((M + 1, N, d))
        X[0] = pb.x0
    P[0], newton = _initial_adjoint(pb, psi[0], X[0] if pb.ordinary else None)
    for k in range(M):
        A = pb.design(X[k] if pb.ordinary else None, P[k], pb.By[k])
        Y[k] = evaluate(A, psi[k])[..., 0]
        if k == 0:
            P[0] = c.initial_adjoint(Y[0], pb.y0)
        D = c.tagged_adjoint_drift(t[k], Y[k], my[k], mx[k])
        Uy[k] = c.tagged_control(t[k], P[k] + D * dt)
        P[k + 1] = P[k] + D * dt
        if pb.ordinary:
            Pxx[k] = evaluate(A, phi[k])[..., 0]
            Ux[k] = c.ordinary_control(t[k], Pxx[k])
            X[k + 1] = X[k] + c.b_x(t[k], Ux[k]) * dt + c.sigma * pb.dBx[k]
            if not np.isfinite(X[k + 1]).all():
                raise ForwardBlowUp(k + 1)
        if not np.isfinite(P[k + 1]).all():
            raise ForwardBlowUp(k + 1)
    Y[M] = pb.yT
    Uy[M] = c.tagged_control(t[M], P[M])
    if pb.ordinary:
        Pxx[M] = c.terminal_adjoint(X[M])
        Ux[M] = c.ordinary_control(t[M], Pxx[M])
    return {"Y": Y, "P": P, "Uy": Uy, "X": X, "Pxx": Pxx, "Ux": Ux}, newton


def _rel_change(new: dict, old: Optional[dict]) -> float:
    if old is None:
        return float("inf")
    worst = 0.0
    for key, a in new.items():
        if a is None:
            continue
        num = np.sqrt(path_mean(((a - old[key]) ** 2).reshape(a.shape[0] * a.shape[1], -1)).sum())
        den = np.sqrt(path_mean((a ** 2).reshape(a.shape[0] * a.shape[1], -1)).sum())
        worst = max(worst, float(num / den) if den > 0 else float(num))
    return worst


def _integrands(pb: _Problem, st: dict, my, mx):
    """Regress Z, q^{xx} and p^{yx}, q^{yx} on the final on-policy paths."""
    c, g = pb.c, pb.grid
    M, dt, t = g.steps, g.dt, g.times
    N, d = pb.y0.shape
    inc = np.concatenate([pb.dBx, pb.dBy], axis=-1) if pb.ordinary else pb.dBy
    w = inc.shape[-1]
    Z = np.zeros((M + 1, N, d, w))
    qxx = qyx = pyx = None
    if pb.ordinary:
        qxx = np.zeros((M + 1, N, d, w))
        qyx = np.zeros((M + 1, N, d, w))
        pyx = np.zeros((M + 1, N, d))
    cond = np.zeros(M)
    for k in range(M - 1, -1, -1):
        A = pb.design(st["X"][k] if pb.ordinary else None, st["P"][k], pb.By[k])
        dB = inc[k][:, None, :]
        # subtracting time-k values leaves the conditional mean unchanged and cuts variance
        parts = [(st["Y"][k + 1] - st["Y"][k])[..., None] * dB]
        if pb.ordinary:
            drift = assemble_adjoint_steps(
                c, AdjointPoint(t=t[k + 1], y=st["Y"][k + 1], mean_y=my[k + 1],
                                x=st["X"][k + 1], mean_x=mx[k + 1])
            ).pyx
            ahead = pyx[k + 1] - (drift * dt if k + 1 < M else 0.0)
            parts += [(st["Pxx"][k + 1] - st["Pxx"][k])[..., None] * dB, ahead[..., None], pyx[k + 1][..., None] * dB]
        coef, cnd = fit_batched(A, np.concatenate(parts, axis=-1), pb.cfg.ridge, pb.workers)
        fit = evaluate(A, coef)
        Z[k] = fit[..., :w] / dt
        if pb.ordinary:
            qxx[k] = fit[..., w:2 * w] / dt
            pyx[k] = fit[..., 2 * w]
            qyx[k] = fit[..., 2 * w + 1:] / dt
        cond[k] = np.max(cnd)
    Z[M] = Z[M - 1]
    if pb.ordinary:
        qxx[M] = qxx[M - 1]
        qyx[M] = qyx[M - 1]
        pyx[M] = 0.0
    return Z, qxx, qyx, pyx, cond


def _forward_cross(pb: _Problem, st: dict) -> np.ndarray:
    """p^{xy}: starts at zero and accumulates -(d_y H^x) dt."""
    c, g = pb.c, pb.grid
    M, dt, t = g.steps, g.dt, g.times
    pxy = np.zeros_like(st["X"])
    for k in range(M):
        drift = assemble_adjoint_steps(
            c, AdjointPoint(t=t[k], y=st["Y"][k], mean_y=np.zeros(pb.y0.shape[1]), x=st["X"][k])
        ).pxy
        pxy[k + 1] = pxy[k] + drift * dt
    return pxy


def solve_equilibrium(
    spec,
    grid: Optional[TimeGrid] = None,
    n_paths: Optional[int] = None,
    seed: Optional[int] = None,
    cfg: Optional[PicardConfig] = None,
    degree: Optional[int] = None,
    workers: Optional[int] = None,
    verbose: bool = False,
) -> SolveResult:
    """Solve the coupled forward-backward system by regression sweeps.

    Each outer iteration freezes the mean-field moments, fits Y_k and
    p^{xx}_k as functions of the per-coordinate state (X, p^{yy}, B^y, y_T)
    by a backward sweep with one-step re-simulation, then runs the state
    and forward adjoints forward with those fits. Moments are relaxed with
    the damping factor. Non-convergence is reported, not raised.
    """
    c = CoefficientSet.from_spec(spec)
    if not c.is_concave:
        raise UnsupportedScenario("Hamiltonians must be strictly concave in the controls")
    solver = spec.solver
    grid = grid or make_grid(spec.horizon, solver.steps)
    N = int(n_paths or solver.paths)
    seed = int(solver.seed if seed is None else seed)
    cfg = cfg or solver.picard
    degree = int(solver.degree if degree is None else degree)
    d, M = spec.dim, grid.steps
    tg, od = spec.tagged, spec.ordinary
    ordinary = od is not None
    random_yT = tg.yT_std > 0
    names = (("x",) if ordinary else ()) + ("p", "b") + (("yT",) if random_yT else ())
    basis = RegressionBasis("polynomial", degree, names)
    if N <= basis.size(len(names)):
        raise InvalidArgument("too few paths for the regression basis")

    bundle = sample_brownian(grid, N, (d if ordinary else 0, d), seed, workers)
    y0 = sample_gaussian(tg.y0_mean, tg.y0_std, N, seed, "initial_y", workers)
    yT = sample_gaussian(tg.yT_mean, tg.yT_std, N, seed, "terminal_y", workers)
    x0 = sample_gaussian(od.x0_mean, od.x0_std, N, seed, "initial_x", workers) if ordinary else None
    jitter = stream_normals(seed, "explore", N, 2 * d, M + 1, workers)
    By = bundle.By
    pb = _Problem(c, grid, basis, cfg, ordinary, random_yT, y0, yT, x0, By, bundle.dBy,
                  bundle.dBx if ordinary else None, jitter, workers)

    # uncontrolled starting cloud
    P = np.zeros((M + 1, N, d))
    X = None
    if ordinary:
        X = x0[None] + c.sigma * bundle.Bx
    uses_my = c.attr != 0
    uses_mx = ordinary and c.rep_crowd != 0
    my = np.broadcast_to(path_mean(yT), (M + 1, d)).copy()
    mx = path_mean(X, axis=1) if ordinary else np.zeros((M + 1, d))

    history: list[float] = []
    old = None
    converged = False
    st = None
    newton = 0
    for it in range(cfg.max_iters):
        Pc = np.stack([_jittered(P[k], jitter[k, :, :d], cfg.exploration) for k in range(M + 1)])
        Xc = None
        if ordinary:
            Xc = np.stack([_jittered(X[k], jitter[k, :, d:], cfg.exploration) for k in range(M + 1)])
        psi, phi, cond = _sweep(pb, Xc, Pc, my, mx)
        st, newton = _forward(pb, psi, phi, my, mx)
        my_new = path_mean(st["Y"], axis=1)
        mx_new = path_mean(st["X"], axis=1) if ordinary else mx
        gap = 0.0
        if uses_my:
            gap = max(gap, float(np.max(np.abs(my_new - my)) / (1.0 + np.max(np.abs(my_new)))))
        if uses_mx:
            gap = max(gap, float(np.max(np.abs(mx_new - mx)) / (1.0 + np.max(np.abs(mx_new)))))
        res = max(_rel_change(st, old), gap)
        history.append(res)
        if verbose:
            print(f"iteration {it + 1}: residual {res:.3e}", flush=True)
        if res < cfg.tol:
            converged = True
            break
        old = st
        P, X = st["P"], st["X"]
        a = cfg.damping
        if uses_my:
            my = (1 - a) * my + a * my_new
        if uses_mx:
            mx = (1 - a) * mx + a * mx_new

    Z, qxx, qyx, pyx, zcond = _integrands(pb, st, my, mx)
    w = Z.shape[-1]
    adj = AdjointEnsemble(
        pyy=st["P"],
        qyy=np.zeros((M + 1, N, d, w)),
        pxx=st["Pxx"],
        pxy=_forward_cross(pb, st) if ordinary else None,
        pyx=pyx,
        qxx=qxx,
        qxy=np.zeros((M + 1, N, d, w)) if ordinary else None,
        qyx=qyx,
    )
    ens = Ensemble(grid=grid, Y=st["Y"], Z=Z, Uy=st["Uy"], X=st["X"], Ux=st["Ux"])
    moment_gap = float(np.max(np.abs(path_mean(st["Y"], axis=1) - my))) if uses_my else 0.0
    if uses_mx:
        moment_gap = max(moment_gap, float(np.max(np.abs(path_mean(st["X"], axis=1) - mx))))
    diagnostics = {
        "solver": "lsmc",
        "converged": converged,
        "iterations": len(history),
        "residuals": history,
        "tol": cfg.tol,
        "basis": {"family": basis.family, "degree": basis.degree, "inputs": list(basis.inputs)},
        "condition_sweep_max": float(np.max(cond)),
        "condition_integrands_max": float(np.max(zcond)),
        "degenerate_steps": int(np.sum(~(cond < COND_LIMIT))),
        "initial_adjoint_newton_steps": int(newton),
        "moment_gap": moment_gap,
    }
    samples = Samples(y0=y0, yT=yT, x0=x0)
    return SolveResult(spec, "lsmc", ens, adj, samples, bundle, converged, diagnostics)
