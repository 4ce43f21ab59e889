"""Model-based baselines: proximal maps, PDHG and stochastic PDHG.

Problem: ``min_x 1/2 ||A x - b||^2 + lam * TV(x)`` with isotropic TV
(forward differences, Neumann boundary).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import linops, metrics


@dataclass(frozen=True)
class FidelityLS:
    """``f_b(z) = weight/2 ||z - b||^2`` and its conjugate's prox."""

    b: np.ndarray
    weight: float = 1.0

    def __call__(self, z) -> float:
        return 0.5 * self.weight * float(np.sum((np.asarray(z, dtype=np.float64) - self.b) ** 2))

    def prox(self, z, t):
        """``prox_{t f}(z)``."""
        return (np.asarray(z) + t * self.weight * self.b) / (1 + t * self.weight)

    def prox_conj(self, y, sigma):
        """``prox_{sigma f*}(y)`` by the Moreau identity."""
        y = np.asarray(y)
        return y - sigma * self.prox(y / sigma, 1.0 / sigma)


def prox_fstar_ls(y, sigma: float, b):
    """``prox_{sigma f*}(y)`` for ``f(z) = 1/2 ||z - b||^2``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return (np.asarray(y) - sigma * np.asarray(b)) / (1 + sigma)


# ---------------------------------------------------------------------------
# total variation


def grad2d(u):
    """Forward differences with Neumann boundary; returns ``(2, H, W)``."""
    g = np.zeros((2,) + u.shape, dtype=np.float64)
    g[0, :-1] = u[1:] - u[:-1]
    g[1, :, :-1] = u[:, 1:] - u[:, :-1]
    return g


def div2d(p):
    """Negative adjoint of :func:`grad2d`."""
    py, px = p
    d = np.zeros(py.shape, dtype=np.float64)
    d[:-1] += py[:-1]
    d[1:] -= py[:-1]
    d[:, :-1] += px[:, :-1]
    d[:, 1:] -= px[:, :-1]
    return d


def tv(u) -> float:
    return float(np.sum(np.sqrt(np.sum(grad2d(u) ** 2, axis=0))))


def _square(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    side = math.isqrt(x.size)
    if side * side != x.size:
        raise ValueError("TV needs a square image")
    return x.reshape(side, side)


@dataclass
class TVResult:
    z: np.ndarray
    gap: float
    iters: int


def prox_tv(x, lam: float, iters: int = 100, tol: float = 0.0) -> TVResult:
    """``argmin_z 1/2 ||z - x||^2 + lam TV(z)`` by projected dual gradient.

    ``gap`` is the primal-dual gap of the returned pair; the loop stops
    early once it falls below ``tol``.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    shape = np.shape(x)
    u = _square(x)
    if lam == 0:
        return TVResult(np.array(x, dtype=np.float64).reshape(shape), 0.0, 0)
    p = np.zeros((2,) + u.shape)
    step = 0.25
    gap = math.inf
    k = 0
    for k in range(1, iters + 1):
        g = grad2d(div2d(p) - u / lam)
        p = p + step * g
        p /= np.maximum(1.0, np.sqrt(np.sum(p**2, axis=0)))
        if tol > 0 or k == iters:
            z = u - lam * div2d(p)
            primal = 0.5 * np.sum((z - u) ** 2) + lam * tv(z)
            dual = 0.5 * np.sum(u**2) - 0.5 * np.sum(z**2)
            gap = float(primal - dual)
            if gap <= tol:
                break
    z = u - lam * div2d(p)
    return TVResult(z.reshape(shape), gap, k)


# ---------------------------------------------------------------------------
# PDHG


@dataclass(frozen=True)
class PdhgConfig:
    sigma: float
    tau: float
    beta: float = 1.0
    K: int = 100
    tv_weight: float = 0.0
    tv_iters: int = 100
    op_norm: float | None = None  # when given, the step condition is checked

    def __post_init__(self):
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError("sigma and tau must be positive")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if self.K < 0 or self.tv_weight < 0:
            raise ValueError("K and tv_weight must be >= 0")
        if self.op_norm is not None and self.sigma * self.tau * self.op_norm**2 > 1 + 1e-12:
            raise ValueError("step sizes violate stability: sigma*tau*||A||^2 > 1")

    @classmethod
    def default(cls, op, K=100, tv_weight=0.0, beta=1.0, **kw) -> "PdhgConfig":
        L = linops.operator_norm(op, 100)
        return cls(0.99 / L, 0.99 / L, beta, K, tv_weight, op_norm=L, **kw)


@dataclass
class SolveResult:
    x: np.ndarray
    trace: list
    iterates: list = field(default_factory=list)
    rows_forward: int = 0
    rows_adjoint: int = 0
    n_rows: int = 1

    @property
    def calls(self) -> float:
        """Full-operator-equivalent calls on ``A`` and ``A^T``."""
        return (self.rows_forward + self.rows_adjoint) / self.n_rows


def _objective(op, x, b, lam):
    r = linops.apply(op, x) - b
    val = 0.5 * float(r @ r)
    if lam:
        val += lam * tv(_square(x))
    return val


def _prox_r(x, cfg):
    if cfg.tv_weight == 0:
        return x
    return prox_tv(x, cfg.tau * cfg.tv_weight, cfg.tv_iters).z


def _trace_row(k, obj, x, x_true):
    return {"iter": k, "objective": obj, "psnr": metrics.psnr(x, x_true) if x_true is not None else math.nan}


def _check_divergence(obj, obj0):
    if not np.isfinite(obj) or obj > 1e3 * max(obj0, 1e-12):
        raise FloatingPointError("step sizes violate stability")


def pdhg_solve(op, b, cfg: PdhgConfig, x0, x_true=None, keep_iterates=False) -> SolveResult:
    """Primal-dual hybrid gradient with over-relaxation ``beta``."""
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    if x.size != op.d or b.size != op.n:
        raise ValueError("dimension mismatch")
    y = np.zeros(op.n)
    xbar = x.copy()
    obj0 = _objective(op, x, b, cfg.tv_weight)
    trace = [_trace_row(0, obj0, x, x_true)]
    res = SolveResult(x, trace, n_rows=op.n)
    if keep_iterates:
        res.iterates.append(x.copy())
    for k in range(1, cfg.K + 1):
        y = prox_fstar_ls(y + cfg.sigma * linops.apply(op, xbar), cfg.sigma, b)
        x_new = _prox_r(x - cfg.tau * linops.adjoint(op, y), cfg)
        xbar = x_new + cfg.beta * (x_new - x)
        x = x_new
        res.rows_forward += op.n
        res.rows_adjoint += op.n
        obj = _objective(op, x, b, cfg.tv_weight)
        _check_divergence(obj, obj0)
        trace.append(_trace_row(k, obj, x, x_true))
        if keep_iterates:
            res.iterates.append(x.copy())
    res.x = x
    return res


def spdhg_solve(op, b, part: linops.SubsetPartition, cfg: PdhgConfig, x0, x_true=None, schedule="cyclic", seed=None,
                keep_iterates=False) -> SolveResult:
    """Stochastic PDHG touching one subset per iteration.

    Keeps per-subset dual variables ``y_i`` and adjoint memories
    ``h_i = (S_i A)^T y_i``; the primal step uses ``sum_j h_j``.  No dual
    extrapolation is applied.  ``cfg.K`` counts single-subset iterations.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    if x.size != op.d or b.size != op.n:
        raise ValueError("dimension mismatch")
    op = op.with_partition(part)
    m = part.m
    if schedule == "uniform_random":
        if seed is None:
            raise ValueError("uniform_random schedule requires a seed")
        order = np.random.default_rng(seed).integers(0, m, cfg.K)
    elif schedule == "cyclic":
        order = np.arange(cfg.K) % m
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    ys = [np.zeros(op.rows(i)) for i in range(m)]
    hs = [np.zeros(op.d) for _ in range(m)]
    z = np.zeros(op.d)
    xbar = x.copy()
    obj0 = _objective(op, x, b, cfg.tv_weight)
    trace = [_trace_row(0, obj0, x, x_true)]
    res = SolveResult(x, trace, n_rows=op.n)
    if keep_iterates:
        res.iterates.append(x.copy())
    for k in range(1, cfg.K + 1):
        i = int(order[k - 1])
        rows = part.row_ranges[i]
        ys[i] = prox_fstar_ls(ys[i] + cfg.sigma * linops.apply(op, xbar, i), cfg.sigma, b[rows])
        h = linops.adjoint(op, ys[i], i)
        z = z + (h - hs[i]) if m > 1 else h
        hs[i] = h
        x_new = _prox_r(x - cfg.tau * z, cfg)
        xbar = x_new + cfg.beta * (x_new - x)
        x = x_new
        res.rows_forward += rows.size
        res.rows_adjoint += rows.size
        obj = _objective(op, x, b, cfg.tv_weight)
        _check_divergence(obj, obj0)
        trace.append(_trace_row(k, obj, x, x_true))
        if keep_iterates:
            res.iterates.append(x.copy())
    res.x = x
    return res


def write_trace_csv(path, trace, header: str | None = None):
    with open(path, "w", newline="") as f:
        if header:
            f.write(f"# {header}\n")
        w = csv.DictWriter(f, fieldnames=["iter", "objective", "psnr"], lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
