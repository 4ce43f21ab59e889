"""Numerical checks of the estimation-error theory for simplified LSPD.

Descent cones are handled through two primitives of :class:`ManifoldModel`:

* ``cone_pieces(x_true)`` -- orthonormal bases ``Q`` whose spans cover the
  cone up to sign.  Quadratic forms are even, so their extreme values over
  ``C ∩ S^{d-1}`` equal the extreme eigenvalues of ``Q^T M Q`` over pieces.
* ``cone_support(x_true, g)`` -- ``sup_{v ∈ C, ||v|| <= 1} <g, v>`` in
  closed form.

For the s-sparse set, the cone at ``x`` with support ``S0`` is the union
over supports ``T`` (``|T| = s``) of ``span(e_T) + ray(-x_{S0 \\ T})``.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.optimize import lsq_linear
from scipy.special import comb, gammaln

from . import linops, unroll

MAX_PIECES = 50_000


# ---------------------------------------------------------------------------
# manifolds


class ManifoldModel:
    """Constraint set with exact projection and descent-cone geometry.

    ``kind`` is ``"sparse"`` (needs ``s``), ``"subspace"`` (needs an
    orthonormal ``basis`` of shape ``(d, k)``) or ``"ball"`` (``radius``).
    With ``eps > 0`` the projector adds a random tangent perturbation of
    norm exactly ``eps`` after the exact projection.
    """

    def __init__(self, kind: str, d: int, s: int | None = None, basis=None, radius: float = 1.0, eps: float = 0.0,
                 seed: int = 0):
        if kind not in ("sparse", "subspace", "ball"):
            raise ValueError(f"unknown manifold kind {kind!r}")
        if eps < 0:
            raise ValueError("eps must be >= 0")
        self.kind, self.d, self.eps = kind, d, float(eps)
        self.s = s
        self.radius = float(radius)
        self._rng = np.random.default_rng(seed)
        if kind == "sparse":
            if s is None or not 1 <= s <= d:
                raise ValueError("sparse manifold needs 1 <= s <= d")
        if kind == "subspace":
            U = np.asarray(basis, dtype=np.float64)
            if U.ndim != 2 or U.shape[0] != d:
                raise ValueError("subspace basis must have shape (d, k)")
            if not np.allclose(U.T @ U, np.eye(U.shape[1]), atol=1e-10):
                raise ValueError("subspace basis must be orthonormal")
            self.basis = U

    @property
    def convex(self) -> bool:
        return self.kind != "sparse" or self.s == self.d

    @property
    def kappa(self) -> int:
        return 1 if self.convex else 2

    # projection --------------------------------------------------------
    def exact_projection(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "sparse":
            keep = np.argsort(-np.abs(x), kind="stable")[: self.s]
            out = np.zeros_like(x)
            out[keep] = x[keep]
            return out
        if self.kind == "subspace":
            return self.basis @ (self.basis.T @ x)
        nrm = np.linalg.norm(x)
        return x if nrm <= self.radius else x * (self.radius / nrm)

    def tangent(self, z) -> np.ndarray:
        """Random unit vector tangent to the manifold at ``z``."""
        if self.kind == "sparse":
            t = np.zeros(self.d)
            supp = np.flatnonzero(z)
            if supp.size == 0:
                supp = np.arange(self.s)
            t[supp] = self._rng.standard_normal(supp.size)
        elif self.kind == "subspace":
            t = self.basis @ self._rng.standard_normal(self.basis.shape[1])
        else:
            t = self._rng.standard_normal(self.d)
            nz = np.linalg.norm(z)
            if nz >= self.radius * (1 - 1e-12) and nz > 0:
                t -= (t @ z) / nz**2 * z
        return t / np.linalg.norm(t)

    def __call__(self, x) -> np.ndarray:
        z = self.exact_projection(x)
        if self.eps > 0:
            z = z + self.eps * self.tangent(z)
        return z

    def contains(self, x, tol=1e-10) -> bool:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "sparse":
            return np.count_nonzero(np.abs(x) > tol) <= self.s
        return np.linalg.norm(x - self.exact_projection(x)) <= tol * max(1.0, np.linalg.norm(x))

    def sample_point(self, rng) -> np.ndarray:
        if self.kind == "sparse":
            x = np.zeros(self.d)
            supp = rng.choice(self.d, self.s, replace=False)
            x[supp] = rng.choice([-1.0, 1.0], self.s) * rng.uniform(0.5, 1.5, self.s)
            return x
        if self.kind == "subspace":
            return self.basis @ rng.standard_normal(self.basis.shape[1])
        x = rng.standard_normal(self.d)
        return x / np.linalg.norm(x) * self.radius * rng.uniform(0.2, 0.8)

    # descent cone ------------------------------------------------------
    def _sparse_parts(self, x):
        S0 = np.flatnonzero(x)
        return S0, np.setdiff1d(np.arange(self.d), S0)

    def n_pieces(self, x_true) -> int:
        if self.kind == "sparse":
            return int(comb(self.d, self.s, exact=True))
        return 1

    def cone_pieces(self, x_true) -> list:
        """Orthonormal bases covering the descent cone at ``x_true`` up to sign."""
        x = np.asarray(x_true, dtype=np.float64)
        if self.kind == "subspace":
            return [self.basis]
        if self.kind == "ball":
            return [np.eye(self.d)]
        if self.n_pieces(x) > MAX_PIECES:
            raise ValueError("too many cone pieces for exact enumeration")
        S0 = set(np.flatnonzero(x).tolist())
        out = []
        for T in itertools.combinations(range(self.d), self.s):
            cols = [np.eye(self.d)[:, list(T)]]
            rest = sorted(S0 - set(T))
            if rest:
                r = np.zeros(self.d)
                r[rest] = -x[rest]
                cols.append((r / np.linalg.norm(r))[:, None])
            out.append(np.hstack(cols))
        return out

    def cone_support(self, x_true, g) -> float:
        """``sup <g, v>`` over the cone intersected with the unit ball."""
        g = np.asarray(g, dtype=np.float64)
        x = np.asarray(x_true, dtype=np.float64)
        if self.kind == "subspace":
            return float(np.linalg.norm(self.basis.T @ g))
        if self.kind == "ball":
            nx = np.linalg.norm(x)
            if nx < self.radius * (1 - 1e-12):
                return float(np.linalg.norm(g))
            xh = x / nx
            gx = g @ xh
            return float(np.linalg.norm(g if gx <= 0 else g - gx * xh))
        S0, out = self._sparse_parts(x)
        s = self.s
        g_out = np.sort(g[out] ** 2)[::-1]
        best = 0.0
        for j in range(len(S0) + 1):
            for J in itertools.combinations(range(len(S0)), j):
                J = list(J)
                if j > s:
                    continue
                inside = S0[J]
                missing = np.delete(S0, J)
                val = float(np.sum(g[inside] ** 2)) + float(np.sum(g_out[: s - j]))
                if missing.size:
                    r = -x[missing]
                    proj = float(g[missing] @ r) / np.linalg.norm(r)
                    val += max(0.0, proj) ** 2
                best = max(best, val)
        return math.sqrt(best)

    def cone_support_enumerated(self, x_true, g) -> float:
        """Brute-force ``cone_support`` for sparse sets: every support ``T``,
        with the projection onto each piece solved numerically."""
        if self.kind != "sparse":
            return self.cone_support(x_true, g)
        x = np.asarray(x_true, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        S0 = set(np.flatnonzero(x).tolist())
        best = 0.0
        for T in itertools.combinations(range(self.d), self.s):
            E = np.eye(self.d)[:, list(T)]
            rest = sorted(S0 - set(T))
            if rest:
                r = np.zeros(self.d)
                r[rest] = -x[rest]
                M = np.hstack([E, r[:, None]])
                lb = np.r_[np.full(len(T), -np.inf), 0.0]
            else:
                M, lb = E, np.full(len(T), -np.inf)
            sol = lsq_linear(M, g, bounds=(lb, np.inf), method="bvls", tol=1e-14)
            best = max(best, float(np.linalg.norm(M @ sol.x)))
        return best

    def sample_cone(self, x_true, count: int, rng) -> np.ndarray:
        """Unit vectors of the descent cone, shape ``(count, d)``."""
        x = np.asarray(x_true, dtype=np.float64)
        out = np.empty((count, self.d))
        if self.kind == "sparse":
            S0, rest = self._sparse_parts(x)
            for c in range(count):
                j = int(rng.integers(0, min(len(S0), self.s) + 1))
                J = rng.choice(S0, j, replace=False) if j else np.array([], dtype=int)
                fill = rng.choice(rest, self.s - j, replace=False) if self.s > j else np.array([], dtype=int)
                z = np.zeros(self.d)
                T = np.concatenate([J, fill]).astype(int)
                z[T] = rng.standard_normal(T.size) * rng.uniform(0.1, 3.0)
                v = z - x
                n = np.linalg.norm(v)
                if n == 0:
                    v = np.zeros(self.d)
                    v[T] = rng.standard_normal(T.size)
                    n = np.linalg.norm(v)
                out[c] = v / n
            return out
        if self.kind == "subspace":
            v = rng.standard_normal((count, self.basis.shape[1])) @ self.basis.T
        else:
            v = rng.standard_normal((count, self.d))
            nx = np.linalg.norm(x)
            if nx >= self.radius * (1 - 1e-12):
                xh = x / nx
                dots = v @ xh
                v[dots > 0] -= 2 * dots[dots > 0, None] * xh
        if count == 0:
            raise ValueError("degenerate cone: no samples")
        return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Gaussian widths and norms


def expected_norm_p(n: int) -> float:
    """``E ||u_n||_2`` for ``u_n ~ N(0, I_n)``: ``sqrt(2) Γ((n+1)/2) / Γ(n/2)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return float(math.sqrt(2.0) * math.exp(gammaln((n + 1) / 2) - gammaln(n / 2)))


def gaussian_width_mc(support, dim: int | None = None, trials: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo Gaussian width ``E sup_{v in set} <v, u>``.

    ``support`` is either a callable ``u -> sup_v <v, u>`` (then ``dim`` is
    required) or an array of points, one per row.  Returns
    ``(mean, standard error)``.
    """
    if trials < 100:
        raise ValueError("trials must be >= 100")
    if callable(support):
        if dim is None:
            raise ValueError("dim is required with a callable support")
        fn = support
    else:
        pts = np.atleast_2d(np.asarray(support, dtype=np.float64))
        if pts.size == 0:
            raise ValueError("empty set")
        dim = pts.shape[1]

        def fn(u):
            return float(np.max(pts @ u))

    rng = np.random.default_rng(seed)
    vals = np.array([fn(rng.standard_normal(dim)) for _ in range(trials)])
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(trials))


def cone_width(manifold: ManifoldModel, x_true, trials=2000, seed=0, B=None) -> tuple[float, float]:
    """Gaussian width of ``B C ∩ S^{d-1}``.

    With ``B`` given the width is taken over the union of the images of
    the cone pieces, which upper-bounds the true value for sparse cones.
    """
    d = manifold.d
    if B is None:
        return gaussian_width_mc(lambda u: manifold.cone_support(x_true, u), d, trials, seed)
    B = np.asarray(B, dtype=np.float64)
    bases = [np.linalg.qr(B @ Q)[0] for Q in manifold.cone_pieces(x_true)]
    return gaussian_width_mc(lambda u: max(float(np.linalg.norm(Q.T @ u)) for Q in bases), d, trials, seed)


# ---------------------------------------------------------------------------
# restricted constants


@dataclass
class RestrictedConstants:
    mu_c: float
    L_c: float
    L_s: float
    method: dict = field(default_factory=dict)
    mu_c_sampled: float = math.nan
    L_c_sampled: float = math.nan
    samples: int = 0

    @property
    def alpha(self) -> float:
        return 2 * (1 - self.mu_c / self.L_s)


def _dense(op) -> np.ndarray:
    return op.dense() if isinstance(op, linops.LinearOperator) else np.asarray(op, dtype=np.float64)


def _subset_rows(op, part):
    if part is None:
        return [np.arange(op.n)]
    return list(part.row_ranges)


def subset_smoothness(op, part=None) -> float:
    """``L_s = max_i ||S_i A||^2 / q``; exact (SVD) for dense maps, power method otherwise."""
    rows = _subset_rows(op, part)
    q = rows[0].size
    if isinstance(op.matrix, np.ndarray):
        A = _dense(op)
        return max(float(np.linalg.norm(A[r], 2) ** 2) for r in rows) / q
    view = op if part is None else op.with_partition(part)
    return max(linops.operator_norm(view, 500, None if part is None else i) ** 2 for i in range(len(rows))) / q


def restricted_constants(op, part, manifold: ManifoldModel, x_true, samples: int = 1000, seed: int = 0,
                         exact: bool = True) -> RestrictedConstants:
    """Restricted strong convexity ``mu_c`` and restricted smoothness ``L_c``.

    Sampled values use ``samples`` random unit cone directions; exact values
    enumerate the cone pieces (when ``exact`` and feasible).  The returned
    ``mu_c``/``L_c`` are the exact values when available (never larger,
    resp. smaller, than the sampled ones), otherwise the sampled ones.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    A = _dense(op)
    n = A.shape[0]
    rows = _subset_rows(op, part)
    q = rows[0].size
    V = manifold.sample_cone(x_true, samples, np.random.default_rng(seed))
    if V.size == 0:
        raise ValueError("degenerate cone: no samples")
    mu_s = float(np.min(np.sum((V @ A.T) ** 2, axis=1))) / n
    Lc_s = max(float(np.max(np.sum((V @ A[r].T) ** 2, axis=1))) for r in rows) / q
    L_s = subset_smoothness(op, part)
    method = {"mu_c": "sampled-min", "L_c": "sampled-max", "L_s": "svd" if isinstance(op.matrix, np.ndarray) else "power"}
    mu, Lc = mu_s, Lc_s
    if exact and manifold.n_pieces(x_true) <= MAX_PIECES:
        pieces = manifold.cone_pieces(x_true)
        grams = [A.T @ A] + [A[r].T @ A[r] for r in rows]
        lo, hi = math.inf, 0.0
        for width in sorted({Q.shape[1] for Q in pieces}):
            Qs = np.stack([Q for Q in pieces if Q.shape[1] == width])
            ev = np.linalg.eigvalsh(np.einsum("pdi,de,pej->pij", Qs, grams[0], Qs))
            lo = min(lo, float(ev[:, 0].min()))
            for Gi in grams[1:]:
                ev = np.linalg.eigvalsh(np.einsum("pdi,de,pej->pij", Qs, Gi, Qs))
                hi = max(hi, float(ev[:, -1].max()))
        mu, Lc = lo / n, hi / q
        method.update(mu_c="enumerated", L_c="enumerated")
    return RestrictedConstants(mu, Lc, L_s, method, mu_s, Lc_s, samples)


def delta_estimate(op, part, manifold: ManifoldModel, x_true, tau: float, w=None, noise_sigma: float = 0.0,
                   trials: int = 200, seed: int = 0) -> tuple[float, float]:
    """``2 tau E_w max_i sup_{v ∈ C ∩ B^d} v^T A^T S_i^T S_i w``.

    ``w`` fixed gives a single evaluation; otherwise ``w ~ N(0, sigma^2 I)``
    is resampled ``trials`` times.  Returns ``(delta, standard error)``.
    """
    A = _dense(op)
    rows = _subset_rows(op, part)

    def one(wv):
        return max(manifold.cone_support(x_true, A[r].T @ wv[r]) for r in rows)

    if w is not None:
        return 2 * tau * one(np.asarray(w, dtype=np.float64)), 0.0
    if noise_sigma == 0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    vals = np.array([one(noise_sigma * rng.standard_normal(A.shape[0])) for _ in range(trials)])
    return float(2 * tau * vals.mean()), float(2 * tau * vals.std(ddof=1) / math.sqrt(trials))


# ---------------------------------------------------------------------------
# bound curves


def thm31_curve(alpha: float, eps: float, delta: float, e0: float, K: int) -> dict:
    """Upper bound ``alpha^k e0 + (1 - alpha^k)/(1 - alpha) (eps + delta)``."""
    k = np.arange(K + 1, dtype=np.float64)
    if alpha == 1:
        curve = e0 + k * (eps + delta)
        limit = True
    else:
        ak = alpha**k
        curve = ak * e0 + (1 - ak) / (1 - alpha) * (eps + delta)
        limit = False
    return {"curve": curve, "alpha": alpha, "vacuous": alpha >= 1, "limit_form": limit}


def thm32_curve(L_c: float, L_s: float, eps: float, gamma: float, e0: float, K: int, convex: bool = True) -> dict:
    """Lower bound ``(1-gamma)^k (1 - L_c/L_s)^k e0 - (L_s/L_c) eps``, clamped at 0."""
    if not convex:
        raise ValueError("lower bound requires convex M")
    k = np.arange(K + 1, dtype=np.float64)
    raw = ((1 - gamma) * (1 - L_c / L_s)) ** k * e0 - (L_s / L_c) * eps
    return {"curve": np.maximum(raw, 0.0), "clamped": bool(np.any(raw < 0)), "vacuous": bool(np.all(raw <= 0))}


def thm33_alphas(n, d, q, m, sigma_a=1.0, sigma_b=1.0, W=0.0, theta=0.0, convex=False, K=1) -> dict:
    """Rates from the Gaussian-map case study and their probability labels."""
    kappa = 1 if convex else 2
    pn, pq = expected_norm_p(n), expected_norm_p(q)
    alpha_U = kappa * (1 - sigma_b * q * (pn - W - theta) ** 2 / (sigma_a * n * (pq + math.sqrt(d) + theta) ** 2))
    alpha_L = 1 - sigma_b * (pq + W + theta) ** 2 / (sigma_a * (pq - math.sqrt(d) - theta) ** 2)
    remark_W = kappa * (1 - (math.sqrt(n) - W) ** 2 / (math.sqrt(n) + math.sqrt(n * d / q)) ** 2)
    remark = kappa * (1 - n / (math.sqrt(n) + math.sqrt(n * d / q)) ** 2)
    return {
        "alpha_U": alpha_U,
        "alpha_L": alpha_L,
        "alpha_U_remark_W": remark_W,
        "alpha_U_remark": remark,
        "kappa": kappa,
        "p_n": pn,
        "p_q": pq,
        "prob_upper": 1 - m * K * math.exp(-(theta**2) / 2),
        "prob_lower": 1 - m * math.exp(-(theta**2) / 2),
        "vacuous_upper": alpha_U >= 1,
    }


def remark_threshold(d: int, corrected: bool = True) -> float:
    """Smallest minibatch size with remark rate below 1 for ``kappa = 2``.

    The remark's approximate rate is ``2(1 - 1/(1 + sqrt(d/q))^2)``, which
    is below 1 iff ``q > d/(sqrt(2) - 1)^2``; ``corrected=False`` returns the
    ``d/(sqrt(2) - 1)`` threshold as printed.
    """
    r = math.sqrt(2) - 1
    return d / r**2 if corrected else d / r


# ---------------------------------------------------------------------------
# escape through a mesh


def _piece_extremes(M, pieces):
    """Min and max singular value of ``M`` over the union of piece spans."""
    lo, hi = math.inf, 0.0
    for Q in pieces:
        s = np.linalg.svd(M @ Q, compute_uv=False)
        lo = min(lo, float(s[-1]) if s.size >= Q.shape[1] else 0.0)
        hi = max(hi, float(s[0]))
    return lo, hi


def escape_mesh_check(manifold: ManifoldModel, x_true, n: int, m: int, theta: float, trials: int = 200, B=None,
                      width: float | None = None, seed: int = 0) -> dict:
    """Empirical check of the two escape-through-a-mesh inequalities.

    Each trial draws ``G`` with i.i.d. ``N(0, 1)`` entries (the unit-variance
    scaling the inequalities are stated for) and computes the extremes of
    ``||G B v|| / ||v||`` and ``||S_i G B v|| / ||v||`` over the cone
    exactly through its pieces.
    """
    d = manifold.d
    if n % m:
        raise ValueError("m must divide n")
    Bm = np.eye(d) if B is None else np.asarray(B, dtype=np.float64)
    sv = np.linalg.svd(Bm, compute_uv=False)
    sa, sb = float(sv[0]), float(sv[-1])
    q = n // m
    if width is None:
        width = cone_width(manifold, x_true, 4000, seed, None if B is None else Bm)[0]
    pn, pq = expected_norm_p(n), expected_norm_p(q)
    lower_rhs = pn - width - theta
    upper_rhs = pq + width + theta
    pieces = manifold.cone_pieces(x_true)
    ok_lo = ok_hi = ok_both = 0
    for t in range(trials):
        G = np.random.default_rng(seed + 1 + t).standard_normal((n, d))
        A = G @ Bm
        lo, _ = _piece_extremes(A, pieces)
        hi = max(_piece_extremes(A[i * q : (i + 1) * q], pieces)[1] for i in range(m))
        a = lo / sb >= lower_rhs
        b = hi / sa <= upper_rhs
        ok_lo += a
        ok_hi += b
        ok_both += a and b
    return {
        "theta": theta,
        "trials": trials,
        "width": width,
        "lower_rate": ok_lo / trials,
        "upper_rate": ok_hi / trials,
        "both_rate": ok_both / trials,
        "lower_bound_prob": max(0.0, 1 - math.exp(-(theta**2) / 2)),
        "upper_bound_prob": max(0.0, 1 - m * math.exp(-(theta**2) / 2)),
    }


# ---------------------------------------------------------------------------
# experiments


@dataclass
class TheoryScenario:
    name: str = "gaussian_sparse"
    n: int = 512
    d: int = 64
    m: int = 4
    manifold: str = "sparse"  # sparse | subspace | ball
    s: int = 2
    k: int = 4  # subspace dimension
    eps: float = 0.0
    noise_sigma: float = 0.0
    K: int = 60
    seeds: int = 20
    base_seed: int = 0
    runs: int = 10  # subset-sampling repetitions per seed
    x0: str = "zero"  # zero | near (x_true plus a 0.1-relative in-manifold offset)
    samples: int = 1000
    theta: float = 3.0
    gamma: float = 0.0
    width_trials: int = 2000
    delta_trials: int = 100
    scheme: str = "contiguous"

    def __post_init__(self):
        if self.n % self.m:
            raise ValueError("m must divide n")
        if self.manifold not in ("sparse", "subspace", "ball"):
            raise ValueError(f"unknown manifold {self.manifold!r}")
        if self.x0 not in ("zero", "near"):
            raise ValueError(f"unknown x0 mode {self.x0!r}")


@dataclass
class TheoryReport:
    scenario: dict
    seeds: list
    constants: list  # one dict per seed
    alpha: list
    delta: list
    observed: list  # per-seed mean error curves
    observed_mean: list
    thm31: list  # per-seed upper curves
    thm32: list | None
    thm33: dict
    fitted_contraction: list
    width: float
    thm31_holds: bool
    thm32_holds: bool | None
    alpha_U_bounds_fit: bool
    vacuous: bool
    seed_results: list = field(default_factory=list)

    def to_json(self) -> str:
        def clean(o):
            if isinstance(o, dict):
                return {k: clean(v) for k, v in o.items()}
            if isinstance(o, (list, tuple)):
                return [clean(v) for v in o]
            if isinstance(o, np.ndarray):
                return clean(o.tolist())
            if isinstance(o, (np.floating, float)):
                return None if not math.isfinite(float(o)) else float(o)
            if isinstance(o, (np.integer,)):
                return int(o)
            if isinstance(o, np.bool_):
                return bool(o)
            return o

        return json.dumps(clean(asdict(self)), indent=2, sort_keys=True)

    def steady_state_upper(self) -> np.ndarray:
        """Upper curves with the additive term taken at its k -> inf value,
        ``alpha^k e0 + (eps + delta)/(1 - alpha)``; infinite when alpha >= 1."""
        K = len(self.observed_mean) - 1
        k = np.arange(K + 1)
        eps = self.scenario["eps"]
        out = []
        for a, dl, obs in zip(self.alpha, self.delta, self.observed):
            tail = (eps + dl) / (1 - a) if a < 1 else math.inf
            out.append(a**k * obs[0] + tail)
        return np.array(out)

    def curve_rows(self) -> list:
        K = len(self.observed_mean) - 1
        up = np.array(self.thm31)
        alt = self.steady_state_upper()
        rows = []
        for k in range(K + 1):
            row = {
                "k": k,
                "observed_mean": self.observed_mean[k],
                "observed_max": max(o[k] for o in self.observed),
                "thm31_upper_min": float(up[:, k].min()),
                "thm31_upper_mean": float(up[:, k].mean()),
                "steady_state_upper_min": float(alt[:, k].min()),
            }
            if self.thm32 is not None:
                row["thm32_lower_max"] = float(np.max(np.array(self.thm32)[:, k]))
            rows.append(row)
        return rows

    def write_csv(self, path):
        rows = self.curve_rows()
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def make_manifold(sc: TheoryScenario, rng, eps=None) -> ManifoldModel:
    eps = sc.eps if eps is None else eps
    seed = int(rng.integers(2**31))
    if sc.manifold == "sparse":
        return ManifoldModel("sparse", sc.d, s=sc.s, eps=eps, seed=seed)
    if sc.manifold == "subspace":
        U = np.linalg.qr(rng.standard_normal((sc.d, sc.k)))[0]
        return ManifoldModel("subspace", sc.d, basis=U, eps=eps, seed=seed)
    return ManifoldModel("ball", sc.d, radius=1.0, eps=eps, seed=seed)


def _initial_point(sc, M, x_true, rng):
    if sc.x0 == "zero":
        return np.zeros(sc.d)
    if M.kind == "sparse":
        off = np.zeros(sc.d)
        supp = np.flatnonzero(x_true)
        off[supp] = rng.standard_normal(supp.size)
    elif M.kind == "subspace":
        off = M.basis @ rng.standard_normal(M.basis.shape[1])
    else:
        off = rng.standard_normal(sc.d)
    return x_true + 0.1 * np.linalg.norm(x_true) * off / np.linalg.norm(off)


def simplified_lspd_experiment(sc: TheoryScenario) -> TheoryReport:
    """Run simplified LSPD over seeds and compare with the bound curves."""
    seeds = [sc.base_seed + t for t in range(sc.seeds)]
    consts, alphas, deltas, observed, ups, lows, fits, per_seed = [], [], [], [], [], [], [], []
    widths = []
    holds31, holds32 = True, True
    q = sc.n // sc.m
    for sd in seeds:
        rng = np.random.default_rng(sd)
        op = linops.gaussian_operator(sc.n, sc.d, seed=sd)
        part = linops.partition(op, sc.m, sc.scheme)
        op = op.with_partition(part)
        M = make_manifold(sc, rng)
        x_true = M.sample_point(rng)
        x0 = _initial_point(sc, M, x_true, rng)
        w = sc.noise_sigma * rng.standard_normal(sc.n) if sc.noise_sigma else np.zeros(sc.n)
        b = linops.apply(op, x_true) + w
        c = restricted_constants(op, part, M, x_true, sc.samples, seed=sd)
        tau = 1.0 / (q * c.L_s)
        delta, _ = delta_estimate(op, part, M, x_true, tau, w=w if sc.noise_sigma else None)
        e0 = float(np.linalg.norm(x0 - x_true))
        errs = np.zeros(sc.K + 1)
        for r in range(sc.runs):
            _, tr = unroll.simplified_lspd_forward(M, op, b, x0, tau, sc.K, seed=sd * 1000 + r)
            errs += np.linalg.norm(tr - x_true, axis=1)
        errs /= sc.runs
        up = thm31_curve(c.alpha, sc.eps, delta, e0, sc.K)["curve"]
        ok31 = bool(np.all(errs <= up * (1 + 1e-9) + 1e-12))
        holds31 &= ok31
        row = {"seed": sd, "thm31_holds": ok31, "final_rel_error": float(errs[-1] / e0) if e0 else 0.0}
        if M.convex:
            lo = thm32_curve(c.L_c, c.L_s, sc.eps, sc.gamma, e0, sc.K)["curve"]
            ok32 = bool(np.all(errs >= lo - 1e-8))
            holds32 &= ok32
            lows.append(lo.tolist())
            row["thm32_holds"] = ok32
        k10 = min(10, sc.K)
        fit = float((errs[k10] / errs[0]) ** (1 / k10)) if errs[0] > 0 and errs[k10] > 0 else 0.0
        consts.append({**asdict(c), "alpha": c.alpha, "tau": tau})
        alphas.append(c.alpha)
        deltas.append(delta)
        observed.append(errs.tolist())
        ups.append(up.tolist())
        fits.append(fit)
        per_seed.append(row)
        if not widths:
            widths.append(cone_width(M, x_true, sc.width_trials, sd)[0])
    W = widths[0]
    t33 = thm33_alphas(sc.n, sc.d, q, sc.m, 1.0, 1.0, W, sc.theta, convex=sc.manifold != "sparse", K=sc.K)
    return TheoryReport(
        scenario=asdict(sc),
        seeds=seeds,
        constants=consts,
        alpha=alphas,
        delta=deltas,
        observed=observed,
        observed_mean=np.mean(observed, axis=0).tolist(),
        thm31=ups,
        thm32=lows if sc.manifold != "sparse" else None,
        thm33=t33,
        fitted_contraction=fits,
        width=W,
        thm31_holds=bool(holds31),
        thm32_holds=bool(holds32) if sc.manifold != "sparse" else None,
        alpha_U_bounds_fit=bool(all(f <= t33["alpha_U"] for f in fits)),
        vacuous=bool(any(a >= 1 for a in alphas)),
        seed_results=per_seed,
    )
