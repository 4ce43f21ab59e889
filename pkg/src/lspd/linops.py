"""Discrete CT and Gaussian measurement operators.

The CT projector is an explicit sparse matrix whose entries are exact
ray/pixel intersection lengths (Siddon traversal), so the adjoint is the
true transpose.  Measurement vectors are ordered angle-major: row
``a * n_rays + j`` is detector ``j`` at view ``a``.

Image convention: a square grid of ``image_size`` pixels centred on the
origin, row 0 at the top (largest y), column 0 on the left (smallest x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ScanGeometry",
    "LinearOperator",
    "SubsetPartition",
    "assemble_projector",
    "apply",
    "adjoint",
    "partition",
    "fbp",
    "FBPOperator",
    "gaussian_operator",
    "operator_norm",
    "chord_lengths",
]


@dataclass(frozen=True)
class ScanGeometry:
    """2D parallel- or fan-beam scan of a square image.

    ``source_distance`` is measured in image widths from the rotation
    centre; ``detector_spacing`` in pixels on a virtual detector through
    the rotation centre.  ``pixel_size`` scales every intersection length
    (physical length of one pixel side).
    """

    mode: str = "parallel"
    image_size: int = 64
    n_angles: int = 60
    n_rays: int = 64
    angle_range: float | None = None
    source_distance: float = 2.0
    detector_spacing: float = 1.0
    pixel_size: float = 1.0

    def __post_init__(self):
        if self.mode not in ("parallel", "fan"):
            raise ValueError(f"unknown scan mode {self.mode!r}")
        if self.image_size < 1 or self.n_angles < 1 or self.n_rays < 1:
            raise ValueError("image_size, n_angles and n_rays must be >= 1")
        if self.angle_range is None:
            object.__setattr__(self, "angle_range", math.pi if self.mode == "parallel" else 2 * math.pi)
        if not self.angle_range > 0:
            raise ValueError("angle_range must be positive")
        if self.detector_spacing <= 0 or self.pixel_size <= 0:
            raise ValueError("detector_spacing and pixel_size must be positive")
        if self.mode == "fan" and self.source_distance * self.image_size <= self.image_size / math.sqrt(2):
            raise ValueError("source inside field of view")

    @property
    def angles(self) -> np.ndarray:
        return self.angle_range * np.arange(self.n_angles) / self.n_angles

    @property
    def detector_positions(self) -> np.ndarray:
        """Detector coordinates in pixel units, symmetric about zero."""
        return (np.arange(self.n_rays) - (self.n_rays - 1) / 2) * self.detector_spacing

    @property
    def n_measurements(self) -> int:
        return self.n_angles * self.n_rays

    @property
    def n_pixels(self) -> int:
        return self.image_size**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return cls(**d)


def _rays(geom: ScanGeometry):
    """Origins and unit directions of every ray, in pixel units."""
    th = geom.angles[:, None]
    t = geom.detector_positions[None, :]
    et = np.stack(np.broadcast_arrays(np.cos(th), np.sin(th)), -1)  # detector axis
    ray_dir = np.stack(np.broadcast_arrays(-np.sin(th), np.cos(th)), -1)
    det = t[..., None] * et
    if geom.mode == "parallel":
        origin = det
        direction = np.broadcast_to(ray_dir, det.shape)
    else:
        src = -geom.source_distance * geom.image_size * ray_dir
        src = np.broadcast_to(src, det.shape)
        direction = det - src
        direction = direction / np.linalg.norm(direction, axis=-1, keepdims=True)
        origin = src
    return origin.reshape(-1, 2), np.ascontiguousarray(direction).reshape(-1, 2)


def _slab(o, u, lo, hi):
    """Parameter interval of a line inside the slab lo <= o + t u <= hi."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - o) / u
        t1 = (hi - o) / u
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    par = u == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    return tmin, tmax


def assemble_projector(geom: ScanGeometry) -> "LinearOperator":
    """Assemble the sparse ray-tracing matrix for ``geom``."""
    N = geom.image_size
    half = N / 2
    origin, u = _rays(geom)
    R = origin.shape[0]
    txlo, txhi = _slab(origin[:, 0], u[:, 0], -half, half)
    tylo, tyhi = _slab(origin[:, 1], u[:, 1], -half, half)
    tmin = np.maximum(txlo, tylo)
    tmax = np.minimum(txhi, tyhi)
    hit = tmax > tmin
    tmin = np.where(hit, tmin, 0.0)
    tmax = np.where(hit, tmax, 0.0)

    planes = np.arange(N + 1) - half
    with np.errstate(divide="ignore", invalid="ignore"):
        ax = (planes[None, :] - origin[:, :1]) / u[:, :1]
        ay = (planes[None, :] - origin[:, 1:]) / u[:, 1:]
    alphas = np.concatenate([ax, ay, tmin[:, None], tmax[:, None]], axis=1)
    alphas = np.where(np.isfinite(alphas), alphas, tmin[:, None])
    alphas = np.clip(alphas, tmin[:, None], tmax[:, None])
    alphas.sort(axis=1)

    seg = np.diff(alphas, axis=1)
    mid = 0.5 * (alphas[:, 1:] + alphas[:, :-1])
    mx = origin[:, :1] + mid * u[:, :1]
    my = origin[:, 1:] + mid * u[:, 1:]
    col = np.clip(np.floor(mx + half).astype(np.int64), 0, N - 1)
    row = np.clip(np.floor(half - my).astype(np.int64), 0, N - 1)
    keep = seg > 1e-9
    rows = np.broadcast_to(np.arange(R)[:, None], seg.shape)[keep]
    cols = (row * N + col)[keep]
    vals = seg[keep] * geom.pixel_size
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(R, N * N)).tocsr()
    mat.sum_duplicates()
    mat.data = mat.data.astype(np.float32)
    return LinearOperator(mat, block_size=geom.n_rays, geometry=geom)


def chord_lengths(geom: ScanGeometry) -> np.ndarray:
    """Length of every ray inside the image square (Liang-Barsky clipping).

    Independent of the Siddon traversal; used as a row-sum oracle.
    """
    half = geom.image_size / 2
    origin, u = _rays(geom)
    t0 = np.full(len(origin), -np.inf)
    t1 = np.full(len(origin), np.inf)
    for k in range(2):
        for p, q in ((-u[:, k], origin[:, k] + half), (u[:, k], half - origin[:, k])):
            with np.errstate(divide="ignore", invalid="ignore"):
                r = q / p
            enter = p < 0
            leave = p > 0
            t0 = np.where(enter, np.maximum(t0, r), t0)
            t1 = np.where(leave, np.minimum(t1, r), t1)
            outside = (p == 0) & (q < 0)
            t1 = np.where(outside, -np.inf, t1)
    return np.maximum(t1 - t0, 0.0) * geom.pixel_size


@dataclass(frozen=True)
class SubsetPartition:
    m: int
    scheme: str
    assignment: np.ndarray  # block (angle) index -> subset id
    row_ranges: tuple  # per-subset arrays of row indices
    q: int  # rows per subset (equal for the default schemes)

    def blocks(self, i: int) -> np.ndarray:
        """Angle (block) indices owned by subset ``i`` in ascending order."""
        return np.flatnonzero(self.assignment == i)


@dataclass(eq=False)
class LinearOperator:
    """Fixed measurement matrix with exact transpose and optional subset views.

    ``block_size`` rows form one block (one view angle for CT, one row for
    Gaussian maps); partitions act on whole blocks.
    """

    matrix: object  # scipy CSR (float32) or dense ndarray
    block_size: int = 1
    geometry: ScanGeometry | None = None
    subsets: SubsetPartition | None = None
    _views: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> tuple:
        return self.matrix.shape

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_blocks(self) -> int:
        return self.n // self.block_size

    @cached_property
    def _fwd(self):
        m = self.matrix
        return m.astype(np.float64) if sp.issparse(m) else np.asarray(m, dtype=np.float64)

    @cached_property
    def _adj(self):
        m = self._fwd.T
        return m.tocsr() if sp.issparse(m) else np.ascontiguousarray(m)

    def with_partition(self, part: SubsetPartition) -> "LinearOperator":
        """View of the same matrix with subset blocks ``part`` attached."""
        if part.assignment.shape[0] != self.n_blocks:
            raise ValueError("partition does not match operator blocks")
        key = (part.m, part.scheme, part.assignment.tobytes())
        cache = self.__dict__.setdefault("_partitioned", {})
        if key not in cache:
            view = LinearOperator(self.matrix, self.block_size, self.geometry, part)
            view.__dict__["_fwd"] = self._fwd
            view.__dict__["_adj"] = self._adj
            view.__dict__["_partitioned"] = cache
            cache[key] = view
        return cache[key]

    def _subset_mats(self, i: int):
        if self.subsets is None:
            raise ValueError("operator has no subset partition")
        if not 0 <= i < self.subsets.m:
            raise ValueError(f"subset id {i} out of range for m={self.subsets.m}")
        if self.subsets.m == 1:
            return self._fwd, self._adj
        if i not in self._views:
            rows = self.subsets.row_ranges[i]
            f = self._fwd[rows]
            a = f.T
            self._views[i] = (f, a.tocsr() if sp.issparse(a) else np.ascontiguousarray(a))
        return self._views[i]

    def rows(self, subset: int | None = None) -> int:
        return self.n if subset is None else len(self.subsets.row_ranges[subset])

    def apply(self, x, subset=None):
        return apply(self, x, subset)

    def adjoint(self, y, subset=None):
        return adjoint(self, y, subset)

    def dense(self) -> np.ndarray:
        m = self.matrix
        return m.toarray() if sp.issparse(m) else np.asarray(m)


def _out_dtype(v):
    return np.float64 if v.dtype == np.float64 else np.float32


def apply(op: LinearOperator, x, subset: int | None = None) -> np.ndarray:
    """Compute ``A x`` or, with ``subset``, ``S_i A x``."""
    x = np.asarray(x)
    if x.size != op.d:
        raise ValueError(f"dimension mismatch: image has {x.size} entries, operator expects {op.d}")
    mat = op._fwd if subset is None else op._subset_mats(subset)[0]
    return np.asarray(mat @ x.ravel().astype(np.float64)).astype(_out_dtype(x), copy=False)


def adjoint(op: LinearOperator, y, subset: int | None = None) -> np.ndarray:
    """Compute ``A^T y`` or, with ``subset``, ``(S_i A)^T y``."""
    y = np.asarray(y)
    expect = op.n if subset is None else op.rows(subset)
    if y.size != expect:
        raise ValueError(f"dimension mismatch: measurement has {y.size} entries, expected {expect}")
    mat = op._adj if subset is None else op._subset_mats(subset)[1]
    return np.asarray(mat @ y.ravel().astype(np.float64)).astype(_out_dtype(y), copy=False)


def partition(op: LinearOperator, m: int, scheme: str = "contiguous") -> SubsetPartition:
    """Split the operator's blocks (view angles) into ``m`` equal subsets."""
    nb = op.n_blocks
    if m < 1 or nb % m:
        raise ValueError(f"subset count {m} does not divide {nb} angles")
    blocks = np.arange(nb)
    if scheme == "contiguous":
        assignment = blocks // (nb // m)
    elif scheme == "interleaved":
        assignment = blocks % m
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    bs = op.block_size
    ranges = tuple(
        (np.flatnonzero(assignment == i)[:, None] * bs + np.arange(bs)[None, :]).ravel() for i in range(m)
    )
    return SubsetPartition(m, scheme, assignment, ranges, (nb // m) * bs)


class FBPOperator:
    """Filtered backprojection as a fixed linear map with an exact adjoint.

    Ramp filtering is done in the frequency domain with zero padding;
    backprojection is pixel-driven with linear detector interpolation and,
    for fan beam, the usual 1/U^2 distance weighting.
    """

    def __init__(self, geom: ScanGeometry, filter: str = "hann"):
        if filter not in ("ramlak", "hann"):
            raise ValueError(f"unknown filter {filter!r}")
        self.geom = geom
        self.filter = filter
        t = geom.detector_positions
        if geom.mode == "fan":
            R = geom.source_distance * geom.image_size
            self._preweight = R / np.sqrt(R**2 + t**2)
        else:
            self._preweight = np.ones_like(t)
        # filtered projections are needed beyond the detector edge wherever
        # a pixel projects outside it (image corners)
        idx = self._detector_index()
        n = geom.n_rays
        self._ext = int(max(0, np.ceil(-idx.min()), np.ceil(idx.max() - (n - 1)))) + 1
        n_ext = n + 2 * self._ext
        size = max(64, int(2 ** np.ceil(np.log2(2 * n_ext))))
        k = np.concatenate([np.arange(1, size // 2 + 1, 2), np.arange(size // 2 - 1, 0, -2)])
        h = np.zeros(size)
        h[0] = 0.25
        h[1::2] = -1 / (np.pi * k) ** 2
        resp = 2 * np.real(np.fft.fft(h))
        if filter == "hann":
            resp *= np.fft.fftshift(np.hanning(size))
        self._resp = resp
        self._size = size
        self._bp = self._backprojector(idx)

    def _pixel_coords(self):
        N = self.geom.image_size
        c = np.arange(N) - (N - 1) / 2
        X, Y = np.meshgrid(c, -c)  # row-major pixel centres, y up
        return X.ravel(), Y.ravel()

    def _detector_index(self):
        """Fractional detector index and distance weight of every (angle, pixel)."""
        g = self.geom
        X, Y = self._pixel_coords()
        th = g.angles[:, None]
        s = X * np.cos(th) + Y * np.sin(th)
        if g.mode == "fan":
            R = g.source_distance * g.image_size
            U = (R - X * np.sin(th) + Y * np.cos(th)) / R
            s = s / U
            self._dist_weight = 1 / U**2
        else:
            self._dist_weight = np.ones_like(s)
        return s / g.detector_spacing + (g.n_rays - 1) / 2

    def _backprojector(self, idx):
        g = self.geom
        n_ext = g.n_rays + 2 * self._ext
        idx = idx + self._ext
        i0 = np.floor(idx).astype(np.int64)
        frac = idx - i0
        pix = np.broadcast_to(np.arange(g.n_pixels)[None, :], idx.shape)
        base = (np.arange(g.n_angles) * n_ext)[:, None]
        rows = np.concatenate([pix.ravel(), pix.ravel()])
        cols = np.concatenate([(base + i0).ravel(), (base + i0 + 1).ravel()])
        w = self._dist_weight
        vals = np.concatenate([(w * (1 - frac)).ravel(), (w * frac).ravel()])
        scale = np.pi / (2 * g.n_angles) / (g.detector_spacing * g.pixel_size)
        m = sp.coo_matrix((vals * scale, (rows, cols)), shape=(g.n_pixels, g.n_angles * n_ext))
        return m.tocsr()

    def _filter(self, sino: np.ndarray) -> np.ndarray:
        """Ramp-filter rows of ``sino`` onto the extended detector grid."""
        F = np.fft.fft(sino, n=self._size, axis=1) * self._resp
        q = np.real(np.fft.ifft(F, axis=1))
        e, n = self._ext, self.geom.n_rays
        return np.concatenate([q[:, self._size - e :], q[:, : n + e]], axis=1)

    def _filter_adjoint(self, q: np.ndarray) -> np.ndarray:
        e, n = self._ext, self.geom.n_rays
        full = np.zeros((q.shape[0], self._size))
        full[:, self._size - e :] = q[:, :e]
        full[:, : n + e] = q[:, e:]
        F = np.fft.fft(full, axis=1) * self._resp
        return np.real(np.fft.ifft(F, axis=1))[:, :n]

    def __call__(self, b) -> np.ndarray:
        b = np.asarray(b)
        if b.size != self.geom.n_measurements:
            raise ValueError(f"dimension mismatch: sinogram has {b.size} entries, expected {self.geom.n_measurements}")
        sino = b.reshape(self.geom.n_angles, self.geom.n_rays).astype(np.float64)
        q = self._filter(sino * self._preweight)
        return (self._bp @ q.ravel()).astype(_out_dtype(b), copy=False)

    def adjoint(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.size != self.geom.n_pixels:
            raise ValueError("dimension mismatch")
        q = (self._bp.T @ x.ravel().astype(np.float64)).reshape(self.geom.n_angles, -1)
        return (self._filter_adjoint(q) * self._preweight).ravel().astype(_out_dtype(x), copy=False)


_FBP_CACHE: dict = {}


def fbp(geom: ScanGeometry, b, filter: str = "hann") -> np.ndarray:
    """Filtered backprojection of the sinogram ``b``."""
    key = (geom, filter)
    if key not in _FBP_CACHE:
        _FBP_CACHE[key] = FBPOperator(geom, filter)
    return _FBP_CACHE[key](b)


def gaussian_operator(n: int, d: int, B=None, seed: int = 0) -> LinearOperator:
    """Dense ``G B`` with ``G_ij ~ N(0, 1/n)``."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, d)) / np.sqrt(n)
    if B is not None:
        Bm = B.dense() if isinstance(B, LinearOperator) else np.asarray(B, dtype=np.float64)
        if Bm.shape != (d, d):
            raise ValueError("B must be square d x d")
        G = G @ Bm
    return LinearOperator(G, block_size=1)


def operator_norm(op, iters: int = 50, subset: int | None = None, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``A^T A``.

    ``op`` is a LinearOperator or a plain matrix.  The estimate is
    nondecreasing in ``iters``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not isinstance(op, LinearOperator):
        op = LinearOperator(op if sp.issparse(op) else np.asarray(op, dtype=np.float64))
    x = np.random.default_rng(seed).standard_normal(op.d) + 1.0
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = adjoint(op, apply(op, x, subset), subset)
        nrm = np.linalg.norm(y)
        if nrm == 0:
            return 0.0
        est = max(est, math.sqrt(nrm))
        x = y / nrm
    return est
