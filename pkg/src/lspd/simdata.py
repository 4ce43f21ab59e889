"""Synthetic phantoms, the Beer-Lambert measurement model and dataset files.

Dataset file layout (little-endian)::

    b"LSPDDS01" | u32 version | u32 header_len | header (UTF-8 JSON)
    then array blocks: u32 ndim | u32 dims[ndim] | f32 payload

The header holds the geometry, noise model, item count, split tags and the
byte offset of every array block relative to the end of the header.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np

from . import linops

DS_MAGIC = b"LSPDDS01"
DS_VERSION = 1

# modified Shepp-Logan (Toft): intensity, semi-axis a, semi-axis b, x0, y0, angle (deg)
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


class DatasetFormatError(ValueError):
    pass


@dataclass
class Phantom:
    image: np.ndarray  # (N, N), values in [0, 1]
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "poisson_beer_lambert"  # or "gaussian", "none"
    I0: float = 1e4
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("poisson_beer_lambert", "gaussian", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.I0 > 0:
            raise ValueError("I0 must be positive")


def pixel_grid(size: int):
    """Pixel-centre coordinates on [-1, 1]^2, y up, row-major."""
    c = (np.arange(size) - (size - 1) / 2) / (size / 2)
    return np.meshgrid(c, -c)


def ellipse_image(ellipses, size: int) -> np.ndarray:
    X, Y = pixel_grid(size)
    img = np.zeros((size, size))
    for inten, a, b, x0, y0, phi in ellipses:
        p = np.deg2rad(phi)
        xr = (X - x0) * np.cos(p) + (Y - y0) * np.sin(p)
        yr = -(X - x0) * np.sin(p) + (Y - y0) * np.cos(p)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1] += inten
    return img


def _random_ellipses(rng, count):
    out = []
    # body: large, centred, moderate intensity
    a, b = rng.uniform(0.55, 0.8, 2)
    out.append((rng.uniform(0.3, 0.6), a, b, rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(0, 180)))
    for _ in range(count - 1):
        r = rng.uniform(0, 0.5)
        t = rng.uniform(0, 2 * np.pi)
        out.append(
            (
                rng.uniform(-0.3, 0.5),
                rng.uniform(0.05, 0.3),
                rng.uniform(0.05, 0.3),
                r * np.cos(t),
                r * np.sin(t),
                rng.uniform(0, 180),
            )
        )
    return out


def make_phantom(kind: str = "ellipses", size: int = 64, seed: int = 0) -> Phantom:
    if size < 8:
        raise ValueError("phantom size must be >= 8")
    if kind == "shepp_logan":
        img = ellipse_image(SHEPP_LOGAN, size)
        prov = {"kind": kind}
    elif kind == "ellipses":
        rng = np.random.default_rng(seed)
        count = int(rng.integers(3, 9))
        img = ellipse_image(_random_ellipses(rng, count), size)
        prov = {"kind": kind, "seed": seed, "count": count}
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    return Phantom(np.clip(img, 0, 1).astype(np.float32), prov)


def simulate_measurement(phantom, op: linops.LinearOperator, noise: NoiseModel, seed: int = 0) -> np.ndarray:
    """Log-linearised sinogram ``b = -log(c / I0)`` with ``c ~ Poisson(I0 exp(-A x))``."""
    img = phantom.image if isinstance(phantom, Phantom) else np.asarray(phantom)
    line = linops.apply(op, img.astype(np.float32))
    if not np.all(np.isfinite(line)):
        raise ValueError("non-finite line integrals")
    if noise.kind == "none":
        return line
    rng = np.random.default_rng(seed)
    if noise.kind == "gaussian":
        return (line + noise.sigma * rng.standard_normal(line.shape)).astype(np.float32)
    counts = poisson_counts(line, noise.I0, rng)
    return (-np.log(counts / noise.I0)).astype(np.float32)


def poisson_counts(line, I0, rng) -> np.ndarray:
    """Photon counts for line integrals ``line``, clamped at 1."""
    lam = I0 * np.exp(-np.asarray(line, dtype=np.float64))
    return np.maximum(rng.poisson(lam), 1).astype(np.float64)


@dataclass
class MeasurementSample:
    """Measurement-only item: deliberately has no ground-truth field."""

    b: np.ndarray
    x0: np.ndarray
    split: str = "train"


@dataclass
class Sample:
    b: np.ndarray
    x0: np.ndarray
    x_true: np.ndarray
    split: str = "train"


@dataclass
class Dataset:
    geometry: linops.ScanGeometry
    noise: NoiseModel
    items: list
    meta: dict = field(default_factory=dict)

    @property
    def has_ground_truth(self) -> bool:
        return all(isinstance(it, Sample) for it in self.items)

    def split(self, tag: str) -> list:
        return [it for it in self.items if it.split == tag]

    def ground_truth(self, i: int) -> np.ndarray:
        it = self.items[i]
        if not isinstance(it, Sample):
            raise LookupError("dataset has no ground truth")
        return it.x_true

    def measurements_only(self) -> "Dataset":
        items = [MeasurementSample(it.b, it.x0, it.split) for it in self.items]
        return Dataset(self.geometry, self.noise, items, dict(self.meta))

    def __len__(self):
        return len(self.items)


def make_dataset(
    geom: linops.ScanGeometry,
    noise: NoiseModel,
    count: int,
    seed: int = 0,
    phantom: str = "ellipses",
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
    ground_truth: bool = True,
    fbp_filter: str = "hann",
    op: linops.LinearOperator | None = None,
) -> Dataset:
    """Simulate ``count`` phantoms and their measurements and FBP images."""
    if count < 1:
        raise ValueError("count must be >= 1")
    op = op or linops.assemble_projector(geom)
    seeds = np.random.SeedSequence(seed).generate_state(2 * count).reshape(count, 2)
    order = np.random.default_rng(seed).permutation(count)
    n_test = int(round(test_fraction * count))
    n_val = int(round(val_fraction * count))
    tags = np.array(["train"] * count, dtype=object)
    tags[order[:n_test]] = "test"
    tags[order[n_test : n_test + n_val]] = "val"
    items = []
    for i in range(count):
        ph = make_phantom(phantom, geom.image_size, int(seeds[i, 0]))
        b = simulate_measurement(ph, op, noise, int(seeds[i, 1]))
        x0 = linops.fbp(geom, b, fbp_filter).astype(np.float32)
        if ground_truth:
            items.append(Sample(b, x0, ph.image.ravel(), str(tags[i])))
        else:
            items.append(MeasurementSample(b, x0, str(tags[i])))
    meta = {"seed": seed, "phantom": phantom, "fbp_filter": fbp_filter}
    return Dataset(geom, noise, items, meta)


def _block(arr) -> bytes:
    arr = np.array(arr, dtype="<f4", order="C")
    return struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + arr.tobytes()


def save_dataset(ds: Dataset, path):
    blocks = []
    offsets = []
    pos = 0
    for it in ds.items:
        entry = {"split": it.split}
        arrays = [("b", it.b), ("x0", it.x0)]
        if isinstance(it, Sample):
            arrays.append(("x_true", it.x_true))
        for name, arr in arrays:
            blk = _block(arr)
            entry[name] = pos
            pos += len(blk)
            blocks.append(blk)
        offsets.append(entry)
    header = {
        "geometry": ds.geometry.to_dict(),
        "noise": asdict(ds.noise),
        "count": len(ds.items),
        "ground_truth": ds.has_ground_truth,
        "items": offsets,
        "meta": ds.meta,
        "data_bytes": pos,
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    payload = DS_MAGIC + struct.pack("<II", DS_VERSION, len(hdr)) + hdr + b"".join(blocks)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_block(buf, pos):
    (ndim,) = struct.unpack_from("<I", buf, pos)
    dims = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
    start = pos + 4 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if start + 4 * count > len(buf):
        raise DatasetFormatError("truncated dataset file")
    return np.frombuffer(buf, "<f4", count, start).reshape(dims).astype(np.float32)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 16 or buf[:8] != DS_MAGIC:
        raise DatasetFormatError("unrecognized dataset file")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != DS_VERSION:
        raise DatasetFormatError("unrecognized dataset file")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode())
        base = 16 + hlen
        if len(buf) != base + header["data_bytes"]:
            raise DatasetFormatError("truncated dataset file")
        items = []
        for e in header["items"]:
            b = _read_block(buf, base + e["b"])
            x0 = _read_block(buf, base + e["x0"])
            if "x_true" in e:
                items.append(Sample(b, x0, _read_block(buf, base + e["x_true"]), e["split"]))
            else:
                items.append(MeasurementSample(b, x0, e["split"]))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise DatasetFormatError(f"truncated or corrupt dataset file: {exc}") from exc
    return Dataset(
        linops.ScanGeometry.from_dict(header["geometry"]), NoiseModel(**header["noise"]), items, header.get("meta", {})
    )
