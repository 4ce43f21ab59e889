"""Unrolled primal-dual reconstruction networks.

Four variants share one parameterisation:

* ``lpd``        full operator in every layer
* ``lspd``       one angular subset per layer (ordered subsets)
* ``lspd_vr``    as ``lspd`` plus per-subset adjoint memories ``h_j``
* ``simplified`` dual step replaced by the raw residual and one shared
                 primal network applied as a (learned) projection

Every layer feeds the dual subnet ``[S_i b, sigma_k S_i A x_k, y_k]`` and the
primal subnet ``[tau_k (S_i A)^T y_{k+1}, x_k]``; both add their output to
the state they update.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import linops
from .autodiff import ConvLayer, Tape, Tensor, parameter, save_checkpoint, load_checkpoint

VARIANTS = ("lpd", "lspd", "lspd_vr", "simplified")
SCHEDULES = ("cyclic", "uniform_random")


@dataclass(frozen=True)
class UnrollConfig:
    variant: str = "lspd"
    K: int = 6
    m: int = 4
    hidden: int = 16
    kernel: int = 5
    schedule: str = "cyclic"
    scheme: str = "contiguous"
    reset_dual: bool = False  # zero the dual buffer whenever the subset changes

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.m < 1:
            raise ValueError("m must be >= 1")

    @property
    def subsets(self) -> int:
        return 1 if self.variant == "lpd" else self.m

    def to_dict(self):
        return asdict(self)


class Subnet:
    """Three same-padded convolutions with PReLU between them and a skip."""

    def __init__(self, in_ch, hidden, kernel=5, rng=None, name="net", dtype=np.float32):
        self.name = name
        self.convs = [
            ConvLayer.init(in_ch, hidden, kernel, rng, dtype=dtype, name=f"{name}.conv0"),
            ConvLayer.init(hidden, hidden, kernel, rng, dtype=dtype, name=f"{name}.conv1"),
            ConvLayer.init(hidden, 1, kernel, rng, zero=True, dtype=dtype, name=f"{name}.conv2"),
        ]
        self.alphas = [parameter(np.full(hidden, 0.25), f"{name}.act{j}", dtype) for j in range(2)]

    def __call__(self, tape: Tape, inp: Tensor, skip: Tensor) -> Tensor:
        h = tape.prelu(tape.conv2d(inp, self.convs[0]), self.alphas[0])
        h = tape.prelu(tape.conv2d(h, self.convs[1]), self.alphas[1])
        return tape.add(skip, tape.conv2d(h, self.convs[2]))

    def parameters(self) -> dict:
        out = {}
        for c in self.convs:
            out[c.weight.name] = c.weight
            out[c.bias.name] = c.bias
        for a in self.alphas:
            out[a.name] = a
        return out


class UnrollParams:
    """All trainable weights of one unrolled network."""

    def __init__(self, config: UnrollConfig, step: float = 1.0, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        K, hid, ker = config.K, config.hidden, config.kernel
        self.dual = []
        self.primal = []
        if config.variant == "simplified":
            shared = Subnet(1, hid, ker, rng, "primal", dtype)
            self.primal = [shared] * K
            self.dual = [None] * K
            self.tau = [parameter(step, "tau", dtype)] * K
            self.sigma = [None] * K
        else:
            for k in range(K):
                self.dual.append(Subnet(3, hid, ker, rng, f"layer{k}.dual", dtype))
                self.primal.append(Subnet(2, hid, ker, rng, f"layer{k}.primal", dtype))
            self.tau = [parameter(step, f"layer{k}.tau", dtype) for k in range(K)]
            self.sigma = [parameter(step, f"layer{k}.sigma", dtype) for k in range(K)]

    def named(self) -> dict:
        out = {}
        for k in range(self.config.K):
            if self.dual[k] is not None:
                out.update(self.dual[k].parameters())
            out.update(self.primal[k].parameters())
            out[self.tau[k].name] = self.tau[k]
            if self.sigma[k] is not None:
                out[self.sigma[k].name] = self.sigma[k]
        return out

    def n_parameters(self) -> int:
        return sum(t.value.size for t in self.named().values())

    def zero_grad(self):
        for t in self.named().values():
            t.grad = None

    def state(self) -> dict:
        return {k: t.value.copy() for k, t in self.named().items()}

    def load_state(self, state: dict):
        named = self.named()
        if set(named) != set(state):
            raise ValueError("parameter names do not match the network configuration")
        for k, t in named.items():
            if state[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}")
            t.value = np.array(state[k], dtype=t.dtype)

    def copy(self, dtype=None) -> "UnrollParams":
        dtype = dtype or next(iter(self.named().values())).dtype
        new = UnrollParams(self.config, dtype=dtype)
        new.load_state({k: v.astype(dtype) for k, v in self.state().items()})
        return new

    def save(self, path, extra: dict | None = None):
        header = {"config": self.config.to_dict(), **(extra or {})}
        save_checkpoint(path, self.named(), header)

    @classmethod
    def load(cls, path) -> tuple["UnrollParams", dict]:
        header, arrays = load_checkpoint(path)
        params = cls(UnrollConfig(**header["config"]))
        params.load_state(arrays)
        return params, header


def init_params(config: UnrollConfig, op: linops.LinearOperator, seed: int = 0, dtype=np.float32) -> UnrollParams:
    """Initialise weights; step scalars start at ``1 / ||A||``."""
    norm = linops.operator_norm(op, 30)
    return UnrollParams(config, step=1.0 / norm, seed=seed, dtype=dtype)


def subset_schedule(config: UnrollConfig, seed=None) -> list:
    m = config.subsets
    if config.schedule == "cyclic" or m == 1:
        return [k % m for k in range(config.K)]
    if seed is None:
        raise ValueError("uniform_random schedule requires a seed")
    return [int(i) for i in np.random.default_rng(seed).integers(0, m, config.K)]


def operator_calls(config: UnrollConfig) -> float:
    """Full-operator-equivalent calls on ``A`` and ``A^T`` per forward pass."""
    return 2 * config.K / config.subsets


def prepare_operator(op: linops.LinearOperator, config: UnrollConfig) -> linops.LinearOperator:
    """Attach the partition the variant needs (a single subset for LPD)."""
    m = config.subsets
    if op.subsets is not None and op.subsets.m == m and op.subsets.scheme == config.scheme:
        return op
    return op.with_partition(linops.partition(op, m, config.scheme))


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v))


def unrolled_forward(tape: Tape, params: UnrollParams, op, b, x0, seed=None, snapshots=None) -> Tensor:
    """Run the network on measurement ``b`` from initial image ``x0``.

    ``b`` and ``x0`` may be arrays or tape tensors (for differentiable
    inputs).  Returns the final image as a ``(1, N, N)`` tensor.  If
    ``snapshots`` is a list, each layer's primal output is appended.
    """
    cfg = params.config
    op = prepare_operator(op, cfg)
    geom = op.geometry
    if geom is None:
        raise ValueError("unrolled networks need a CT operator with geometry")
    N, nr = geom.image_size, geom.n_rays
    b, x0 = _as_tensor(b), _as_tensor(x0)
    if b.value.size != op.n or x0.value.size != op.d:
        raise ValueError("shape mismatch between operator and inputs")
    part = op.subsets
    x = tape.reshape(x0, (1, N, N)) if x0.shape != (1, N, N) else x0
    sched = subset_schedule(cfg, seed)
    q_angles = geom.n_angles // part.m

    if cfg.variant == "simplified":
        for k in range(cfg.K):
            i = sched[k]
            sino = (1, q_angles, nr)
            y = tape.sub(tape.linop(x, op, i, "fwd", sino), tape.take(b, part.row_ranges[i], sino))
            step = tape.scale(tape.linop(y, op, i, "adj", (1, N, N)), params.tau[k])
            z = tape.sub(x, step)
            x = params.primal[k](tape, z, z)
            if snapshots is not None:
                snapshots.append(x.value.copy())
        return x

    y = Tensor(np.zeros((1, q_angles, nr), dtype=x.dtype))
    memories = [None] * part.m
    prev = None
    for k in range(cfg.K):
        i = sched[k]
        if cfg.reset_dual and prev is not None and i != prev:
            y = Tensor(np.zeros_like(y.value))
        prev = i
        sino = (1, q_angles, nr)
        Ax = tape.linop(x, op, i, "fwd", sino)
        bi = tape.take(b, part.row_ranges[i], sino)
        y = params.dual[k](tape, tape.concat([bi, tape.scale(Ax, params.sigma[k]), y]), y)
        ATy = tape.linop(y, op, i, "adj", (1, N, N))
        if cfg.variant == "lspd_vr":
            memories[i] = ATy
            agg = None
            for h in memories:
                if h is not None:
                    agg = h if agg is None else tape.add(agg, h)
            ATy = agg
        x = params.primal[k](tape, tape.concat([tape.scale(ATy, params.tau[k]), x]), x)
        if snapshots is not None:
            snapshots.append(x.value.copy())
    return x


def _check_variant(params, *allowed):
    if params.config.variant not in allowed:
        raise ValueError(f"expected variant in {allowed}, got {params.config.variant!r}")


def lpd_forward(tape, params, op, b, x0, snapshots=None):
    _check_variant(params, "lpd")
    return unrolled_forward(tape, params, op, b, x0, snapshots=snapshots)


def lspd_forward(tape, params, op, b, x0, seed=None, snapshots=None):
    _check_variant(params, "lspd")
    return unrolled_forward(tape, params, op, b, x0, seed, snapshots)


def lspd_vr_forward(tape, params, op, b, x0, seed=None, snapshots=None):
    _check_variant(params, "lspd_vr")
    return unrolled_forward(tape, params, op, b, x0, seed, snapshots)


def reconstruct(params: UnrollParams, op, b, x0, seed=None) -> tuple[np.ndarray, float]:
    """Evaluate without recording a graph; returns ``(image, operator calls)``."""
    tape = Tape(grad=False)
    x = unrolled_forward(tape, params, op, b, x0, seed)
    return x.value.reshape(-1), tape.calls


def simplified_lspd_forward(proj, op: linops.LinearOperator, b, x0, tau: float, K: int, seed=0):
    """Learning-free simplified LSPD recursion with a projection ``proj``.

    ``op`` must carry a subset partition.  Subsets are drawn uniformly at
    random.  Returns ``(x_K, trace)`` with ``trace[k] = x_k``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    part = op.subsets
    if part is None:
        raise ValueError("operator has no subset partition")
    rng = np.random.default_rng(seed)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x0, dtype=np.float64).copy()
    trace = [x.copy()]
    for _ in range(K):
        i = int(rng.integers(part.m))
        y = linops.apply(op, x, i) - b[part.row_ranges[i]]
        x = np.asarray(proj(x - tau * linops.adjoint(op, y, i)), dtype=np.float64)
        trace.append(x.copy())
    return x, np.array(trace)


__all__ = [
    "VARIANTS",
    "UnrollConfig",
    "UnrollParams",
    "Subnet",
    "init_params",
    "subset_schedule",
    "operator_calls",
    "prepare_operator",
    "unrolled_forward",
    "lpd_forward",
    "lspd_forward",
    "lspd_vr_forward",
    "reconstruct",
    "simplified_lspd_forward",
]
