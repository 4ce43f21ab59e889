"""Minimal reverse-mode automatic differentiation over dense arrays.

A :class:`Tape` records every operation of one forward pass and replays it
backwards.  It is meant to be confined to one thread; independent tapes can
run side by side as long as they do not share parameter tensors.

Operator-call accounting: each linear-operator node adds the fraction of
measurement rows it touches (``rows / n``) to ``tape.calls`` on the forward
pass and to ``tape.backward_calls`` when differentiated, so a full ``A`` or
``A^T`` counts as one call.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import linops

CKPT_MAGIC = b"LSPDCKPT"
CKPT_VERSION = 1


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_op")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._op = False  # produced by a recorded operation

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, name={self.name!r})"


def parameter(value, name=None, dtype=np.float32) -> Tensor:
    return Tensor(np.array(value, dtype=dtype), requires_grad=True, name=name)


@dataclass
class ConvLayer:
    """Same-padded, stride-1 2D convolution (cross-correlation) with bias."""

    weight: Tensor  # (out_ch, in_ch, k, k)
    bias: Tensor  # (out_ch,)

    @classmethod
    def init(cls, in_ch, out_ch, k=5, rng=None, zero=False, dtype=np.float32, name=""):
        rng = np.random.default_rng() if rng is None else rng
        if zero:
            w = np.zeros((out_ch, in_ch, k, k))
        else:
            bound = np.sqrt(6.0 / (in_ch * k * k))
            w = rng.uniform(-bound, bound, (out_ch, in_ch, k, k))
        return cls(parameter(w, f"{name}.weight", dtype), parameter(np.zeros(out_ch), f"{name}.bias", dtype))

    @property
    def in_ch(self):
        return self.weight.shape[1]

    @property
    def out_ch(self):
        return self.weight.shape[0]


def _im2col(x, k):
    p = k // 2
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # c, h, w, k, k
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)


def _conv(x, w, b=None):
    o, c, k, _ = w.shape
    _, h, wd = x.shape
    cols = _im2col(x, k)
    out = (cols @ w.reshape(o, -1).T).T.reshape(o, h, wd)
    if b is not None:
        out = out + b[:, None, None]
    return out, cols


class Tape:
    """Records operations in topological order for reverse-mode replay."""

    def __init__(self, grad=True):
        self.grad = grad  # False: evaluate only, keep no graph
        self.nodes = []
        self.calls = 0.0
        # backward closures update this list, not the tape, so finished
        # tapes are freed by refcounting instead of waiting for the cycle collector
        self._bw = [0.0]

    @property
    def backward_calls(self) -> float:
        return self._bw[0]

    # plumbing -----------------------------------------------------------
    def _record(self, value, inputs, backward):
        out = Tensor(value, requires_grad=self.grad and any(t.requires_grad for t in inputs))
        out._op = True
        if out.requires_grad:
            self.nodes.append((out, inputs, backward))
        return out

    @staticmethod
    def constant(value, dtype=None) -> Tensor:
        return Tensor(np.asarray(value) if dtype is None else np.asarray(value, dtype=dtype))

    def backward(self, loss: Tensor, seed=1.0):
        """Accumulate d(loss)/d(leaf) into every leaf tensor's ``grad``."""
        if loss.value.size != 1:
            raise ValueError("backward requires a scalar loss")
        grads = {id(loss): np.full(loss.shape, seed, dtype=loss.dtype)}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._op:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    gi = gi.astype(t.dtype, copy=False)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi

    # elementwise and shape ops -----------------------------------------
    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self._record(a.value + b.value, (a, b), lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self._record(a.value - b.value, (a, b), lambda g: (g, -g))

    def scale(self, x: Tensor, s: Tensor) -> Tensor:
        """Multiply ``x`` by the scalar tensor ``s``."""
        sv = s.value.reshape(())

        def back(g):
            return g * sv, np.asarray(np.sum(g * x.value, dtype=np.float64)).reshape(s.shape)

        return self._record(x.value * sv, (x, s), back)

    def mul_const(self, x: Tensor, c: float) -> Tensor:
        return self._record(x.value * c, (x,), lambda g: (g * c,))

    def reshape(self, x: Tensor, shape) -> Tensor:
        return self._record(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))

    def take(self, x: Tensor, index, shape) -> Tensor:
        """Gather flat entries ``index`` of ``x`` into an array of ``shape``."""
        index = np.asarray(index)

        def back(g):
            full = np.zeros(x.value.size, dtype=g.dtype)
            full[index] = g.ravel()
            return (full.reshape(x.shape),)

        return self._record(x.value.ravel()[index].reshape(shape), (x,), back)

    def rot90(self, x: Tensor, k: int) -> Tensor:
        """Rotate the trailing two axes by ``k`` quarter turns (counter-clockwise)."""
        return self._record(
            np.rot90(x.value, k, axes=(-2, -1)).copy(), (x,), lambda g: (np.rot90(g, -k, axes=(-2, -1)).copy(),)
        )

    def concat(self, xs) -> Tensor:
        """Stack channel-first tensors ``(c_i, H, W)`` along the channel axis."""
        xs = list(xs)
        hw = xs[0].shape[1:]
        for t in xs:
            if t.value.ndim != 3 or t.shape[1:] != hw:
                raise ValueError("concat_channels: spatial dimensions differ")
        if len(xs) == 1:
            return xs[0]
        sizes = np.cumsum([t.shape[0] for t in xs])[:-1]
        return self._record(np.concatenate([t.value for t in xs], 0), tuple(xs), lambda g: tuple(np.split(g, sizes, 0)))

    # network layers ------------------------------------------------------
    def conv2d(self, x: Tensor, layer: ConvLayer) -> Tensor:
        w, b = layer.weight, layer.bias
        if x.value.ndim != 3 or x.shape[0] != w.shape[1]:
            raise ValueError(f"conv2d: input has {x.shape[0] if x.value.ndim == 3 else '?'} channels, layer expects {w.shape[1]}")
        out, cols = _conv(x.value, w.value, b.value)

        def back(g):
            o = g.shape[0]
            gw = (g.reshape(o, -1) @ cols).reshape(w.shape)
            gb = g.sum(axis=(1, 2))
            gx = None
            if x.requires_grad:
                wt = w.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gx, _ = _conv(g, np.ascontiguousarray(wt))
            return gx, gw, gb

        return self._record(out, (x, w, b), back)

    def prelu(self, x: Tensor, alpha: Tensor) -> Tensor:
        """Per-channel PReLU: ``x`` if ``x >= 0`` else ``alpha[c] * x``."""
        a = alpha.value.reshape(-1, *([1] * (x.value.ndim - 1)))
        neg = x.value < 0
        out = np.where(neg, a * x.value, x.value)

        def back(g):
            gx = np.where(neg, a * g, g)
            ga = np.where(neg, g * x.value, 0).reshape(x.shape[0], -1).sum(1).reshape(alpha.shape)
            return gx, ga

        return self._record(out, (x, alpha), back)

    def activation(self, x: Tensor, kind: str, alpha: Tensor | None = None) -> Tensor:
        if kind == "identity":
            return x
        if kind == "prelu":
            return self.prelu(x, alpha)
        raise ValueError(f"unknown activation {kind!r}")

    # linear operators ----------------------------------------------------
    def linop(self, x: Tensor, op: linops.LinearOperator, subset=None, direction="fwd", shape=None) -> Tensor:
        """Differentiable ``S_i A x`` (fwd) or ``(S_i A)^T y`` (adj)."""
        frac = op.rows(subset) / op.n
        if direction == "fwd":
            f, b = linops.apply, linops.adjoint
        elif direction == "adj":
            f, b = linops.adjoint, linops.apply
        else:
            raise ValueError(f"unknown direction {direction!r}")
        out = f(op, x.value, subset)
        if shape is not None:
            out = out.reshape(shape)
        self.calls += frac
        bw = self._bw

        def back(g):
            bw[0] += frac
            return (b(op, g, subset).reshape(x.shape),)

        return self._record(out, (x,), back)

    def fbp(self, b: Tensor, fbp_op: linops.FBPOperator, shape=None) -> Tensor:
        """Differentiable filtered backprojection (counts as one adjoint call)."""
        out = fbp_op(b.value)
        if shape is not None:
            out = out.reshape(shape)
        self.calls += 1.0
        bw = self._bw

        def back(g):
            bw[0] += 1.0
            return (fbp_op.adjoint(g).reshape(b.shape),)

        return self._record(out, (b,), back)

    # reductions ------------------------------------------------------------
    def sum(self, x: Tensor) -> Tensor:
        return self._record(np.asarray(np.sum(x.value, dtype=np.float64)), (x,), lambda g: (np.full(x.shape, g, x.dtype),))

    def inner(self, c, x: Tensor) -> Tensor:
        """``<c, x>`` for a constant array ``c``."""
        c = np.asarray(c)
        return self._record(
            np.asarray(np.sum(c * x.value, dtype=np.float64)), (x,), lambda g: ((g * c).astype(x.dtype, copy=False),)
        )

    def sum_squares(self, x: Tensor) -> Tensor:
        """``||x||_2^2`` reduced in double precision."""
        v = x.value
        return self._record(
            np.asarray(np.sum(np.square(v, dtype=np.float64))), (x,), lambda g: ((2 * g * v).astype(v.dtype, copy=False),)
        )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, header: dict | None = None):
    """Write named float32 arrays in the LSPDCKPT binary format."""
    hdr = json.dumps(header or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hdr)), hdr, struct.pack("<I", len(params))]
    for name, t in params.items():
        arr = np.array(t.value if isinstance(t, Tensor) else t, dtype="<f4", order="C")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path):
    """Read a checkpoint; returns ``(header, {name: float32 array})``."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError("unrecognized checkpoint file")
    try:
        version, hlen = struct.unpack_from("<II", buf, 8)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 16
        header = json.loads(buf[pos : pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(buf):
                raise ValueError("truncated checkpoint")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += size
    except struct.error as e:
        raise ValueError("truncated checkpoint") from e
    return header, out
