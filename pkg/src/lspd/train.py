"""Training loops: supervised, equivariant imaging, and instance adaptation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import linops, metrics, unroll
from .autodiff import Tape, Tensor
from .simdata import Dataset, MeasurementSample, Sample

METRIC_COLUMNS = ("epoch", "train_loss", "val_psnr", "val_ssim", "operator_calls")


class GradientBlowUp(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, frozen=()):
    """In-place bias-corrected Adam update of ``params`` (name -> Tensor)."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise GradientBlowUp(f"gradient blow-up in {name!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None or name in frozen:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name, 0.0) * b1 + (1 - b1) * g
        v = state.v.get(name, 0.0) * b2 + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value = (p.value - step).astype(p.dtype)


def apply_group_action(x, g: int) -> np.ndarray:
    """Rotate a square image by ``g`` quarter turns counter-clockwise."""
    x = np.asarray(x)
    flat = x.ndim == 1
    if flat:
        side = math.isqrt(x.size)
        if side * side != x.size:
            raise ValueError("group action needs a square image")
        x = x.reshape(side, side)
    if x.shape[-1] != x.shape[-2]:
        raise ValueError("group action needs a square image")
    out = np.rot90(x, g, axes=(-2, -1))
    return out.ravel() if flat else out.copy()


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    lambda_ei: float = 100.0
    lambda_adapt: float = 1.0
    n_adapt: int = 30
    lr_adapt: float = 1e-4  # fine-tuning a trained net; the training rate overshoots
    seed: int = 0
    freeze_dual: bool = False
    cosine: bool = False

    def __post_init__(self):
        if self.lambda_ei < 0:
            raise ValueError("lambda_ei must be >= 0")
        if self.lambda_adapt < 0:
            raise ValueError("lambda_adapt must be >= 0")
        if not (self.lr > 0 and self.lr_adapt > 0):
            raise ValueError("learning rates must be positive")
        if self.epochs < 0 or self.n_adapt < 0:
            raise ValueError("epochs and n_adapt must be >= 0")


def _grads(params: unroll.UnrollParams) -> dict:
    return {k: t.grad for k, t in params.named().items()}


def _frozen(params, cfg):
    if not cfg.freeze_dual:
        return ()
    return {k for k in params.named() if ".dual." in k}


def _lr(cfg, epoch):
    if not cfg.cosine or cfg.epochs <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * epoch / cfg.epochs))


def validate(params, op, items) -> tuple[float, float]:
    """Mean PSNR and SSIM of the network on labelled ``items``."""
    if not items:
        return math.nan, math.nan
    ps, ss = [], []
    for it in items:
        x, _ = unroll.reconstruct(params, op, it.b, it.x0)
        ps.append(metrics.psnr(x, it.x_true))
        ss.append(metrics.ssim(x, it.x_true))
    return float(np.mean(ps)), float(np.mean(ss))


def supervised_loss(tape, params, op, it: Sample):
    N = op.geometry.image_size
    x = unroll.unrolled_forward(tape, params, op, it.b, it.x0)
    diff = tape.sub(x, Tensor(it.x_true.reshape(1, N, N)))
    return tape.mul_const(tape.sum_squares(diff), 1.0 / op.d)


def supervised_train(params: unroll.UnrollParams, dataset: Dataset, op, cfg: TrainConfig, log=None, checkpoint=None):
    """Minimise the mean squared image error over the train split.

    Returns ``(params, history)``; ``history`` is a list of metric rows,
    one per epoch.  ``log`` is called with each row; ``checkpoint`` with
    ``(params, epoch)``.
    """
    train = [it for it in dataset.split("train") if isinstance(it, Sample)]
    if not train:
        raise ValueError("supervised training needs a non-empty labelled train split")
    val = dataset.split("val")
    op = unroll.prepare_operator(op, params.config)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    frozen = _frozen(params, cfg)
    history = []
    for epoch in range(cfg.epochs):
        state.lr = _lr(cfg, epoch)
        losses = []
        for j in rng.permutation(len(train)):
            tape = Tape()
            loss = supervised_loss(tape, params, op, train[j])
            params.zero_grad()
            tape.backward(loss)
            adam_step(params.named(), _grads(params), state, frozen)
            losses.append(float(loss.value))
        vp, vs = validate(params, op, val)
        row = dict(zip(METRIC_COLUMNS, (epoch, float(np.mean(losses)), vp, vs, unroll.operator_calls(params.config))))
        history.append(row)
        if log:
            log(row)
        if checkpoint:
            checkpoint(params, epoch)
    return params, history


def _equivariance_pass(tape, params, op, fbp_op, b: Tensor, x0, g: int):
    """``(x, T_g x, F(A T_g x))`` for one measurement."""
    N = op.geometry.image_size
    full = op.with_partition(linops.partition(op, 1))
    x = unroll.unrolled_forward(tape, params, op, b, x0)
    tx = tape.rot90(x, g)
    b2 = tape.linop(tx, full, 0, "fwd", (op.n,))
    x02 = tape.fbp(b2, fbp_op, (1, N, N))
    x2 = unroll.unrolled_forward(tape, params, op, b2, x02)
    return x, tx, x2


def ei_objective(tape, params, op, fbp_op, b, x0, g: int, lam: float):
    """Measurement consistency plus ``lam`` times the equivariance penalty.

    Both terms are mean squares (over rays and pixels respectively).
    Returns ``(total, consistency, equivariance, x)``.
    """
    full = op.with_partition(linops.partition(op, 1))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b))
    x, tx, x2 = _equivariance_pass(tape, params, op, fbp_op, b, x0, g)
    r = tape.sub(tape.linop(x, full, 0, "fwd", (op.n,)), tape.reshape(b, (op.n,)) if b.shape != (op.n,) else b)
    mc = tape.mul_const(tape.sum_squares(r), 1.0 / op.n)
    eq = tape.mul_const(tape.sum_squares(tape.sub(tx, x2)), 1.0 / op.d)
    total = tape.add(mc, tape.mul_const(eq, lam)) if lam else mc
    return total, mc, eq, x


def ei_train(params: unroll.UnrollParams, dataset: Dataset, op, cfg: TrainConfig, log=None, checkpoint=None):
    """Equivariant-imaging training from measurements alone.

    ``dataset`` must be measurement-only (see ``Dataset.measurements_only``);
    a labelled dataset is rejected so no ground truth can leak in.
    History rows carry ``val_psnr``/``val_ssim`` as NaN and the validation
    objective in ``val_loss``.
    """
    if cfg.lambda_ei < 0:
        raise ValueError("lambda_ei must be >= 0")
    if any(not isinstance(it, MeasurementSample) for it in dataset.items):
        raise TypeError("ei_train accepts measurement-only datasets")
    train = dataset.split("train")
    if not train:
        raise ValueError("empty training split")
    val = dataset.split("val")
    op = unroll.prepare_operator(op, params.config)
    fbp_op = linops.FBPOperator(op.geometry, dataset.meta.get("fbp_filter", "hann"))
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    frozen = _frozen(params, cfg)
    history = []
    for epoch in range(cfg.epochs):
        state.lr = _lr(cfg, epoch)
        losses = []
        for j in rng.permutation(len(train)):
            it = train[j]
            g = int(rng.integers(1, 4))
            tape = Tape()
            loss, *_ = ei_objective(tape, params, op, fbp_op, it.b, it.x0, g, cfg.lambda_ei)
            params.zero_grad()
            tape.backward(loss)
            adam_step(params.named(), _grads(params), state, frozen)
            losses.append(float(loss.value))
        vloss = []
        for it in val:
            tape = Tape(grad=False)
            loss, *_ = ei_objective(tape, params, op, fbp_op, it.b, it.x0, int(rng.integers(1, 4)), cfg.lambda_ei)
            vloss.append(float(loss.value))
        row = dict(zip(METRIC_COLUMNS, (epoch, float(np.mean(losses)), math.nan, math.nan, unroll.operator_calls(params.config))))
        row["val_loss"] = float(np.mean(vloss)) if vloss else math.nan
        history.append(row)
        if log:
            log(row)
        if checkpoint:
            checkpoint(params, epoch)
    return params, history


@dataclass
class AdaptTrace:
    steps: list
    calls: list  # cumulative full-operator-equivalent calls (forward + backward)
    psnr: list  # NaN when no reference is supplied
    loss: list

    def rows(self):
        return [dict(step=s, operator_calls=c, psnr=p, loss=l) for s, c, p, l in zip(self.steps, self.calls, self.psnr, self.loss)]

    def calls_to_reach(self, target: float) -> float:
        for c, p in zip(self.calls, self.psnr):
            if p >= target:
                return c
        return math.inf


def instance_adapt(params: unroll.UnrollParams, b_in, x0, op, cfg: TrainConfig, x_ref=None, fbp_filter="hann", seed=None):
    """Fine-tune a copy of ``params`` on one measurement with the EI objective.

    Returns ``(adapted params, reconstruction, AdaptTrace)``.  The trace
    entry for step ``t`` is the reconstruction with the parameters after
    ``t`` updates, against the calls spent so far (including the pass that
    produced it).  ``x_ref`` is used only for the trace's PSNR column.
    """
    params = params.copy()
    op = unroll.prepare_operator(op, params.config)
    fbp_op = linops.FBPOperator(op.geometry, fbp_filter)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    state = AdamState(lr=cfg.lr_adapt)
    frozen = _frozen(params, cfg)
    b_in = np.asarray(b_in, dtype=np.float32)
    x0 = np.asarray(x0, dtype=np.float32)
    trace = AdaptTrace([], [], [], [])
    spent = 0.0

    def record(step, calls, x, loss):
        trace.steps.append(step)
        trace.calls.append(calls)
        trace.psnr.append(metrics.psnr(x, x_ref) if x_ref is not None else math.nan)
        trace.loss.append(loss)

    per_pass = unroll.operator_calls(params.config)
    for step in range(cfg.n_adapt):
        tape = Tape()
        loss, _, _, x = ei_objective(tape, params, op, fbp_op, b_in, x0, int(rng.integers(1, 4)), cfg.lambda_adapt)
        params.zero_grad()
        tape.backward(loss)
        # this step's reconstruction is the objective's first network pass
        record(step, spent + per_pass, x.value.ravel(), float(loss.value))
        spent += tape.calls + tape.backward_calls
        adam_step(params.named(), _grads(params), state, frozen)
    x, calls = unroll.reconstruct(params, op, b_in, x0)
    record(cfg.n_adapt, spent + calls, x, math.nan)
    return params, x, trace


def write_metrics_csv(path, history, extra_header: str | None = None):
    cols = list(METRIC_COLUMNS) + [k for k in (history[0] if history else {}) if k not in METRIC_COLUMNS]
    with open(path, "w", newline="") as f:
        if extra_header:
            f.write(f"# {extra_header}\n")
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
