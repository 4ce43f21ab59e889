import numpy as np
import pytest

from lspd import autodiff, linops, unroll
from lspd.autodiff import ConvLayer, Tape, Tensor, parameter

H = 1e-3


class PatternTape(Tape):
    """Tape that records the sign pattern of every PReLU input."""

    def __init__(self, grad=True):
        super().__init__(grad)
        self.pattern = []

    def prelu(self, x, alpha):
        self.pattern.append(np.signbit(x.value))
        return super().prelu(x, alpha)


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def fd_check(loss_fn, tensors, rng, samples=30, h=H):
    """Relative error between tape gradients and central differences.

    ``loss_fn(tape)`` builds a scalar loss from float64 leaves in ``tensors``.
    Coordinates whose +-h probes flip a PReLU input sign are skipped (the
    loss has a kink there) and redrawn until ``samples`` are collected.
    Returns the relative l2 error over the sampled coordinates.
    """
    for t in tensors:
        t.grad = None
    tape = PatternTape()
    tape.backward(loss_fn(tape))
    num, ana = [], []
    for _ in range(50 * samples):
        if len(num) == samples:
            break
        t = tensors[rng.integers(len(tensors))]
        idx = tuple(rng.integers(s) for s in t.shape)
        old = t.value[idx]
        t.value[idx] = old + h
        tp = PatternTape(grad=False)
        fp = float(loss_fn(tp).value)
        t.value[idx] = old - h
        tm = PatternTape(grad=False)
        fm = float(loss_fn(tm).value)
        t.value[idx] = old
        if not (_same_pattern(tp.pattern, tape.pattern) and _same_pattern(tm.pattern, tape.pattern)):
            continue
        num.append((fp - fm) / (2 * h))
        ana.append(t.grad[idx])
    assert len(num) == samples, "too many kink crossings"
    num, ana = np.array(num), np.array(ana)
    return np.linalg.norm(num - ana) / max(np.linalg.norm(num), 1e-12)


def _conv_naive(x, w, b):
    o, c, k, _ = w.shape
    _, hh, ww = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((o, hh, ww))
    for oc in range(o):
        for i in range(hh):
            for j in range(ww):
                s = b[oc]
                for ic in range(c):
                    for u in range(k):
                        for v in range(k):
                            s += w[oc, ic, u, v] * xp[ic, i + u, j + v]
                out[oc, i, j] = s
    return out


def test_conv_identity_kernel(rng):
    layer = ConvLayer(parameter(np.ones((1, 1, 1, 1))), parameter(np.zeros(1)))
    x = Tensor(rng.random((1, 6, 6)).astype(np.float32))
    assert np.array_equal(Tape().conv2d(x, layer).value, x.value)


def test_conv_window_sum():
    layer = ConvLayer(parameter(np.ones((1, 1, 5, 5))), parameter(np.zeros(1)))
    x = Tensor(np.full((1, 9, 9), 0.5, np.float32))
    out = Tape().conv2d(x, layer).value
    assert out[0, 4, 4] == pytest.approx(25 * 0.5)
    assert out.shape == x.shape


def test_conv_naive_oracle(rng):
    layer = ConvLayer.init(2, 3, 5, rng, dtype=np.float64)
    layer.bias.value[:] = rng.standard_normal(3)
    x = rng.standard_normal((2, 7, 6))
    got = Tape().conv2d(Tensor(x), layer).value
    ref = _conv_naive(x, layer.weight.value, layer.bias.value)
    assert np.linalg.norm(got - ref) <= 1e-5 * np.linalg.norm(ref)


def test_conv_channel_mismatch(rng):
    layer = ConvLayer.init(2, 3, 5, rng)
    with pytest.raises(ValueError, match="channels"):
        Tape().conv2d(Tensor(np.zeros((3, 4, 4), np.float32)), layer)


def test_prelu_values():
    t = Tape()
    x = Tensor(np.array([[[-3.0, 2.0]]]))
    assert np.array_equal(t.prelu(x, parameter([1.0], dtype=np.float64)).value, x.value)
    assert np.array_equal(t.prelu(x, parameter([0.0], dtype=np.float64)).value, [[[0.0, 2.0]]])
    assert t.activation(x, "identity") is x


def test_concat():
    t = Tape()
    a = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    b = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    assert t.concat([a]) is a
    c = t.concat([a, b])
    assert c.shape == (2, 2, 2) and np.array_equal(c.value[:1], a.value)
    w = np.arange(8.0).reshape(2, 2, 2)
    t.backward(t.inner(w, c))
    assert np.array_equal(a.grad, w[:1]) and np.array_equal(b.grad, w[1:])
    with pytest.raises(ValueError):
        t.concat([a, Tensor(np.zeros((1, 3, 2)))])


def test_inner_gradient_exact(rng):
    c = rng.standard_normal((2, 3, 3))
    x = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
    t = Tape()
    t.backward(t.inner(c, x))
    assert np.array_equal(x.grad, c)


def test_backward_accumulates(rng):
    c = rng.standard_normal(5)
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    t = Tape()
    loss = t.inner(c, x)
    t.backward(loss)
    t.backward(loss)
    assert np.array_equal(x.grad, 2 * c)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    t = Tape()
    with pytest.raises(ValueError, match="scalar"):
        t.backward(t.mul_const(x, 2.0))


@pytest.fixture(scope="module")
def tiny_ct():
    g = linops.ScanGeometry(mode="fan", image_size=8, n_angles=8, n_rays=12)
    A = linops.assemble_projector(g)
    return g, A.with_partition(linops.partition(A, 4))


def test_linop_gradient_closed_form(tiny_ct, rng):
    g, A = tiny_ct
    x = Tensor(rng.standard_normal((1, 8, 8)), requires_grad=True)
    t = Tape()
    t.backward(t.mul_const(t.sum_squares(t.linop(x, A, 2, "fwd")), 0.5))
    ref = linops.adjoint(A, linops.apply(A, x.value, 2), 2).reshape(1, 8, 8)
    assert np.linalg.norm(x.grad - ref) <= 1e-5 * np.linalg.norm(ref)
    z = Tensor(np.zeros((1, 8, 8)), requires_grad=True)
    t = Tape()
    t.backward(t.mul_const(t.sum_squares(t.linop(z, A, 2, "fwd")), 0.5))
    assert not z.grad.any()


def test_linop_call_counting(tiny_ct, rng):
    g, A = tiny_ct
    x = Tensor(rng.standard_normal((1, 8, 8)), requires_grad=True)
    t = Tape()
    y = t.linop(x, A, 1, "fwd")
    z = t.linop(y, A, 1, "adj")
    t.backward(t.sum_squares(z))
    assert t.calls == 0.5 and t.backward_calls == 0.5


def every_op_fd_error(seed):
    """FD error of a loss that routes through every tape op once."""
    rng = np.random.default_rng(seed)
    g = linops.ScanGeometry(mode="fan", image_size=8, n_angles=8, n_rays=12)
    A = linops.assemble_projector(g)
    A = A.with_partition(linops.partition(A, 4))
    fbp_op = linops.FBPOperator(g)
    conv = ConvLayer.init(2, 3, 3, rng, dtype=np.float64)
    conv.bias.value[:] = rng.standard_normal(3)
    alpha = parameter(rng.uniform(0.1, 0.5, 3), dtype=np.float64)
    s = parameter(rng.uniform(0.5, 1.5), dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 8, 8)), requires_grad=True)
    y = Tensor(rng.standard_normal((1, 2, 12)), requires_grad=True)
    c = rng.standard_normal((3, 8, 8))

    def loss(t):
        ax = t.linop(x, A, 1, "fwd", (1, 2, 12))
        r = t.add(ax, t.scale(y, s))
        back = t.linop(r, A, 1, "adj", (1, 8, 8))
        full = t.linop(x, A, None, "fwd")
        f = t.fbp(full, fbp_op, (1, 8, 8))
        h = t.concat([t.rot90(back, 1), t.sub(f, t.mul_const(x, 0.3))])
        h = t.prelu(t.conv2d(h, conv), alpha)
        taken = t.take(h, np.arange(0, 180, 5), (1, 6, 6))
        return t.add(t.add(t.inner(c, h), t.sum_squares(taken)), t.sum(t.reshape(ax, (24,))))

    return fd_check(loss, [x, y, s, alpha, conv.weight, conv.bias], rng)


@pytest.mark.parametrize("seed", range(20))
def test_every_op_finite_differences(seed):
    assert every_op_fd_error(seed) <= 1e-3


def test_conv_prelu_sum_fifty_weights(rng):
    conv = ConvLayer.init(2, 4, 5, rng, dtype=np.float64)
    alpha = parameter(np.full(4, 0.25), dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 9, 9)))

    def loss(t):
        return t.sum(t.prelu(t.conv2d(x, conv), alpha))

    assert fd_check(loss, [conv.weight, conv.bias, alpha], rng, samples=50) <= 1e-3


def _lspd_loss_setup(seed):
    g = linops.ScanGeometry(mode="fan", image_size=8, n_angles=8, n_rays=12)
    A = linops.assemble_projector(g)
    rng = np.random.default_rng(seed)
    cfg = unroll.UnrollConfig(variant="lspd", K=4, m=4, hidden=4, kernel=3)
    p = unroll.init_params(cfg, A, seed=seed, dtype=np.float64)
    for t in p.named().values():  # move off the zero-initialised output convs
        t.value += 0.05 * rng.standard_normal(t.shape)
    x_true = rng.random(64)
    b = linops.apply(A, x_true)
    x0 = linops.fbp(g, b)
    return A, p, b, x0, x_true, rng


def lspd_loss_fd_error(seed):
    A, p, b, x0, x_true, rng = _lspd_loss_setup(seed)

    def loss(t):
        x = unroll.unrolled_forward(t, p, A, b, x0)
        return t.sum_squares(t.sub(x, Tensor(x_true.reshape(1, 8, 8))))

    return fd_check(loss, list(p.named().values()), rng, samples=30)


@pytest.mark.parametrize("seed", range(20))
def test_lspd_loss_finite_differences(seed):
    assert lspd_loss_fd_error(seed) <= 1e-3


def test_forward_deterministic():
    A, p, b, x0, _, _ = _lspd_loss_setup(1)
    x1 = unroll.unrolled_forward(Tape(), p, A, b, x0).value
    x2 = unroll.unrolled_forward(Tape(), p, A, b, x0).value
    assert np.array_equal(x1, x2)


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"w": rng.standard_normal((2, 3, 5, 5)), "s": np.float32(0.7), "v": rng.standard_normal(4)}
    path = tmp_path / "a.ckpt"
    autodiff.save_checkpoint(path, params, {"note": "x"})
    header, out = autodiff.load_checkpoint(path)
    assert header == {"note": "x"}
    assert out["s"].shape == () and out["w"].shape == (2, 3, 5, 5)
    for k, v in params.items():
        assert np.array_equal(out[k], np.asarray(v, np.float32))
    raw = path.read_bytes()
    assert raw[:8] == b"LSPDCKPT"
    (tmp_path / "cut.ckpt").write_bytes(raw[:-10])
    with pytest.raises(ValueError, match="truncated"):
        autodiff.load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError, match="unrecognized"):
        autodiff.load_checkpoint(tmp_path / "bad.ckpt")
