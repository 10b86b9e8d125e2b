import numpy as np
import pytest

from vaflow import autodiff as ad
from vaflow.autodiff import Tensor, backward
from vaflow.gradcheck import finite_diff_check


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestForward:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3))
        out = ad.matmul(t(np.eye(3)), t(a))
        np.testing.assert_allclose(out.data, a)

    def test_relu_values(self):
        out = ad.relu(t([-2.0, 3.5]))
        np.testing.assert_array_equal(out.data, [0.0, 3.5])

    def test_conv2d_ones(self):
        # 4x4 ones, 3x3 ones kernel, stride 1, pad 0 -> 2x2 of 9.0.
        # Oracle: direct summation with nested loops.
        x = np.ones((1, 4, 4, 1))
        w = np.ones((1, 1, 3, 3))
        ref = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for di in range(3):
                    for dj in range(3):
                        ref[i, j] += x[0, i + di, j + dj, 0] * w[0, 0, di, dj]
        out = ad.conv2d(t(x), t(w))
        assert out.shape == (1, 2, 2, 1)
        np.testing.assert_allclose(out.data[0, :, :, 0], ref)
        assert np.all(out.data == 9.0)

    def test_conv2d_stride_pad_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 5, 6))  # oracle works in NCHW
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        stride, pad = 2, 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (5 + 2 * pad - 3) // stride + 1
        wo = (6 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                        ref[n, o, i, j] = np.sum(patch * w[o]) + b[o]
        out = ad.conv2d(t(x.transpose(0, 2, 3, 1)), t(w), bias=t(b), stride=stride, padding=pad)
        np.testing.assert_allclose(out.data.transpose(0, 3, 1, 2), ref, rtol=1e-12)

    def test_conv2d_kernel_too_large(self):
        with pytest.raises(ad.ShapeError):
            ad.conv2d(t(np.ones((1, 2, 2, 1))), t(np.ones((1, 1, 3, 3))))

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ad.ShapeError) as ei:
            ad.add(t(np.ones((2, 3))), t(np.ones((3, 2))))
        assert "add" in str(ei.value)
        assert "(2, 3)" in str(ei.value) and "(3, 2)" in str(ei.value)

    def test_upsample_nearest(self):
        x = np.arange(4.0).reshape(1, 2, 2, 1)
        out = ad.upsample_nearest(t(x), 2)
        assert out.shape == (1, 4, 4, 1)
        np.testing.assert_array_equal(out.data[0, :2, :2, 0], [[0.0, 0.0], [0.0, 0.0]])
        np.testing.assert_array_equal(out.data[0, 2:, 2:, 0], [[3.0, 3.0], [3.0, 3.0]])
        np.testing.assert_array_equal(out.data[0, :2, 2:, 0], [[1.0, 1.0], [1.0, 1.0]])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        out = ad.softmax(t(rng.standard_normal((5, 7))), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-12)

    def test_no_implicit_broadcasting(self):
        with pytest.raises(ad.ShapeError):
            ad.mul(t(np.ones((2, 3))), t(np.ones(3)))

    def test_expand_then_mul(self):
        x = t(np.ones((1, 3)))
        out = ad.mul(ad.expand(x, (4, 3)), t(2.0 * np.ones((4, 3))))
        assert out.shape == (4, 3)
        np.testing.assert_array_equal(out.data, 2.0)


class TestBackward:
    def test_sum_of_squares(self):
        x = t([1.0, 2.0, 3.0], grad=True)
        backward(ad.tsum(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_grad_accumulates_across_calls(self):
        x = t([1.0, 2.0], grad=True)
        y = ad.tsum(ad.mul(x, x))
        backward(y)
        backward(y)
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_non_scalar_root_rejected(self):
        x = t([1.0, 2.0], grad=True)
        with pytest.raises(ValueError):
            backward(ad.mul(x, x))

    def test_matmul_grad_matches_finite_diff(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((4, 5))

        def f(x):
            return ad.tsum(ad.matmul(x, Tensor(w)))

        assert finite_diff_check(f, Tensor(rng.standard_normal((3, 4))), h=1e-6) < 1e-5

    def test_cosine_grad_tangential_at_parallel(self):
        # cos is scale invariant along x, so at x parallel to the constant the
        # gradient must be orthogonal to x.
        c = np.array([1.0, 2.0, 3.0])
        x = t(2.0 * c, grad=True)
        backward(ad.tmean(ad.cosine_similarity(x, Tensor(c), axis=0)))
        assert abs(np.dot(x.grad, x.data)) < 1e-10

    def test_shared_subexpression_grad(self):
        # y = sum(x*x + x*x) -> dy/dx = 4x
        x = t([1.0, -2.0], grad=True)
        sq = ad.mul(x, x)
        backward(ad.tsum(ad.add(sq, sq)))
        np.testing.assert_allclose(x.grad, [4.0, -8.0])


SMOOTH_OPS = {
    "silu": ad.silu,
    "tanh": ad.tanh,
    "exp": ad.exp,
    "softmax": lambda x: ad.tsum(ad.mul(ad.softmax(x, axis=-1), ad.softmax(x, axis=-1))),
    "l2_norm": lambda x: ad.tsum(ad.l2_norm(x, axis=-1)),
    "mean_axis": lambda x: ad.tsum(ad.tmean(x, axis=0)),
    "transpose": lambda x: ad.tsum(ad.mul(ad.transpose(x), ad.transpose(x))),
    "reshape": lambda x: ad.tsum(ad.mul(ad.reshape(x, (-1,)), ad.reshape(x, (-1,)))),
    "narrow": lambda x: ad.tsum(ad.mul(ad.narrow(x, 1, 1, 2), ad.narrow(x, 1, 1, 2))),
    "expand_bc": lambda x: ad.tsum(ad.mul(ad.expand(ad.reshape(ad.tmean(x, axis=0), (1, 4)), (3, 4)), x)),
    "div": lambda x: ad.tsum(ad.div(x, ad.add(ad.mul(x, x), 3.0))),
    "power": lambda x: ad.tsum(ad.power(ad.add(ad.mul(x, x), 1.0), 1.7)),
    "sqrt": lambda x: ad.tsum(ad.sqrt(ad.add(ad.mul(x, x), 0.5))),
    "log": lambda x: ad.tsum(ad.log(ad.add(ad.mul(x, x), 1.5))),
    "cosine": lambda x: ad.tsum(
        ad.cosine_similarity(x, Tensor(np.linspace(0.5, 2.0, 12).reshape(3, 4)), axis=-1)
    ),
    "matmul": lambda x: ad.tsum(ad.tanh(ad.matmul(x, Tensor(np.linspace(-1, 1, 20).reshape(4, 5))))),
}


@pytest.mark.parametrize("name", sorted(SMOOTH_OPS))
def test_op_suite_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = rng.standard_normal((3, 4))
    scalarize = SMOOTH_OPS[name]

    def f(xt):
        y = scalarize(xt)
        return y if y.size == 1 else ad.tsum(y)

    assert finite_diff_check(f, Tensor(x), h=1e-6) < 1e-4


@pytest.mark.parametrize("op", [ad.relu, ad.absolute])
def test_kinked_ops_away_from_kink(op):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 4))
    h = 1e-6
    x[np.abs(x) < 10 * h] = 0.5  # keep every coordinate off the kink
    assert finite_diff_check(lambda xt: ad.tsum(op(xt)), Tensor(x), h=h) < 1e-4


def test_structured_op_gradients():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 4, 4, 3))
    w = rng.standard_normal((5, 3, 3, 3))
    b = rng.standard_normal(5)

    def conv_x(xt):
        return ad.tsum(ad.silu(ad.conv2d(xt, Tensor(w), bias=Tensor(b), stride=2, padding=1)))

    def conv_w(wt):
        return ad.tsum(ad.silu(ad.conv2d(Tensor(x), wt, bias=Tensor(b), stride=2, padding=1)))

    assert finite_diff_check(conv_x, Tensor(x), h=1e-6, max_coords=40) < 1e-4
    assert finite_diff_check(conv_w, Tensor(w), h=1e-6, max_coords=40) < 1e-4

    def up(xt):
        return ad.tsum(ad.tanh(ad.upsample_nearest(xt, 2)))

    assert finite_diff_check(up, Tensor(rng.standard_normal((1, 3, 3, 2))), h=1e-6) < 1e-4

    gamma = rng.standard_normal(4) + 1.5
    beta = rng.standard_normal(4)

    def gn(xt):
        return ad.tsum(ad.silu(ad.group_norm(xt, Tensor(gamma), Tensor(beta), groups=2)))

    assert finite_diff_check(gn, Tensor(rng.standard_normal((2, 3, 3, 4))), h=1e-6, max_coords=40) < 1e-4

    def gn_gamma(gt):
        return ad.tsum(ad.silu(ad.group_norm(Tensor(rng_x), gt, Tensor(beta), groups=2)))

    rng_x = rng.standard_normal((2, 3, 3, 4))
    assert finite_diff_check(gn_gamma, Tensor(gamma), h=1e-6) < 1e-4

    gain = rng.standard_normal(6) + 1.0

    def rn(xt):
        return ad.tsum(ad.silu(ad.rms_norm(xt, Tensor(gain))))

    assert finite_diff_check(rn, Tensor(rng.standard_normal((2, 5, 6))), h=1e-6, max_coords=40) < 1e-4

    table = rng.standard_normal((7, 3))
    idx = np.array([0, 3, 3, 6])

    def emb(tt):
        return ad.tsum(ad.mul(ad.gather_rows(tt, idx), ad.gather_rows(tt, idx)))

    assert finite_diff_check(emb, Tensor(table), h=1e-6) < 1e-4


def test_batched_matmul_grad():
    rng = np.random.default_rng(13)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 4, 5))

    def fa(at):
        return ad.tsum(ad.tanh(ad.matmul(at, Tensor(b))))

    def fb(bt):
        return ad.tsum(ad.tanh(ad.matmul(Tensor(a), bt)))

    assert finite_diff_check(fa, Tensor(a), h=1e-6) < 1e-4
    assert finite_diff_check(fb, Tensor(b), h=1e-6) < 1e-4

    # 2D weight against batched activations: gradient sums over the batch.
    w = rng.standard_normal((4, 6))

    def fw(wt):
        return ad.tsum(ad.tanh(ad.matmul(Tensor(a), wt)))

    assert finite_diff_check(fw, Tensor(w), h=1e-6) < 1e-4


def test_chain_rule_composition_five_seeds():
    from vaflow.gradcheck import check_composition

    def g(x):
        return ad.tanh(ad.matmul(x, Tensor(np.linspace(-1, 1, 12).reshape(4, 3))))

    def f(y):
        return ad.tsum(ad.silu(y))

    base = np.random.default_rng(17).standard_normal((2, 4))
    assert check_composition(f, g, Tensor(base), seeds=5) < 1e-4


def test_checker_flags_wrong_gradient():
    # An intentionally wrong gradient (off by 2x) must be caught with err ~ 0.5.
    def bad(x):
        out = ad.tsum(ad.mul(x, x))
        good_vjp = out._vjp
        out._vjp = lambda g: tuple(2.0 * p for p in good_vjp(g))
        return out

    err = finite_diff_check(bad, Tensor(np.array([1.0, 2.0, 3.0])), h=1e-6)
    assert 0.4 < err < 0.6


def test_determinism_bit_identical():
    rng = np.random.default_rng(23)
    x = rng.standard_normal((4, 8))
    w = rng.standard_normal((8, 8))

    def run():
        xt = Tensor(x, requires_grad=True)
        y = ad.tsum(ad.silu(ad.matmul(xt, Tensor(w))))
        backward(y)
        return y.data.copy(), xt.grad.copy()

    y1, g1 = run()
    y2, g2 = run()
    assert np.array_equal(y1, y2)
    assert np.array_equal(g1, g2)


def test_dtype_mismatch_rejected():
    a = Tensor(np.ones(3, dtype=np.float32))
    b = Tensor(np.ones(3, dtype=np.float64))
    with pytest.raises(TypeError):
        ad.add(a, b)


def test_float32_graph_stays_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = ad.tsum(ad.silu(ad.mul(x, 2.0)))
    assert y.dtype == np.float32
    backward(y)
    assert x.grad.dtype == np.float32


def test_rope_apply_norm_and_grad():
    rng = np.random.default_rng(29)
    x = rng.standard_normal((2, 3, 4, 8))
    ang = rng.standard_normal((4, 4))
    cos, sin = np.cos(ang), np.sin(ang)
    out = ad.rope_apply(Tensor(x), cos, sin)
    np.testing.assert_allclose(
        np.linalg.norm(out.data, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-10
    )

    def f(xt):
        return ad.tsum(ad.tanh(ad.rope_apply(xt, cos, sin)))

    assert finite_diff_check(f, Tensor(x), h=1e-6, max_coords=40) < 1e-4


def test_clamp_grad_masks_outside():
    x = t([-2.0, 0.5, 3.0], grad=True)
    backward(ad.tsum(ad.clamp(x, -1.0, 1.0)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_finite_diff_check_rejects_nonfinite():
    def bad(x):
        return ad.log(ad.tsum(x))  # negative sum -> nan

    with pytest.raises(FloatingPointError):
        finite_diff_check(bad, Tensor(np.array([-5.0, 1.0])), h=1e-6)


def test_finite_diff_check_requires_scalar_f():
    with pytest.raises(ValueError):
        finite_diff_check(lambda x: ad.mul(x, x), Tensor(np.ones(3)), h=1e-6)


def test_grad_table_unreachable_target_is_zero():
    x = t([1.0, 2.0], grad=True)
    other = t([3.0], grad=True)
    y = ad.tsum(ad.mul(x, x))
    gx, gother = ad.grad_table(y, [x, other])
    np.testing.assert_allclose(gx, [2.0, 4.0])
    np.testing.assert_array_equal(gother, [0.0])
