import numpy as np
import pytest

from lactlab import nn
from lactlab import tensor as T
from lactlab.errors import InvalidArgument
from lactlab.gradcheck import gradcheck
from lactlab.optim import Adam, TrainingDiverged, adam_step
from lactlab.tensor import Tensor

F64 = np.float64


def t64(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad, dtype=F64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        y = T.conv2d(x, Tensor(w), Tensor(np.zeros(1)), stride=1, padding=1)
        np.testing.assert_array_equal(y.data, x.data)

    def test_stride_two_shape(self):
        x = Tensor(np.ones((1, 1, 4, 4)))
        y = T.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), None, stride=2, padding=1)
        assert y.shape == (1, 1, 2, 2)

    @pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 3)])
    def test_gradcheck(self, rng, stride, padding, k):
        x, w, b = t64(rng, 2, 3, 8, 8), t64(rng, 4, 3, k, k), t64(rng, 4)
        err = gradcheck(lambda x, w, b: T.conv2d(x, w, b, stride, padding), [x, w, b])
        assert err < 1e-3

    def test_channel_mismatch(self):
        with pytest.raises(InvalidArgument):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(InvalidArgument):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))


class TestConvTranspose2d:
    def test_upsample_shape(self):
        y = T.conv_transpose2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 4, 4))),
                               None, stride=2, padding=1)
        assert y.shape == (1, 1, 4, 4)

    def test_mirrors_conv_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 16, 16)))
        down = T.conv2d(x, Tensor(rng.normal(size=(3, 2, 4, 4))), None, 2, 1)
        up = T.conv_transpose2d(down, Tensor(rng.normal(size=(3, 2, 4, 4))), None, 2, 1)
        assert up.shape == x.shape

    def test_is_adjoint_of_conv(self, rng):
        # <conv(x), y> == <x, conv_T(y)> with the same kernel
        w = rng.normal(size=(3, 2, 4, 4))
        x = rng.normal(size=(1, 2, 8, 8))
        y = rng.normal(size=(1, 3, 4, 4))
        lhs = (T.conv2d(Tensor(x, dtype=F64), Tensor(w, dtype=F64), None, 2, 1).data * y).sum()
        rhs = (x * T.conv_transpose2d(Tensor(y, dtype=F64), Tensor(w, dtype=F64), None, 2, 1).data).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_gradcheck(self, rng):
        x, w, b = t64(rng, 2, 3, 4, 4), t64(rng, 3, 2, 4, 4), t64(rng, 2)
        assert gradcheck(lambda x, w, b: T.conv_transpose2d(x, w, b, 2, 1), [x, w, b]) < 1e-3


class TestLayerSet:
    def test_zero_pad_embed_placement(self):
        x = Tensor(np.full((1, 1, 2, 2), 7.0))
        y = T.zero_pad_embed(x, 4).data[0, 0]
        assert np.all(y[1:3, 1:3] == 7.0)
        y[1:3, 1:3] = 0
        assert np.all(y == 0)

    def test_crop_inverts_embed(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        np.testing.assert_array_equal(T.center_crop(T.zero_pad_embed(x, 9), 5).data, x.data)

    def test_mse_self_zero(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        assert T.mse(x, x).item() == 0.0

    def test_crop_pad_errors(self):
        x = Tensor(np.ones((1, 1, 4, 4)))
        with pytest.raises(InvalidArgument):
            T.center_crop(x, 6)
        with pytest.raises(InvalidArgument):
            T.zero_pad_embed(x, 2)

    @pytest.mark.parametrize("name,fn,shapes", [
        ("relu", lambda x: T.relu(x), [(3, 4, 5)]),
        ("tanh", lambda x: T.tanh(x), [(3, 4)]),
        ("silu", lambda x: T.silu(x), [(3, 4)]),
        ("linear", lambda x, w, b: T.linear(x, w, b), [(4, 5), (3, 5), (3,)]),
        ("group_norm", lambda x, g, b: T.group_norm(x, g, b, 2), [(2, 4, 3, 3), (4,), (4,)]),
        ("concat", lambda a, b: T.concat_channels([a, b]), [(2, 1, 3, 3), (2, 2, 3, 3)]),
        ("crop", lambda x: T.center_crop(x, 2), [(1, 2, 4, 4)]),
        ("embed", lambda x: T.zero_pad_embed(x, 6), [(1, 2, 4, 4)]),
        ("mse", lambda a, b: T.mse(a, b), [(3, 4), (3, 4)]),
        ("broadcast_add", lambda a, b: a + b, [(2, 3, 4, 4), (2, 3, 1, 1)]),
        ("mul", lambda a, b: a * b, [(2, 3), (2, 3)]),
        ("transpose", lambda x: T.transpose(x, (0, 2, 1)), [(2, 3, 4)]),
        ("take_rows", lambda x: T.take_rows(x, np.array([0, 2, 2, 1])), [(3, 4)]),
        ("slice", lambda x: T.channel_slice(x, 1, 3), [(2, 4, 2, 2)]),
    ])
    def test_gradcheck(self, rng, name, fn, shapes):
        inputs = [t64(rng, *s) for s in shapes]
        if name == "relu":
            # keep samples away from the kink
            inputs[0].data += np.sign(inputs[0].data) * 0.1
        assert gradcheck(fn, inputs) < 1e-3, name

    def test_group_norm_min8(self):
        assert nn.GroupNorm(32).groups == 8
        assert nn.GroupNorm(4).groups == 4


class TestAutodiff:
    def test_accumulates(self, rng):
        x = t64(rng, 3)
        (x * 2.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, 5.0)

    def test_sum_of_losses_linearity(self, rng):
        x, w = t64(rng, 2, 1, 6, 6), t64(rng, 2, 1, 3, 3)

        def l1():
            return T.mse(T.conv2d(x, w, None, 1, 1), Tensor(np.zeros((2, 2, 6, 6)), dtype=F64))

        def l2():
            return T.tanh(T.conv2d(x, w, None, 2, 1)).sum()
        (l1() + l2()).backward()
        joint = w.grad.copy()
        w.grad = None
        l1().backward()
        l2().backward()
        np.testing.assert_allclose(w.grad, joint, rtol=1e-12)

    def test_no_grad_builds_no_graph(self, rng):
        x = t64(rng, 3)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    def test_shared_subexpression(self, rng):
        x = t64(rng, 4)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, 4 * x.data)


class TestAdam:
    def test_zero_gradient_no_move(self, rng):
        p = Tensor(rng.normal(size=5), requires_grad=True)
        before = p.data.copy()
        opt = Adam([p], lr=0.1)
        for _ in range(3):
            p.grad = np.zeros_like(p.data)
            opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_descends_against_constant_gradient(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam([p], lr=0.01)
        for _ in range(50):
            p.grad = np.array([1.0, -2.0], dtype=np.float32)
            opt.step()
        assert p.data[0] < 0 < p.data[1]

    def test_single_step_hand_value(self):
        # m = 0.1, v = 0.001; bias-corrected m_hat = v_hat = 1 -> delta = lr / (1 + eps)
        p = Tensor(np.zeros(1), requires_grad=True, dtype=F64)
        opt = Adam([p], lr=0.1)
        p.grad = np.ones(1)
        opt.step()
        assert p.data[0] == pytest.approx(-0.1 / (1.0 + 1e-8), rel=1e-12)
        assert p.grad is None
        assert opt.step_count == 1

    def test_nan_aborts(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam([p])
        p.grad = np.array([np.nan, 0.0], dtype=np.float32)
        with pytest.raises(TrainingDiverged):
            opt.step()

    def test_functional_step(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        opt = Adam([p], lr=0.5)
        p.grad = np.ones(1, dtype=np.float32)
        adam_step([p], opt)
        assert p.data[0] < 0


def test_module_seeded_init_is_reproducible():
    a = nn.Conv2d(2, 3, 3, nn.make_rng(7))
    b = nn.Conv2d(2, 3, 3, nn.make_rng(7))
    np.testing.assert_array_equal(a.weight.data, b.weight.data)


class TestGradcheckSensitivity:
    def test_wrong_backward_detected(self, rng):
        def bad_square(x):
            # true derivative is 2x; report 3x
            return Tensor._make(x.data ** 2, (x,), lambda g: (3.0 * x.data * g,))
        assert gradcheck(bad_square, [t64(rng, 4, 3)]) > 0.1

    def test_dropped_gradient_detected(self, rng):
        def leaky(x):
            return Tensor._make(np.sin(x.data), (x,), lambda g: (np.zeros_like(g),))
        assert gradcheck(leaky, [t64(rng, 5)]) > 0.9
