"""Tensor engine: forward contracts against independent oracles, backward
against central finite differences in float64."""

import numpy as np
import pytest

from ssgrn import tensor as T
from ssgrn.layers import GroupNorm
from ssgrn.tensor import NonFiniteError, ShapeError, Tensor
from ssgrn.testing import gradient_check

from conftest import rand_tensor


def conv2d_oracle(x, w, b, stride, padding, dilation):
    """Direct six-loop convolution, the reference for the im2col path."""
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding : padding + h, padding : padding + wd] = x
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(c_in):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += xp[c, i * stride + ki * dilation, j * stride + kj * dilation] * w[o, c, ki, kj]
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_projector(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[5.0], [7.0]])
        assert np.array_equal(T.matmul(a, b).data, [[5.0], [0.0]])

    def test_matches_triple_loop(self, rng):
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        ref = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    ref[i, j] += a[i, k] * b[k, j]
        got = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        assert np.abs(got - ref).max() < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv2d:
    def test_1x1_kernel_is_pixelwise_matmul(self, rng):
        x = rng.normal(size=(3, 5, 5))
        w = rng.normal(size=(4, 3, 1, 1))
        out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64)).data
        ref = (w.reshape(4, 3) @ x.reshape(3, 25)).reshape(4, 5, 5)
        assert np.abs(out - ref).max() < 1e-12

    def test_ones_kernel_interior(self):
        c = 2.5
        x = Tensor(np.full((1, 6, 6), c))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, stride=1, padding=1).data
        assert np.allclose(out[0, 1:-1, 1:-1], 9 * c)

    def test_matches_six_loop_oracle(self, rng):
        x = rng.normal(size=(2, 8, 8))
        w = rng.normal(size=(4, 2, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(
            Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
            stride=1, padding=1,
        ).data
        assert np.abs(out - conv2d_oracle(x, w, b, 1, 1, 1)).max() < 1e-6

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 2, 2)])
    def test_strided_dilated_against_oracle(self, rng, stride, padding, dilation):
        x = rng.normal(size=(2, 9, 7))
        w = rng.normal(size=(3, 2, 3, 3))
        out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                       stride=stride, padding=padding, dilation=dilation).data
        assert np.abs(out - conv2d_oracle(x, w, None, stride, padding, dilation)).max() < 1e-6

    def test_nonpositive_output_extent(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))


class TestActivations:
    def test_relu(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    @pytest.mark.parametrize("c", [-3.0, 0.0, 7.5])
    def test_softmax_shift_invariance(self, c):
        out = T.softmax(Tensor([[c, c, c]], dtype=np.float64), axis=1)
        assert np.allclose(out.data, 1 / 3, atol=1e-12)

    def test_softmax_two_logits(self):
        out = T.softmax(Tensor([[1.0, 0.0]], dtype=np.float64), axis=1).data
        e = np.exp(1.0)
        assert abs(out[0, 0] - e / (e + 1)) < 1e-7
        assert abs(out[0, 0] - 0.73106) < 1e-5
        assert abs(out[0, 1] - 0.26894) < 1e-5

    def test_softmax_rows_sum_to_one(self, rng):
        x = Tensor(rng.normal(size=(40, 256)) * 20)
        sums = T.softmax(x, axis=1).data.astype(np.float64).sum(axis=1)
        assert np.abs(sums - 1).max() < 1e-6

    def test_softmax_constant_shift_leaves_output(self, rng):
        x = rng.normal(size=(5, 9))
        a = T.softmax(Tensor(x, dtype=np.float64), axis=1).data
        b = T.softmax(Tensor(x + 17.3, dtype=np.float64), axis=1).data
        assert np.abs(a - b).max() < 1e-12

    def test_softmax_bad_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor(np.ones((2, 2))), axis=2)


class TestGroupNorm:
    def test_constant_input_gives_beta(self, rng):
        gn = GroupNorm(4, groups=2, dtype=np.float64)
        gn.beta.data = rng.normal(size=4)
        out = gn(Tensor(np.full((4, 3, 3), 5.0), dtype=np.float64)).data
        assert np.allclose(out, gn.beta.data[:, None, None], atol=1e-6)

    def test_groups_equal_channels_is_instance_norm(self, rng):
        x = rng.normal(size=(6, 4, 4))
        gn = GroupNorm(6, groups=6, dtype=np.float64)
        out = gn(Tensor(x, dtype=np.float64)).data
        ref = np.stack([(ch - ch.mean()) / np.sqrt(ch.var() + 1e-5) for ch in x])
        assert np.abs(out - ref).max() < 1e-10

    def test_pre_affine_moments(self, rng):
        x = rng.normal(size=(8, 4, 4)) * 3 + 1
        gn = GroupNorm(8, groups=2, dtype=np.float64)
        out = gn(Tensor(x, dtype=np.float64)).data  # affine is identity at init
        per_group = out.reshape(2, -1)
        assert np.abs(per_group.mean(axis=1)).max() < 1e-6
        assert np.abs(per_group.var(axis=1) - 1).max() < 1e-5

    def test_indivisible_channels(self):
        with pytest.raises(ShapeError):
            T.group_norm(Tensor(np.ones((5, 2, 2))), Tensor(np.ones(5)), Tensor(np.zeros(5)), groups=2)


class TestPooling:
    def test_max_pool_2x2(self):
        out = T.max_pool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
        assert np.array_equal(out.data, [[[4.0]]])

    def test_avg_pool_2x2(self):
        out = T.avg_pool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), kernel=2, stride=2)
        assert np.array_equal(out.data, [[[2.5]]])

    def test_avg_pool_preserves_constants(self):
        x = Tensor(np.full((3, 6, 6), 1.7))
        assert np.allclose(T.avg_pool2d(x, 2, 2).data, 1.7)
        assert np.allclose(T.avg_pool2d(x, 2, 2, ceil_mode=True).data, 1.7)

    def test_max_pool_first_wins_tiebreak(self):
        x = Tensor([[[5.0, 5.0], [5.0, 5.0]]], requires_grad=True)
        out = T.max_pool2d(x)
        T.tsum(out).backward()
        assert np.array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])

    def test_window_larger_than_input(self):
        with pytest.raises(ShapeError):
            T.max_pool2d(Tensor(np.ones((1, 2, 2))), kernel=3, stride=1)


class TestBilinear:
    def test_constant_field(self):
        out = T.bilinear_upsample(Tensor(np.full((2, 3, 3), 4.2)), 7, 9)
        assert np.allclose(out.data, 4.2)

    def test_single_pixel(self):
        out = T.bilinear_upsample(Tensor(np.full((1, 1, 1), 3.0)), 4, 4)
        assert out.shape == (1, 4, 4)
        assert np.allclose(out.data, 3.0)

    def test_row_doubling_weights(self):
        # centers at (i+0.5)/4 map onto source centers (j+0.5)/2:
        # sources -0.25, 0.25, 0.75, 1.25 clip to [0, 1] giving 0, .25, .75, 1
        out = T.bilinear_upsample(Tensor([[[0.0, 1.0]]], dtype=np.float64), 1, 4)
        assert np.allclose(out.data, [[[0.0, 0.25, 0.75, 1.0]]], atol=1e-12)

    def test_downscale_rejected(self):
        with pytest.raises(ShapeError):
            T.bilinear_upsample(Tensor(np.ones((1, 4, 4))), 2, 2)


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = rand_tensor(rng, (3, 4))
        T.tsum(x).backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_square_gradient(self, rng):
        x = rand_tensor(rng, (5,))
        T.tsum(x * x).backward()
        assert np.allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_fanout_accumulates(self):
        x = Tensor([1.0, 2.0], dtype=np.float64, requires_grad=True)
        T.tsum(x + x).backward()
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_nonscalar_root_rejected(self, rng):
        with pytest.raises(ShapeError):
            rand_tensor(rng, (2, 2)).backward()

    def test_grad_skips_detached(self, rng):
        x = rand_tensor(rng, (3,))
        d = x.detach()
        T.tsum(d * d).backward()
        assert x.grad is None


def _fd_cases(rng):
    """One builder per differentiable op; inputs nudged away from kinks."""
    def t(shape, shift=0.0):
        return rand_tensor(rng, shape, shift=shift)

    x33 = t((3, 4))
    cases = {
        "add": ((a := t((3, 4)), b := t((3, 4))), lambda: T.tsum((a + b) * x33)),
        "mul": ((c := t((3, 4)), d := t((3, 4))), lambda: T.tsum((c * d) * x33)),
        "div": ((e := t((3, 4), shift=4.0), f := t((3, 4), shift=4.0)), lambda: T.tsum((e / f) * x33)),
        "pow": ((g := t((3, 4), shift=4.0),), lambda: T.tsum((g**1.7) * x33)),
        "matmul": ((h := t((3, 5)), i := t((5, 4))), lambda: T.tsum(T.matmul(h, i) * x33)),
        "relu": ((j := t((3, 4), shift=0.3),), lambda: T.tsum(T.relu(j) * x33)),
        "softmax": ((k := t((3, 4)),), lambda: T.tsum(T.softmax(k, 1) * x33)),
        "log_softmax": ((l := t((3, 4)),), lambda: T.tsum(T.log_softmax(l, 1) * x33)),
        "transpose": ((m := t((4, 3)),), lambda: T.tsum(m.T * x33)),
        "reshape": ((n := t((12,)),), lambda: T.tsum(n.reshape(3, 4) * x33)),
        "take": ((o := t((6, 7)),), lambda: T.tsum(o[1:4, 2:6] * x33)),
        "sum_axis": ((p := t((3, 4, 2)),), lambda: T.tsum(T.tsum(p, axis=2) * x33)),
        "mean": ((q := t((3, 4, 2)),), lambda: T.tsum(T.tmean(q, axis=2) * x33)),
        "exp": ((r := t((3, 4)),), lambda: T.tsum(T.texp(r) * x33)),
        "log": ((s := t((3, 4), shift=5.0),), lambda: T.tsum(T.tlog(s) * x33)),
        "concat": (
            (u := t((2, 4)), v := t((1, 4))),
            lambda: T.tsum(T.concat([u, v], axis=0) * x33),
        ),
    }
    return cases


@pytest.mark.parametrize("name", list(_fd_cases(np.random.default_rng(0)).keys()))
def test_finite_difference_primitives(name):
    """Ten random instances per op, max relative gradient error < 1e-5."""
    for trial in range(10):
        rng = np.random.default_rng(1000 * trial + hash(name) % 1000)
        inputs, f = _fd_cases(rng)[name]
        assert gradient_check(f, list(inputs)) < 1e-5


@pytest.mark.parametrize(
    "name",
    ["conv2d", "group_norm", "max_pool2d", "avg_pool2d", "avg_pool2d_ceil", "bilinear"],
)
def test_finite_difference_composites(name):
    for trial in range(10):
        rng = np.random.default_rng(2000 * trial + abs(hash(name)) % 1000)
        if name == "conv2d":
            x = rand_tensor(rng, (2, 6, 6))
            w = rand_tensor(rng, (3, 2, 3, 3))
            b = rand_tensor(rng, (3,))
            mask = rand_tensor(rng, (3, 6, 6), requires_grad=False)
            f = lambda: T.tsum(T.conv2d(x, w, b, 1, 1, 1) * mask)
            wrt = [x, w, b]
        elif name == "group_norm":
            x = rand_tensor(rng, (6, 4, 4))
            gn = GroupNorm(6, groups=3, dtype=np.float64)
            gn.gamma.data = rng.normal(size=6) + 2
            gn.beta.data = rng.normal(size=6)
            mask = rand_tensor(rng, (6, 4, 4), requires_grad=False)
            f = lambda: T.tsum(gn(x) * mask)
            wrt = [x, gn.gamma, gn.beta]
        elif name == "max_pool2d":
            x = rand_tensor(rng, (2, 6, 6))
            mask = rand_tensor(rng, (2, 3, 3), requires_grad=False)
            f = lambda: T.tsum(T.max_pool2d(x, 2, 2) * mask)
            wrt = [x]
        elif name == "avg_pool2d":
            x = rand_tensor(rng, (2, 6, 6))
            mask = rand_tensor(rng, (2, 3, 3), requires_grad=False)
            f = lambda: T.tsum(T.avg_pool2d(x, 2, 2) * mask)
            wrt = [x]
        elif name == "avg_pool2d_ceil":
            x = rand_tensor(rng, (2, 5, 7))
            mask = rand_tensor(rng, (2, 3, 4), requires_grad=False)
            f = lambda: T.tsum(T.avg_pool2d(x, 2, 2, ceil_mode=True) * mask)
            wrt = [x]
        else:
            x = rand_tensor(rng, (2, 3, 4))
            mask = rand_tensor(rng, (2, 7, 9), requires_grad=False)
            f = lambda: T.tsum(T.bilinear_upsample(x, 7, 9) * mask)
            wrt = [x]
        assert gradient_check(f, wrt) < 1e-5


class TestFiniteChecks:
    def test_division_by_zero_raises(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(NonFiniteError):
                Tensor([1.0]) / Tensor([0.0])

    def test_log_of_negative_raises(self):
        with np.errstate(invalid="ignore"):
            with pytest.raises(NonFiniteError):
                T.tlog(Tensor([-1.0]))


class TestInvariants:
    def test_bilinear_and_avgpool_agree_on_constants(self):
        x = Tensor(np.full((2, 4, 4), 0.37))
        up = T.bilinear_upsample(x, 8, 8).data
        down = T.avg_pool2d(x, 2, 2).data
        assert np.all(up == 0.37)
        assert np.all(down == 0.37)

    def test_no_grad_suppresses_tape(self, rng):
        x = rand_tensor(rng, (3,))
        with T.no_grad():
            y = x * x
        assert not y.requires_grad and y._parents == ()
