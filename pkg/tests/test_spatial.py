"""Spatial reasoning branch: descriptor pooling, attention adjacency,
reprojection and heads, each against hand arithmetic or a brute-force oracle."""

import numpy as np
import pytest

from ssgrn import tensor as T
from ssgrn.layers import Linear
from ssgrn.model import SSGRN, ModelConfig, total_loss
from ssgrn.spatial import (
    ClassifierHead,
    SpatialBranch,
    attention_adjacency,
    pool_descriptors,
    reason,
    reproject,
    sagrn_loss,
)
from ssgrn.superpixels import SlicConfig, SuperpixelAssignment, soft_assign_iterate
from ssgrn.tensor import Tensor
from ssgrn.testing import gradient_check, sampled_gradient_check


def make_assignment(q=None, hard=None, n=None, k=None):
    if q is None:
        q = np.zeros((n, k))
        q[np.arange(n), hard] = 1.0
    if hard is None:
        hard = np.asarray(q).argmax(axis=1)
    return SuperpixelAssignment(q=Tensor(np.asarray(q), dtype=np.float64), hard=np.asarray(hard),
                                centroids=np.zeros((np.asarray(q).shape[1], 1)))


def identity_linear(dim):
    lin = Linear(np.random.default_rng(0), dim, dim, dtype=np.float64)
    lin.weight.data = np.eye(dim)
    lin.bias.data = np.zeros(dim)
    return lin


def region_mean_oracle(f, hard, k):
    """Accumulate-then-divide scan over pixels, one region at a time."""
    c = f.shape[0]
    flat = f.reshape(c, -1)
    out = np.zeros((k, c))
    for i in range(k):
        members = np.nonzero(hard == i)[0]
        if members.size:
            out[i] = flat[:, members].sum(axis=1) / members.size
    return out


class TestPoolDescriptors:
    def test_hand_arithmetic_hard(self):
        f = Tensor(np.array([[[1.0, 2.0], [3.0, 5.0]]]), dtype=np.float64)
        assign = make_assignment(hard=np.array([0, 0, 1, 1]), n=4, k=2)
        d = pool_descriptors(f, assign, mode="hard")
        assert np.allclose(d.data, [[1.5], [4.0]], atol=1e-7)

    def test_uniform_soft_assignment_gives_global_mean(self, rng):
        f = Tensor(rng.normal(size=(3, 4, 4)), dtype=np.float64)
        assign = make_assignment(q=np.full((16, 5), 1 / 5))
        d = pool_descriptors(f, assign, mode="soft")
        mean = f.data.reshape(3, -1).mean(axis=1)
        assert np.allclose(d.data, np.tile(mean, (5, 1)), atol=1e-6)

    def test_matches_region_scan_oracle(self, rng):
        for _ in range(10):
            f = rng.normal(size=(4, 5, 6))
            hard = rng.integers(0, 3, size=30)
            assign = make_assignment(hard=hard, n=30, k=3)
            d = pool_descriptors(Tensor(f, dtype=np.float64), assign, mode="hard")
            assert np.abs(d.data - region_mean_oracle(f, hard, 3)).max() < 1e-6

    def test_hard_mode_conserves_mass(self, rng):
        f = rng.normal(size=(3, 6, 6))
        hard = rng.integers(0, 4, size=36)
        assign = make_assignment(hard=hard, n=36, k=4)
        d = pool_descriptors(Tensor(f, dtype=np.float64), assign, mode="hard").data
        sizes = np.bincount(hard, minlength=4)
        recovered = (d * sizes[:, None]).sum(axis=0)
        assert np.abs(recovered - f.reshape(3, -1).sum(axis=1)).max() < 1e-4

    def test_unknown_mode(self, rng):
        f = Tensor(rng.normal(size=(1, 2, 2)), dtype=np.float64)
        assign = make_assignment(hard=np.zeros(4, dtype=int), n=4, k=1)
        with pytest.raises(ValueError):
            pool_descriptors(f, assign, mode="fuzzy")


class TestAttentionAdjacency:
    def test_identical_descriptors_uniform(self):
        d = Tensor(np.tile([1.0, 2.0, 3.0], (5, 1)), dtype=np.float64)
        phi, psi = identity_linear(3), identity_linear(3)
        z = attention_adjacency(d, phi, psi)
        assert np.allclose(z.data, 1 / 5, atol=1e-12)

    def test_single_descriptor(self, rng):
        d = Tensor(rng.normal(size=(1, 4)), dtype=np.float64)
        z = attention_adjacency(d, identity_linear(4), identity_linear(4))
        assert np.allclose(z.data, [[1.0]])

    def test_orthogonal_pair_closed_form(self):
        d = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]), dtype=np.float64)
        z = attention_adjacency(d, identity_linear(2), identity_linear(2))
        # row 1 logits are [1, 0]
        assert abs(z.data[0, 0] - 0.73106) < 1e-5
        assert abs(z.data[0, 1] - 0.26894) < 1e-5

    def test_rows_stochastic(self, rng):
        d = Tensor(rng.normal(size=(9, 6)) * 3, dtype=np.float64)
        phi = Linear(rng, 6, 4, dtype=np.float64)
        psi = Linear(rng, 6, 4, dtype=np.float64)
        z = attention_adjacency(d, phi, psi)
        assert np.abs(z.data.sum(axis=1) - 1).max() < 1e-6


class TestReason:
    def test_identity_adjacency(self, rng):
        x = Tensor(rng.normal(size=(4, 3)), dtype=np.float64)
        w = Tensor(rng.normal(size=(3, 3)), dtype=np.float64)
        out = reason(Tensor(np.eye(4), dtype=np.float64), x, w)
        assert np.array_equal(out.data, np.maximum(x.data @ w.data, 0))

    def test_zero_weight_gives_zero(self, rng):
        x = Tensor(rng.normal(size=(4, 3)), dtype=np.float64)
        out = reason(Tensor(np.eye(4), dtype=np.float64), x, Tensor(np.zeros((3, 2)), dtype=np.float64))
        assert np.all(out.data == 0)

    def test_matches_composition(self, rng):
        z = Tensor(rng.uniform(size=(5, 5)), dtype=np.float64)
        x = Tensor(rng.normal(size=(5, 4)), dtype=np.float64)
        w = Tensor(rng.normal(size=(4, 4)), dtype=np.float64)
        assert np.array_equal(reason(z, x, w).data, T.relu(T.matmul(T.matmul(z, x), w)).data)


class TestReproject:
    def _projections(self, rng, c, embed):
        return (
            Linear(rng, c, embed, dtype=np.float64),
            Linear(rng, c, embed, dtype=np.float64),
            Linear(rng, c, c, dtype=np.float64),
        )

    def test_zero_eta_gives_spatially_constant(self, rng):
        c = 4
        rho, eta, zeta = self._projections(rng, c, 3)
        eta.weight.data[:] = 0
        eta.bias.data[:] = 0
        g = Tensor(rng.normal(size=(5, c)), dtype=np.float64)
        f = Tensor(rng.normal(size=(c, 4, 4)), dtype=np.float64)
        out, affinity = reproject(g, f, rho, eta, zeta)
        assert np.allclose(affinity.data, 1 / 16, atol=1e-12)
        for ch in out.data:
            assert np.abs(ch - ch[0, 0]).max() < 1e-9

    def test_zero_zeta_gives_zero(self, rng):
        c = 3
        rho, eta, zeta = self._projections(rng, c, 2)
        zeta.weight.data[:] = 0
        zeta.bias.data[:] = 0
        g = Tensor(rng.normal(size=(4, c)), dtype=np.float64)
        f = Tensor(rng.normal(size=(c, 3, 3)), dtype=np.float64)
        out, _ = reproject(g, f, rho, eta, zeta)
        assert np.all(out.data == 0)

    def test_matches_direct_oracle(self, rng):
        c, k, h, w = 5, 4, 3, 4
        rho, eta, zeta = self._projections(rng, c, 3)
        g = rng.normal(size=(k, c))
        f = rng.normal(size=(c, h, w))
        out, affinity = reproject(Tensor(g, dtype=np.float64), Tensor(f, dtype=np.float64), rho, eta, zeta)
        # direct evaluation: embed, two matmuls, one row softmax
        pix = f.reshape(c, -1).T
        logits = (g @ rho.weight.data + rho.bias.data) @ (pix @ eta.weight.data + eta.bias.data).T
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        ref = (a.T @ (g @ zeta.weight.data + zeta.bias.data)).T.reshape(c, h, w)
        assert np.abs(out.data - ref).max() < 1e-5
        assert np.abs(affinity.data.sum(axis=1) - 1).max() < 1e-6


class TestClassifierHead:
    def test_output_shape(self, rng):
        head = ClassifierHead(rng, in_channels=4, classes=3, hidden=8, dtype=np.float64)
        out = head(Tensor(rng.normal(size=(4, 5, 5)), dtype=np.float64), 10, 10)
        assert out.shape == (3, 10, 10)

    def test_zero_final_layer_uniform_posterior(self, rng):
        head = ClassifierHead(rng, in_channels=4, classes=5, hidden=8, dtype=np.float64)
        head.conv2.weight.data[:] = 0
        head.conv2.bias.data[:] = 0
        out = head(Tensor(rng.normal(size=(4, 4, 4)), dtype=np.float64), 8, 8)
        posterior = T.softmax(out.reshape(5, 64), axis=0)
        assert np.allclose(posterior.data, 0.2, atol=1e-12)

    def test_finite_difference_through_head(self, rng):
        head = ClassifierHead(rng, in_channels=3, classes=2, hidden=4, dtype=np.float64)
        x = Tensor(rng.normal(size=(3, 4, 4)), dtype=np.float64, requires_grad=True)
        mask = Tensor(rng.normal(size=(2, 8, 8)), dtype=np.float64)
        params = [p for _, p, _ in head.named_params()]
        err = gradient_check(lambda: T.tsum(head(x, 8, 8) * mask), [x] + params)
        assert err < 1e-4


class TestSagrnLoss:
    def test_uniform_logits(self):
        labels = np.array([[1, 2], [2, 1]], dtype=np.uint16)
        zeros = Tensor(np.zeros((3, 2, 2)), dtype=np.float64)
        loss = sagrn_loss(zeros, zeros, labels)
        assert loss.item() == pytest.approx(2 * np.log(3), abs=1e-9)

    def test_perfect_logits_vanish(self):
        labels = np.array([[1, 2]], dtype=np.uint16)
        logits = np.full((2, 1, 2), -500.0)
        logits[0, 0, 0] = 500.0
        logits[1, 0, 1] = 500.0
        loss = sagrn_loss(Tensor(logits, dtype=np.float64), Tensor(logits, dtype=np.float64), labels)
        assert loss.item() < 1e-9

    def test_matches_two_ce_oracles(self, rng):
        labels = rng.integers(0, 4, size=(4, 4)).astype(np.uint16)
        labels[0, 0] = 1  # at least one labeled pixel
        main = rng.normal(size=(3, 4, 4))
        aux = rng.normal(size=(3, 4, 4))
        loss = sagrn_loss(Tensor(main, dtype=np.float64), Tensor(aux, dtype=np.float64), labels)

        def ce_oracle(logits):
            total, count = 0.0, 0
            for r in range(4):
                for c in range(4):
                    y = labels[r, c]
                    if y == 0:
                        continue
                    z = logits[:, r, c]
                    z = z - z.max()
                    total += -(z[y - 1] - np.log(np.exp(z).sum()))
                    count += 1
            return total / count

        assert abs(loss.item() - (ce_oracle(main) + ce_oracle(aux))) < 1e-6


class TestBranchInvariants:
    def _forward(self, rng, feature):
        branch = SpatialBranch(rng, channels=feature.shape[0], classes=3, head_hidden=8, dtype=np.float64)
        assign = soft_assign_iterate(feature, SlicConfig(clusters=4, iters=2))
        return branch.forward(feature, assign, feature.shape[1] * 2, feature.shape[2] * 2)

    def test_adjacency_and_affinity_stochastic(self, rng):
        out = self._forward(rng, Tensor(rng.normal(size=(4, 6, 6)), dtype=np.float64))
        assert np.abs(out.graph.adjacency.data.sum(axis=1) - 1).max() < 1e-6
        assert np.abs(out.affinity.data.sum(axis=1) - 1).max() < 1e-6

    def test_constant_feature_constant_output(self, rng):
        out = self._forward(rng, Tensor(np.full((4, 6, 6), 2.0), dtype=np.float64))
        # identical descriptors and constant logits: exactly uniform adjacency
        assert np.allclose(out.graph.adjacency.data, 1 / 4, atol=1e-9)
        for ch in out.feature_main.data:
            assert np.abs(ch - ch[0, 0]).max() < 1e-9

    def test_end_to_end_gradient_through_superpixels(self, rng):
        config = ModelConfig(
            in_bands=3, classes=3, height=8, width=8, widths=(4, 6, 8),
            descriptors=4, spectral_descriptors=4, variant="sagrn",
            slic_iters=2, head_hidden=8,
        )
        model = SSGRN(config, seed=0, dtype=np.float64)
        image = Tensor(rng.normal(size=(3, 8, 8)), dtype=np.float64)
        labels = rng.integers(1, 4, size=(8, 8)).astype(np.uint16)
        mask = np.ones((8, 8), dtype=bool)

        def loss():
            out = model.forward(image)
            return total_loss("sagrn", model.branch_losses(out, labels, mask))

        weight = model.block1.conv.weight
        err = sampled_gradient_check(loss, weight, n_samples=4, rng=rng)
        assert err < 1e-4
