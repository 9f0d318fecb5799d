"""VICReg terms, reconstruction loss and their weighted combination."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eqrecon.gradcore import ContractError, DimensionError, Tensor, grad_of
from eqrecon.gradcore.gradcheck import check_gradients
from eqrecon.losses import LossWeights, recon_loss, total_loss, vicreg_loss, weighted_ssl
from eqrecon.modelcheck import tiny_model


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def reference_vicreg(z1, z2, gamma=1.0, eps=1e-4):
    """Loop-level restatement used as an independent oracle."""
    n, d = z1.shape
    inv = sum((z1[i, j] - z2[i, j]) ** 2 for i in range(n) for j in range(d)) / (n * d)

    def var_term(z):
        total = 0.0
        for j in range(d):
            m = sum(z[i, j] for i in range(n)) / n
            v = sum((z[i, j] - m) ** 2 for i in range(n)) / (n - 1)
            total += max(0.0, gamma - (v + eps) ** 0.5)
        return total / d

    def cov_term(z):
        m = [sum(z[i, j] for i in range(n)) / n for j in range(d)]
        s = 0.0
        for a in range(d):
            for b in range(d):
                if a != b:
                    c = sum((z[i, a] - m[a]) * (z[i, b] - m[b]) for i in range(n)) / (n - 1)
                    s += c * c
        return s / d

    return inv, 0.5 * (var_term(z1) + var_term(z2)), cov_term(z1) + cov_term(z2)


class TestVicreg:
    def test_equal_inputs_zero_invariance(self):
        z = t64(np.random.default_rng(0).normal(size=(5, 3)))
        inv, _, _ = vicreg_loss(z, z)
        assert float(inv.data) == 0.0

    def test_hand_case(self):
        z = t64([[1.0, 0.0], [-1.0, 0.0]])
        inv, var, cov = vicreg_loss(z, z, LossWeights(eps=1e-12))
        assert float(cov.data) == 0.0
        # dim 0: std sqrt(2) >= 1, hinge 0; dim 1: std 0, hinge 1 -> mean 0.5
        assert float(var.data) == pytest.approx(0.5, abs=1e-6)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        z1, z2 = rng.normal(size=(6, 4)) * 0.5, rng.normal(size=(6, 4)) * 0.5
        got = [float(t.data) for t in vicreg_loss(t64(z1), t64(z2))]
        np.testing.assert_allclose(got, reference_vicreg(z1, z2), rtol=1e-10)

    def test_needs_two_samples(self):
        with pytest.raises(ContractError):
            vicreg_loss(t64(np.zeros((1, 3))), t64(np.zeros((1, 3))))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            vicreg_loss(t64(np.zeros((3, 3))), t64(np.zeros((3, 2))))

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, (4, 3), elements=st.floats(-10, 10)),
        arrays(np.float64, (4, 3), elements=st.floats(-10, 10)),
    )
    def test_nonnegative_and_symmetric(self, a, b):
        ab = [float(t.data) for t in vicreg_loss(t64(a), t64(b))]
        ba = [float(t.data) for t in vicreg_loss(t64(b), t64(a))]
        assert all(x >= 0 for x in ab)
        assert ab[0] == pytest.approx(ba[0])

    def test_gradients(self):
        rng = np.random.default_rng(2)
        z1 = Tensor(rng.normal(size=(5, 3)), requires_grad=True, dtype=np.float64)
        z2 = Tensor(rng.normal(size=(5, 3)), requires_grad=True, dtype=np.float64)
        w = LossWeights()
        assert check_gradients(lambda: weighted_ssl(*vicreg_loss(z1, z2, w), w), [z1, z2]) < 1e-3


class TestRecon:
    def test_zero_when_equal(self):
        x = np.random.default_rng(0).uniform(0, 1, (2, 3, 4, 4))
        assert float(recon_loss(t64(x), x).data) == 0.0

    def test_constant_offset(self):
        x = np.random.default_rng(0).uniform(0, 1, (2, 3, 4, 4))
        assert float(recon_loss(t64(x + 0.1), x).data) == pytest.approx(0.01, rel=1e-9)

    def test_loop_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(0, 1, (2, 3, 3, 3)), rng.uniform(0, 1, (2, 3, 3, 3))
        ref = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert float(recon_loss(t64(a), b).data) == pytest.approx(ref, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            recon_loss(t64(np.zeros((1, 3, 4, 4))), np.zeros((1, 3, 4, 5)))


class TestTotal:
    def test_analytic(self):
        assert total_loss(2.5, 0.5, LossWeights()) == 3.0

    def test_ablations(self):
        assert total_loss(2.5, 0.5, LossWeights(lambda_recon=0.0)) == 2.5
        assert total_loss(2.5, 0.5, LossWeights(lambda_ssl=0.0)) == 0.5

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5), st.floats(0, 4))
    def test_linearity(self, ssl, rec, l1, l2, a):
        base = total_loss(ssl, rec, LossWeights(lambda_ssl=l1, lambda_recon=l2))
        scaled = total_loss(ssl, rec, LossWeights(lambda_ssl=a * l1, lambda_recon=a * l2))
        assert scaled == pytest.approx(a * base, rel=1e-12, abs=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_recon=-1.0)

    def test_gradient_is_weighted_branch_sum(self):
        model = tiny_model()
        rng = np.random.default_rng(4)
        v1, v2 = rng.uniform(0, 1, (4, 3, 4, 4)), rng.uniform(0, 1, (4, 3, 4, 4))
        params = model.parameters()
        w = LossWeights(lambda_ssl=0.7, lambda_recon=1.3)

        def parts():
            e1, e2 = model.project(model.encode(v1)), model.project(model.encode(v2))
            return weighted_ssl(*vicreg_loss(e1.z_inv, e2.z_inv, w), w), recon_loss(model.decode(e1.z_equi, e2.z_equi), v2)

        g_total = grad_of(lambda: total_loss(*parts(), w), params)
        g_ssl = grad_of(lambda: parts()[0], params)
        g_rec = grad_of(lambda: parts()[1], params)
        for gt, gs, gr in zip(g_total, g_ssl, g_rec):
            np.testing.assert_allclose(gt, 0.7 * gs + 1.3 * gr, rtol=1e-9, atol=1e-12)
        assert check_gradients(lambda: total_loss(*parts(), w), [model.decoder.blocks[0].attn.w_q, model.encoder.pos]) < 1e-3
