import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infomaxda import losses
from infomaxda.losses import EmaState, LossBreakdown, MiBatch
from infomaxda.numerics import Net, Rng
from infomaxda.oracle import gaussian_kld

# values below were computed once with 40-digit arithmetic and frozen
CE_123_LABEL2 = 0.407605964444380304
ENTROPY_10 = 0.582203108888217955


def critic_pair(seed=0, d_in=3):
    rng = Rng(seed)
    return Net([d_in, 8, 1], "elu", rng.fork()), Net([d_in, 8, 1], "elu", rng.fork())


def random_batch(seed=1, n=16, dx=1, dz=2):
    rng = Rng(seed)
    x = rng.normal(n * dx).reshape(n, dx)
    z = rng.normal(n * dz).reshape(n, dz)
    return MiBatch.from_joint(x, z, rng)


class TestClassification:
    def test_reference_value(self):
        value, _ = losses.classification_loss([[1.0, 2.0, 3.0]], [2])
        assert value == pytest.approx(CE_123_LABEL2, abs=1e-15)

    def test_uniform_logits(self):
        value, _ = losses.classification_loss(np.zeros((5, 4)), [0, 1, 2, 3, 0])
        assert value == pytest.approx(math.log(4), abs=1e-15)

    def test_gradient_rows_sum_to_zero(self):
        _, g = losses.classification_loss(Rng(0).normal(12).reshape(4, 3), [0, 2, 1, 1])
        np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-16)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            losses.classification_loss([[0.0, 1.0]], [2])


class TestEntropy:
    def test_reference_value(self):
        value, _ = losses.entropy_penalty([[1.0, 0.0]])
        assert value == pytest.approx(ENTROPY_10, abs=1e-15)

    def test_uniform_is_log_c(self):
        value, g = losses.entropy_penalty(np.zeros((3, 5)))
        assert value == pytest.approx(math.log(5), abs=1e-15)
        np.testing.assert_allclose(g, 0.0, atol=1e-16)

    def test_confident_is_near_zero(self):
        value, _ = losses.entropy_penalty([[60.0, 0.0, 0.0]])
        assert 0.0 <= value < 1e-20

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
    def test_bounds(self, row):
        value, _ = losses.entropy_penalty([row])
        assert -1e-12 <= value <= math.log(len(row)) + 1e-12


class TestLatentKld:
    def test_identical_batches(self):
        z = Rng(0).normal(40).reshape(10, 4)
        value, dzs, dzt = losses.latent_kld(z, z.copy())
        assert value == 0.0
        np.testing.assert_allclose(dzs, 0.0, atol=1e-16)
        np.testing.assert_allclose(dzt, 0.0, atol=1e-16)

    def test_matches_closed_form_on_moments(self):
        rng = Rng(3)
        zs = rng.normal(60).reshape(20, 3) * 1.7 + 0.4
        zt = rng.normal(45).reshape(15, 3) * 0.6 - 1.0
        value, _, _ = losses.latent_kld(zs, zt)
        expected = gaussian_kld(zs.mean(0), zs.var(0, ddof=1), zt.mean(0), zt.var(0, ddof=1))
        assert value == pytest.approx(expected, rel=1e-13)

    def test_variance_two_against_one(self):
        # KL(N(0, 2) || N(0, 1)) = 0.5 * (2 - 1 - log 2)
        zs = np.array([[-1.0], [1.0]])  # unbiased variance 2
        zt = np.array([[-math.sqrt(0.5)], [math.sqrt(0.5)]])  # unbiased variance 1
        value, _, _ = losses.latent_kld(zs, zt)
        assert value == pytest.approx(0.153426409720027345, abs=1e-15)

    def test_non_negative_and_asymmetric(self):
        rng = Rng(5)
        zs = rng.normal(30).reshape(10, 3) * 2.0
        zt = rng.normal(30).reshape(10, 3)
        forward = losses.latent_kld(zs, zt)[0]
        backward = losses.latent_kld(zt, zs)[0]
        assert forward > 0 and backward > 0 and forward != backward

    def test_constant_batch_is_floored(self):
        zs = np.ones((5, 2))
        value, dzs, _ = losses.latent_kld(zs, Rng(1).normal(10).reshape(5, 2))
        assert math.isfinite(value)
        assert np.all(np.isfinite(dzs))

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            losses.latent_kld(np.ones((1, 2)), np.ones((3, 2)))


class TestMiBatch:
    def test_from_joint_is_permutation(self):
        b = random_batch()
        assert b.is_permutation()
        np.testing.assert_array_equal(b.z_marginal, b.z_joint[b.perm])

    def test_row_counts_must_match(self):
        with pytest.raises(ValueError):
            MiBatch(np.zeros((3, 1)), np.zeros((4, 1)), np.zeros((3, 1)))

    def test_resampling_needs_two_rows(self):
        with pytest.raises(ValueError):
            losses.resample_marginal(np.zeros((1, 2)), Rng(0))

    def test_resample_keeps_rows(self):
        z = np.arange(10.0).reshape(5, 2)
        out = losses.resample_marginal(z, Rng(4))
        assert sorted(map(tuple, out)) == sorted(map(tuple, z))


class TestMiLoss:
    def test_constant_critics_give_zero(self):
        m1, m2 = critic_pair()
        for net in (m1, m2):
            for p in net.parameters():
                p.fill(0.0)
            net.biases[-1][:] = 0.7
        out = losses.mi_loss(m1, m2, random_batch())
        assert out.value == pytest.approx(0.0, abs=1e-15)

    def test_shared_critic_equals_dv_bound(self):
        m1, _ = critic_pair()
        b = random_batch()
        assert losses.mi_loss(m1, m1, b).value == -losses.dv_bound_single(m1, b).value

    def test_definition(self):
        m1, m2 = critic_pair()
        b = random_batch()
        a = m1.forward(np.hstack([b.x_joint, b.z_joint]))[:, 0]
        c = m2.forward(np.hstack([b.x_joint, b.z_marginal]))[:, 0]
        expected = -(a.mean() - math.log(np.mean(np.exp(c))))
        assert losses.mi_loss(m1, m2, b).value == pytest.approx(expected, abs=1e-14)

    def test_constraint_gap_sign(self):
        m1, m2 = critic_pair()
        b = random_batch()
        m1.biases[-1][:] += 5.0
        assert losses.constraint_gap(m1, m2, b) > 0

    def test_forward_only_leaves_gradients(self):
        m1, m2 = critic_pair()
        out = losses.mi_loss(m1, m2, random_batch())
        assert out.dz_joint is None
        assert all(np.all(g == 0) for n in (m1, m2) for g in n.gradients())

    def test_param_grads_off(self):
        m1, m2 = critic_pair()
        out = losses.mi_loss(m1, m2, random_batch(), grad=1.0, param_grads=False)
        assert out.dz_joint.shape == (16, 2)
        assert all(np.all(g == 0) for n in (m1, m2) for g in n.gradients())

    def test_critic_dimension_check(self):
        m1, m2 = critic_pair(d_in=4)
        with pytest.raises(ValueError):
            losses.mi_loss(m1, m2, random_batch())


class TestCriticObjective:
    def test_hinge_adds_gradient_only_when_violated(self):
        b = random_batch()
        m1, m2 = critic_pair()
        m1.biases[-1][:] = -5.0  # gap < 0: hinge inactive
        plain = m1.copy(), m2.copy()
        losses.critic_objective(m1, m2, b, hinge_lambda=3.0)
        losses.critic_objective(*plain, b, hinge_lambda=0.0)
        for a, c in zip(m1.gradients() + m2.gradients(), plain[0].gradients() + plain[1].gradients()):
            np.testing.assert_array_equal(a, c)

    def test_hinge_pushes_gap_down(self):
        b = random_batch()
        m1, m2 = critic_pair()
        m1.biases[-1][:] = 5.0
        _, gap = losses.critic_objective(m1, m2, b, hinge_lambda=3.0)
        assert gap > 0
        # d/d(bias of M1) of L_mi + 3 gap is -1 + 3
        assert m1.grad_b[-1][0] == pytest.approx(2.0, abs=1e-12)
        assert m2.grad_b[-1][0] == pytest.approx(1.0 - 3.0, abs=1e-12)

    def test_ema_changes_marginal_weights(self):
        b = random_batch()
        m1, m2 = critic_pair()
        ema = EmaState(0.5)
        losses.critic_objective(m1, m2, b, ema=ema)
        assert math.isfinite(ema.log_value)


class TestEma:
    def test_first_update_initialises(self):
        ema = EmaState(0.1)
        assert ema.update(2.0) == 2.0

    def test_log_space_average(self):
        ema = EmaState(0.25)
        ema.update(0.0)
        got = ema.update(math.log(5.0))
        assert got == pytest.approx(math.log(0.75 * 1.0 + 0.25 * 5.0), abs=1e-15)


class TestRecon:
    def test_perfect_decoder(self):
        dec = Net([2, 2], "identity")
        dec.weights[0][:] = np.eye(2)
        z = Rng(0).normal(8).reshape(4, 2)
        value, dz = losses.recon_mi_baseline(dec, z, z, grad=1.0)
        assert value == 0.0
        np.testing.assert_array_equal(dz, 0.0)

    def test_value(self):
        dec = Net([1, 1], "identity")
        value, _ = losses.recon_mi_baseline(dec, [[1.0], [3.0]], [[0.0], [0.0]])
        assert value == pytest.approx(5.0)


def test_loss_breakdown_total():
    lb = LossBreakdown(l_cls=1.0, l_kld=2.0, l_mi=-0.5, l_ent=0.3, alpha=1.0, beta=0.01, gamma=0.1)
    assert lb.total == pytest.approx(1.0 + 2.0 - 0.005 + 0.03)
