"""Exact enumeration oracle: moments, closed-form biases, variance identities."""

import numpy as np
import pytest

from chips_ope.core import DataValidationError, RandomStream
from chips_ope.oracle import (
    DiscreteInstance,
    EnumerationLimitError,
    bias_difference_deficient,
    cluster_form_value,
    delta_bounds,
    embedding_bias_difference,
    exact_bias_deficient,
    exact_moments,
    mr_shift_bias_residual,
    mse_identity_residual,
    random_common_support_instance,
    random_deficient_instance,
    random_instance,
    random_joint_instance,
    true_value,
    variance_gap,
    variance_ordering,
)


class TestTrueValue:
    def test_zero_rewards(self):
        inst = DiscreteInstance(p_x=[1.0], cluster_of=[0], pi=[[0.5, 0.5]],
                                pi0=[[0.5, 0.5]], q=[[0.0, 0.0]])
        assert true_value(inst) == 0.0

    def test_deterministic_policy_reads_one_cell(self):
        inst = DiscreteInstance(p_x=[1.0], cluster_of=[0], pi=[[1.0, 0.0]],
                                pi0=[[0.5, 0.5]], q=[[0.7, 0.2]])
        assert true_value(inst) == pytest.approx(0.7, abs=1e-15)

    def test_cluster_form_agrees_under_homogeneity(self):
        for seed in range(5):
            inst = random_instance(RandomStream(seed), homogeneous_rewards=True)
            assert cluster_form_value(inst) == pytest.approx(true_value(inst), abs=1e-12)


class TestExactMoments:
    def test_ips_unbiased_under_full_support(self):
        for seed in range(10):
            inst = random_instance(RandomStream(100 + seed))
            mean, _ = exact_moments(inst, "ips")
            assert abs(mean - true_value(inst)) < 1e-12

    def test_cluster_estimator_unbiased_when_homogeneous(self):
        for seed in range(10):
            inst = random_instance(RandomStream(200 + seed), homogeneous_rewards=True)
            mean, _ = exact_moments(inst, "chips")
            assert abs(mean - true_value(inst)) < 1e-12

    def test_on_policy_variance_is_reward_variance(self):
        inst = random_instance(RandomStream(300))
        same = DiscreteInstance(inst.p_x, inst.cluster_of, inst.pi0, inst.pi0, inst.q)
        _, var = exact_moments(same, "ips", n=1)
        # reward variance under the logging distribution, computed directly
        mean_r = float((same.p_x[:, None] * same.pi0 * same.q).sum())
        second_r = mean_r  # r^2 = r for Bernoulli draws
        assert var == pytest.approx(second_r - mean_r ** 2, abs=1e-14)

    def test_iid_scaling_in_n(self):
        inst = random_instance(RandomStream(301))
        mean1, var1 = exact_moments(inst, "ips", n=1)
        mean10, var10 = exact_moments(inst, "ips", n=10)
        assert mean10 == mean1 and var10 == pytest.approx(var1 / 10, abs=1e-15)

    def test_model_based_estimators_unsupported(self):
        inst = random_instance(RandomStream(302))
        with pytest.raises(ValueError):
            exact_moments(inst, "dm")

    def test_mse_decomposition_is_exact(self):
        inst = random_instance(RandomStream(303), homogeneous_rewards=True)
        v = true_value(inst)
        mean, var = exact_moments(inst, "chips", n=3)
        w = inst.cluster_marginal("eval")[inst.cluster_of] / inst.cluster_marginal("log")[inst.cluster_of]
        atom = inst.p_x[:, None] * inst.pi0
        second = float((atom * w * w * inst.q).sum())
        direct_mse1 = second - 2 * v * mean + v * v  # E[(w r - V)^2] for n = 1
        assert (mean - v) ** 2 + var * 3 == pytest.approx(direct_mse1, abs=1e-12)


class TestDeficiencyBias:
    def test_full_support_means_zero_bias(self):
        inst = random_instance(RandomStream(400), homogeneous_rewards=True)
        assert exact_bias_deficient(inst, "ips") == 0.0
        assert exact_bias_deficient(inst, "chips") == 0.0

    def test_closed_forms_match_enumeration(self):
        for seed in range(10):
            inst = random_deficient_instance(RandomStream(500 + seed))
            v = true_value(inst)
            assert exact_bias_deficient(inst, "ips") == pytest.approx(
                v - exact_moments(inst, "ips")[0], abs=1e-12)
            assert exact_bias_deficient(inst, "chips") == pytest.approx(
                v - exact_moments(inst, "chips")[0], abs=1e-12)

    def test_difference_identity(self):
        for seed in range(10):
            inst = random_deficient_instance(RandomStream(600 + seed))
            diff = exact_bias_deficient(inst, "ips") - exact_bias_deficient(inst, "chips")
            assert bias_difference_deficient(inst) == pytest.approx(diff, abs=1e-12)
            assert diff >= -1e-15  # the cluster estimator never loses more mass

    def test_requires_cluster_constant_rewards(self):
        inst = random_instance(RandomStream(700))  # heterogeneous q
        with pytest.raises(DataValidationError):
            exact_bias_deficient(inst, "chips")


class TestDeltaBounds:
    def test_cluster_constant_policies_are_perfectly_homogeneous(self):
        rng = RandomStream(800).generator()
        cluster_of = np.array([0, 0, 1, 1])
        pi = rng.dirichlet(np.ones(3), size=2)[cluster_of]
        pi0 = rng.dirichlet(np.ones(3), size=2)[cluster_of]
        inst = DiscreteInstance(p_x=[0.25] * 4, cluster_of=cluster_of, pi=pi, pi0=pi0,
                                q=rng.uniform(size=(4, 3)))
        bounds = delta_bounds(inst)
        np.testing.assert_allclose(bounds.spread, 0.0, atol=1e-12)
        assert bounds.bias_bound == pytest.approx(0.0, abs=1e-12)

    def test_envelopes_straddle_one(self):
        for seed in range(5):
            inst = random_instance(RandomStream(900 + seed))
            bounds = delta_bounds(inst)
            assert (bounds.lower_eval <= 1.0 + 1e-12).all()
            assert (bounds.upper_eval >= 1.0 - 1e-12).all()
            assert (bounds.lower_log <= 1.0 + 1e-12).all()
            assert (bounds.upper_log >= 1.0 - 1e-12).all()

    def test_bound_dominates_exact_bias(self):
        for seed in range(20):
            inst = random_instance(RandomStream(1000 + seed))
            bias = abs(exact_moments(inst, "chips")[0] - true_value(inst))
            assert bias <= delta_bounds(inst).bias_bound + 1e-12


class TestVarianceGap:
    def test_identical_policies_have_zero_gap(self):
        inst = random_instance(RandomStream(1100), homogeneous_rewards=True)
        same = DiscreteInstance(inst.p_x, inst.cluster_of, inst.pi0, inst.pi0, inst.q)
        assert variance_gap(same) == pytest.approx(0.0, abs=1e-14)

    def test_singleton_clusters_have_zero_gap(self):
        inst = random_instance(RandomStream(1101), n_contexts=6, n_clusters=6,
                               homogeneous_rewards=True)
        assert variance_gap(inst) == pytest.approx(0.0, abs=1e-14)

    def test_matches_enumerated_variance_difference(self):
        for seed in range(10):
            inst = random_instance(RandomStream(1200 + seed), homogeneous_rewards=True)
            _, var_ips = exact_moments(inst, "ips")
            _, var_ch = exact_moments(inst, "chips")
            gap = variance_gap(inst)
            assert gap >= -1e-15
            assert gap == pytest.approx(var_ips - var_ch, abs=1e-10)

    def test_rejects_heterogeneous_rewards(self):
        inst = random_instance(RandomStream(1300))
        with pytest.raises(DataValidationError):
            variance_gap(inst)


class TestMseIdentity:
    def test_residual_vanishes_under_common_support(self):
        for seed in range(5):
            inst = random_common_support_instance(RandomStream(1400 + seed))
            assert abs(mse_identity_residual(inst)) < 1e-10

    def test_residual_vanishes_with_covered_zeros(self):
        for seed in range(5):
            inst = random_common_support_instance(RandomStream(1500 + seed), with_zeros=True,
                                                  homogeneous_rewards=True)
            assert abs(mse_identity_residual(inst)) < 1e-10

    def test_residual_is_scale_free_in_n(self):
        inst = random_common_support_instance(RandomStream(1600), with_zeros=True)
        assert mse_identity_residual(inst, 1) == pytest.approx(
            mse_identity_residual(inst, 10), abs=1e-12)


class TestJointInstances:
    def test_variance_ordering(self):
        for seed in range(10):
            inst = random_joint_instance(RandomStream(1700 + seed))
            var_ips, var_mips, var_chips = variance_ordering(inst)
            assert var_ips >= var_mips - 1e-12
            assert var_mips >= var_chips - 1e-12
            assert var_chips >= 0.0

    def test_embedding_bias_difference_identity(self):
        for seed in range(10):
            inst = random_joint_instance(RandomStream(1800 + seed), embedding_deficient=True)
            v = true_value(inst)
            lhs = abs(v - exact_moments(inst, "mips")[0]) - abs(v - exact_moments(inst, "chips")[0])
            assert embedding_bias_difference(inst) == pytest.approx(lhs, abs=1e-10)

    def test_reward_category_coupling_enforced(self):
        inst = random_joint_instance(RandomStream(1900))
        q = inst.q.copy()
        q[0, 0] = 1.0 - q[0, 0]  # break the category measurability
        broken = DiscreteInstance(inst.p_x, inst.cluster_of, inst.pi, inst.pi0, q,
                                  inst.action_embeddings)
        with pytest.raises(DataValidationError):
            embedding_bias_difference(broken)


class TestWeightShiftIdentity:
    def test_residual_vanishes(self):
        for seed, eps in ((1, 0.0), (2, 0.3), (3, -0.2), (4, 1.5)):
            inst = random_instance(RandomStream(2000 + seed), homogeneous_rewards=True)
            assert abs(mr_shift_bias_residual(inst, eps)) < 1e-12


class TestLimitsAndSerialization:
    def test_enumeration_cap(self):
        m, a = 2500, 5
        with pytest.raises(EnumerationLimitError):
            DiscreteInstance(p_x=np.full(m, 1 / m), cluster_of=np.zeros(m, dtype=int),
                             pi=np.full((m, a), 1 / a), pi0=np.full((m, a), 1 / a),
                             q=np.zeros((m, a)))

    def test_json_round_trip(self):
        inst = random_joint_instance(RandomStream(2100))
        back = DiscreteInstance.from_json(inst.to_json())
        np.testing.assert_array_equal(back.pi, inst.pi)
        np.testing.assert_array_equal(back.q, inst.q)
        np.testing.assert_array_equal(back.action_embeddings, inst.action_embeddings)

    def test_invalid_rows_rejected(self):
        with pytest.raises(DataValidationError):
            DiscreteInstance(p_x=[0.5, 0.4], cluster_of=[0, 0],
                             pi=[[1.0, 0.0]] * 2, pi0=[[0.5, 0.5]] * 2, q=[[0.0, 0.0]] * 2)
        with pytest.raises(DataValidationError):
            DiscreteInstance(p_x=[1.0], cluster_of=[0], pi=[[0.5, 0.5]],
                             pi0=[[0.5, 0.5]], q=[[1.5, 0.0]])
