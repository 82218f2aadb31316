from __future__ import annotations

import numpy as np
import pytest

from gsnop import autodiff as ad
from gsnop.encoder import TimeEncoding
from gsnop.errors import UsageError
from gsnop.latent import (
    SIGMA_MIN,
    AggregatorKind,
    LatentAggregator,
    LatentState,
    aggregate_mean,
    time_buckets,
)
from gsnop.odeint import SolverConfig

from .conftest import FIXED_RK4

D = 6


def make(kind=AggregatorKind.GSNOP, seed=0, solver=FIXED_RK4):
    return LatentAggregator(np.random.default_rng(seed), kind, D, TimeEncoding(D), solver)


def zero_out(module):
    for param in module.parameters().values():
        param.value = np.zeros_like(param.value)


def reps(n, seed=1):
    return ad.Tensor(np.random.default_rng(seed).normal(size=(n, D)))


class TestMeanAggregation:
    def test_single_rep_is_itself(self):
        r = reps(1)
        np.testing.assert_array_equal(aggregate_mean(r).value, r.value)

    def test_permutation_invariant(self):
        r = reps(7)
        shuffled = ad.Tensor(r.value[np.random.default_rng(0).permutation(7)])
        np.testing.assert_allclose(aggregate_mean(r).value, aggregate_mean(shuffled).value)

    def test_opposite_vectors_cancel(self):
        v = np.random.default_rng(2).normal(size=(1, D))
        out = aggregate_mean(ad.Tensor(np.concatenate([v, -v])))
        np.testing.assert_allclose(out.value, np.zeros((1, D)), atol=1e-15)

    def test_empty_context_uses_prior_vector(self):
        agg = make(AggregatorKind.NP)
        assert agg.aggregate_mean(ad.Tensor(np.zeros((0, D)))) is agg.r0

    def test_empty_without_fallback(self):
        with pytest.raises(UsageError):
            aggregate_mean([])


class TestSequentialAggregation:
    def test_zero_gru_on_zero_input_stays_zero(self):
        agg = make()
        zero_out(agg.gru)
        prev = LatentState(ad.Tensor(np.zeros((1, D))), 0.0)
        out = agg.aggregate_sequential(prev, ad.Tensor(np.zeros((2, D))), 1.0)
        np.testing.assert_array_equal(out.r.value, np.zeros((1, D)))
        assert out.t_ref == 1.0

    def test_first_bucket_is_its_mean(self):
        agg = make()
        r = reps(3)
        state = agg.sequence(r, np.array([0.4, 0.4, 0.4]))
        np.testing.assert_allclose(state.r.value, r.value.mean(axis=0, keepdims=True))
        assert state.t_ref == 0.4

    def test_bucket_order_matters(self):
        agg = make()
        a, b, c = reps(2, seed=3), reps(2, seed=4), reps(2, seed=5)
        forward = agg.sequence(ad.concat([c, a, b], axis=0), np.array([0, 0, 1, 1, 2, 2.0]))
        swapped = agg.sequence(ad.concat([c, b, a], axis=0), np.array([0, 0, 1, 1, 2, 2.0]))
        assert not np.allclose(forward.r.value, swapped.r.value)

    def test_out_of_order_bucket(self):
        agg = make()
        state = LatentState(reps(1), 0.8)
        with pytest.raises(UsageError):
            agg.aggregate_sequential(state, reps(2), 0.5)

    def test_buckets_group_equal_stamps(self):
        groups = time_buckets(np.array([0.3, 0.1, 0.3, 0.2]))
        assert [t for t, _ in groups] == [0.1, 0.2, 0.3]
        assert [list(rows) for _, rows in groups] == [[1], [3], [0, 2]]

    def test_empty_sequential_context_falls_back_to_prior(self):
        agg = make(AggregatorKind.SNP)
        state = agg.summarize(ad.Tensor(np.zeros((0, D))), np.array([]))
        assert state.r is agg.r0
        assert state.t_ref == 0.0


class TestOdeEvolution:
    def test_zero_horizon_is_identity(self):
        agg = make()
        state = LatentState(reps(1), 0.3)
        out = agg.evolve_ode(state, 0.3)
        assert out.r is state.r

    def test_zero_dynamics_keep_state(self):
        agg = make()
        zero_out(agg.dynamics.mlp)
        state = LatentState(reps(1), 0.0)
        np.testing.assert_allclose(agg.evolve_ode(state, 0.9).r.value, state.r.value)

    def test_backward_evolution_is_rejected(self):
        with pytest.raises(UsageError):
            make().evolve_ode(LatentState(reps(1), 0.5), 0.2)

    def test_splitting_is_consistent_for_aligned_fixed_steps(self):
        agg = make()
        start = LatentState(reps(1), 0.0)
        direct = agg.evolve_ode(start, 1.0).r.value
        halfway = agg.evolve_ode(agg.evolve_ode(start, 0.5), 1.0).r.value
        np.testing.assert_allclose(direct, halfway, atol=10 * (1e-5 + 1e-7))

    @pytest.mark.parametrize("horizon", [0.01, 0.3, 1.0, 4.0])
    def test_drift_is_bounded_by_the_horizon(self, horizon):
        rng = np.random.default_rng(12)
        for seed in range(10):
            agg = make(seed=seed)
            start = LatentState(ad.Tensor(rng.normal(scale=3.0, size=(1, D))), 0.5)
            moved = agg.evolve_ode(start, 0.5 + horizon).r.value
            assert np.max(np.abs(moved - start.r.value)) <= horizon + 1e-12

    def test_adaptive_solver_reaches_target(self):
        agg = make(solver=SolverConfig())
        out = agg.evolve_ode(LatentState(reps(1), 0.0), 0.7)
        assert out.t_ref == 0.7
        assert np.all(np.isfinite(out.r.value))


class TestDistributionHead:
    def test_bounds_on_random_inputs(self):
        agg = make()
        r = ad.Tensor(np.random.default_rng(0).normal(scale=5.0, size=(1000, D)))
        mu, sigma = agg.head(r)
        assert np.all(mu.value >= 0.0)
        assert np.all(sigma.value > SIGMA_MIN)
        assert np.all(sigma.value < 1.0)

    def test_zero_preactivation_gives_midpoint(self):
        agg = make()
        zero_out(agg.head.sigma)
        _, sigma = agg.head(reps(1))
        np.testing.assert_allclose(sigma.value, 0.55, rtol=0, atol=1e-15)


class TestPrior:
    def test_gsnop_equals_snp_at_zero_horizon(self):
        context = LatentState(reps(1), 0.4)
        gsnop = make(AggregatorKind.GSNOP).build_prior(context, 0.4)
        snp = make(AggregatorKind.SNP).build_prior(context, 0.4)
        np.testing.assert_array_equal(gsnop.mu.value, snp.mu.value)
        np.testing.assert_array_equal(gsnop.sigma.value, snp.sigma.value)

    def test_target_time_matters_only_for_gsnop(self):
        context = LatentState(reps(1), 0.1)
        gsnop, snp = make(AggregatorKind.GSNOP), make(AggregatorKind.SNP)
        near, far = gsnop.build_prior(context, 0.3), gsnop.build_prior(context, 0.9)
        assert not np.allclose(near.sigma.value, far.sigma.value)
        np.testing.assert_array_equal(
            snp.build_prior(context, 0.3).sigma.value, snp.build_prior(context, 0.9).sigma.value
        )

    @pytest.mark.parametrize("kind", list(AggregatorKind))
    def test_prior_from_reps_has_valid_head(self, kind):
        agg = make(kind)
        prior = agg.prior_from_reps(reps(5), np.array([0.1, 0.1, 0.2, 0.3, 0.3]), 0.6)
        assert prior.mu.shape == prior.sigma.shape == (1, D)
        assert np.all(prior.sigma.value > SIGMA_MIN)

    def test_gradients_reach_ode_parameters(self):
        agg = make()
        context = LatentState(ad.Tensor(reps(1).value, requires_grad=True), 0.0)
        params = agg.dynamics.parameters()
        with ad.Tape():
            prior = agg.build_prior(context, 0.5)
            ad.backward(ad.sum(prior.sigma))
        assert any(np.any(p.grad != 0.0) for p in params.values())
        assert np.any(context.r.grad != 0.0)
