"""Neuron dynamics against direct scalar evaluation, expansion identities,
and the accumulate-only product contract."""

import math

import numpy as np
import pytest

from spike2.neurons import (
    NeuronConfig,
    QuantizationError,
    SpikePlan,
    expand_to_spikes,
    firing_rate,
    i_lif_step,
    init_state,
    lif_step,
    ni_lif_step,
    reparam_scale_into_threshold,
    spike_matmul,
)


def scalar_oracle(x, h, beta, theta, d):
    """The three-line dynamics, written independently in plain python."""
    u = h + x / theta
    r = math.floor(abs(u) + 0.5) * (1 if u >= 0 else -1)
    m = min(max(r, 0.0), float(d))
    return m / d, beta * (u - m)


class TestDynamics:
    def test_worked_example(self):
        cfg = NeuronConfig(D=4, beta=0.5, theta=1.0)
        plan, state = ni_lif_step(np.array([2.3]), init_state((1,)), cfg)
        assert plan.normalized[0] == 0.5
        np.testing.assert_allclose(state.H, [0.15], atol=1e-12)

    def test_zero_input(self):
        cfg = NeuronConfig(D=4)
        plan, state = ni_lif_step(np.zeros(3), init_state((3,)), cfg)
        np.testing.assert_array_equal(plan.normalized, 0.0)
        np.testing.assert_array_equal(state.H, 0.0)

    def test_upper_clip_then_reset(self):
        cfg = NeuronConfig(D=4, beta=0.5)
        plan, state = ni_lif_step(np.array([6.2]), init_state((1,)), cfg)
        assert plan.normalized[0] == 1.0
        np.testing.assert_allclose(state.H, [0.5 * 2.2], atol=1e-12)

    def test_10k_random_tuples_match_scalar_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            x = float(rng.uniform(-6, 10))
            h = float(rng.uniform(-2, 2))
            beta = float(rng.uniform(0, 1))
            d = int(rng.integers(1, 9))
            cfg = NeuronConfig(D=d, beta=beta, theta=1.0)
            plan, st = ni_lif_step(np.array([x]), NeuronState_like(h), cfg)
            s_want, h_want = scalar_oracle(x, h, beta, 1.0, d)
            assert plan.normalized[0] == s_want
            assert st.H[0] == h_want

    def test_i_lif_relates_by_factor_d(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-3, 8, size=(2, 5))
        h = rng.uniform(-1, 1, size=(2, 5))
        ni = NeuronConfig(D=4, beta=0.3, variant="ni_lif")
        il = NeuronConfig(D=4, beta=0.3, variant="i_lif")
        p_ni, s_ni = ni_lif_step(x, NeuronState_like(h), ni)
        p_il, s_il = i_lif_step(x, NeuronState_like(h), il)
        np.testing.assert_array_equal(p_ni.normalized * 4, p_il.normalized)
        np.testing.assert_array_equal(s_ni.H, s_il.H)

    def test_i_lif_worked_example(self):
        cfg = NeuronConfig(D=4, variant="i_lif")
        plan, _ = i_lif_step(np.array([2.3]), init_state((1,)), cfg)
        assert plan.normalized[0] == 2.0

    def test_quantization_residual_bound(self):
        rng = np.random.default_rng(2)
        cfg = NeuronConfig(D=4, beta=1.0, theta=1.0)
        x = rng.uniform(0, 4, size=1000)  # pre-clip region
        plan, st = ni_lif_step(x, init_state((1000,)), cfg)
        u = x  # h was zero, theta 1
        assert np.all(np.abs(u - plan.normalized * 4) <= 0.5 + 1e-12)

    def test_hard_reset_limit(self):
        rng = np.random.default_rng(3)
        cfg = NeuronConfig(D=4, beta=0.0)
        _, st = ni_lif_step(rng.uniform(-5, 9, size=50), init_state((50,)), cfg)
        np.testing.assert_array_equal(st.H, 0.0)

    def test_temporal_determinism(self):
        rng = np.random.default_rng(4)
        cfg = NeuronConfig(D=4, T=5, beta=0.5)
        xs = rng.normal(size=(5, 8))

        def run():
            st = init_state((8,))
            trains = []
            for x in xs:
                plan, st = lif_step(x, st, cfg)
                trains.append(plan.normalized)
            return trains

        for pa, pb in zip(run(), run()):
            np.testing.assert_array_equal(pa, pb)

    def test_shape_mismatch_raises(self):
        cfg = NeuronConfig()
        with pytest.raises(ValueError):
            ni_lif_step(np.zeros(3), init_state((4,)), cfg)


def NeuronState_like(h):
    from spike2.neurons import NeuronState
    return NeuronState(H=np.atleast_1d(np.asarray(h, dtype=float)).copy(), t=0)


class TestExpansion:
    def test_front_loading(self):
        cfg = NeuronConfig(D=4)
        plan = SpikePlan("normalized", np.array([0.5]), 4)
        exp = expand_to_spikes(plan, cfg)
        np.testing.assert_array_equal(exp.expanded[:, 0], [1, 1, 0, 0])

    def test_zero_and_saturated(self):
        cfg = NeuronConfig(D=4)
        exp0 = expand_to_spikes(SpikePlan("normalized", np.array([0.0]), 4), cfg)
        exp1 = expand_to_spikes(SpikePlan("normalized", np.array([1.0]), 4), cfg)
        np.testing.assert_array_equal(exp0.expanded[:, 0], [0, 0, 0, 0])
        np.testing.assert_array_equal(exp1.expanded[:, 0], [1, 1, 1, 1])

    @pytest.mark.parametrize("spread", ["front", "uniform"])
    def test_sum_identity_exact(self, spread):
        rng = np.random.default_rng(5)
        d = 6
        cfg = NeuronConfig(D=d, spread=spread)
        m = rng.integers(0, d + 1, size=(3, 4, 5))
        plan = SpikePlan("normalized", m / d, d)
        exp = expand_to_spikes(plan, cfg)
        assert np.all((exp.expanded == 0) | (exp.expanded == 1))
        np.testing.assert_array_equal(exp.expanded.sum(axis=0), m)

    def test_off_grid_value_rejected(self):
        cfg = NeuronConfig(D=4)
        with pytest.raises(QuantizationError):
            expand_to_spikes(SpikePlan("normalized", np.array([0.3]), 4), cfg)

    def test_integer_plan_expansion(self):
        cfg = NeuronConfig(D=4, variant="i_lif")
        plan = SpikePlan("normalized", np.array([3.0]), 4, integer_valued=True)
        exp = expand_to_spikes(plan, cfg)
        np.testing.assert_array_equal(exp.expanded[:, 0], [1, 1, 1, 0])


class TestSpikeMatmul:
    def test_worked_example_matches_dense(self):
        d = 2
        cfg = NeuronConfig(D=d)
        s = np.array([1.0, 0.5])
        plan = expand_to_spikes(SpikePlan("normalized", s, d), cfg)
        w = np.array([1.0, 2.0])
        out, ac = spike_matmul(w, plan, d)
        assert float(out) == pytest.approx(w @ s, abs=1e-12)
        assert ac == 3  # three spike events, fan-out 1

    def test_all_zero_spikes(self):
        cfg = NeuronConfig(D=4)
        plan = expand_to_spikes(SpikePlan("normalized", np.zeros(5), 4), cfg)
        out, ac = spike_matmul(np.ones((3, 5)), plan, 4)
        np.testing.assert_array_equal(out, 0.0)
        assert ac == 0

    def test_random_plans_match_dense_product(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            d = int(rng.integers(1, 7))
            cfg = NeuronConfig(D=d)
            n_in = int(rng.integers(1, 9))
            n_out = int(rng.integers(1, 6))
            m = rng.integers(0, d + 1, size=(3, n_in))
            s = m / d
            plan = expand_to_spikes(SpikePlan("normalized", s, d), cfg)
            w = rng.normal(size=(n_out, n_in))
            out, ac = spike_matmul(w, plan, d)
            np.testing.assert_allclose(out, s @ w.T, rtol=1e-9, atol=1e-12)
            assert ac == int(m.sum()) * n_out

    def test_non_binary_plan_rejected(self):
        plan = SpikePlan("expanded", np.array([0.5]), 2,
                         expanded=np.array([[0.5], [0.5]]))
        with pytest.raises(QuantizationError):
            spike_matmul(np.ones((1, 1)), plan, 2)


class TestReparam:
    def test_scale_one_is_identity(self):
        cfg = NeuronConfig(theta=1.3)
        assert reparam_scale_into_threshold(1.0, cfg) == cfg

    def test_worked_example(self):
        cfg = NeuronConfig(D=4, theta=1.0)
        cfg2 = reparam_scale_into_threshold(2.0, cfg)
        x = np.array([1.15])
        a, _ = ni_lif_step(2.0 * x, init_state((1,)), cfg)
        b, _ = ni_lif_step(x, init_state((1,)), cfg2)
        assert a.normalized[0] == b.normalized[0] == 0.5

    def test_thousand_random_pairs_exact(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            scale = float(rng.uniform(0.1, 10.0))
            theta = float(rng.uniform(0.2, 3.0))
            d = int(rng.integers(1, 9))
            cfg = NeuronConfig(D=d, theta=theta)
            cfg2 = reparam_scale_into_threshold(scale, cfg)
            x = rng.uniform(-5, 15, size=4)
            a, _ = ni_lif_step(scale * x, init_state((4,)), cfg)
            b, _ = ni_lif_step(x, init_state((4,)), cfg2)
            np.testing.assert_array_equal(a.normalized, b.normalized)

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            reparam_scale_into_threshold(0.0, NeuronConfig())


def test_firing_rate_definition():
    plan = SpikePlan("normalized", np.array([0.0, 0.5, 1.0, 0.5]), 4)
    assert firing_rate(plan) == 0.5
    iplan = SpikePlan("normalized", np.array([0.0, 2.0, 4.0, 2.0]), 4, integer_valued=True)
    assert firing_rate(iplan) == 0.5
