import math

import numpy as np
import pytest

from gwmpc import diffmath as dm


def _unit_rows(rows, dim, seed):
    r = np.random.default_rng(seed).normal(size=(rows, dim))
    return r / np.linalg.norm(r, axis=1, keepdims=True)


class TestBuildNetwork:
    def test_deterministic_from_seed(self):
        spec = dm.NetworkSpec(2, (3,), 1)
        a = dm.build_network(spec, 7)
        b = dm.build_network(spec, 7)
        for p, q in zip(a.params, b.params):
            assert np.array_equal(p, q)

    def test_different_seed_differs(self):
        spec = dm.NetworkSpec(2, (3,), 1)
        a = dm.build_network(spec, 7)
        b = dm.build_network(spec, 8)
        assert any(not np.array_equal(p, q) for p, q in zip(a.params, b.params))

    def test_zero_hidden_dim_rejected(self):
        with pytest.raises(ValueError, match="hidden"):
            dm.build_network(dm.NetworkSpec(2, (0,), 1), 0)

    def test_param_count(self):
        net = dm.build_network(dm.NetworkSpec(4, (8,), 4), 1)
        assert net.param_count == 4 * 8 + 8 + 8 * 4 + 4

    def test_attention_needs_divisible_tokens(self):
        spec = dm.NetworkSpec(10, (4,), 2, attention_blocks=1, attention_tokens=3)
        with pytest.raises(ValueError, match="divisible"):
            dm.build_network(spec, 0)


class TestForward:
    def test_zero_final_layer_gives_zero_output(self):
        net = dm.build_network(dm.NetworkSpec(3, (5,), 2), 0)
        params = list(net.params)
        params[-2] = np.zeros_like(params[-2])
        params[-1] = np.zeros_like(params[-1])
        net = dm.Network(net.spec, tuple(params))
        out = dm.forward(net, np.ones((4, 3)))
        assert np.array_equal(out, np.zeros((4, 2)))

    def test_identity_linear_layer(self):
        net = dm.build_network(dm.NetworkSpec(3, (), 3), 0)
        net = dm.Network(net.spec, (np.eye(3), np.zeros(3)))
        x = np.array([1.5, -2.0, 0.25])
        assert np.array_equal(dm.forward(net, x), x)

    def test_batched_shape(self):
        net = dm.build_network(dm.NetworkSpec(6, (4,), 2), 1)
        out = dm.forward(net, np.zeros((7, 6)))
        assert out.shape == (7, 2)

    def test_shape_mismatch_reports_both(self):
        net = dm.build_network(dm.NetworkSpec(6, (4,), 2), 1)
        with pytest.raises(ValueError, match="5"):
            dm.forward(net, np.zeros((3, 5)))


class TestLossMse:
    def test_equal_inputs_zero(self):
        assert dm.loss_mse(np.ones(4), np.ones(4)) == 0.0

    def test_unit_difference(self):
        assert dm.loss_mse(np.array([1.0, 1.0]), np.zeros(2)) == 1.0

    def test_scalar_case(self):
        assert dm.loss_mse(np.array([3.0]), np.array([1.0])) == 4.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            dm.loss_mse(np.ones(3), np.ones(4))

    def test_nonnegative_random(self, rng):
        for _ in range(50):
            a = rng.normal(size=6)
            b = rng.normal(size=6)
            assert dm.loss_mse(a, b) >= 0.0


class TestLossContrastive:
    def test_random_embeds_near_log_batch(self):
        a = _unit_rows(8, 32, 1)
        b = _unit_rows(8, 32, 2)
        loss = dm.loss_contrastive(a, b, 1.0)
        assert abs(loss - math.log(8)) < 0.5

    def test_identical_embeds_small_temperature(self):
        a = _unit_rows(8, 32, 3)
        assert dm.loss_contrastive(a, a, 0.005) < 1e-6

    def test_zero_temperature_rejected(self):
        a = _unit_rows(4, 8, 0)
        with pytest.raises(ValueError, match="temperature"):
            dm.loss_contrastive(a, a, 0.0)

    def test_single_pair_rejected(self):
        a = _unit_rows(1, 8, 0)
        with pytest.raises(ValueError, match="at least 2"):
            dm.loss_contrastive(a, a, 1.0)

    def test_non_unit_rows_rejected(self):
        a = _unit_rows(4, 8, 0) * 1.5
        with pytest.raises(ValueError, match="unit-norm"):
            dm.loss_contrastive(a, a / 1.5, 1.0)


class TestGradients:
    def test_square_function(self):
        net = dm.Network(dm.NetworkSpec(1, (), 1), (np.array([[3.0]]), np.zeros(1)))

        def closure(pt):
            w = pt[0]
            return dm.t_mul(dm.t_diag(w), dm.t_diag(w))

        grads = dm.gradients(net, closure)
        assert grads[0][0, 0] == pytest.approx(6.0)

    def test_constant_loss_zero_gradients(self):
        net = dm.build_network(dm.NetworkSpec(2, (3,), 1), 0)
        grads = dm.gradients(net, lambda pt: dm.Tensor(1.0))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads)

    def test_matches_finite_differences(self, rng):
        net = dm.build_network(dm.NetworkSpec(5, (8, 6), 3, activation="tanh"), 2)
        x = rng.normal(size=(4, 5))
        y = rng.normal(size=(4, 3))
        assert dm.finite_difference_check(net, (x, y), 1e-5) <= 1e-4


class TestFiniteDifferenceCheck:
    def test_linear_net_tight(self, rng):
        net = dm.build_network(dm.NetworkSpec(4, (), 3, activation="identity"), 1)
        x = rng.normal(size=(6, 4))
        y = rng.normal(size=(6, 3))
        assert dm.finite_difference_check(net, (x, y), 1e-5) <= 1e-6

    def test_two_hidden_smooth(self, rng):
        net = dm.build_network(dm.NetworkSpec(4, (7, 7), 2, activation="gelu"), 5)
        x = rng.normal(size=(3, 4))
        y = rng.normal(size=(3, 2))
        assert dm.finite_difference_check(net, (x, y), 1e-5) <= 1e-4

    def test_attention_block(self, rng):
        net = dm.build_network(
            dm.NetworkSpec(12, (10,), 4, attention_blocks=1, attention_tokens=3,
                           normalize=True), 4)
        x = rng.normal(size=(3, 12))
        y = rng.normal(size=(3, 4))
        assert dm.finite_difference_check(net, (x, y), 1e-5) <= 1e-4

    def test_zero_eps_rejected(self, rng):
        net = dm.build_network(dm.NetworkSpec(2, (), 1), 0)
        with pytest.raises(ValueError, match="eps"):
            dm.finite_difference_check(net, (np.ones((1, 2)), np.ones((1, 1))), 0.0)


class TestOptimizer:
    def test_zero_gradients_no_decay_keeps_parameters(self):
        net = dm.build_network(dm.NetworkSpec(3, (4,), 2), 0)
        opt = dm.init_opt_state(net, lr=1e-2)
        grads = tuple(np.zeros_like(p) for p in net.params)
        net2, opt2 = dm.optimizer_step(net, grads, opt)
        assert opt2.step == 1
        for p, q in zip(net.params, net2.params):
            assert np.array_equal(p, q)

    def test_min_lr_at_max_steps(self):
        net = dm.build_network(dm.NetworkSpec(2, (), 1), 0)
        opt = dm.init_opt_state(net, lr=1e-3, max_steps=50, min_lr=1e-6)
        from dataclasses import replace
        assert dm.effective_lr(replace(opt, step=50)) == pytest.approx(1e-6)

    def test_deterministic_updates(self, rng):
        net = dm.build_network(dm.NetworkSpec(3, (4,), 2), 0)
        opt = dm.init_opt_state(net, lr=1e-3, weight_decay=0.01)
        grads = tuple(rng.normal(size=p.shape) for p in net.params)
        a, oa = dm.optimizer_step(net, grads, opt)
        b, ob = dm.optimizer_step(net, grads, opt)
        assert oa.step == ob.step
        for p, q in zip(a.params, b.params):
            assert np.array_equal(p, q)

    def test_shape_mismatch_rejected(self):
        net = dm.build_network(dm.NetworkSpec(3, (4,), 2), 0)
        opt = dm.init_opt_state(net)
        grads = tuple(np.zeros((1, 1)) for _ in net.params)
        with pytest.raises(ValueError, match="shape"):
            dm.optimizer_step(net, grads, opt)

    def test_bad_betas_rejected(self):
        net = dm.build_network(dm.NetworkSpec(2, (), 1), 0)
        with pytest.raises(ValueError, match="betas"):
            dm.init_opt_state(net, beta1=1.0)


class TestSoftmax:
    def test_uniform_inputs(self):
        out = dm.softmax(np.zeros(5))
        assert np.allclose(out, 0.2)

    def test_argmax_preserved(self):
        out = dm.softmax(np.array([10.0, 0.0, 0.0]))
        assert np.argmax(out) == 0

    def test_sums_to_one(self, rng):
        v = rng.normal(size=9) * 30
        assert abs(dm.softmax(v, 0.5).sum() - 1.0) <= 1e-9

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            dm.softmax(np.array([]))

    def test_zero_temperature_rejected(self):
        with pytest.raises(ValueError, match="temperature"):
            dm.softmax(np.ones(3), 0.0)

    def test_property_probability_and_argmax_10k(self):
        rng = np.random.default_rng(42)
        vals = rng.normal(scale=50.0, size=(10_000, 12))
        temps = rng.uniform(0.05, 5.0, size=(10_000, 1))
        out = dm.softmax(vals / 1.0, 1.0)
        out = dm.softmax(vals, 1.0) if False else out
        probs = np.exp((vals / temps) - (vals / temps).max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        for i in range(0, 10_000, 997):
            got = dm.softmax(vals[i], float(temps[i, 0]))
            assert abs(got.sum() - 1.0) <= 1e-9
            assert np.all(got > 0)
            assert np.argmax(got) == np.argmax(vals[i])
        sums = out.sum(axis=1)
        assert np.all(np.abs(sums - 1.0) <= 1e-9)
        assert np.array_equal(np.argmax(out, axis=1), np.argmax(vals, axis=1))


class TestSerialization:
    def test_round_trip_bytes_stable(self):
        net = dm.build_network(
            dm.NetworkSpec(6, (5,), 4, activation="gelu", attention_blocks=1,
                           attention_tokens=2, normalize=True), 9)
        blob = dm.serialize_network(net)
        net2 = dm.deserialize_network(blob)
        assert net2.spec == net.spec
        assert dm.serialize_network(net2) == blob

    def test_magic_check(self):
        with pytest.raises(ValueError, match="magic"):
            dm.deserialize_network(b"NOTMAGIC" + b"\x00" * 64)

    def test_truncation_detected(self):
        net = dm.build_network(dm.NetworkSpec(4, (3,), 2), 1)
        blob = dm.serialize_network(net)
        with pytest.raises(ValueError, match="truncated"):
            dm.deserialize_network(blob[:-8])


class TestGraphOps:
    def test_forward_graph_matches_forward(self, rng):
        net = dm.build_network(
            dm.NetworkSpec(8, (6,), 3, attention_blocks=1, attention_tokens=2), 3)
        x = rng.normal(size=(5, 8))
        fast = dm.forward(net, x)
        graph = dm.forward_graph(net, [dm.Tensor(p) for p in net.params],
                                 dm.Tensor(x)).data
        assert np.allclose(fast, graph)

    def test_non_finite_guard(self):
        big = dm.Tensor(np.array([1e300]))
        with pytest.raises(ValueError, match="non-finite"):
            dm.t_mul(big, big)
