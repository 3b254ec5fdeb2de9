import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evloop import autodiff as ad
from evloop.errors import InvalidCacheError, LayerLookupError, NumericError, ShapeError

from nets import dense_net, positive_net, random_conv_net
from oracles import central_difference, direct_forward


class TestForward:
    def test_dense_linear_map(self):
        pred, _ = dense_net([1, 2]).forward(np.array([3.0, 4.0]))
        assert pred == 11

    def test_conv_then_gap_of_ones(self):
        net = ad.Network([ad.conv2d("c", 1, 1), ad.global_avg_pool("g"), ad.dense("d", 1)], (2, 2, 1),
                         dtype=np.float64)
        net.set_parameters({"c.weight": [[[[2.0]]]], "c.bias": [0.0], "d.weight": [[1.0]], "d.bias": [0.0]})
        pred, _ = net.forward(np.ones((2, 2, 1)))
        assert pred == 2

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_direct_oracle(self, seed):
        net = random_conv_net(seed, dtype=np.float32)
        x = np.random.default_rng(100 + seed).random(net.input_shape)
        pred, cache = net.forward(x)
        ref = direct_forward(net.specs, net.params, x.astype(np.float32))
        assert pred == pytest.approx(ref, rel=1e-5, abs=1e-6)
        assert len(cache.outputs) == len(net.layers)

    def test_batched_matches_single(self):
        net = random_conv_net(3)
        xs = np.random.default_rng(0).random((4,) + net.input_shape)
        batch = net.predict(xs)
        singles = [net.predict(x) for x in xs]
        np.testing.assert_allclose(batch, singles, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            random_conv_net(0).forward(np.zeros((7, 8, 3)))

    def test_incompatible_layers_rejected_at_construction(self):
        with pytest.raises(ShapeError):
            ad.Network([ad.conv2d("c", 2), ad.dense("d", 1)], (4, 4, 1))
        with pytest.raises(ShapeError):
            ad.Network([ad.flatten("f"), ad.dense("d", 3)], (4,))

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            ad.Network([ad.flatten("x"), ad.dense("x", 1)], (4,))

    def test_nonfinite_activation_names_layer(self):
        net = dense_net([1.0, 1.0])
        with pytest.raises(NumericError, match="'d'"):
            net.forward(np.array([1e308, 1e308]))

    def test_inference_is_deterministic(self):
        net = random_conv_net(1)
        x = np.random.default_rng(1).random(net.input_shape)
        a, ca = net.forward(x)
        b, cb = net.forward(x)
        assert a == b
        assert np.array_equal(net.backward_to_input(ca), net.backward_to_input(cb))

    def test_dropout_identity_in_eval_and_random_in_train(self):
        net = ad.Network([ad.flatten("f"), ad.dropout("dr", 0.5), ad.dense("d", 1)], (64,),
                         dtype=np.float64)
        x = np.ones(64)
        ref = net.predict(x)
        net.train()
        vals = {net.predict(x) for _ in range(5)}
        net.eval()
        assert net.predict(x) == ref
        assert len(vals) > 1

    def test_layer_spec_validation(self):
        with pytest.raises(ValueError):
            ad.dropout("d", 1.0)
        with pytest.raises(ValueError):
            ad.conv2d("c", 2, kernel=0)
        with pytest.raises(ValueError):
            ad.LayerSpec("p", "maxpool2d", {"kernel": 2, "stride": 0})


class TestBackwardToInput:
    def test_dense_gradient_is_weights(self):
        net = dense_net([1, 2])
        for x in ([0.0, 0.0], [5.0, -3.0]):
            _, cache = net.forward(np.array(x))
            np.testing.assert_array_equal(net.backward_to_input(cache), [1, 2])

    def test_guided_equals_standard_when_all_positive(self):
        rng = np.random.default_rng(0)
        net = positive_net(2)
        x = rng.random(net.input_shape) + 0.1
        _, cache = net.forward(x)
        np.testing.assert_array_equal(net.backward_to_input(cache, "standard"),
                                      net.backward_to_input(cache, "guided"))

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_finite_differences(self, seed):
        net = random_conv_net(seed)
        rng = np.random.default_rng(seed)
        x = rng.random(net.input_shape)
        _, cache = net.forward(x)
        grad = net.backward_to_input(cache)
        for _ in range(25):
            idx = tuple(int(rng.integers(d)) for d in x.shape)
            fd = central_difference(net.predict, x, idx)
            assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_stale_cache(self):
        net = dense_net([1, 2])
        _, cache = net.forward(np.array([1.0, 1.0]))
        net.set_parameters({"d.bias": [1.0]})
        with pytest.raises(InvalidCacheError):
            net.backward_to_input(cache)

    def test_linear_net_gradient_independent_of_input(self):
        net = ad.Network([ad.conv2d("c", 2, 3), ad.global_avg_pool("g"), ad.dense("d", 1)], (5, 5, 2),
                         seed=4, dtype=np.float64)
        rng = np.random.default_rng(0)
        grads = []
        for _ in range(3):
            _, cache = net.forward(rng.normal(size=(5, 5, 2)))
            grads.append(net.backward_to_input(cache))
        np.testing.assert_allclose(grads[0], grads[1], atol=1e-15)
        np.testing.assert_allclose(grads[0], grads[2], atol=1e-15)

    def test_maxpool_tie_routes_to_first(self):
        net = ad.Network([ad.maxpool2d("p", 2), ad.flatten("f"), ad.dense("d", 1)], (2, 2, 1),
                         dtype=np.float64)
        net.set_parameters({"d.weight": [[1.0]], "d.bias": [0.0]})
        _, cache = net.forward(np.ones((2, 2, 1)))
        g = net.backward_to_input(cache)[..., 0]
        np.testing.assert_array_equal(g, [[1, 0], [0, 0]])

    def test_guided_relu_rule(self):
        # out = -1 * relu(x0) + 1 * relu(x1); guided blocks the negative path
        net = ad.Network([ad.flatten("f"), ad.relu("r"), ad.dense("d", 1)], (2,), dtype=np.float64)
        net.set_parameters({"d.weight": [[-1.0], [1.0]], "d.bias": [0.0]})
        _, cache = net.forward(np.array([2.0, 3.0]))
        np.testing.assert_array_equal(net.backward_to_input(cache, "standard"), [-1, 1])
        np.testing.assert_array_equal(net.backward_to_input(cache, "guided"), [0, 1])

    def test_unknown_policy(self):
        net = dense_net([1])
        _, cache = net.forward(np.array([1.0]))
        with pytest.raises(ValueError):
            net.backward_to_input(cache, "weird")


class TestBackwardToLayer:
    def test_mean_derivative(self):
        net = ad.Network([ad.conv2d("c", 1, 3), ad.global_avg_pool("g"), ad.dense("d", 1)], (4, 5, 2),
                         seed=0, dtype=np.float64)
        net.set_parameters({"d.weight": [[1.0]], "d.bias": [0.0]})
        _, cache = net.forward(np.random.default_rng(0).random((4, 5, 2)))
        g = net.backward_to_layer(cache, "c")
        np.testing.assert_allclose(g, np.full((4, 5, 1), 1 / 20))

    def test_last_hidden_layer_of_dense_net(self):
        net = ad.Network([ad.flatten("f"), ad.dense("h", 3), ad.dense("o", 1)], (2,), seed=1,
                         dtype=np.float64)
        _, cache = net.forward(np.array([0.5, -0.5]))
        np.testing.assert_allclose(net.backward_to_layer(cache, "h"), net.params["o.weight"][:, 0])

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_differences_on_activations(self, seed):
        net = random_conv_net(seed)
        rng = np.random.default_rng(seed)
        x = rng.random(net.input_shape)
        _, cache = net.forward(x)
        act = net.activation(cache, "p1")
        grad = net.backward_to_layer(cache, "p1")
        f = lambda a: net.forward_from("p1", a)[0]
        assert f(act) == pytest.approx(net.predict(x), rel=1e-12)
        for _ in range(20):
            idx = tuple(int(rng.integers(d)) for d in act.shape)
            assert grad[idx] == pytest.approx(central_difference(f, act, idx), rel=1e-4, abs=1e-8)

    def test_unknown_layer(self):
        net = dense_net([1])
        _, cache = net.forward(np.array([1.0]))
        with pytest.raises(LayerLookupError):
            net.backward_to_layer(cache, "nope")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradient_property_random_nets(seed):
    net = random_conv_net(seed, size=6)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=net.input_shape)
    _, cache = net.forward(x)
    grad = net.backward_to_input(cache)
    for _ in range(5):
        idx = tuple(int(rng.integers(d)) for d in x.shape)
        assert grad[idx] == pytest.approx(central_difference(net.predict, x, idx), rel=1e-4, abs=1e-8)


class TestTraining:
    def test_adam_first_step_has_magnitude_lr(self):
        state = ad.AdamState(lr=0.1)
        w = np.array(0.0)
        grad = 2 * (w - 1.0)
        new = ad.adam_update({"w": w}, {"w": grad}, state)
        assert float(new["w"]) == pytest.approx(0.1, rel=1e-6)
        assert state.step == 1

    def test_zero_loss_batch_leaves_parameters(self):
        net = dense_net([1, 2])
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        before = {k: v.copy() for k, v in net.params.items()}
        state = ad.AdamState(lr=0.1)
        loss = ad.train_step(net, x, net.predict(x), state)
        assert loss == 0
        for k in before:
            np.testing.assert_array_equal(net.params[k], before[k])
            assert not np.any(state.m[k])

    def test_loss_non_increasing_on_convex_problem(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(32, 3))
        y = x @ np.array([0.5, -1.0, 2.0]) + 0.3
        net = ad.Network([ad.dense("d", 1)], (3,), dtype=np.float64)
        state = ad.AdamState(lr=0.01)
        losses = [ad.train_step(net, x, y, state) for _ in range(50)]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_empty_batch(self):
        net = dense_net([1])
        with pytest.raises(ValueError):
            ad.train_step(net, np.zeros((0, 1)), np.zeros(0), ad.AdamState())

    def test_train_step_bumps_version(self):
        net = dense_net([1, 1])
        _, cache = net.forward(np.ones(2))
        ad.train_step(net, np.ones((1, 2)), [0.0], ad.AdamState())
        with pytest.raises(InvalidCacheError):
            net.backward_to_input(cache)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        for dtype in (np.float32, np.float64):
            net = random_conv_net(5, dtype=dtype)
            path = tmp_path / f"net_{np.dtype(dtype).name}.evnet"
            ad.save_checkpoint(net, path)
            loaded = ad.load_checkpoint(path)
            assert list(loaded) == list(net.params)
            for k, v in net.params.items():
                assert loaded[k].dtype == v.dtype
                assert loaded[k].tobytes() == v.tobytes()
            assert ad.dump_parameters(loaded) == path.read_bytes()

    def test_header_layout(self):
        blob = ad.dump_parameters({"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
        assert blob[:6] == b"EVNET1"
        assert blob[6:10] == b"\x01\x00\x01\x00"
        assert blob[10:12] == b"\x01\x00" and blob[12:13] == b"a"
        assert blob[13:15] == b"\x00\x02"
        assert blob[15:23] == b"\x02\x00\x00\x00\x03\x00\x00\x00"
        assert len(blob) == 23 + 24

    def test_corrupt_checkpoint(self):
        from evloop.errors import CheckpointError
        with pytest.raises(CheckpointError):
            ad.load_parameters(b"NOPE")
        blob = ad.dump_parameters({"a": np.ones(3)})
        with pytest.raises(CheckpointError):
            ad.load_parameters(blob[:-4])
