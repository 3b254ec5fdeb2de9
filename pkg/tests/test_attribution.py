import numpy as np
import pytest

from evloop import autodiff as ad
from evloop.attribution import (
    METHODS,
    AttributionConfig,
    channel_reduce,
    explain,
    grad_cam,
    grad_cam_combine,
    grad_cam_weights,
    guided_backprop,
    guided_grad_cam,
    integrated_gradient_attributions,
    integrated_gradients,
    saliency,
    with_method,
)
from evloop.classifier import get_preset
from evloop.errors import LayerLookupError, ShapeError

from nets import random_conv_net
from oracles import central_difference


def linear_image_net(weights):
    """Flatten + dense on an (H, W, 1) image: F(I) = sum(w * I)."""
    w = np.asarray(weights, dtype=np.float64)
    net = ad.Network([ad.flatten("flat"), ad.dense("d", 1)], w.shape + (1,), dtype=np.float64)
    net.set_parameters({"d.weight": w.reshape(-1, 1), "d.bias": [0.25]})
    return net


def two_layer_net():
    """4-pixel input, two hidden ReLUs with mixed-sign weights."""
    net = ad.Network([ad.flatten("flat"), ad.dense("h", 2), ad.relu("hr"), ad.dense("out", 1)],
                     (2, 2, 1), dtype=np.float64)
    net.set_parameters({
        "h.weight": [[1, 0], [-1, 1], [1, -1], [0, 1]],
        "h.bias": [0, 0],
        "out.weight": [[1], [-2]],
        "out.bias": [0],
    })
    return net


class TestGradientMethods:
    def test_linear_model_saliency_is_abs_weights(self):
        w = np.array([[1.0, -2.0], [0.5, -0.25]])
        net = linear_image_net(w)
        x = np.random.default_rng(0).random((2, 2, 1))
        np.testing.assert_array_equal(saliency(net, x).grid, np.abs(w))

    def test_linear_model_ig_is_input_times_weight(self):
        w = np.array([[1.0, -2.0], [0.5, -0.25]])
        net = linear_image_net(w)
        x = np.array([[0.2, 0.4], [0.6, 0.8]])[..., None]
        attr = integrated_gradient_attributions(net, x, steps=3)
        np.testing.assert_allclose(attr[..., 0], w * x[..., 0], atol=1e-15)

    def test_guided_backprop_hand_chain(self):
        net = two_layer_net()
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        # h = (1 - 2 + 3, 2 - 3 + 4) = (2, 3), both active.  Upstream at the
        # ReLU is (1, -2); guided keeps only the first unit, so the input
        # gradient is the first column of h.weight.
        np.testing.assert_array_equal(guided_backprop(net, x).grid, [[1, 1], [1, 0]])
        # standard: 1 * col1 - 2 * col2 = (1, -3, 3, -2)
        np.testing.assert_array_equal(saliency(net, x).grid, [[1, 3], [3, 2]])

    @pytest.mark.parametrize("seed", range(3))
    def test_saliency_matches_finite_differences(self, seed):
        net = random_conv_net(seed)
        x = np.random.default_rng(seed).random(net.input_shape)
        grid = saliency(net, x).grid
        rng = np.random.default_rng(50 + seed)
        for _ in range(10):
            i, j = (int(v) for v in rng.integers(0, 8, 2))
            fd = [central_difference(net.predict, x, (i, j, c)) for c in range(3)]
            assert grid[i, j] == pytest.approx(np.max(np.abs(fd)), rel=1e-4, abs=1e-8)

    def test_channel_reductions(self):
        v = np.array([[[3.0, -4.0]]])
        assert channel_reduce(v, "max_abs")[0, 0] == 4
        assert channel_reduce(v, "mean_abs")[0, 0] == 3.5
        assert channel_reduce(v, "l2")[0, 0] == 5
        with pytest.raises(ValueError):
            channel_reduce(v, "sum")


class TestIntegratedGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_completeness(self, seed):
        net = random_conv_net(seed)
        x = np.random.default_rng(seed).random(net.input_shape)
        attr = integrated_gradient_attributions(net, x, steps=300)
        delta = net.predict(x) - net.predict(np.zeros_like(x))
        assert abs(attr.sum() - delta) <= 0.01 * abs(delta)

    def test_custom_baseline(self):
        w = np.array([[2.0, 0.0], [0.0, 1.0]])
        net = linear_image_net(w)
        x = np.ones((2, 2, 1))
        base = np.full((2, 2, 1), 0.5)
        cfg = AttributionConfig("integrated_gradients", ig_steps=4, ig_baseline=base)
        np.testing.assert_allclose(integrated_gradients(net, x, cfg).grid, [[1.0, 0.0], [0.0, 0.5]])

    def test_baseline_shape_checked(self):
        net = linear_image_net(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            integrated_gradient_attributions(net, np.ones((2, 2, 1)), baseline=np.ones((3, 2, 1)))


def gap_net():
    """conv 1x1 (two maps) -> relu -> global average pool -> dense."""
    net = ad.Network([ad.conv2d("c", 2, 1), ad.relu("cr"), ad.global_avg_pool("gap"), ad.dense("d", 1)],
                     (3, 3, 1), dtype=np.float64)
    net.set_parameters({"c.weight": [[[[1.0, -1.0]]]], "c.bias": [0.0, 2.0],
                        "d.weight": [[0.9], [-0.45]], "d.bias": [0.0]})
    return net


class TestGradCam:
    def test_combine_hand_example(self):
        f1 = np.array([[1, 0, 2], [0, 3, 0], [1, 1, 1]], float)
        f2 = np.array([[0, 2, 0], [1, 1, 1], [4, 0, 0]], float)
        acts = np.stack([f1, f2], axis=-1)
        grads = np.stack([np.full((3, 3), 0.5), np.array([[-1, -1, -1], [-1, -1, -1], [-1, -1, -1.0]])], -1)
        alpha = grad_cam_weights(acts, grads)
        np.testing.assert_allclose(alpha, [0.5, -1.0])
        # 0.5 f1 - f2, then ReLU, worked cell by cell
        expected = [[0.5, 0.0, 1.0], [0.0, 0.5, 0.0], [0.0, 0.5, 0.5]]
        np.testing.assert_allclose(grad_cam_combine(acts, alpha), expected)

    def test_gap_network_weights_are_mean_derivative(self):
        net = gap_net()
        x = np.arange(9.0).reshape(3, 3, 1) / 10
        _, cache = net.forward(x)
        grads = net.backward_to_layer(cache, "cr")
        np.testing.assert_allclose(grad_cam_weights(None, grads), [0.1, -0.05])
        cam = grad_cam(net, x, AttributionConfig("grad_cam", grad_cam_layer="cr")).grid
        a1, a2 = np.maximum(x[..., 0], 0), np.maximum(2 - x[..., 0], 0)
        np.testing.assert_allclose(cam, np.maximum(0.1 * a1 - 0.05 * a2, 0))

    def test_preset_layer_and_upsampling(self):
        preset = get_preset("vgg_mini", 128)
        net = preset.build(seed=0)

        class Wrapper:
            pass

        model = Wrapper()
        model.net, model.preset = net, preset
        x = np.random.default_rng(0).random((128, 128, 3))
        out = grad_cam(model, x)
        assert out.grid.shape == (128, 128) and out.layer == preset.grad_cam_layer
        assert out.grid.min() >= 0

    def test_missing_layer(self):
        net = gap_net()
        with pytest.raises(ValueError):
            grad_cam(net, np.ones((3, 3, 1)))
        with pytest.raises(LayerLookupError):
            grad_cam(net, np.ones((3, 3, 1)), AttributionConfig("grad_cam", grad_cam_layer="nope"))

    def test_non_spatial_layer(self):
        with pytest.raises(ShapeError):
            grad_cam(gap_net(), np.ones((3, 3, 1)), AttributionConfig("grad_cam", grad_cam_layer="gap"))

    def test_guided_grad_cam_is_product(self):
        net = random_conv_net(3)
        x = np.random.default_rng(3).random(net.input_shape)
        cfg = AttributionConfig("guided_grad_cam", grad_cam_layer="r1")
        prod = guided_grad_cam(net, x, cfg).grid
        expected = guided_backprop(net, x).grid * grad_cam(net, x, cfg).grid
        np.testing.assert_array_equal(prod, expected)


class TestExplain:
    @pytest.mark.parametrize("method", METHODS)
    def test_nonnegative_deterministic_and_shaped(self, method):
        net = random_conv_net(4)
        x = np.random.default_rng(4).random(net.input_shape)
        cfg = AttributionConfig(method, ig_steps=20, grad_cam_layer="r1")
        a, b = explain(net, x, cfg), explain(net, x, cfg)
        assert a.grid.shape == (8, 8)
        assert a.grid.min() >= 0
        assert a.grid.tobytes() == b.grid.tobytes()
        assert a.method == method

    def test_string_config_and_with_method(self):
        net = random_conv_net(0)
        x = np.random.default_rng(0).random(net.input_shape)
        assert explain(net, x, "saliency").method == "saliency"
        assert with_method(AttributionConfig(), "saliency").method == "saliency"

    def test_validation(self):
        with pytest.raises(ValueError):
            AttributionConfig("lime")
        with pytest.raises(ValueError):
            AttributionConfig(ig_steps=0)
        with pytest.raises(ShapeError):
            explain(random_conv_net(0), np.zeros((4, 4, 3)))
