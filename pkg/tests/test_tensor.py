import threading

import numpy as np
import pytest

from epsr.logger import ConfigurationError, NumericError, UsageError
from epsr.models import GeneratorConfig
from epsr.networks import Generator
from epsr.tensor import (
    Tensor, clip, conv2d, fully_connected, gradcheck, grad_enabled, leaky_relu, log, max_pool2d,
    mean, mean_square, no_grad, pixel_shuffle, pixel_unshuffle_array, relu, sigmoid,
)


def leaf(rng, *shape, low=None, high=None):
    values = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(values.astype(np.float64), requires_grad=True)


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[ni, oi, i, j] = np.sum(patch * w[oi]) + b[oi]
    return out


class TestConv2d:
    def test_full_overlap_center(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, Tensor(np.zeros(1)), stride=1, padding=1)
        assert out.data[0, 0, 1, 1] == 9.0

    def test_delta_kernel_is_identity(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(2)), padding=1)
        np.testing.assert_allclose(out.data, x)

    def test_strided_matches_nested_loops(self, rng):
        x, w, b = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
        assert out.shape == (2, 4, 3, 3)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, 2, 1), rtol=1e-6)

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ConfigurationError, match=r"\(1, 2, 4, 4\)"):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))


class TestPixelShuffle:
    def test_index_map(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        np.testing.assert_array_equal(pixel_shuffle(x, 2).data[0, 0], [[1.0, 2.0], [3.0, 4.0]])

    def test_definition_on_random_input(self, rng):
        x = rng.normal(size=(2, 8, 3, 5))
        out = pixel_shuffle(Tensor(x), 2).data
        assert out.shape == (2, 2, 6, 10)
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    np.testing.assert_array_equal(out[:, c, i::2, j::2], x[:, c * 4 + i * 2 + j])

    def test_inverse_rearrangement(self, rng):
        x = rng.normal(size=(1, 12, 4, 3))
        np.testing.assert_array_equal(pixel_unshuffle_array(pixel_shuffle(Tensor(x), 2).data, 2), x)

    def test_channels_not_divisible(self):
        with pytest.raises(ConfigurationError):
            pixel_shuffle(Tensor(np.zeros((1, 6, 2, 2))), 2)


class TestElementwise:
    def test_closed_forms(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
        assert sigmoid(Tensor([0.0])).data[0] == 0.5
        np.testing.assert_allclose(leaky_relu(Tensor([-1.0, 3.0]), 0.2).data, [-0.2, 3.0])
        out = fully_connected(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_gradients_accumulate_across_uses(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        (mean(x * x + x) * 2.0).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            Tensor(np.zeros(3)) + Tensor(np.zeros(4))

    def test_non_finite_is_an_error(self):
        with pytest.raises(NumericError):
            Tensor(np.array([np.inf])) * 2.0

    def test_log_of_non_positive(self):
        with pytest.raises(NumericError):
            log(Tensor([0.0, 1.0]))

    def test_backward_needs_scalar_or_seed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            (x * 2.0).backward()
        with pytest.raises(UsageError):
            Tensor(np.ones(1)).backward()


class TestGradMode:
    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad
        assert grad_enabled()

    def test_no_grad_is_per_thread(self):
        seen = []
        with no_grad():
            worker = threading.Thread(target=lambda: seen.append(grad_enabled()))
            worker.start()
            worker.join()
            assert not grad_enabled()
        assert seen == [True]


class TestGradcheck:
    def test_conv2d(self, rng):
        inputs = [leaf(rng, 1, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)]
        error = gradcheck(lambda x, w, b: mean_square(conv2d(x, w, b, stride=2, padding=1)), inputs)
        assert error < 1e-4

    def test_pixel_shuffle(self, rng):
        weights = Tensor(rng.normal(size=(1, 1, 4, 4)))
        error = gradcheck(lambda x: mean(pixel_shuffle(x, 2) * weights), [leaf(rng, 1, 4, 2, 2)])
        assert error < 1e-4

    def test_fully_connected(self, rng):
        inputs = [leaf(rng, 3, 4), leaf(rng, 2, 4), leaf(rng, 2)]
        assert gradcheck(lambda x, w, b: mean_square(fully_connected(x, w, b)), inputs) < 1e-4

    @pytest.mark.parametrize("activation", [relu, sigmoid, lambda t: leaky_relu(t, 0.2)])
    def test_activations(self, rng, activation):
        x = Tensor(rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)), requires_grad=True)
        assert gradcheck(lambda t: mean_square(activation(t)), [x]) < 1e-4

    def test_max_pool(self, rng):
        x = Tensor(rng.permutation(16).reshape(1, 1, 4, 4).astype(np.float64), requires_grad=True)
        assert gradcheck(lambda t: mean_square(max_pool2d(t)), [x]) < 1e-4

    def test_log_of_clipped(self, rng):
        x = leaf(rng, 5, low=0.2, high=0.8)
        assert gradcheck(lambda t: mean(log(clip(t, 1e-7, 1.0 - 1e-7))), [x]) < 1e-4

    def test_toy_generator_composition(self, rng):
        generator = Generator(GeneratorConfig(num_blocks=2, num_features=2), seed=3, dtype=np.float64)
        lr = Tensor(rng.uniform(size=(1, 3, 3, 3)))
        target = Tensor(rng.uniform(size=(1, 3, 12, 12)))
        params = generator.parameters()

        def loss(*_):
            return mean_square(generator(lr) - target)

        assert gradcheck(loss, params) < 1e-3
