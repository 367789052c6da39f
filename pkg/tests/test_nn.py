import math

import numpy as np
import pytest

from synthmatch import nn


def rel_err(a, b):
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def central_diff_check(layer, x, rng, n_input=20, n_param=20, h=1e-5):
    """Max relative error of analytic vs numerical grads for one layer."""
    g = rng.standard_normal(layer.forward(x).shape)

    def value():
        return float(np.sum(layer.forward(x) * g))

    layer.zero_grads()
    layer.forward(x)
    gx = layer.backward(g)
    worst = 0.0
    for _ in range(n_input):
        idx = tuple(rng.integers(s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        keep = x
        x = xp
        vp = value()
        x = xm
        vm = value()
        x = keep
        num = (vp - vm) / (2 * h)
        worst = max(worst, rel_err(num, gx[idx]))
    for pname, p in layer.params.items():
        for _ in range(n_param):
            idx = tuple(rng.integers(s) for s in p.shape)
            orig = p[idx]
            p[idx] = orig + h
            vp = value()
            p[idx] = orig - h
            vm = value()
            p[idx] = orig
            num = (vp - vm) / (2 * h)
            worst = max(worst, rel_err(num, layer.grads[pname][idx]))
    return worst


class TestDense:
    def test_identity_weights(self):
        rng = np.random.default_rng(0)
        layer = nn.Dense(4, 4, rng, dtype=np.float64)
        layer.params["W"][...] = np.eye(4)
        layer.params["b"][...] = 0.0
        x = rng.standard_normal((3, 4))
        assert np.allclose(layer.forward(x), x)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        layer = nn.Dense(5, 3, rng, dtype=np.float64)
        x = rng.standard_normal((4, 5))
        assert central_diff_check(layer, x, rng) < 1e-5


class TestConv2d:
    @pytest.mark.parametrize("stride", [(1, 1), (2, 2), (1, 2)])
    def test_gradients(self, stride):
        rng = np.random.default_rng(2)
        layer = nn.Conv2d(2, 3, 3, rng, stride=stride, dtype=np.float64)
        x = rng.standard_normal((2, 2, 9, 8))
        assert central_diff_check(layer, x, rng) < 1e-5

    def test_output_shape(self):
        rng = np.random.default_rng(3)
        layer = nn.Conv2d(1, 4, 3, rng, stride=(2, 2), padding=(1, 1))
        out = layer.forward(np.zeros((2, 1, 17, 33), dtype=np.float32))
        assert out.shape == (2, 4, 9, 17)
        assert layer.out_shape(17, 33) == (9, 17)


class TestRecurrent:
    def test_gradients(self):
        rng = np.random.default_rng(4)
        layer = nn.RecurrentCell(3, 5, rng, dtype=np.float64)
        x = rng.standard_normal((2, 6, 3))
        assert central_diff_check(layer, x, rng) < 1e-5

    def test_final_state_shape(self):
        rng = np.random.default_rng(5)
        layer = nn.RecurrentCell(3, 5, rng)
        out = layer.forward(np.zeros((4, 7, 3), dtype=np.float32))
        assert out.shape == (4, 5)


class TestGroupedDense:
    def test_gradients(self):
        rng = np.random.default_rng(6)
        layer = nn.GroupedDense(3, 4, 2, rng, dtype=np.float64)
        x = rng.standard_normal((2, 3, 4))
        assert central_diff_check(layer, x, rng) < 1e-5

    def test_groups_do_not_mix(self):
        rng = np.random.default_rng(7)
        layer = nn.GroupedDense(3, 4, 4, rng, dtype=np.float64)
        x = rng.standard_normal((2, 3, 4))
        base = layer.forward(x)
        x2 = x.copy()
        x2[:, 1, :] += 10.0
        out = layer.forward(x2)
        assert np.allclose(out[:, 0], base[:, 0])
        assert np.allclose(out[:, 2], base[:, 2])
        assert not np.allclose(out[:, 1], base[:, 1])


class TestActivations:
    def test_relu_grad_away_from_kink(self):
        rng = np.random.default_rng(8)
        layer = nn.ReLU()
        x = rng.standard_normal((4, 6))
        x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
        assert central_diff_check(layer, x, rng) < 1e-6

    def test_tanh_grad(self):
        rng = np.random.default_rng(9)
        layer = nn.Tanh()
        x = rng.standard_normal((4, 6))
        assert central_diff_check(layer, x, rng) < 1e-6


class TestSoftmaxCrossEntropy:
    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(10)
        p = nn.softmax(rng.standard_normal((8, 64)) * 10)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_perfect_prediction_limit(self):
        logits = np.full((1, 8), -100.0)
        logits[0, 3] = 100.0
        target = np.zeros((1, 8))
        target[0, 3] = 1.0
        loss, _ = nn.cross_entropy_with_logits(logits, target)
        assert loss[0] == pytest.approx(0.0, abs=1e-9)

    def test_uniform_logits_entropy(self):
        logits = np.zeros((1, 64))
        target = np.zeros((1, 64))
        target[0, 10] = 1.0
        loss, _ = nn.cross_entropy_with_logits(logits, target)
        assert loss[0] == pytest.approx(math.log(64), abs=1e-12)

    def test_gradient_is_softmax_minus_target(self):
        rng = np.random.default_rng(11)
        logits = rng.standard_normal((3, 5))
        target = nn.softmax(rng.standard_normal((3, 5)))
        _, grad = nn.cross_entropy_with_logits(logits, target)
        assert np.allclose(grad, nn.softmax(logits) - target)


class TestAdamW:
    def test_zero_grad_zero_decay_no_change(self):
        params = {"w": np.ones(4)}
        state = nn.adamw_init(params, weight_decay=0.0)
        nn.adamw_step(state, params, {"w": np.zeros(4)}, lr=0.1)
        assert np.allclose(params["w"], 1.0)

    def test_descends_quadratic(self):
        params = {"x": np.array([1.0])}
        state = nn.adamw_init(params, weight_decay=0.0)
        for _ in range(50):
            grad = {"x": 2.0 * params["x"]}
            nn.adamw_step(state, params, grad, lr=0.1)
        assert abs(params["x"][0]) < 0.5

    def test_first_step_hand_computed(self):
        params = {"x": np.array([1.0])}
        state = nn.adamw_init(params, weight_decay=1e-4)
        nn.adamw_step(state, params, {"x": np.array([0.5])}, lr=0.01)
        # bias-corrected m-hat = g, v-hat = g^2 on step one
        expected = 1.0 - 0.01 * (0.5 / (0.5 + 1e-8) + 1e-4 * 1.0)
        assert params["x"][0] == pytest.approx(expected, rel=1e-12)

    def test_decay_is_decoupled(self):
        # with zero gradient, only the decay term moves the weight
        params = {"x": np.array([2.0])}
        state = nn.adamw_init(params, weight_decay=0.1)
        nn.adamw_step(state, params, {"x": np.array([0.0])}, lr=0.5)
        assert params["x"][0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)


class TestScheduler:
    def test_zero_at_start(self):
        assert nn.warmup_cosine_lr(0, 100, 10, 3e-4) == 0.0

    def test_peak_at_warmup_end(self):
        assert nn.warmup_cosine_lr(10, 100, 10, 3e-4) == pytest.approx(3e-4)

    def test_cosine_midpoint_is_half_peak(self):
        assert nn.warmup_cosine_lr(55, 100, 10, 1.0) == pytest.approx(0.5)

    def test_zero_at_end(self):
        assert nn.warmup_cosine_lr(100, 100, 10, 1.0) == 0.0
        assert nn.warmup_cosine_lr(150, 100, 10, 1.0) == 0.0

    def test_monotone_warmup(self):
        vals = [nn.warmup_cosine_lr(s, 100, 10, 1.0) for s in range(11)]
        assert all(b > a for a, b in zip(vals, vals[1:]))


class TestGradientUtilities:
    def test_clip_bounds_norm_exactly(self):
        rng = np.random.default_rng(12)
        grads = {"a": rng.standard_normal(10), "b": rng.standard_normal((3, 3))}
        norm0 = nn.global_grad_norm(grads)
        assert norm0 > 1.0
        returned = nn.clip_global_norm(grads, 1.0)
        assert returned == pytest.approx(norm0)
        assert nn.global_grad_norm(grads) == pytest.approx(1.0, rel=1e-9)

    def test_clip_leaves_small_grads_alone(self):
        grads = {"a": np.array([0.1, 0.1])}
        nn.clip_global_norm(grads, 10.0)
        assert np.allclose(grads["a"], [0.1, 0.1])

    def test_accumulation_equals_one_big_batch(self):
        """Gradients accumulated over micro-batches match the full batch."""
        rng = np.random.default_rng(13)
        layer = nn.Dense(6, 4, rng, dtype=np.float64)
        x = rng.standard_normal((12, 6))
        g = rng.standard_normal((12, 4))

        layer.zero_grads()
        layer.forward(x)
        layer.backward(g / 12.0)
        full = {k: v.copy() for k, v in layer.grads.items()}

        layer.zero_grads()
        for lo in range(0, 12, 4):
            layer.forward(x[lo : lo + 4])
            layer.backward(g[lo : lo + 4] / 12.0)
        for k in full:
            assert np.allclose(layer.grads[k], full[k], rtol=1e-6, atol=1e-12)

    def test_noise_disabled_at_zero_std(self):
        rng = np.random.default_rng(14)
        x = np.ones((3, 3), dtype=np.float32)
        assert nn.add_gaussian_noise(x, 0.0, rng) is x


class TestThreeLayerGradCheck:
    def test_full_toy_net(self):
        """Dense -> tanh -> dense -> tanh -> dense against central differences."""
        rng = np.random.default_rng(15)
        layers = [
            nn.Dense(6, 8, rng, dtype=np.float64), nn.Tanh(),
            nn.Dense(8, 8, rng, dtype=np.float64), nn.Tanh(),
            nn.Dense(8, 3, rng, dtype=np.float64),
        ]
        x = rng.standard_normal((5, 6))
        target = nn.softmax(rng.standard_normal((5, 3)))

        def forward_loss():
            h = x
            for layer in layers:
                h = layer.forward(h)
            loss, grad = nn.cross_entropy_with_logits(h, target)
            return float(loss.mean()), grad / 5.0

        loss, grad = forward_loss()
        for layer in layers:
            layer.zero_grads()
        g = grad
        for layer in reversed(layers):
            g = layer.backward(g)

        h = 1e-6
        worst = 0.0
        for layer in layers:
            for pname, p in layer.params.items():
                for _ in range(15):
                    idx = tuple(rng.integers(s) for s in p.shape)
                    orig = p[idx]
                    p[idx] = orig + h
                    vp, _ = forward_loss()
                    p[idx] = orig - h
                    vm, _ = forward_loss()
                    p[idx] = orig
                    num = (vp - vm) / (2 * h)
                    worst = max(worst, rel_err(num, layer.grads[pname][idx]))
        assert worst < 1e-5


class TestDeterminism:
    def test_training_loop_bit_reproducible(self):
        def run():
            rng = np.random.default_rng(99)
            layer = nn.Dense(4, 2, rng, dtype=np.float32)
            state = nn.adamw_init(layer.params)
            data_rng = np.random.default_rng(100)
            for step in range(20):
                x = data_rng.standard_normal((8, 4)).astype(np.float32)
                t = nn.softmax(data_rng.standard_normal((8, 2)))
                layer.zero_grads()
                logits = layer.forward(x)
                _, g = nn.cross_entropy_with_logits(logits, t)
                layer.backward((g / 8).astype(np.float32))
                nn.adamw_step(state, layer.params, layer.grads,
                              nn.warmup_cosine_lr(step, 20, 2, 1e-3))
            return {k: v.copy() for k, v in layer.params.items()}

        a, b = run(), run()
        for k in a:
            assert np.array_equal(a[k], b[k])
