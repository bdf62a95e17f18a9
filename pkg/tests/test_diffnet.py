import math

import numpy as np
import pytest

from shortcut_policy import diffnet
from shortcut_policy.diffnet import (
    AdamWState, PolicyNetwork, TaskCondition, adamw_step, embed_scalar, forward, mse,
)
from shortcut_policy.shortcut import StepSizeGrid, TrainingSet, build_batch, shortcut_targets
from oracles import central_difference, sinusoid


def small_net(seed=0, mode="action-concat", hidden=(16, 32, 16), action_dim=14, obs_dim=5,
              randomize_output=True, film_time=False):
    rng = np.random.default_rng(seed)
    net = PolicyNetwork.create(rng, action_dim, obs_dim, 3, hidden=hidden, mode=mode,
                               film_time=film_time)
    if randomize_output:
        for name, p in net.params.items():
            p += rng.normal(0.0, 0.3, p.shape)
    return net


def random_inputs(net, n, seed=1):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(n, net.action_dim)), rng.uniform(size=(n, net.obs_dim)),
            rng.integers(0, net.num_tasks + 1, size=n), rng.uniform(size=n), rng.uniform(size=n))


class TestEmbedScalar:
    def test_zero(self):
        assert np.array_equal(embed_scalar(0.0, 4), [0.0, 1.0, 0.0, 1.0])

    def test_deterministic(self):
        assert np.array_equal(embed_scalar(0.5, 32), embed_scalar(0.5, 32))

    def test_against_scalar_loop(self):
        np.testing.assert_allclose(embed_scalar(0.3, 8), sinusoid(0.3, 8), rtol=1e-13, atol=1e-13)

    def test_vectorized(self):
        xs = np.array([0.0, 0.25, 1.0])
        out = embed_scalar(xs, 6)
        assert out.shape == (3, 6)
        np.testing.assert_allclose(out[1], sinusoid(0.25, 6), atol=1e-13)

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            embed_scalar(0.1, 5)


class TestForward:
    def test_zero_output_layer(self):
        net = PolicyNetwork.create(np.random.default_rng(0), 14, 5, 3, hidden=(8, 8))
        A, O, C, t, d = random_inputs(net, 6)
        assert np.array_equal(forward(net, A, O, C, t, d), np.zeros((6, 14)))

    def test_deterministic(self):
        net = small_net()
        args = random_inputs(net, 4)
        assert np.array_equal(forward(net, *args), forward(net, *args))

    def test_single_vector(self):
        net = small_net()
        A, O, C, t, d = random_inputs(net, 1)
        out = forward(net, A[0], O[0], TaskCondition(int(C[0]) % 3), t[0], d[0])
        assert out.shape == (14,)

    def test_hand_computed_two_layer(self):
        net = PolicyNetwork(action_dim=3, obs_dim=1, num_tasks=1, hidden=(3,), time_dim=2,
                            step_dim=2, cond_dim=2, activation="tanh", skip=False)
        width = net.input_width
        assert width == 3 + 2 + 1 + 2 + 2
        W0 = np.arange(width * 3, dtype=float).reshape(width, 3) / 50.0 - 0.3
        b0 = np.array([0.1, -0.2, 0.05])
        W1 = np.array([[1.0, 0.0, -1.0], [0.5, 2.0, 0.0], [0.0, -1.0, 1.5]])
        b1 = np.array([0.0, 0.1, -0.1])
        table = np.array([[0.2, -0.4], [0.0, 0.0]])
        net.params = {"W0": W0, "b0": b0, "W1": W1, "b1": b1, "cond": table}
        A = [0.3, -0.1, 0.7]
        O = [0.9]
        t, d = 0.25, 0.5
        # input order: A, condition embedding, O, sin/cos(t), sin/cos(d) at frequency 1
        x = A + [0.2, -0.4] + O + [math.sin(t), math.cos(t), math.sin(d), math.cos(d)]
        hidden = []
        for j in range(3):
            z = b0[j] + sum(x[i] * W0[i, j] for i in range(width))
            hidden.append(math.tanh(z))
        expected = [b1[k] + sum(hidden[j] * W1[j, k] for j in range(3)) for k in range(3)]
        got = forward(net, A, O, TaskCondition(0), t, d)
        np.testing.assert_allclose(got, expected, rtol=1e-13)

    def test_dimension_errors_name_input(self):
        net = small_net()
        A, O, C, t, d = random_inputs(net, 2)
        with pytest.raises(ValueError, match="A_flat"):
            forward(net, A[:, :5], O, C, t, d)
        with pytest.raises(ValueError, match="^O "):
            forward(net, A, O[:, :2], C, t, d)
        with pytest.raises(ValueError, match="mode"):
            forward(net, A, O, C, t, d, mode="film")

    def test_null_token_ignores_task_id(self):
        net = small_net()
        A, O, _, t, d = random_inputs(net, 3)
        a = forward(net, A, O, [TaskCondition(0, True)] * 3, t, d)
        b = forward(net, A, O, [TaskCondition(2, True)] * 3, t, d)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("film_time", [False, True])
    def test_film_identity_init_is_unconditioned(self, film_time):
        net = small_net(mode="film", randomize_output=False, film_time=film_time)
        rng = np.random.default_rng(3)
        for name in net.params:
            if name.startswith(("W", "b")):
                net.params[name] = rng.normal(0.0, 0.3, net.params[name].shape)
        A, O, C, t, d = random_inputs(net, 5)
        out = forward(net, A, O, C, t, d)
        x_in = np.concatenate([A, O, embed_scalar(t, 32), embed_scalar(d, 32)], axis=1)
        x = x_in
        for i in range(3):
            z = x @ net.params[f"W{i}"] + net.params[f"b{i}"]
            x = z / (1.0 + np.exp(-z))
        plain = x @ net.params["W3"] + net.params["b3"] + x_in @ net.params["Wskip"]
        np.testing.assert_allclose(out, plain, rtol=1e-12, atol=1e-12)
        other = forward(net, A, O, (C + 1) % 4, t, d)
        assert np.array_equal(out, other)


class TestBackward:
    def test_twice_is_an_error(self):
        net = small_net()
        out, tape = forward(net, *random_inputs(net, 2), record=True)
        tape.backward(np.ones_like(out))
        with pytest.raises(RuntimeError):
            tape.backward(np.ones_like(out))

    def test_zero_loss_zero_bias_gradient(self):
        net = PolicyNetwork.create(np.random.default_rng(0), 14, 5, 3, hidden=(8,))
        out, tape = forward(net, *random_inputs(net, 4), record=True)
        loss, dout = mse(out, np.zeros_like(out))
        assert loss == 0.0
        grads = tape.backward(dout)
        assert np.array_equal(grads["b1"], np.zeros(14))

    def test_single_linear_neuron(self):
        net = PolicyNetwork.create(np.random.default_rng(0), 1, 2, 1, hidden=(), time_dim=2,
                                   step_dim=2, cond_dim=2)
        rng = np.random.default_rng(1)
        w = rng.normal(size=net.input_width)
        net.params["W0"] = w[:, None].copy()
        A, O, t, d, y = [0.4], [0.2, -0.5], 0.3, 0.6, 1.7
        x = np.concatenate([A, net.params["cond"][0], O, embed_scalar(t, 2), embed_scalar(d, 2)])
        out, tape = forward(net, np.array([A]), np.array([O]), [0], t, d, record=True)
        _, dout = mse(out, np.array([[y]]))
        grads = tape.backward(dout)
        np.testing.assert_allclose(grads["W0"][:, 0], 2 * (w @ x - y) * x, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("mode", ["action-concat", "obs-concat", "film"])
    def test_shortcut_loss_matches_finite_differences(self, seed, mode):
        check_shortcut_gradients(seed, mode)

    @pytest.mark.parametrize("seed", range(3))
    def test_time_film_matches_finite_differences(self, seed):
        check_shortcut_gradients(seed, "film", film_time=True)


def check_shortcut_gradients(seed, mode, rtol=1e-4, atol=1e-7, film_time=False):
    """Every parameter gradient of the shortcut loss vs central differences.

    The self-consistency target is frozen at the unperturbed parameters,
    matching its stop-gradient treatment in the loss.
    """
    net = small_net(seed, mode=mode, film_time=film_time)
    if mode == "film":
        rng = np.random.default_rng(seed + 100)
        scale = 0.3 * np.sqrt(net.cond_dim / net.film_width)  # same modulation size for any FiLM input width
        for name in net.params:
            if name.startswith("film"):
                net.params[name] = net.params[name] + rng.normal(0.0, scale, net.params[name].shape)
    rng = np.random.default_rng(seed + 10)
    n_demo = 5
    data = TrainingSet(rng.uniform(-1, 1, (n_demo, net.action_dim)),
                       rng.uniform(size=(n_demo, net.obs_dim)),
                       rng.integers(0, 3, n_demo))
    grid = StepSizeGrid(4)
    batch = build_batch(data, rng, 8, grid)
    batch.cond[0] = net.num_tasks  # include a null-token record

    from shortcut_policy.shortcut import shortcut_loss

    report = shortcut_loss(net, batch, grid=grid)
    At, t, dq, target = shortcut_targets(net, batch, grid)

    def loss():
        return mse(forward(net, At, batch.obs, batch.cond, t, dq), target)[0]

    assert abs(loss() - report.loss) < 1e-14
    checked = 0
    for name, p in net.params.items():
        g = report.grads[name]
        for index in np.ndindex(p.shape):
            fd = central_difference(loss, net.params, name, index)
            assert abs(g[index] - fd) <= max(rtol * abs(fd), atol), (name, index, g[index], fd)
            checked += 1
    assert checked == sum(p.size for p in net.params.values())
    return checked


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        params = {"w": np.array([1.0, -2.0])}
        adamw_step(AdamWState(weight_decay=0.0), params, {"w": np.zeros(2)})
        assert np.array_equal(params["w"], [1.0, -2.0])

    def test_decoupled_decay_only(self):
        params = {"w": np.array([1.0, -2.0, 3.5])}
        adamw_step(AdamWState(lr=1e-4, weight_decay=0.1), params, {"w": np.zeros(3)})
        np.testing.assert_allclose(params["w"], np.array([1.0, -2.0, 3.5]) * (1 - 1e-5), rtol=1e-15)

    def test_single_step_closed_form(self):
        p0, g, lr, wd, eps = 0.5, 1.0, 1e-3, 0.1, 1e-8
        params = {"w": np.array([p0])}
        adamw_step(AdamWState(lr=lr, weight_decay=wd, eps=eps), params, {"w": np.array([g])})
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = p0 - lr * (m_hat / (math.sqrt(v_hat) + eps) + wd * p0)
        assert params["w"][0] == pytest.approx(expected, rel=1e-14)

    def test_second_step_uses_bias_correction(self):
        state = AdamWState(lr=1e-2, weight_decay=0.0)
        params = {"w": np.array([0.0])}
        adamw_step(state, params, {"w": np.array([1.0])})
        adamw_step(state, params, {"w": np.array([-1.0])})
        m = 0.9 * 0.1 + 0.1 * -1.0
        v = 0.999 * 0.001 + 0.001
        step2 = (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
        step1 = 1.0 / (1.0 + 1e-8)
        assert params["w"][0] == pytest.approx(-1e-2 * step1 - 1e-2 * step2, rel=1e-12)
        assert state.step == 2

    def test_non_finite_gradient_named(self):
        params = {"a": np.zeros(2), "b": np.zeros(2)}
        with pytest.raises(FloatingPointError, match="'b'"):
            adamw_step(AdamWState(), params, {"a": np.zeros(2), "b": np.array([0.0, np.nan])})


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = small_net(mode="film")
        state = AdamWState()
        out, tape = forward(net, *random_inputs(net, 3), record=True)
        adamw_step(state, net.params, tape.backward(np.ones_like(out)))
        path = tmp_path / "a.ckpt"
        diffnet.save_checkpoint(path, net, state, config_hash="abc", meta={"epoch": 3})
        net2, state2, header = diffnet.load_checkpoint(path)
        assert header["config_hash"] == "abc" and header["meta"] == {"epoch": 3}
        assert net2.architecture() == net.architecture()
        for k in net.params:
            assert np.array_equal(net.params[k], net2.params[k])
            assert np.array_equal(state.m[k], state2.m[k])
            assert np.array_equal(state.v[k], state2.v[k])
        assert state2.step == 1 and state2.lr == state.lr

    def test_byte_stable(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        diffnet.save_checkpoint(a, small_net(seed=4), AdamWState(), "h")
        diffnet.save_checkpoint(b, small_net(seed=4), AdamWState(), "h")
        assert a.read_bytes() == b.read_bytes()

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "a.ckpt"
        diffnet.save_checkpoint(path, small_net(), None, "h")
        raw = bytearray(path.read_bytes())
        raw[-100] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="corrupt"):
            diffnet.load_checkpoint(path)
