import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dagsched.diffcore import (LEAKY_SLOPE, Adam, DenseNet, StaleTapeError, Tape, backward, forward,
                               global_norm, load_checkpoint, masked_softmax, save_checkpoint, sgd_step)


def numeric_grad(f, params, h=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = f()
            p[i] = old - h
            dn = f()
            p[i] = old
            g[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


def max_rel_err(a, b, floor=1e-6):
    # floor sits at the noise level of central differences with h=1e-5
    return max(float(np.max(np.abs(x - y) / np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)))
               for x, y in zip(a, b))


def dense_oracle(net, x):
    # straight-line recomputation without the tape
    h = np.atleast_2d(x)
    n = len(net.layer_dims) - 1
    for i in range(n):
        h = h @ net.params[2 * i] + net.params[2 * i + 1]
        if i < n - 1:
            h = np.tanh(h) if net.activation == "tanh" else np.where(h > 0, h, LEAKY_SLOPE * h)
    return h


def test_zero_net_zero_output():
    net = DenseNet.zeros((3, 4, 2))
    out, _ = forward(net, [1.0, -2.0, 3.0])
    assert np.array_equal(out, np.zeros(2))


def test_identity_layer():
    net = DenseNet((3, 3, 3), [np.eye(3), np.zeros(3), np.eye(3), np.zeros(3)])
    v = np.array([1.0, -2.0, 0.5])
    out, _ = forward(net, v)
    assert np.allclose(out, np.where(v > 0, v, LEAKY_SLOPE * v))


def test_forward_matches_oracle(rng):
    for act in ("leaky_relu", "tanh"):
        net = DenseNet.init((5, 7, 3), rng, act)
        x = rng.normal(size=(4, 5))
        out, _ = forward(net, x)
        assert np.allclose(out, dense_oracle(net, x), rtol=1e-14, atol=1e-14)


def test_forward_dimension_error():
    with pytest.raises(ValueError):
        forward(DenseNet.zeros((3, 1)), [1.0, 2.0])


def test_linear_gradient_is_input():
    net = DenseNet((3, 1), [np.array([[0.5], [-1.0], [2.0]]), np.zeros(1)])
    x = np.array([1.5, -0.5, 4.0])
    _, tape = forward(net, x)
    g = backward(tape, [1.0])[net]
    assert np.array_equal(g[0][:, 0], x) and g[1][0] == 1.0


def test_hundred_random_nets_fd(rng):
    worst = 0.0
    for k in range(100):
        dims = [int(rng.integers(1, 6)) for _ in range(int(rng.integers(2, 5)))]
        net = DenseNet.init(dims, rng, "tanh" if k % 2 else "leaky_relu")
        for i in range(1, len(net.params), 2):
            net.params[i] = rng.normal(scale=0.3, size=net.params[i].shape)
        x = rng.normal(size=(2, dims[0]))
        og = rng.normal(size=(2, dims[-1]))
        _, tape = forward(net, x)
        g = backward(tape, og)[net]
        num = numeric_grad(lambda: float(np.sum(dense_oracle(net, x) * og)), net.params)
        worst = max(worst, max_rel_err(g, num))
    assert worst <= 1e-4


def test_chained_nets_fd(rng):
    f = DenseNet.init((3, 4, 2), rng, "tanh")
    g = DenseNet.init((2, 5, 1), rng, "tanh")
    x = rng.normal(size=(3, 3))

    def run():
        tape = Tape()
        out = g(f(tape.constant(x), tape), tape)
        return tape, out

    tape, out = run()
    grads = tape.backward(out, 1.0)
    total = lambda: float(np.sum(dense_oracle(g, dense_oracle(f, x))))
    assert max_rel_err(grads[f], numeric_grad(total, f.params)) <= 1e-4
    assert max_rel_err(grads[g], numeric_grad(total, g.params)) <= 1e-4


def test_segment_ops_fd(rng):
    net = DenseNet.init((2, 3, 1), rng, "tanh")
    x = rng.normal(size=(6, 2))
    seg = np.array([0, 0, 1, 1, 1, 2])
    w = rng.normal(size=(6, 1))

    def plain():
        s = dense_oracle(net, x)
        tot = 0.0
        for k in range(3):
            v = s[seg == k]
            lp = v - v.max() - np.log(np.exp(v - v.max()).sum())
            tot += float(np.sum(lp * w[seg == k])) + float(np.sum(np.exp(lp) ** 2))
        return tot

    tape = Tape()
    s = net(tape.constant(x), tape)
    lp = tape.segment_log_softmax(s, seg, 3)
    p = tape.segment_softmax(s, seg, 3)
    a = tape.weighted_sum(lp, w)
    b = tape.weighted_sum(tape.mul(p, p), 1.0)
    grads = tape.backward(tape.add(a, b), 1.0)[net]
    assert max_rel_err(grads, numeric_grad(plain, net.params)) <= 1e-4


def test_gather_segment_sum_fd(rng):
    net = DenseNet.init((2, 2), rng, "tanh")
    x = rng.normal(size=(4, 2))
    idx = np.array([3, 0, 0, 2])
    seg = np.array([1, 0, 1, 1])

    def plain():
        h = dense_oracle(net, x)[idx]
        out = np.zeros((2, 2))
        np.add.at(out, seg, h)
        return float(np.sum(out ** 2))

    tape = Tape()
    h = tape.gather(net(tape.constant(x), tape), idx)
    out = tape.segment_sum(h, seg, 2)
    grads = tape.backward(tape.squared_error(out, 0.0), 1.0)[net]
    assert max_rel_err(grads, numeric_grad(plain, net.params)) <= 1e-4


def test_replay_identical_gradients(rng):
    net = DenseNet.init((3, 4, 1), rng)
    x = rng.normal(size=3)
    g1 = backward(forward(net, x)[1], [1.0])[net]
    g2 = backward(forward(net, x)[1], [1.0])[net]
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


def test_untouched_net_absent(rng):
    a, b = DenseNet.init((2, 1), rng), DenseNet.init((2, 1), rng)
    tape = Tape()
    out = a(tape.constant(np.ones((1, 2))), tape)
    assert set(tape.backward(out, 1.0)) == {a}


def test_stale_tape(rng):
    net = DenseNet.init((2, 1), rng)
    _, tape = forward(net, [1.0, 2.0])
    sgd_step({"n": net}, {"n": [np.ones((2, 1)), np.ones(1)]}, 0.1)
    with pytest.raises(StaleTapeError):
        backward(tape, [1.0])


def test_tape_single_use(rng):
    net = DenseNet.init((2, 1), rng)
    _, tape = forward(net, [1.0, 2.0])
    backward(tape, [1.0])
    with pytest.raises(StaleTapeError):
        backward(tape, [1.0])


def test_softmax_equal_scores():
    assert np.array_equal(masked_softmax([3.0] * 4, [True] * 4), np.full(4, 0.25))


def test_softmax_single_unmasked():
    p = masked_softmax([5.0, -1.0, 2.0], [False, True, False])
    assert p.tolist() == [0.0, 1.0, 0.0]


def test_softmax_all_masked():
    with pytest.raises(ValueError):
        masked_softmax([1.0, 2.0], [False, False])


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.data(), st.floats(-100, 100))
def test_softmax_properties(scores, data, shift):
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(scores), max_size=len(scores))))
    if not mask.any():
        mask[0] = True
    p = masked_softmax(scores, mask)
    assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p[~mask] == 0.0)
    assert np.allclose(masked_softmax(scores + shift, mask), p, rtol=1e-9, atol=1e-12)


def test_sgd_step_arithmetic():
    net = DenseNet((1, 1), [np.array([[1.0]]), np.array([1.0])])
    sgd_step({"n": net}, {"n": [np.array([[2.0]]), np.array([2.0])]}, 0.001)
    assert net.params[0][0, 0] == pytest.approx(1.002, abs=1e-15)


def test_sgd_zero_gradient(rng):
    net = DenseNet.init((3, 2), rng)
    before = [p.copy() for p in net.params]
    sgd_step({"n": net}, {"n": [np.zeros_like(p) for p in net.params]}, 0.5)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params))


def test_sgd_refuses_nan(rng):
    net = DenseNet.init((2, 1), rng)
    before = [p.copy() for p in net.params]
    with pytest.raises(FloatingPointError, match="refused"):
        sgd_step({"n": net}, {"n": [np.full((2, 1), np.nan), np.zeros(1)]}, 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params))


def test_sgd_descent_on_quadratic(rng):
    net = DenseNet.init((3, 4, 1), rng)
    x = rng.normal(size=(8, 3))
    y = rng.normal(size=(8, 1))
    losses = []
    for _ in range(50):
        tape = Tape()
        loss = tape.squared_error(net(tape.constant(x), tape), y)
        losses.append(float(loss.value))
        sgd_step({"c": net}, {"c": tape.backward(loss, 1.0)[net]}, 0.005, ascent=False)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_first_step_is_sign(rng):
    net = DenseNet.init((3, 2), rng)
    before = [p.copy() for p in net.params]
    g = [rng.normal(size=p.shape) for p in net.params]
    Adam(0.01).step({"n": net}, {"n": g})
    for b, a, gi in zip(before, net.params, g):
        assert np.allclose(a - b, 0.01 * gi / (np.abs(gi) + 1e-8), rtol=1e-12)


def test_adam_state_round_trip(rng):
    net = DenseNet.init((3, 2), rng)
    opt = Adam(0.01)
    for _ in range(3):
        opt.step({"n": net}, {"n": [rng.normal(size=p.shape) for p in net.params]})
    clone = Adam.from_state(opt.state_dict())
    a, b = net.copy(), net.copy()
    g = [rng.normal(size=p.shape) for p in net.params]
    opt.step({"n": a}, {"n": g})
    clone.step({"n": b}, {"n": g})
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


def test_init_deterministic():
    a = DenseNet.init((4, 8, 1), np.random.default_rng(3))
    b = DenseNet.init((4, 8, 1), np.random.default_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


def test_checkpoint_bit_exact(tmp_path, rng):
    nets = {"a": DenseNet.init((3, 5, 1), rng), "b": DenseNet.init((2, 2), rng, "tanh")}
    nets["a"].params[0][0, 0] = 0.1 + 0.2
    p = tmp_path / "c.json"
    save_checkpoint(p, nets, {"iteration": 7})
    back, meta = load_checkpoint(p)
    assert meta == {"iteration": 7}
    for k in nets:
        assert back[k].layer_dims == nets[k].layer_dims and back[k].activation == nets[k].activation
        assert all(np.array_equal(x, y) and x.tobytes() == y.tobytes() for x, y in zip(back[k].params, nets[k].params))


def test_checkpoint_rejects_foreign(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_global_norm():
    assert global_norm({"a": [np.array([3.0]), np.array([[4.0]])]}) == 5.0
