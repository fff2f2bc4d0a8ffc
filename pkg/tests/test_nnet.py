import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qdfm.nnet import Adam, DenseNet, load_params, optimizer_step, save_params


def fd_grads(net, x, g_out, step=1e-5):
    base = net.flatten()
    out = np.zeros_like(base)
    for i in range(base.size):
        vals = []
        for s in (1, -1):
            p = base.copy()
            p[i] += s * step
            net.unflatten(p)
            vals.append(np.sum(g_out * net.forward(x)))
        out[i] = (vals[0] - vals[1]) / (2 * step)
    net.unflatten(base)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_zero_net_gives_zero():
    net = DenseNet([3, 5, 2], rng=0)
    net.unflatten(np.zeros(net.n_params))
    assert np.all(net.forward(np.array([1.0, -2.0, 3.0])) == 0)


def test_identity_layer():
    net = DenseNet([4, 4], rng=0)
    net.weights[0][...] = np.eye(4)
    net.biases[0][...] = 0
    v = np.array([0.3, -1.0, 2.0, 5.0])
    assert np.array_equal(net.forward(v), v)


def test_matches_hand_matmul():
    net = DenseNet([3, 6, 2], rng=7)
    x = np.array([0.2, -0.4, 1.3])
    W0, b0, W1, b1 = net.params()
    expect = np.tanh(x @ W0 + b0) @ W1 + b1
    np.testing.assert_allclose(net.forward(x), expect, rtol=0, atol=1e-15)


def test_input_shape_error():
    with pytest.raises(ValueError):
        DenseNet([3, 2], rng=0).forward(np.ones(4))


def test_zero_output_gradient():
    net = DenseNet([3, 4, 2], rng=1)
    grads, gin = net.backward(np.ones(3), np.zeros(2))
    assert all(np.all(g == 0) for g in grads)
    assert np.all(gin == 0)


def test_bias_gradient_of_linear_net():
    net = DenseNet([3, 2], rng=1)
    grads, _ = net.backward(np.ones(3), np.array([1.0, 0.0]))
    assert grads[1][0] == 1.0 and grads[1][1] == 0.0


def test_non_finite_output_gradient():
    net = DenseNet([2, 2], rng=1)
    with pytest.raises(FloatingPointError):
        net.backward(np.ones(2), np.array([np.nan, 0.0]))


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
def test_three_layer_finite_differences(activation):
    rng = np.random.default_rng(11)
    net = DenseNet([5, 7, 6, 3], activation=activation, rng=rng)
    x = rng.normal(size=(4, 5))
    g_out = rng.normal(size=(4, 3))
    grads, _ = net.backward(x, g_out)
    assert rel_err(net.flatten_grads(grads), fd_grads(net, x, g_out)) <= 1e-4


def test_input_gradient_finite_differences():
    rng = np.random.default_rng(2)
    net = DenseNet([4, 5, 2], rng=rng)
    x = rng.normal(size=4)
    g_out = rng.normal(size=2)
    _, gin = net.backward(x, g_out)
    fd = np.array([(np.sum(g_out * net.forward(x + e * 1e-6))
                    - np.sum(g_out * net.forward(x - e * 1e-6))) / 2e-6 for e in np.eye(4)])
    assert rel_err(gin, fd) <= 1e-6


def test_gradient_check_twenty_random_nets():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        depth = rng.integers(1, 4)
        widths = [int(rng.integers(1, 9))] + [int(rng.integers(1, 17)) for _ in range(depth)]
        net = DenseNet(widths, activation=("tanh", "softplus")[seed % 2], rng=rng)
        x = rng.normal(size=(3, widths[0]))
        g_out = rng.normal(size=(3, widths[-1]))
        grads, _ = net.backward(x, g_out)
        worst = max(worst, rel_err(net.flatten_grads(grads), fd_grads(net, x, g_out)))
    assert worst <= 1e-4


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_flatten_roundtrip(seed):
    net = DenseNet([3, 4, 2], rng=seed)
    flat = net.flatten()
    other = DenseNet([3, 4, 2], rng=seed + 1)
    other.unflatten(flat)
    assert np.array_equal(other.flatten(), flat)


def test_unflatten_wrong_size():
    net = DenseNet([3, 2], rng=0)
    with pytest.raises(ValueError):
        net.unflatten(np.zeros(net.n_params + 1))


@pytest.mark.parametrize("binary", [True, False])
def test_checkpoint_roundtrip(tmp_path, binary):
    net = DenseNet([3, 5, 2], activation="softplus", rng=4)
    path = tmp_path / "net.ckpt"
    net.save(path, binary=binary)
    loaded, head = DenseNet.load(path)
    assert head["widths"] == [3, 5, 2] and head["activation"] == "softplus"
    assert np.array_equal(loaded.flatten(), net.flatten())


def test_save_params_is_bit_exact(tmp_path):
    flat = np.random.default_rng(0).normal(size=50) * 1e-7
    save_params(tmp_path / "p.bin", {"a": 1}, flat)
    head, back = load_params(tmp_path / "p.bin")
    assert head == {"a": 1} and back.tobytes() == flat.tobytes()


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    opt = Adam(lr=0.1)
    optimizer_step(opt, p, [np.zeros(2)])
    assert np.array_equal(p[0], [1.0, -2.0]) and opt.t == 1


def test_adam_moves_against_gradient():
    p = [np.zeros(1)]
    opt = Adam(lr=0.01)
    for _ in range(10):
        opt.step(p, [np.array([3.0])])
    assert p[0][0] < 0


def test_adam_quadratic_converges():
    p = [np.array([5.0])]
    opt = Adam(lr=1e-2)
    for _ in range(5000):
        opt.step(p, [2.0 * (p[0] - 1.5)])
    assert abs(p[0][0] - 1.5) < 1e-3


def test_adam_nan_names_block():
    opt = Adam()
    with pytest.raises(FloatingPointError, match="W1"):
        opt.step([np.zeros(2), np.zeros(2)], [np.zeros(2), np.array([np.nan, 0])],
                 names=["W0", "W1"])


def test_optimizer_trajectory_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        net = DenseNet([3, 8, 2], rng=rng)
        opt = Adam(lr=1e-2)
        for _ in range(100):
            x = rng.normal(size=(4, 3))
            grads, _ = net.backward(x, net.forward(x) - 1.0)
            opt.step(net.params(), grads)
        return net.flatten()
    assert run().tobytes() == run().tobytes()
