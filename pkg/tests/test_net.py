import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caql import net as N
from tests.oracles import (chain_oracle, fd_input_grad, fd_param_grad, random_nonkink_point,
                           rel_err)


def one_unit(W=2.0, b=-0.5, c=3.0):
    return N.make_net([[[W]]], [[b]], [[c]], state_dim=0, action_dim=1)


def test_zero_network_is_zero():
    net = N.make_net([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)],
                     np.zeros((1, 2)), 2, 1)
    assert N.forward(net, [1.0, -3.0], [0.7]) == 0.0


def test_hand_evaluated_unit():
    assert N.forward(one_unit(), [], [0.5]) == pytest.approx(1.5, abs=1e-15)


def test_forward_matches_matrix_chain_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        net = N.init_net(3, 1, [32, 16], rng=rng)
        x, a = rng.normal(size=3), rng.uniform(-2, 2, size=1)
        assert abs(N.forward(net, x, a) - chain_oracle(net, x, a)) < 1e-12


def test_dimension_mismatch_raises():
    net = N.init_net(3, 1, [4], rng=0)
    with pytest.raises(N.ShapeError):
        N.forward(net, [0.0, 0.0], [0.0])
    with pytest.raises(N.ShapeError):
        N.grad_input(net, [0.0] * 3, [0.0, 1.0])


def test_bad_layer_chain_rejected():
    with pytest.raises(N.ShapeError):
        N.make_net([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)],
                   np.zeros((1, 2)), 2, 1)


def test_linear_net_gradient_is_weight_product():
    # every unit strictly active on the sampled inputs -> the net is linear there
    W1 = np.array([[1.0, 0.5, -0.2], [0.3, 0.1, 0.4]])
    W2 = np.array([[0.7, 0.2]])
    net = N.make_net([W1, W2], [[10.0, 10.0], [10.0]], [[1.5]], 2, 1)
    gx, ga = N.grad_input(net, [0.1, -0.2], [0.3])
    full = 1.5 * W2 @ W1
    np.testing.assert_allclose(np.concatenate([gx, ga]), full[0], rtol=0, atol=1e-15)


def test_constant_net_zero_gradient():
    net = N.make_net([np.zeros((5, 3))], [np.ones(5)], np.ones((1, 5)), 2, 1)
    gx, ga = N.grad_input(net, [1.0, 2.0], [0.0])
    assert not gx.any() and not ga.any()


def test_relu_subgradient_at_zero_is_zero():
    net = one_unit(W=1.0, b=0.0, c=1.0)
    _, ga = N.grad_input(net, [], [0.0])
    assert ga[0] == 0.0


def test_grad_input_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(20):
        net = N.init_net(3, 2, [32, 16], rng=rng)
        x, a = random_nonkink_point(net, rng)
        gx, ga = N.grad_input(net, x, a)
        fx, fa = fd_input_grad(net, x, a)
        assert rel_err(np.concatenate([gx, ga]), np.concatenate([fx, fa])) < 1e-5


def test_grad_params_zero_seed():
    net = N.init_net(3, 1, [8, 4], rng=2)
    Z = np.random.default_rng(2).normal(size=(5, 4))
    for g in N.grad_params(net, Z, np.zeros(5)):
        assert not g.any()


def test_grad_params_one_neuron_l2_by_hand():
    W, b, c, a, t = 1.3, 0.2, -0.7, 0.9, 2.0
    net = one_unit(W, b, c)
    q = c * max(W * a + b, 0.0)
    gW, gb, gc = N.grad_params(net, np.array([[a]]), np.array([2.0 * (q - t)]))
    assert gW[0, 0] == pytest.approx(2 * (q - t) * c * a, abs=1e-14)
    assert gb[0] == pytest.approx(2 * (q - t) * c, abs=1e-14)
    assert gc[0, 0] == pytest.approx(2 * (q - t) * (W * a + b), abs=1e-14)


def test_grad_params_empty_batch():
    net = N.init_net(1, 1, [3], rng=0)
    with pytest.raises(N.ShapeError):
        N.grad_params(net, np.zeros((0, 2)), np.zeros(0))


def test_grad_params_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(10):
        net = N.init_net(3, 1, [32, 16], rng=rng)
        Z = np.stack([np.concatenate(random_nonkink_point(net, rng)) for _ in range(6)])
        targets = rng.normal(size=6)

        def loss(n):
            return float(np.mean((N.forward_batch(n, Z)[:, 0] - targets) ** 2))

        q = N.forward_batch(net, Z)[:, 0]
        grads = N.grad_params(net, Z, 2.0 * (q - targets))
        fds = fd_param_grad(net, loss)
        for g, f in zip(grads, fds):
            assert rel_err(g, f) < 1e-5


def test_adam_zero_grad_keeps_params():
    p = [np.array([1.0, -2.0]), np.array([[3.0]])]
    st_ = N.AdamState.zeros_like(p)
    new, st2 = N.adam_step(p, [np.zeros(2), np.zeros((1, 1))], st_)
    for a, b in zip(p, new):
        np.testing.assert_array_equal(a, b)
    assert st2.step_count == 1


def test_adam_first_step_closed_form():
    st_ = N.AdamState.zeros_like([np.zeros(1)], learning_rate=1e-3)
    new, _ = N.adam_step([np.zeros(1)], [np.ones(1)], st_)
    assert new[0][0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    p = [rng.normal(size=(3, 2))]
    g = [rng.normal(size=(3, 2))]
    st_ = N.AdamState.zeros_like(p)
    a, sa = N.adam_step(p, g, st_)
    b, sb = N.adam_step(p, g, st_)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(sa.second_moment[0], sb.second_moment[0])


def test_checkpoint_round_trip_bit_exact(tmp_path):
    for n_out, sdim, adim in [(1, 3, 1), (2, 3, 0)]:
        net = N.init_net(sdim, adim, [32, 16], n_out=n_out, rng=5)
        path = tmp_path / f"net{n_out}.caql"
        N.save_checkpoint(net, path)
        back = N.load_checkpoint(path)
        assert (back.state_dim, back.action_dim) == (sdim, adim)
        for p, q in zip(net.params(), back.params()):
            assert p.tobytes() == q.tobytes()
        raw = path.read_bytes()
        assert raw[:5] == b"CAQL1"
        assert int.from_bytes(raw[5:9], "little") == 2


def test_action_net_shapes():
    pi = N.init_net(3, 0, [32, 16], n_out=2, rng=0)
    assert N.act(pi, np.zeros(3)).shape == (2,)
    assert N.act(pi, np.zeros((7, 3))).shape == (7, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_piecewise_linear_on_fixed_pattern(seed):
    rng = np.random.default_rng(seed)
    net = N.init_net(2, 2, [8, 6], rng=rng)
    x = rng.normal(size=2)
    a1 = rng.uniform(-1, 1, size=2)
    a2 = a1 + rng.normal(scale=1e-3, size=2)

    def pattern(a):
        return [y > 0 for y in N.preactivations(net, N.join_inputs(net, x, a))]

    pts = [a1 + s * (a2 - a1) for s in (0.0, 0.25, 0.5, 0.75, 1.0)]
    pats = [pattern(p) for p in pts]
    if not all(all((p == q).all() for p, q in zip(pats[0], other)) for other in pats[1:]):
        return
    vals = [N.forward(net, x, p) for p in pts]
    mid = 0.5 * (vals[0] + vals[-1])
    assert abs(vals[2] - mid) < 1e-12 * max(1.0, abs(mid))
