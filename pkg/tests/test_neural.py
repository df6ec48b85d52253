import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import LOSS_KINDS, gradient_check
from rcorl.exceptions import ContractError, InputShapeError, NumericError
from rcorl.neural import (
    AdamState,
    Mlp,
    Optimizer,
    Tape,
    adam_step,
    backprop,
    hard_update,
    logsumexp,
    mean,
    mse,
    soft_update,
)


def test_single_affine_layer_forward():
    net = Mlp((1, 1), [np.array([[2.0]])], [np.array([1.0])])
    np.testing.assert_array_equal(net.forward(np.array([[3.0]])), [[7.0]])


def test_all_zero_network_outputs_zero():
    net = Mlp((3, 4, 2), [np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
    np.testing.assert_array_equal(net.forward(np.array([[1.0, -2.0, 5.0]])), [[0.0, 0.0]])


def test_two_layer_tanh_forward_matches_hand_evaluation():
    w1, b1 = np.array([[1.0, 2.0], [-1.0, 0.5]]), np.array([0.1, -0.2])
    w2, b2 = np.array([[0.3, -0.7]]), np.array([0.05])
    net = Mlp((2, 2, 1), [w1, w2], [b1, b2], "tanh", "tanh")
    h0 = np.tanh(1.0 * 0.5 + 2.0 * -0.5 + 0.1)
    h1 = np.tanh(-1.0 * 0.5 + 0.5 * -0.5 - 0.2)
    want = np.tanh(0.3 * h0 - 0.7 * h1 + 0.05)
    assert net.forward(np.array([[0.5, -0.5]]))[0, 0] == pytest.approx(want, abs=1e-15)


def test_squared_error_gradient_by_hand():
    net = Mlp((1, 1), [np.array([[1.0]])], [np.array([0.0])])
    tape = Tape()
    loss = mse(net(np.array([[2.0]]), tape), np.zeros((1, 1)))
    grad_w, grad_b = backprop(net, tape, loss)
    assert grad_w[0, 0] == 8.0 and grad_b[0] == 4.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), kind=st.sampled_from(LOSS_KINDS))
def test_gradients_match_central_differences(seed, kind):
    assert gradient_check(seed, kind) < 1e-4


def test_adam_zero_gradient_keeps_parameters_and_decays_moments():
    p = [np.array([1.0, -2.0])]
    state = AdamState.for_params(p, 0.1)
    state.first_moment[0][:] = [0.5, 0.5]
    state.second_moment[0][:] = [0.25, 0.25]
    before = p[0].copy()
    adam_step(p, [np.zeros(2)], state)
    np.testing.assert_allclose(state.first_moment[0], [0.45, 0.45])
    np.testing.assert_allclose(state.second_moment[0], [0.25 * 0.999] * 2)
    state = AdamState.for_params([before.copy()], 0.1)
    q = [before.copy()]
    adam_step(q, [np.zeros(2)], state)
    np.testing.assert_array_equal(q[0], before)
    assert state.step_count == 1


def test_adam_single_scalar_step_matches_hand_formula():
    p = [np.array([0.0])]
    state = AdamState.for_params(p, 0.001)
    adam_step(p, [np.array([1.0])], state)
    # m = 0.1, v = 0.001; bias-corrected both to 1
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    expected = 0.0 - 0.001 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert p[0][0] == pytest.approx(expected, abs=1e-18)
    assert p[0][0] == pytest.approx(-0.000999999990, abs=1e-15)


def test_adam_two_steps_move_further_than_one():
    one, two = [np.array([0.0])], [np.array([0.0])]
    s1, s2 = AdamState.for_params(one, 0.01), AdamState.for_params(two, 0.01)
    adam_step(one, [np.array([1.0])], s1)
    adam_step(two, [np.array([1.0])], s2)
    adam_step(two, [np.array([1.0])], s2)
    assert abs(two[0][0]) > abs(one[0][0])


def test_adam_non_finite_gradient_names_layer():
    net = Mlp.init((2, 3, 1), np.random.default_rng(0))
    grads = [np.zeros_like(p) for p in net.parameters()]
    grads[2][0, 0] = np.nan
    with pytest.raises(NumericError) as info:
        Optimizer(net).step(grads)
    assert info.value.layer == 1


def _pair(seed=0):
    rng = np.random.default_rng(seed)
    return Mlp.init((3, 4, 2), rng), Mlp.init((3, 4, 2), rng)


def test_soft_update_tau_one_copies_online():
    target, online = _pair()
    soft_update(target, online, 1.0)
    assert target == online


def test_soft_update_tau_zero_keeps_target():
    target, online = _pair()
    before = target.copy()
    soft_update(target, online, 0.0)
    assert target == before


def test_soft_update_single_weight_arithmetic():
    online = Mlp((1, 1), [np.array([[1.0]])], [np.array([0.0])])
    target = Mlp((1, 1), [np.array([[0.0]])], [np.array([0.0])])
    soft_update(target, online, 0.005)
    assert target.weights[0][0, 0] == 0.005


@settings(max_examples=30, deadline=None)
@given(tau=st.floats(0.0, 1.0), seed=st.integers(0, 1000))
def test_soft_update_is_the_polyak_formula(tau, seed):
    target, online = _pair(seed)
    expected = [tau * po + (1.0 - tau) * pt for pt, po in zip(target.parameters(), online.parameters())]
    soft_update(target, online, tau)
    for got, want in zip(target.parameters(), expected):
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_soft_and_hard_update_reject_mismatched_architectures():
    a = Mlp.init((3, 4, 2), np.random.default_rng(0))
    b = Mlp.init((3, 5, 2), np.random.default_rng(0))
    with pytest.raises(ContractError):
        soft_update(a, b, 0.5)
    with pytest.raises(ContractError):
        hard_update(a, b)


def test_same_seed_gives_bit_identical_forward_and_gradients():
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(7)
        net = Mlp.init((4, 8, 8, 3), rng)
        x = rng.normal(size=(5, 4))
        tape = Tape()
        loss = mse(net(x, tape), np.ones((5, 3)))
        outs.append((net.forward(x), backprop(net, tape, loss)))
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    for g1, g2 in zip(outs[0][1], outs[1][1]):
        np.testing.assert_array_equal(g1, g2)


def test_init_respects_fan_in_bound():
    net = Mlp.init((9, 16, 4), np.random.default_rng(1))
    assert np.abs(net.weights[0]).max() <= 1 / 3
    assert np.abs(net.weights[1]).max() <= 1 / 4


def test_product_of_recorded_values_is_rejected():
    net = Mlp.init((2, 2), np.random.default_rng(0))
    tape = Tape()
    out = net(np.ones((1, 2)), tape)
    with pytest.raises(ContractError):
        out * out


def test_input_width_checked():
    net = Mlp.init((3, 2), np.random.default_rng(0))
    with pytest.raises(InputShapeError):
        net.forward(np.ones((2, 4)))


def test_loss_must_be_scalar():
    net = Mlp.init((2, 2), np.random.default_rng(0))
    tape = Tape()
    with pytest.raises(ContractError):
        tape.gradients(net(np.ones((3, 2)), tape))


def test_parameters_unused_by_loss_get_zero_gradient():
    rng = np.random.default_rng(0)
    a, b = Mlp.init((2, 2), rng), Mlp.init((2, 2), rng)
    tape = Tape()
    loss = mean(a(np.ones((1, 2)), tape))
    for g in backprop(b, tape, loss):
        assert not g.any()


def test_logsumexp_stable_for_huge_values():
    tape = Tape()
    x = tape.constant(np.array([[1e6, -1e6, 0.0], [-1e6, -1e6, -1e6]]))
    out = logsumexp(x).value
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1e6)
    assert out[1] == pytest.approx(-1e6 + np.log(3))


def test_serialization_round_trip():
    net = Mlp.init((3, 5, 2), np.random.default_rng(3), "tanh", "tanh")
    back = Mlp.from_arrays(net.manifest(), net.arrays("p."), "p.")
    assert back == net
