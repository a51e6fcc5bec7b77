import numpy as np
import pytest

from gsmamba.errors import DimensionError, ParameterError
from gsmamba.selective_scan import (SelectiveParams, SsmCore, compose, discretize, generate_params,
                                    prefix_scan, recurrent_scan, selective_scan_fused,
                                    survival_factor, unrolled_state)
from gsmamba.tensor import make_rng


def small_core(D, N, rng):
    return SsmCore.init(rng, D, N, dt_min=0.05, dt_max=1.0)


def test_generate_params_zero_token():
    core = SsmCore(-np.ones((3, 2)), np.zeros((3, 3)), np.zeros(3), np.ones((3, 2)), np.ones((3, 2)))
    p = generate_params(core, np.zeros(3))
    np.testing.assert_allclose(p.delta, np.log(2.0), rtol=0, atol=1e-15)
    assert not p.b.any() and not p.c.any()


def test_generate_params_hand_arithmetic():
    # D=2, N=1
    w_delta = np.array([[0.5, -1.0], [2.0, 0.25]])
    bias = np.array([0.1, -0.2])
    w_b = np.array([[3.0], [-1.0]])
    w_c = np.array([[0.5], [4.0]])
    core = SsmCore(np.array([[-1.0], [-2.0]]), w_delta, bias, w_b, w_c)
    u = np.array([0.3, -0.7])
    z0 = 0.3 * 0.5 + -0.7 * 2.0 + 0.1
    z1 = 0.3 * -1.0 + -0.7 * 0.25 - 0.2
    p = generate_params(core, u)
    assert abs(p.delta[0] - np.log1p(np.exp(z0))) <= 1e-12
    assert abs(p.delta[1] - np.log1p(np.exp(z1))) <= 1e-12
    assert abs(p.b[0] - (0.3 * 3.0 + 0.7)) <= 1e-12
    assert abs(p.c[0] - (0.15 - 2.8)) <= 1e-12


def test_step_size_positive_for_extreme_tokens(rng):
    core = small_core(4, 2, rng)
    p = generate_params(core, np.array([-1e3, 1e3, -50.0, 0.0]))
    assert np.all(p.delta > 0)


def test_generate_params_length_mismatch(rng):
    with pytest.raises(DimensionError):
        generate_params(small_core(3, 2, rng), np.zeros(4))


def test_core_rejects_nonnegative_A():
    with pytest.raises(ParameterError):
        SsmCore(np.array([[-1.0, 0.0]]), np.zeros((1, 1)), np.zeros(1), np.zeros((1, 2)), np.zeros((1, 2)))


def test_default_A_is_s4d_real(rng):
    core = SsmCore.init(rng, 3, 4)
    np.testing.assert_array_equal(core.A, -np.tile([1.0, 2.0, 3.0, 4.0], (3, 1)))


@pytest.mark.parametrize("A,delta,b,abar,bbar", [
    (-1.0, 1.0, 0.0, np.exp(-1.0), 0.0),
    (-0.5, 2.0, 3.0, np.exp(-1.0), 6.0),
])
def test_discretize_closed_form(A, delta, b, abar, bbar):
    core = SsmCore(np.array([[A]]), np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)))
    a, bb = discretize(core, SelectiveParams(np.array([delta]), np.array([b]), np.array([0.0])))
    assert a[0, 0] == pytest.approx(abar, abs=1e-15)
    assert bb[0, 0] == bbar


def frozen_half_core():
    # abar = exp(ln2 * -1) = 0.5, bbar = ln2 * (1/ln2) = 1, c = 1
    ln2 = np.log(2.0)
    return SsmCore.frozen(np.array([[-1.0]]), [ln2], [1.0 / ln2], [1.0])


def test_two_step_hand_unroll():
    seq = recurrent_scan(frozen_half_core(), np.array([[1.0], [1.0]]))
    np.testing.assert_allclose(seq.states[:, 0, 0], [1.0, 1.5], rtol=0, atol=1e-15)
    np.testing.assert_allclose(seq.outputs[:, 0], [1.0, 1.5], rtol=0, atol=1e-15)


def test_zero_input_gives_zero_states(rng, backend):
    seq = recurrent_scan(small_core(3, 2, rng), np.zeros((9, 3)), backend=backend)
    assert not seq.states.any() and not seq.outputs.any()


def test_single_token_has_no_retention(rng):
    core = small_core(3, 2, rng)
    u = rng.normal(size=(1, 3))
    seq = recurrent_scan(core, u)
    np.testing.assert_array_equal(seq.states[0], seq.bbar[0] * u[0][:, None])


def test_compose_identity_and_associativity(rng):
    P = (rng.uniform(0, 1, (3, 2)), rng.normal(size=(3, 2)))
    ident = (np.ones((3, 2)), np.zeros((3, 2)))
    for out, ref in zip(compose(ident, P), P):
        np.testing.assert_array_equal(out, ref)
    for out, ref in zip(compose(P, ident), P):
        np.testing.assert_array_equal(out, ref)
    for _ in range(20):
        P1, P2, P3 = [(rng.uniform(0, 1, (3, 2)), rng.normal(size=(3, 2))) for _ in range(3)]
        left = compose(compose(P3, P2), P1)
        right = compose(P3, compose(P2, P1))
        for x, y in zip(left, right):
            assert np.max(np.abs(x - y)) <= 1e-12


@pytest.mark.parametrize("L", [1, 2, 3, 7, 64, 100, 256])
def test_prefix_scan_matches_recurrence(L):
    rng = make_rng(L)
    core = small_core(4, 4, rng)
    U = rng.normal(size=(L, 4))
    a, b = recurrent_scan(core, U), prefix_scan(core, U)
    assert np.max(np.abs(a.states - b.states)) <= 1e-10
    assert np.max(np.abs(a.outputs - b.outputs)) <= 1e-10
    assert b.outputs.shape == (L, 4)


def test_contraction_of_transitions(rng):
    seq = recurrent_scan(small_core(5, 3, rng), rng.normal(scale=4.0, size=(40, 5)))
    assert np.all((seq.abar > 0) & (seq.abar < 1))


def test_survival_factor_cases(rng):
    seq = recurrent_scan(small_core(3, 2, rng), rng.normal(size=(6, 3)))
    np.testing.assert_array_equal(survival_factor(seq, 4, 4), np.ones((3, 2)))
    np.testing.assert_array_equal(survival_factor(seq, 4, 3), seq.abar[3])
    with pytest.raises(IndexError):
        survival_factor(seq, 2, 3)


def test_survival_factor_constant_half():
    seq = recurrent_scan(frozen_half_core(), np.ones((5, 1)))
    assert survival_factor(seq, 5, 2)[0, 0] == pytest.approx(0.125, abs=1e-15)


def test_unrolled_state(rng):
    core = small_core(3, 2, rng)
    U = rng.normal(size=(16, 3))
    seq = recurrent_scan(core, U)
    np.testing.assert_array_equal(unrolled_state(core, U, 1), seq.bbar[0] * U[0][:, None])
    assert not unrolled_state(core, np.zeros((4, 3)), 3).any()
    for t in range(1, 17):
        assert np.max(np.abs(unrolled_state(core, U, t) - seq.states[t - 1])) <= 1e-10
    with pytest.raises(IndexError):
        unrolled_state(core, U, 17)


def test_fused_scan_matches_materialised(rng, backend):
    core = small_core(6, 4, rng)
    U = rng.normal(size=(50, 6))
    ref = recurrent_scan(core, U).outputs
    assert np.max(np.abs(selective_scan_fused(core, U, backend=backend) - ref)) <= 1e-12


def test_frozen_core_ignores_tokens(rng):
    core = SsmCore.frozen(-np.ones((2, 3)), [0.3, 0.7], [1.0, 2.0, 3.0], [0.5, 0.5, 0.5])
    p1 = generate_params(core, rng.normal(size=2))
    p2 = generate_params(core, rng.normal(size=2))
    np.testing.assert_array_equal(p1.delta, p2.delta)
    np.testing.assert_array_equal(p1.b, p2.b)
