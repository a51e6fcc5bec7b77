import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_route
from gsmamba.errors import DimensionError, ParameterError
from gsmamba.graphscan import (ProjectionSet, TokenGrid, bilinear_offset_scan, candidate_set,
                               compute_affinities, displacement_field, graphscan,
                               multi_head_route, route_jvp, route_tokens, route_via_matrix,
                               routing_matrix, window_offsets, window_size)
from gsmamba.tensor import make_rng


def random_case(rng, H, W, D, r, heads=1, rel_bias=True, w_o_scale=1.0):
    grid = TokenGrid(rng.normal(size=(H, W, D)))
    proj = ProjectionSet.init(rng, D, r, qk_dim=2 * heads, value_dim=2 * heads, heads=heads,
                              rel_bias=rel_bias, zero_output=False)
    proj = proj.with_output(w_o_scale * rng.uniform(-1, 1, proj.w_o.shape))
    return grid, proj


@pytest.mark.parametrize("r,S", [(0, 1), (1, 9), (2, 25), (3, 49)])
def test_window_size(r, S):
    assert window_size(r) == S
    assert len(window_offsets(r)) == S


def test_negative_radius_rejected():
    with pytest.raises(ParameterError):
        window_size(-1)


def test_candidate_set_interior():
    cand = candidate_set((3, 3), 1, 5, 5)
    assert cand == [(2, 2), (2, 3), (2, 4), (3, 2), (3, 3), (3, 4), (4, 2), (4, 3), (4, 4)]


def test_candidate_set_corner_clamped():
    cand = candidate_set((1, 1), 1, 5, 5)
    assert cand == [(1, 1), (1, 1), (1, 2), (1, 1), (1, 1), (1, 2), (2, 1), (2, 1), (2, 2)]


def test_candidate_set_single_token_grid():
    assert candidate_set((1, 1), 3, 1, 1) == [(1, 1)] * 49


def test_candidate_set_out_of_range():
    with pytest.raises(IndexError):
        candidate_set((0, 1), 1, 3, 3)


def test_radius_zero_is_self_only(rng):
    grid, proj = random_case(rng, 3, 4, 3, 0)
    field = compute_affinities(grid, proj, 0)
    assert np.all(field.alpha == 1.0)
    expected = grid.tokens + (grid.tokens @ proj.w_v) @ proj.w_o
    np.testing.assert_allclose(route_tokens(grid, field, proj).tokens, expected, rtol=0, atol=1e-12)


def test_uniform_affinities_without_bias(rng):
    grid = TokenGrid(rng.normal(size=(3, 3, 2)))
    proj = ProjectionSet(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)), None)
    field = compute_affinities(grid, proj, 1)
    np.testing.assert_allclose(field.alpha, 1 / 9, rtol=0, atol=1e-15)


def test_hand_computed_two_by_two():
    # D=1, q=k=v=x, W_o=1, r=1 on a 2x2 grid with values 0,1,2,3
    grid = TokenGrid(np.arange(4.0).reshape(2, 2, 1))
    one = np.ones((1, 1))
    proj = ProjectionSet(one, one, one, one, None)
    out = graphscan(grid, proj, 1).tokens[:, 0]
    X = np.arange(4.0)
    expected = []
    for i, (a, b) in enumerate([(1, 1), (1, 2), (2, 1), (2, 2)]):
        cand = [(r - 1) * 2 + (c - 1) for r, c in candidate_set((a, b), 1, 2, 2)]
        s = X[i] * X[cand]
        w = np.exp(s - s.max())
        w /= w.sum()
        expected.append(X[i] + w @ X[cand])
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_rows_are_distributions(rng, backend):
    grid, proj = random_case(rng, 5, 6, 4, 2)
    field = compute_affinities(grid, proj, 2, backend=backend)
    assert np.all(field.alpha >= 0)
    assert np.max(np.abs(field.alpha.sum(-1) - 1)) <= 1e-12
    P = routing_matrix(field, proj).P
    assert np.max(np.abs(np.asarray(P.sum(axis=1)).ravel() - 1)) <= 1e-12
    assert np.all(P.getnnz(axis=1) <= 25)


@pytest.mark.parametrize("H,W,r", [(2, 2, 3), (3, 5, 1), (4, 4, 2), (1, 6, 1)])
def test_route_matches_naive_loop(H, W, r, backend):
    rng = make_rng(H * 100 + W * 10 + r)
    grid, proj = random_case(rng, H, W, 3, r)
    field = compute_affinities(grid, proj, r, backend=backend)
    out = route_tokens(grid, field, proj, backend=backend).features
    assert np.max(np.abs(out - naive_route(grid, proj, r))) <= 1e-12


@pytest.mark.parametrize("heads", [2, 4])
def test_multi_head_matches_naive_loop(heads):
    rng = make_rng(heads)
    grid, proj = random_case(rng, 4, 5, 4, 1, heads=heads)
    out = multi_head_route(grid, proj, 1).features
    assert np.max(np.abs(out - naive_route(grid, proj, 1))) <= 1e-12


def test_multi_head_dual_path(rng):
    grid, proj = random_case(rng, 4, 4, 4, 1, heads=2)
    field = compute_affinities(grid, proj, 1)
    routing = routing_matrix(field, proj)
    with pytest.raises(ParameterError):
        routing.P
    a = route_tokens(grid, field, proj).tokens
    b = route_via_matrix(grid, routing).tokens
    assert np.max(np.abs(a - b)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 3), st.integers(0, 2**31))
def test_dual_path_property(H, W, r, seed):
    grid, proj = random_case(make_rng(seed), H, W, 3, r)
    field = compute_affinities(grid, proj, r)
    a = route_tokens(grid, field, proj).tokens
    b = route_via_matrix(grid, routing_matrix(field, proj)).tokens
    assert np.max(np.abs(a - b)) <= 1e-12


def test_clamped_duplicates_summed_in_matrix():
    rng = make_rng(3)
    grid, proj = random_case(rng, 2, 2, 2, 3)
    field = compute_affinities(grid, proj, 3)
    P = routing_matrix(field, proj).P.toarray()
    assert P.shape == (4, 4)
    for i in range(4):
        for j in range(4):
            assert P[i, j] == pytest.approx(field.alpha[0, i][field.slots[i] == j].sum(), abs=1e-15)


def test_zero_output_projection_is_identity(rng, backend):
    grid, proj = random_case(rng, 4, 3, 3, 2)
    proj = proj.with_output(np.zeros_like(proj.w_o))
    out = graphscan(grid, proj, 2, backend=backend)
    np.testing.assert_array_equal(out.features, grid.features)


def test_locality_of_perturbation(rng):
    grid, proj = random_case(rng, 8, 8, 3, 1)
    base = graphscan(grid, proj, 1).features
    X = grid.features.copy()
    X[4, 4] += 1.0
    diff = np.abs(graphscan(TokenGrid(X), proj, 1).features - base).max(axis=-1)
    changed = np.argwhere(diff > 0)
    # query at (4,4) changes plus keys/values within Chebyshev distance 1
    assert np.all(np.max(np.abs(changed - [4, 4]), axis=1) <= 1)
    assert diff[4, 4] > 0


def test_dimension_mismatch(rng):
    grid, proj = random_case(rng, 3, 3, 3, 1)
    with pytest.raises(DimensionError):
        graphscan(TokenGrid(np.zeros((3, 3, 4))), proj, 1)
    with pytest.raises(DimensionError):
        graphscan(grid, proj, 2)


def test_positions_normalised():
    grid = TokenGrid(np.zeros((3, 5, 1)))
    p = grid.positions()
    assert p[0].tolist() == [-1.0, -1.0]
    assert p[-1].tolist() == [1.0, 1.0]
    assert p[1 * 5 + 2].tolist() == [0.0, 0.0]
    assert TokenGrid(np.zeros((1, 1, 1))).positions().tolist() == [[0.0, 0.0]]


def test_displacement_uniform_interior_zero():
    grid = TokenGrid(make_rng(0).normal(size=(5, 5, 2)))
    proj = ProjectionSet(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)), None)
    disp = displacement_field(compute_affinities(grid, proj, 1), grid).reshape(5, 5, 2)
    assert np.max(np.abs(disp[1:-1, 1:-1])) <= 1e-15
    # a clamped corner is pulled inward
    assert disp[0, 0, 0] > 0 and disp[0, 0, 1] > 0


def test_displacement_spike_points_right():
    grid = TokenGrid(np.zeros((4, 4, 2)))
    b = np.zeros(9)
    b[5] = 50.0  # slot (0, +1)
    proj = ProjectionSet(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)), b)
    disp = displacement_field(compute_affinities(grid, proj, 1), grid).reshape(4, 4, 2)
    step = 2.0 / 3.0
    np.testing.assert_allclose(disp[1:-1, :-1, 1], step, rtol=0, atol=1e-12)
    np.testing.assert_allclose(disp[1:-1, :-1, 0], 0.0, rtol=0, atol=1e-12)


def test_bilinear_zero_offset_is_identity(rng):
    grid = TokenGrid(rng.normal(size=(4, 5, 3)))
    out = bilinear_offset_scan(grid, np.zeros((20, 2)))
    np.testing.assert_allclose(out.features, grid.features, rtol=0, atol=1e-15)


def test_bilinear_four_corner_oracle(rng):
    H, W = 4, 5
    grid = TokenGrid(rng.normal(size=(H, W, 2)))
    offsets = rng.uniform(-0.7, 0.7, size=(H * W, 2))
    out = bilinear_offset_scan(grid, offsets).tokens
    pos = grid.positions()
    for i in range(H * W):
        y = (np.clip(pos[i, 0] + offsets[i, 0], -1, 1) + 1) / 2 * (H - 1)
        x = (np.clip(pos[i, 1] + offsets[i, 1], -1, 1) + 1) / 2 * (W - 1)
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        acc = np.zeros(2)
        for yy in (y0, y0 + 1):
            for xx in (x0, x0 + 1):
                w = (1 - abs(y - yy)) * (1 - abs(x - xx))
                if w > 0:
                    acc += w * grid.features[min(yy, H - 1), min(xx, W - 1)]
        np.testing.assert_allclose(out[i], acc, rtol=0, atol=1e-12)


def test_jvp_against_central_differences(rng):
    for _ in range(5):
        grid, proj = random_case(rng, 3, 3, 3, 1)
        V = rng.normal(size=grid.features.shape)
        eps = 1e-6
        fd = (graphscan(TokenGrid(grid.features + eps * V), proj, 1).features
              - graphscan(TokenGrid(grid.features - eps * V), proj, 1).features) / (2 * eps)
        jvp = route_jvp(grid, proj, 1, V)
        assert np.linalg.norm(jvp - fd) / np.linalg.norm(fd) <= 1e-5


def test_jvp_linear_when_affinities_frozen(rng):
    grid = TokenGrid(rng.normal(size=(3, 3, 2)))
    proj = ProjectionSet(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2), np.eye(2), None)
    V = rng.normal(size=grid.features.shape)
    # with zero q/k the operator is linear, so the JVP is the operator on V
    np.testing.assert_allclose(route_jvp(grid, proj, 1, V), graphscan(TokenGrid(V), proj, 1).features,
                               rtol=0, atol=1e-12)


def test_deterministic(rng):
    grid, proj = random_case(rng, 5, 5, 3, 2)
    np.testing.assert_array_equal(graphscan(grid, proj, 2).features, graphscan(grid, proj, 2).features)


def test_projection_init_scales():
    proj = ProjectionSet.init(make_rng(1), 16, 1)
    assert not proj.w_o.any()
    assert np.all(np.abs(proj.w_q) <= 0.25)
    assert np.all(np.abs(proj.b_rel) <= 0.1)
    assert proj.parameter_count() == 4 * 256 + 9
