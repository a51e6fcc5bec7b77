import numpy as np
import pytest

from gsmamba import kernels
from gsmamba.tensor import make_rng

# filled by test_acceptance; echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return make_rng(20261018)


@pytest.fixture(params=kernels.available())
def backend(request):
    return request.param


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def naive_route(grid, proj, radius):
    """Per-token loop over clamped windows; independent of the kernels."""
    from gsmamba.graphscan import candidate_set

    X = grid.features
    H, W, D = X.shape
    heads = proj.heads
    d, dv = proj.qk_dim // heads, proj.value_dim // heads
    out = np.empty_like(X)
    for i in range(H):
        for j in range(W):
            cand = candidate_set((i + 1, j + 1), radius, H, W)
            msg_heads = []
            for h in range(heads):
                q = X[i, j] @ proj.w_q[:, h * d:(h + 1) * d]
                scores = []
                for s, (a, b) in enumerate(cand):
                    k = X[a - 1, b - 1] @ proj.w_k[:, h * d:(h + 1) * d]
                    bias = 0.0 if proj.b_rel is None else proj.b_rel[s]
                    scores.append(float(q @ k) / np.sqrt(d) + bias)
                scores = np.array(scores)
                w = np.exp(scores - scores.max())
                w /= w.sum()
                agg = np.zeros(dv)
                for s, (a, b) in enumerate(cand):
                    agg += w[s] * (X[a - 1, b - 1] @ proj.w_v[:, h * dv:(h + 1) * dv])
                msg_heads.append(agg)
            out[i, j] = X[i, j] + np.concatenate(msg_heads) @ proj.w_o
    return out


def random_routed_case(rng, H=None, W=None, D=None, N=None, r=None, w_o_scale=1.0):
    """Random core/grid/projections with non-small messages (W_o up to ``w_o_scale``)."""
    from gsmamba.graphscan import ProjectionSet, TokenGrid
    from gsmamba.selective_scan import SsmCore

    H = H or int(rng.integers(1, 5))
    W = W or int(rng.integers(1, 5))
    D = D or int(rng.integers(1, 5))
    N = N or int(rng.integers(1, 4))
    r = int(rng.integers(0, 3)) if r is None else r
    core = SsmCore.init(rng, D, N, dt_min=0.05, dt_max=1.0)
    grid = TokenGrid(rng.normal(size=(H, W, D)))
    proj = ProjectionSet.init(rng, D, r, qk_dim=2, value_dim=2, zero_output=False)
    proj = proj.with_output(rng.uniform(-w_o_scale, w_o_scale, proj.w_o.shape))
    return core, grid, proj, r
