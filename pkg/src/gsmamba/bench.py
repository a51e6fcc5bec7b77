"""Wall-clock timing of GraphScan (affinities + routing) and the scan kernels."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .graphscan import ProjectionSet, TokenGrid, compute_affinities, route_tokens, window_size
from .selective_scan import SsmCore, selective_scan_fused
from .tensor import make_rng

# square sides from 16 to 128 plus the 64x128 rectangle so L doubles twice
DEFAULT_GRIDS = ((16, 16), (32, 32), (64, 64), (64, 128), (128, 128))


@dataclass(frozen=True)
class BenchRow:
    op: str
    backend: str
    height: int
    width: int
    radius: int
    channels: int
    seconds: float  # median over repeats
    kernel_seconds: float  # window kernels only (scores + aggregate)

    @property
    def tokens(self) -> int:
        return self.height * self.width

    @property
    def per_token(self) -> float:
        return self.seconds / self.tokens

    def csv(self) -> str:
        return (f"{self.op},{self.backend},{self.height},{self.width},{self.tokens},{self.radius},"
                f"{self.channels},{self.seconds:.6e},{self.per_token:.6e},{self.kernel_seconds:.6e}")


CSV_HEADER = "op,backend,height,width,tokens,radius,channels,seconds,seconds_per_token,kernel_seconds"


def _median_time(fn, repeats: int) -> float:
    fn()  # warm-up
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def time_graphscan(height: int, width: int, radius: int, channels: int, backend: str | None = None,
                   repeats: int = 5, seed: int = 0) -> BenchRow:
    rng = make_rng(seed)
    grid = TokenGrid(rng.normal(size=(height, width, channels)))
    proj = ProjectionSet.init(rng, channels, radius, zero_output=False)
    kern = kernels.get(backend)

    def full():
        f = compute_affinities(grid, proj, radius, backend=backend)
        route_tokens(grid, f, proj, backend=backend)

    q = np.ascontiguousarray((grid.tokens @ proj.w_q)[:, None, :])
    k = np.ascontiguousarray((grid.tokens @ proj.w_k)[:, None, :])
    v = np.ascontiguousarray((grid.tokens @ proj.w_v)[:, None, :])
    alpha = np.full((1, grid.length, window_size(radius)), 1.0 / window_size(radius))
    scale = 1.0 / np.sqrt(channels)

    def window_only():
        kern.window_scores(q, k, proj.b_rel, height, width, radius, scale)
        kern.window_aggregate(alpha, v, height, width, radius)

    return BenchRow("graphscan", kern.NAME, height, width, radius, channels,
                    _median_time(full, repeats), _median_time(window_only, repeats))


def time_scan(length: int, channels: int, state_dim: int, backend: str | None = None,
              repeats: int = 5, seed: int = 0) -> BenchRow:
    rng = make_rng(seed)
    core = SsmCore.init(rng, channels, state_dim)
    U = rng.normal(size=(length, channels))
    t = _median_time(lambda: selective_scan_fused(core, U, backend=backend), repeats)
    return BenchRow("selective_scan", kernels.get(backend).NAME, length, 1, 0, channels, t, t)


def run_bench(radius: int = 1, channels: int = 32, grids=DEFAULT_GRIDS,
              backends: list[str] | None = None, repeats: int = 5, seed: int = 0,
              state_dim: int = 16) -> list[BenchRow]:
    rows = []
    for name in backends or [kernels.BACKEND]:
        for h, w in grids:
            rows.append(time_graphscan(h, w, radius, channels, backend=name, repeats=repeats,
                                       seed=seed))
        for h, w in grids:
            rows.append(time_scan(h * w, channels, state_dim, backend=name,
                                  repeats=max(1, repeats // 2), seed=seed))
    return rows


def scaling_series(grids, radius: int = 1, channels: int = 32, rounds: int = 15,
                   backend: str | None = None, seed: int = 0) -> np.ndarray:
    """GraphScan wall times, shape ``(rounds, len(grids))``, grids timed round-robin.

    Timing every grid once per round keeps neighbouring samples under the
    same machine load, so ratios taken within a round cancel slow drift.
    """
    rng = make_rng(seed)
    cases = []
    for h, w in grids:
        grid = TokenGrid(rng.normal(size=(h, w, channels)))
        cases.append((grid, ProjectionSet.init(rng, channels, radius, zero_output=False)))

    def run(grid, proj):
        f = compute_affinities(grid, proj, radius, backend=backend)
        route_tokens(grid, f, proj, backend=backend)

    for grid, proj in cases:
        run(grid, proj)  # warm-up
    out = np.empty((rounds, len(cases)))
    for n in range(rounds):
        for m, (grid, proj) in enumerate(cases):
            t0 = time.perf_counter()
            run(grid, proj)
            out[n, m] = time.perf_counter() - t0
    return out


def scaling_summary(grids, samples: np.ndarray) -> tuple[np.ndarray, list[float]]:
    """Per-token seconds (median over rounds) and paired doubling ratios.

    A doubling ratio is reported for each pair of grids whose token counts
    differ by exactly 2x, as the median of the within-round ratios.
    """
    tokens = np.array([h * w for h, w in grids], dtype=np.float64)
    per_token = np.median(samples / tokens, axis=0)
    ratios = []
    for a in range(len(grids)):
        for b in range(len(grids)):
            if tokens[b] == 2 * tokens[a]:
                ratios.append(float(np.median(samples[:, b] / samples[:, a])))
    return per_token, ratios
