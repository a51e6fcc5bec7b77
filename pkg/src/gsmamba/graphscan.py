"""GraphScan: bounded local graphs, feature-conditioned affinities, one-step
message passing, and the equivalent sparse routing-matrix form.

Lattice coordinates in the public API are 1-based ``(row, col)`` pairs.
Internally tokens are addressed by their raster index ``row * W + col``
(0-based). Window slots enumerate offsets ``(dr, dc)`` in row-major order,
so slot ``s`` corresponds to ``dr = s // (2r+1) - r``, ``dc = s % (2r+1) - r``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import DimensionError, ParameterError
from .tensor import as_array, softmax_last, uniform_init


def window_size(radius: int) -> int:
    if radius < 0:
        raise ParameterError(f"radius must be >= 0, got {radius}")
    return (2 * radius + 1) ** 2


def window_offsets(radius: int) -> np.ndarray:
    """``(S, 2)`` integer offsets ``(dr, dc)`` in slot order."""
    r = np.arange(-radius, radius + 1)
    dr, dc = np.meshgrid(r, r, indexing="ij")
    return np.stack([dr.ravel(), dc.ravel()], axis=1)


def normalized_axis(n: int) -> np.ndarray:
    """Map lattice indices ``1..n`` linearly onto ``[-1, 1]``; ``n = 1`` maps to 0."""
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


@dataclass(frozen=True)
class TokenGrid:
    """An ``H x W x D`` feature map; raster flattening is the token order."""

    features: np.ndarray

    def __post_init__(self):
        f = as_array(self.features, ndim=3, name="features")
        if min(f.shape) < 1:
            raise DimensionError(f"grid extents must be positive, got {f.shape}")
        object.__setattr__(self, "features", f)

    @classmethod
    def from_tokens(cls, tokens, height: int, width: int) -> "TokenGrid":
        tokens = as_array(tokens, ndim=2, name="tokens")
        if tokens.shape[0] != height * width:
            raise DimensionError(f"{tokens.shape[0]} tokens cannot fill a {height}x{width} grid")
        return cls(tokens.reshape(height, width, -1))

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[2]

    @property
    def length(self) -> int:
        return self.height * self.width

    @property
    def tokens(self) -> np.ndarray:
        """``(L, D)`` raster-order view of the features."""
        return self.features.reshape(self.length, self.channels)

    def lattice_coords(self) -> np.ndarray:
        """``(L, 2)`` 1-based ``(row, col)`` per token."""
        rows, cols = np.divmod(np.arange(self.length), self.width)
        return np.stack([rows + 1, cols + 1], axis=1)

    def positions(self) -> np.ndarray:
        """``(L, 2)`` normalized ``(row, col)`` coordinates in ``[-1, 1]``."""
        pr = normalized_axis(self.height)
        pc = normalized_axis(self.width)
        rows, cols = np.divmod(np.arange(self.length), self.width)
        return np.stack([pr[rows], pc[cols]], axis=1)


@dataclass(frozen=True)
class ProjectionSet:
    """GraphScan weights: ``w_q, w_k: D x d``, ``w_v: D x d_v``, ``w_o: d_v x D``.

    ``b_rel`` holds one bias per window slot, ``(2r+1)**2`` entries in slot
    order, shared by all heads; ``None`` disables the relative bias.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_rel: np.ndarray | None = None
    heads: int = 1

    def __post_init__(self):
        D, d = self.w_q.shape
        dv = self.w_v.shape[1]
        if self.w_k.shape != (D, d) or self.w_v.shape[0] != D or self.w_o.shape != (dv, D):
            raise DimensionError(
                f"inconsistent projections: w_q {self.w_q.shape}, w_k {self.w_k.shape}, "
                f"w_v {self.w_v.shape}, w_o {self.w_o.shape}")
        if self.heads < 1 or d % self.heads or dv % self.heads:
            raise ParameterError(f"d={d} and d_v={dv} must be divisible by heads={self.heads}")
        if self.b_rel is not None:
            side = int(round(np.sqrt(self.b_rel.size)))
            if self.b_rel.ndim != 1 or side * side != self.b_rel.size or side % 2 == 0:
                raise DimensionError(f"b_rel must have (2r+1)^2 entries, got {self.b_rel.shape}")

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def qk_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def value_dim(self) -> int:
        return self.w_v.shape[1]

    @property
    def mixer(self) -> np.ndarray:
        """``M = W_v W_o``."""
        return self.w_v @ self.w_o

    def head_mixers(self) -> list[np.ndarray]:
        """Per-head ``W_v[:, h] W_o[h, :]``; they sum to :attr:`mixer`."""
        dvh = self.value_dim // self.heads
        return [self.w_v[:, h * dvh:(h + 1) * dvh] @ self.w_o[h * dvh:(h + 1) * dvh]
                for h in range(self.heads)]

    def with_output(self, w_o) -> "ProjectionSet":
        return replace(self, w_o=as_array(w_o, ndim=2, name="w_o"))

    def parameter_count(self) -> int:
        n = self.w_q.size + self.w_k.size + self.w_v.size + self.w_o.size
        return int(n + (0 if self.b_rel is None else self.b_rel.size))

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, radius: int, qk_dim: int | None = None,
             value_dim: int | None = None, heads: int = 1, rel_bias: bool = True,
             zero_output: bool = True) -> "ProjectionSet":
        """Uniform ``1/sqrt(D)`` init for q/k/v; ``W_o`` zero unless asked otherwise."""
        d = dim if qk_dim is None else qk_dim
        dv = dim if value_dim is None else value_dim
        scale = 1.0 / np.sqrt(dim)
        w_q = uniform_init(rng, (dim, d), scale)
        w_k = uniform_init(rng, (dim, d), scale)
        w_v = uniform_init(rng, (dim, dv), scale)
        w_o = np.zeros((dv, dim)) if zero_output else uniform_init(rng, (dv, dim), 1.0 / np.sqrt(dv))
        b_rel = uniform_init(rng, window_size(radius), 0.1) if rel_bias else None
        return cls(w_q, w_k, w_v, w_o, b_rel, heads)


@dataclass(frozen=True)
class RoutingField:
    """Per-token window slots, scores and affinities for one grid.

    ``scores`` and ``alpha`` have shape ``(heads, L, S)``.
    """

    radius: int
    height: int
    width: int
    slots: np.ndarray  # (L, S) clamped raster index per slot
    scores: np.ndarray
    alpha: np.ndarray

    @property
    def window(self) -> int:
        return self.slots.shape[1]

    @property
    def heads(self) -> int:
        return self.alpha.shape[0]

    def mean_alpha(self) -> np.ndarray:
        """``(L, S)`` affinities averaged over heads (identity for one head)."""
        return self.alpha[0] if self.heads == 1 else self.alpha.mean(axis=0)


@dataclass(frozen=True)
class SparseRouting:
    """Row-stochastic routing matrices (one per head) and matching mixers."""

    matrices: tuple[sp.csr_matrix, ...]
    mixers: tuple[np.ndarray, ...]

    @property
    def P(self) -> sp.csr_matrix:
        if len(self.matrices) != 1:
            raise ParameterError("P is defined for single-head routing; use .matrices")
        return self.matrices[0]

    @property
    def M(self) -> np.ndarray:
        if len(self.mixers) != 1:
            raise ParameterError("M is defined for single-head routing; use .mixers")
        return self.mixers[0]


def candidate_set(g, radius: int, height: int, width: int) -> list[tuple[int, int]]:
    """Clamped window around 1-based lattice coordinate ``g``, in slot order."""
    row, col = int(g[0]), int(g[1])
    if not (1 <= row <= height and 1 <= col <= width):
        raise IndexError(f"lattice coordinate {g} outside {height}x{width}")
    window_size(radius)
    out = []
    for dr, dc in window_offsets(radius):
        out.append((int(min(max(row + dr, 1), height)), int(min(max(col + dc, 1), width))))
    return out


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    L, e = x.shape
    return np.ascontiguousarray(x.reshape(L, heads, e // heads))


def _check_proj(grid: TokenGrid, proj: ProjectionSet, radius: int):
    if proj.model_dim != grid.channels:
        raise DimensionError(f"projections expect D={proj.model_dim}, grid has D={grid.channels}")
    if proj.b_rel is not None and proj.b_rel.size != window_size(radius):
        raise DimensionError(f"b_rel has {proj.b_rel.size} entries, radius {radius} needs "
                             f"{window_size(radius)}")


def compute_affinities(grid: TokenGrid, proj: ProjectionSet, radius: int,
                       backend: str | None = None) -> RoutingField:
    """Scores ``q_i k_j / sqrt(d_head) + b_rel[slot]`` and their window softmax.

    The relative bias is looked up by the nominal window slot, so a clamped
    duplicate at the border keeps the bias of the slot it fills.
    """
    _check_proj(grid, proj, radius)
    kern = kernels.get(backend)
    X = grid.tokens
    q = _split_heads(X @ proj.w_q, proj.heads)
    k = _split_heads(X @ proj.w_k, proj.heads)
    scale = 1.0 / np.sqrt(q.shape[2])
    scores = kern.window_scores(q, k, proj.b_rel, grid.height, grid.width, radius, scale)
    alpha = softmax_last(scores)
    slots = kern.slot_index(grid.height, grid.width, radius)
    return RoutingField(radius, grid.height, grid.width, slots, scores, alpha)


def aggregate_messages(grid: TokenGrid, field: RoutingField, proj: ProjectionSet,
                       backend: str | None = None) -> np.ndarray:
    """``(L, D)`` messages ``(sum_j alpha_ij v_j) W_o`` with heads concatenated."""
    v = _split_heads(grid.tokens @ proj.w_v, proj.heads)
    agg = kernels.get(backend).window_aggregate(
        np.ascontiguousarray(field.alpha), v, grid.height, grid.width, field.radius)
    return agg.reshape(grid.length, proj.value_dim) @ proj.w_o


def route_tokens(grid: TokenGrid, field: RoutingField, proj: ProjectionSet,
                 backend: str | None = None) -> TokenGrid:
    if (field.height, field.width) != (grid.height, grid.width):
        raise DimensionError("routing field was computed on a different grid")
    messages = aggregate_messages(grid, field, proj, backend=backend)
    return TokenGrid.from_tokens(grid.tokens + messages, grid.height, grid.width)


def graphscan(grid: TokenGrid, proj: ProjectionSet, radius: int,
              backend: str | None = None) -> TokenGrid:
    """Affinities followed by routing, in one call."""
    field = compute_affinities(grid, proj, radius, backend=backend)
    return route_tokens(grid, field, proj, backend=backend)


def multi_head_route(grid: TokenGrid, proj: ProjectionSet, radius: int,
                     backend: str | None = None) -> TokenGrid:
    """Per-head affinities and aggregation; ``proj.heads`` selects the split.

    ``q``/``k`` split into groups of ``d / heads`` and ``v`` into groups of
    ``d_v / heads``; the concatenated per-head aggregates go through ``W_o``.
    """
    return graphscan(grid, proj, radius, backend=backend)


def routing_matrix(field: RoutingField, proj: ProjectionSet) -> SparseRouting:
    """Sparse ``L x L`` matrices with clamped duplicate columns summed."""
    L, S = field.slots.shape
    rows = np.repeat(np.arange(L), S)
    cols = field.slots.ravel()
    mats = []
    for h in range(field.heads):
        # coo -> csr sums duplicate (row, col) entries
        m = sp.coo_matrix((field.alpha[h].ravel(), (rows, cols)), shape=(L, L)).tocsr()
        m.sum_duplicates()
        mats.append(m)
    return SparseRouting(tuple(mats), tuple(proj.head_mixers()))


def route_via_matrix(grid: TokenGrid, routing: SparseRouting) -> TokenGrid:
    """``X' = X + sum_h P_h X M_h``."""
    X = grid.tokens
    L = grid.length
    for m, M in zip(routing.matrices, routing.mixers):
        if m.shape != (L, L) or M.shape != (grid.channels, grid.channels):
            raise DimensionError(f"routing {m.shape} / mixer {M.shape} incompatible with "
                                 f"grid L={L}, D={grid.channels}")
    out = X.copy()
    for m, M in zip(routing.matrices, routing.mixers):
        out = out + (m @ X) @ M
    return TokenGrid.from_tokens(out, grid.height, grid.width)


def expected_positions(field: RoutingField, grid: TokenGrid) -> np.ndarray:
    """``p_hat_i = sum_j alpha_ij p_j`` over clamped neighbour positions."""
    p = grid.positions()
    alpha = field.mean_alpha()
    return np.einsum("ls,lsk->lk", alpha, p[field.slots])


def displacement_field(field: RoutingField, grid: TokenGrid) -> np.ndarray:
    """``(L, 2)`` displacement ``p_hat_i - p_i`` in ``(row, col)`` order."""
    return expected_positions(field, grid) - grid.positions()


def bilinear_offset_scan(grid: TokenGrid, offsets) -> TokenGrid:
    """Coordinate-offset baseline: bilinear sample at ``clip(p_i + offset_i)``.

    ``offsets`` is ``(L, 2)`` in normalized ``(row, col)`` units.
    """
    offsets = as_array(offsets, ndim=2, name="offsets")
    if offsets.shape != (grid.length, 2):
        raise DimensionError(f"offsets must be ({grid.length}, 2), got {offsets.shape}")
    target = np.clip(grid.positions() + offsets, -1.0, 1.0)
    X = grid.tokens
    idx = []
    for axis, n in enumerate((grid.height, grid.width)):
        f = (target[:, axis] + 1.0) * 0.5 * (n - 1)
        lo = np.clip(np.floor(f).astype(np.int64), 0, n - 1)
        hi = np.minimum(lo + 1, n - 1)
        idx.append((lo, hi, f - lo))
    (r0, r1, wr), (c0, c1, wc) = idx
    W = grid.width
    out = (((1 - wr) * (1 - wc))[:, None] * X[r0 * W + c0]
           + ((1 - wr) * wc)[:, None] * X[r0 * W + c1]
           + (wr * (1 - wc))[:, None] * X[r1 * W + c0]
           + (wr * wc)[:, None] * X[r1 * W + c1])
    return TokenGrid.from_tokens(out, grid.height, grid.width)


def route_jvp(grid: TokenGrid, proj: ProjectionSet, radius: int, direction) -> np.ndarray:
    """Directional derivative of :func:`graphscan` w.r.t. the grid features.

    Differentiates through values and through the affinities (queries and
    keys depend on the features). Returns an ``H x W x D`` array.
    """
    _check_proj(grid, proj, radius)
    dX = as_array(direction)
    if dX.shape != grid.features.shape:
        raise DimensionError(f"direction shape {dX.shape} != grid shape {grid.features.shape}")
    dX = dX.reshape(grid.length, grid.channels)
    X = grid.tokens
    H = proj.heads
    field = compute_affinities(grid, proj, radius)
    slots = field.slots
    q, dq = _split_heads(X @ proj.w_q, H), _split_heads(dX @ proj.w_q, H)
    k, dk = _split_heads(X @ proj.w_k, H), _split_heads(dX @ proj.w_k, H)
    v, dv = _split_heads(X @ proj.w_v, H), _split_heads(dX @ proj.w_v, H)
    scale = 1.0 / np.sqrt(q.shape[2])
    ds = (np.einsum("lhd,lshd->hls", dq, k[slots])
          + np.einsum("lhd,lshd->hls", q, dk[slots])) * scale
    a = field.alpha
    dalpha = a * (ds - np.sum(a * ds, axis=-1, keepdims=True))
    dagg = (np.einsum("hls,lshd->lhd", dalpha, v[slots])
            + np.einsum("hls,lshd->lhd", a, dv[slots]))
    dout = dX + dagg.reshape(grid.length, proj.value_dim) @ proj.w_o
    return dout.reshape(grid.features.shape)
