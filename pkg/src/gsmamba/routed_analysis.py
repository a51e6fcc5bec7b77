"""Routed-vs-base analysis of a selective scan fed GraphScan-routed tokens.

Every identity here is exact; the functions evaluate both sides so callers
can measure the discrepancy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, PreconditionError
from .graphscan import (ProjectionSet, RoutingField, TokenGrid, compute_affinities,
                        route_tokens, routing_matrix)
from .selective_scan import DiscretizedSequence, SsmCore, recurrent_scan, scan_with_coeffs
from .tensor import as_array


@dataclass(frozen=True)
class RoutedScanResult:
    base: DiscretizedSequence
    routed: DiscretizedSequence
    field: RoutingField
    proj: ProjectionSet
    grid: TokenGrid
    routed_grid: TokenGrid

    @property
    def messages(self) -> np.ndarray:
        return self.routed.inputs - self.base.inputs

    @property
    def d_abar(self) -> np.ndarray:
        return self.routed.abar - self.base.abar

    @property
    def d_bbar(self) -> np.ndarray:
        return self.routed.bbar - self.base.bbar

    @property
    def d_c(self) -> np.ndarray:
        return self.routed.params.c - self.base.params.c

    @property
    def d_states(self) -> np.ndarray:
        return self.routed.states - self.base.states

    @property
    def d_outputs(self) -> np.ndarray:
        return self.routed.outputs - self.base.outputs


@dataclass(frozen=True)
class StateDecomposition:
    """``(L, D, N)`` pathway sums; ``total`` is their sum."""

    value_injection: np.ndarray
    write_modulation: np.ndarray
    transition_modulation: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.value_injection + self.write_modulation + self.transition_modulation


@dataclass(frozen=True)
class OutputDecomposition:
    state_term: np.ndarray  # <dH_t, c'_t>
    readout_modulation: np.ndarray  # <H_t, dc_t>

    @property
    def total(self) -> np.ndarray:
        return self.state_term + self.readout_modulation


@dataclass(frozen=True)
class BoundReport:
    rho: float
    b_max: float
    c_max: float
    lhs: np.ndarray  # (trials, L, L), entries with i > t are zero
    rhs: np.ndarray
    violations: int

    @property
    def min_margin(self) -> float:
        mask = np.tril(np.ones(self.lhs.shape[1:], dtype=bool))  # i <= t
        return float(np.min((self.rhs - self.lhs)[:, mask]))


def routed_scan(core: SsmCore, grid: TokenGrid, proj: ProjectionSet, radius: int,
                backend: str | None = None) -> RoutedScanResult:
    """Run the same core on the base tokens and on the routed tokens."""
    field = compute_affinities(grid, proj, radius, backend=backend)
    routed_grid = route_tokens(grid, field, proj, backend=backend)
    base = recurrent_scan(core, grid.tokens, backend=backend)
    routed = recurrent_scan(core, routed_grid.tokens, backend=backend)
    return RoutedScanResult(base, routed, field, proj, grid, routed_grid)


def _accumulate(abar_routed: np.ndarray, drive: np.ndarray) -> np.ndarray:
    """``sum_{i<=t} G'_{t,i} * drive_i`` for every ``t``, by explicit products."""
    L = drive.shape[0]
    out = np.zeros_like(drive)
    for t in range(L):
        G = np.ones(drive.shape[1:])
        acc = np.zeros(drive.shape[1:])
        for i in range(t, -1, -1):
            acc = acc + G * drive[i]
            G = G * abar_routed[i]
        out[t] = acc
    return out


def exact_state_decomposition(res: RoutedScanResult) -> StateDecomposition:
    base, routed = res.base, res.routed
    X = base.inputs
    H_prev = np.concatenate([np.zeros((1,) + base.states.shape[1:]), base.states[:-1]])
    inject = routed.bbar * res.messages[:, :, None]
    write = res.d_bbar * X[:, :, None]
    transition = res.d_abar * H_prev
    return StateDecomposition(_accumulate(routed.abar, inject),
                              _accumulate(routed.abar, write),
                              _accumulate(routed.abar, transition))


def exact_output_decomposition(res: RoutedScanResult, d_states) -> OutputDecomposition:
    d_states = as_array(d_states, ndim=3, name="d_states")
    if d_states.shape != res.base.states.shape:
        raise DimensionError(f"d_states {d_states.shape} != states {res.base.states.shape}")
    state_term = np.einsum("ldn,ln->ld", d_states, res.routed.params.c)
    readout = np.einsum("ldn,ln->ld", res.base.states, res.d_c)
    return OutputDecomposition(state_term, readout)


def routed_survival(res: RoutedScanResult, t: int, i: int) -> np.ndarray:
    """``G'_{t,i}`` over the routed transitions (1-based ``i <= t``)."""
    G = np.ones(res.routed.abar.shape[1:])
    for j in range(i + 1, t + 1):
        G = G * res.routed.abar[j - 1]
    return G


def kernel_from_coeffs(G, bbar_i, c_t, z) -> np.ndarray:
    return np.einsum("dn,n->d", G * bbar_i * np.asarray(z)[:, None], c_t)


def kernel_apply(res: RoutedScanResult, t: int, i: int, z) -> np.ndarray:
    """``K'_{t,i}(z)``; zero when ``i > t``. Positions are 1-based."""
    z = as_array(z, ndim=1, name="z")
    L = res.routed.length
    if not (1 <= i <= L and 1 <= t <= L):
        raise IndexError(f"positions must lie in [1, {L}], got t={t}, i={i}")
    if i > t:
        return np.zeros_like(z)
    return kernel_from_coeffs(routed_survival(res, t, i), res.routed.bbar[i - 1],
                              res.routed.params.c[t - 1], z)


def _kernel_tensor(res: RoutedScanResult) -> np.ndarray:
    """``T[t, i, d] = sum_n G'_{t,i}[d,n] bbar'_i[d,n] c'_t[n]`` for ``i <= t``.

    ``K'_{t,i}(z) = T[t, i] * z``.
    """
    abar, bbar, c = res.routed.abar, res.routed.bbar, res.routed.params.c
    L, D, _ = abar.shape
    T = np.zeros((L, L, D))
    for t in range(L):
        G = np.ones(abar.shape[1:])
        for i in range(t, -1, -1):
            T[t, i] = np.einsum("dn,n->d", G * bbar[i], c[t])
            G = G * abar[i]
    return T


@dataclass(frozen=True)
class KernelSums:
    by_slot: np.ndarray  # sum_i K'_{t,i}(m_i)
    by_source: np.ndarray  # sum_j sum_{i<=t, j in S(i)} alpha_ij K'_{t,i}(x_j M)
    pathway: np.ndarray  # <value-injection pathway, c'_t>


def local_global_kernel_sum(res: RoutedScanResult,
                            decomposition: StateDecomposition | None = None) -> KernelSums:
    """Direct routed-value contribution evaluated in three independent ways."""
    L = res.routed.length
    X = res.base.inputs
    m = res.messages
    T = _kernel_tensor(res)
    tri = np.tril(np.ones((L, L)))
    by_slot = np.einsum("ti,tid,id->td", tri, T, m)

    routing = routing_matrix(res.field, res.proj)
    by_source = np.zeros_like(by_slot)
    for P, M in zip(routing.matrices, routing.mixers):
        XM = X @ M
        Pc = P.tocsc()
        for j in range(L):
            start, stop = Pc.indptr[j], Pc.indptr[j + 1]
            rows_i, weights = Pc.indices[start:stop], Pc.data[start:stop]
            for i, w in zip(rows_i, weights):
                # K'_{t,i} vanishes for t < i
                by_source[i:] += w * T[i:, i] * XM[j]

    if decomposition is None:
        decomposition = exact_state_decomposition(res)
    pathway = np.einsum("ldn,ln->ld", decomposition.value_injection, res.routed.params.c)
    return KernelSums(by_slot, by_source, pathway)


def attenuation_bound_from_coeffs(abar, bbar, c, zs, rel_slack: float = 1e-12) -> BoundReport:
    """Check ``|K'_{t,i}(z)|_inf <= N B_max C_max rho^(t-i) |z|_inf`` for all pairs.

    ``abar``/``bbar`` are ``(L, D, N)``, ``c`` is ``(L, N)``, ``zs`` is
    ``(trials, D)``. ``rel_slack`` absorbs rounding when the bound is tight.
    """
    abar, bbar = as_array(abar, ndim=3), as_array(bbar, ndim=3)
    c = as_array(c, ndim=2)
    zs = np.atleast_2d(as_array(zs))
    L, D, N = abar.shape
    rho = float(np.max(np.abs(abar)))
    if not rho < 1.0:
        raise PreconditionError(f"routed transitions must satisfy rho < 1, got rho={rho}")
    b_max = float(np.max(np.abs(bbar)))
    c_max = float(np.max(np.abs(c)))
    lhs = np.zeros((zs.shape[0], L, L))
    rhs = np.zeros_like(lhs)
    for t in range(L):
        G = np.ones((D, N))
        for i in range(t, -1, -1):
            K = np.einsum("dn,n->d", G * bbar[i], c[t])  # per-channel gain
            lhs[:, t, i] = np.max(np.abs(K[None, :] * zs), axis=1)
            rhs[:, t, i] = N * b_max * c_max * rho ** (t - i) * np.max(np.abs(zs), axis=1)
            G = G * abar[i]
    violations = int(np.sum(lhs > rhs * (1.0 + rel_slack)))
    return BoundReport(rho, b_max, c_max, lhs, rhs, violations)


def attenuation_bound_check(res: RoutedScanResult, zs) -> BoundReport:
    r = res.routed
    return attenuation_bound_from_coeffs(r.abar, r.bbar, r.params.c, zs)


@dataclass(frozen=True)
class Reachability:
    base: np.ndarray  # (L, D, N)
    routed: np.ndarray  # (L, D, N)


def frozen_reachability(abar, bbar, grid: TokenGrid, field: RoutingField,
                        proj: ProjectionSet) -> Reachability:
    """Closed-form input-to-state maps under token-independent coefficients.

    The routed drive is assembled from the affinities directly,
    ``x_i + sum_h sum_s alpha^h_{i,s} x_{slot(i,s)} M_h``.
    """
    abar = as_array(abar, ndim=3, name="abar")
    bbar = as_array(bbar, ndim=3, name="bbar")
    X = grid.tokens
    if abar.shape != bbar.shape or abar.shape[:2] != X.shape:
        raise DimensionError(f"coefficients {abar.shape} incompatible with tokens {X.shape}")
    routed_in = X.copy()
    for h, M in enumerate(proj.head_mixers()):
        XM = X @ M
        routed_in = routed_in + np.einsum("ls,lsd->ld", field.alpha[h], XM[field.slots])
    base = _accumulate(abar, bbar * X[:, :, None])
    routed = _accumulate(abar, bbar * routed_in[:, :, None])
    return Reachability(base, routed)


def frozen_recurrence_oracle(abar, bbar, grid: TokenGrid, proj: ProjectionSet,
                             field: RoutingField) -> np.ndarray:
    """Plain recurrence on :func:`route_tokens` output with the same coefficients."""
    routed = route_tokens(grid, field, proj)
    return scan_with_coeffs(abar, bbar, routed.tokens)


@dataclass(frozen=True)
class ContainmentReport:
    routed_inputs_equal: bool
    outputs_equal: bool
    max_output_diff: float

    @property
    def holds(self) -> bool:
        return self.routed_inputs_equal and self.outputs_equal


def containment_check(core: SsmCore, grid: TokenGrid, proj: ProjectionSet,
                      radius: int) -> ContainmentReport:
    """Bitwise comparison of routed and base runs (expects ``W_o = 0``)."""
    res = routed_scan(core, grid, proj, radius)
    inputs_equal = bool(np.array_equal(res.routed.inputs, res.base.inputs))
    outputs_equal = bool(np.array_equal(res.routed.outputs, res.base.outputs))
    diff = float(np.max(np.abs(res.d_outputs)))
    return ContainmentReport(inputs_equal, outputs_equal, diff)
