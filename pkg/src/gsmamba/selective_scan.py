"""Mamba-1/S6 selective scan.

Per token ``u_t`` the core generates a positive step ``delta_t`` (length D)
and selective vectors ``b_t``, ``c_t`` (length N). Discretization is
zero-order hold for the transition and Euler for the write::

    abar_t[d, n] = exp(delta_t[d] * A[d, n])
    bbar_t[d, n] = delta_t[d] * b_t[n]
    H_t = abar_t * H_{t-1} + bbar_t * u_t[:, None],   H_0 = 0
    y_t = H_t @ c_t

The same states are produced three ways: a sequential recurrence (compiled
kernel when available), a balanced-tree prefix scan over affine pairs, and
the unrolled survival-factor sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, ParameterError
from .tensor import as_array, inverse_softplus, softplus, uniform_init


@dataclass(frozen=True)
class SsmCore:
    """Static SSM parameters plus the generators of the selective quantities.

    ``A`` is ``D x N`` with strictly negative entries. ``w_delta`` is ``D x D``
    with bias ``bias_delta``; ``w_b`` and ``w_c`` are ``D x N`` and bias-free.
    A core built with :meth:`frozen` ignores its input token and returns the
    stored constants ``frozen_params`` instead.
    """

    A: np.ndarray
    w_delta: np.ndarray
    bias_delta: np.ndarray
    w_b: np.ndarray
    w_c: np.ndarray
    frozen_params: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        D, N = self.A.shape
        if not np.all(self.A < 0):
            raise ParameterError("every entry of A must be strictly negative")
        expect = {"w_delta": (D, D), "bias_delta": (D,), "w_b": (D, N), "w_c": (D, N)}
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"{name} has shape {got}, expected {shape}")

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, state_dim: int,
             dt_min: float = 1e-3, dt_max: float = 1e-1) -> "SsmCore":
        """Random core with ``A[d, n] = -(n + 1)``.

        The step-size bias is set so that ``softplus(bias)`` is log-uniform in
        ``[dt_min, dt_max]``.
        """
        D, N = channels, state_dim
        A = -np.tile(np.arange(1, N + 1, dtype=np.float64), (D, 1))
        scale = 1.0 / np.sqrt(D)
        w_delta = uniform_init(rng, (D, D), scale)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=D))
        w_b = uniform_init(rng, (D, N), scale)
        w_c = uniform_init(rng, (D, N), scale)
        return cls(A, w_delta, inverse_softplus(dt), w_b, w_c)

    @classmethod
    def frozen(cls, A, delta, b, c) -> "SsmCore":
        """Token-independent core: every token yields ``(delta, b, c)``."""
        A = as_array(A, ndim=2, name="A")
        D, N = A.shape
        delta = as_array(delta, ndim=1, name="delta")
        if np.any(delta <= 0):
            raise ParameterError("frozen delta must be strictly positive")
        zeros_dd, zeros_dn = np.zeros((D, D)), np.zeros((D, N))
        return cls(A, zeros_dd, np.zeros(D), zeros_dn, zeros_dn.copy(),
                   frozen_params=(delta, as_array(b, ndim=1), as_array(c, ndim=1)))

    def parameter_count(self) -> int:
        return int(self.A.size + self.w_delta.size + self.bias_delta.size
                   + self.w_b.size + self.w_c.size)


@dataclass(frozen=True)
class SelectiveParams:
    delta: np.ndarray  # (D,) or (L, D)
    b: np.ndarray  # (N,) or (L, N)
    c: np.ndarray  # (N,) or (L, N)


@dataclass(frozen=True)
class DiscretizedSequence:
    abar: np.ndarray  # (L, D, N)
    bbar: np.ndarray  # (L, D, N)
    states: np.ndarray  # (L, D, N)
    outputs: np.ndarray  # (L, D)
    params: SelectiveParams  # batched, leading axis L
    inputs: np.ndarray  # (L, D)

    @property
    def length(self) -> int:
        return self.outputs.shape[0]


def generate_params(core: SsmCore, u) -> SelectiveParams:
    """Selective quantities for one token ``(D,)`` or a sequence ``(L, D)``."""
    u = as_array(u)
    if u.shape[-1] != core.channels or u.ndim not in (1, 2):
        raise DimensionError(f"token shape {u.shape} incompatible with D={core.channels}")
    if core.frozen_params is not None:
        delta, b, c = core.frozen_params
        lead = u.shape[:-1]
        return SelectiveParams(np.broadcast_to(delta, lead + delta.shape).copy(),
                               np.broadcast_to(b, lead + b.shape).copy(),
                               np.broadcast_to(c, lead + c.shape).copy())
    delta = softplus(u @ core.w_delta + core.bias_delta)
    return SelectiveParams(delta, u @ core.w_b, u @ core.w_c)


def discretize(core: SsmCore, p: SelectiveParams) -> tuple[np.ndarray, np.ndarray]:
    """``(abar, bbar)`` of shape ``(..., D, N)`` for single or batched params."""
    delta = np.asarray(p.delta)
    abar = np.exp(delta[..., :, None] * core.A)
    bbar = delta[..., :, None] * np.asarray(p.b)[..., None, :]
    return abar, bbar


def _check_sequence(core: SsmCore, U) -> np.ndarray:
    U = as_array(U, ndim=2, name="U")
    if U.shape[0] < 1:
        raise DimensionError("sequence must contain at least one token")
    if U.shape[1] != core.channels:
        raise DimensionError(f"U has {U.shape[1]} channels, core expects {core.channels}")
    return U


def readout(states: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Contract ``(L, D, N)`` states with ``(L, N)`` readout vectors."""
    return np.einsum("ldn,ln->ld", states, c)


def scan_with_coeffs(abar, bbar, U, backend: str | None = None) -> np.ndarray:
    """Recurrence with externally supplied ``abar``/``bbar`` sequences."""
    abar = as_array(abar, ndim=3, name="abar")
    bbar = as_array(bbar, ndim=3, name="bbar")
    U = as_array(U, ndim=2, name="U")
    if abar.shape != bbar.shape or abar.shape[:2] != U.shape:
        raise DimensionError(f"coefficient shapes {abar.shape}/{bbar.shape} vs inputs {U.shape}")
    bu = np.ascontiguousarray(bbar * U[:, :, None])
    return kernels.get(backend).scan_states(abar, bu)


def recurrent_scan(core: SsmCore, U, backend: str | None = None) -> DiscretizedSequence:
    U = _check_sequence(core, U)
    params = generate_params(core, U)
    abar, bbar = discretize(core, params)
    states = scan_with_coeffs(abar, bbar, U, backend=backend)
    return DiscretizedSequence(abar, bbar, states, readout(states, params.c), params, U)


def compose(later, earlier):
    """Affine-pair composition ``(a2, u2) o (a1, u1) = (a2*a1, a2*u1 + u2)``."""
    a2, u2 = later
    a1, u1 = earlier
    return a2 * a1, a2 * u1 + u2


def _blelloch_inclusive(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inclusive scan of affine pairs via an up-sweep/down-sweep tree.

    Returns the ``u`` component of ``P_t o ... o P_1`` for every ``t``.
    """
    L = a.shape[0]
    n = 1
    while n < L:
        n *= 2
    ta = np.ones((n,) + a.shape[1:])
    tu = np.zeros((n,) + u.shape[1:])
    ta[:L], tu[:L] = a, u
    # up-sweep: node (k) accumulates the segment ending at k
    step = 1
    while step < n:
        right = np.arange(2 * step - 1, n, 2 * step)
        left = right - step
        ta[right], tu[right] = compose((ta[right], tu[right]), (ta[left], tu[left]))
        step *= 2
    # down-sweep: exclusive prefixes, identity at the root
    ta[n - 1], tu[n - 1] = 1.0, 0.0
    step = n // 2
    while step >= 1:
        right = np.arange(2 * step - 1, n, 2 * step)
        left = right - step
        la, lu = ta[left].copy(), tu[left].copy()
        ta[left], tu[left] = ta[right], tu[right]
        ta[right], tu[right] = compose((la, lu), (ta[right], tu[right]))
        step //= 2
    # inclusive = own element applied after the exclusive prefix
    _, inc_u = compose((a, u), (ta[:L], tu[:L]))
    return inc_u


def prefix_scan(core: SsmCore, U) -> DiscretizedSequence:
    """Same contract as :func:`recurrent_scan`, evaluated as a tree scan."""
    U = _check_sequence(core, U)
    params = generate_params(core, U)
    abar, bbar = discretize(core, params)
    states = _blelloch_inclusive(abar, bbar * U[:, :, None])
    return DiscretizedSequence(abar, bbar, states, readout(states, params.c), params, U)


def survival_factor(seq: DiscretizedSequence, t: int, i: int) -> np.ndarray:
    """``G[t, i]``: product of ``abar_{i+1} .. abar_t`` (1-based positions).

    ``i = 0`` gives the factor multiplying a nonzero initial state.
    """
    L = seq.length
    if not 0 <= i <= t <= L:
        raise IndexError(f"need 0 <= i <= t <= {L}, got i={i}, t={t}")
    G = np.ones(seq.abar.shape[1:])
    for j in range(i + 1, t + 1):
        G = G * seq.abar[j - 1]
    return G


def unrolled_state(core: SsmCore, U, t: int) -> np.ndarray:
    U = _check_sequence(core, U)
    L = U.shape[0]
    if not 1 <= t <= L:
        raise IndexError(f"t must be in [1, {L}], got {t}")
    params = generate_params(core, U[:t])
    abar, bbar = discretize(core, params)
    H = np.zeros(abar.shape[1:])
    G = np.ones(abar.shape[1:])
    # walk i = t .. 1 so the survival factor grows by one transition per step
    for i in range(t, 0, -1):
        H = H + G * bbar[i - 1] * U[i - 1][:, None]
        G = G * abar[i - 1]
    return H


def selective_scan_fused(core: SsmCore, U, backend: str | None = None) -> np.ndarray:
    """Outputs only, without materialising ``(L, D, N)`` tensors."""
    U = _check_sequence(core, U)
    params = generate_params(core, U)
    return kernels.get(backend).scan_fused(
        U, np.ascontiguousarray(params.delta), np.ascontiguousarray(core.A),
        np.ascontiguousarray(params.b), np.ascontiguousarray(params.c))
