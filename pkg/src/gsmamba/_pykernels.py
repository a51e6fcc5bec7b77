"""Pure-numpy versions of the hot loops. Same signatures as ``_ckernels``."""

import numpy as np
import scipy.sparse as sp

NAME = "python"


def slot_index(height, width, radius):
    """Flat clamped neighbour index for every (token, window slot) pair.

    Slots run over offsets ``(dr, dc)`` in row-major order with
    ``dr, dc in [-radius, radius]``; out-of-range coordinates are clamped.
    """
    offs = np.arange(-radius, radius + 1)
    rows = np.arange(height)[:, None] + offs[None, :]
    cols = np.arange(width)[:, None] + offs[None, :]
    rows = np.clip(rows, 0, height - 1)
    cols = np.clip(cols, 0, width - 1)
    idx = rows[:, None, :, None] * width + cols[None, :, None, :]
    return np.ascontiguousarray(idx.reshape(height * width, -1), dtype=np.int64)


def scan_states(abar, bu):
    L = abar.shape[0]
    out = np.empty_like(bu)
    h = np.zeros(bu.shape[1:], dtype=bu.dtype)
    for t in range(L):
        h = abar[t] * h + bu[t]
        out[t] = h
    return out


def scan_fused(u, delta, A, b, c):
    L, D = u.shape
    y = np.empty((L, D), dtype=u.dtype)
    h = np.zeros(A.shape, dtype=u.dtype)
    for t in range(L):
        dt = delta[t][:, None]
        h = np.exp(dt * A) * h + (dt * b[t][None, :]) * u[t][:, None]
        y[t] = h @ c[t]
    return y


def _shifted(x, height, width, radius):
    """Yield ``(slot, view)`` where ``view[i, j]`` is ``x`` at the clamped
    neighbour of ``(i, j)`` for that slot; ``x`` is ``(L, heads, dim)``.

    Working slot by slot keeps temporaries at ``L x heads x dim`` instead of
    materialising all ``S`` neighbours at once.
    """
    g = x.reshape(height, width, *x.shape[1:])
    r = radius
    pad = np.pad(g, ((r, r), (r, r), (0, 0), (0, 0)), mode="edge")
    s = 0
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            yield s, pad[r + dr:r + dr + height, r + dc:r + dc + width]
            s += 1


def window_scores(q, k, bias, height, width, radius, scale):
    L, heads, _ = q.shape
    S = (2 * radius + 1) ** 2
    out = np.empty((heads, L, S))
    qg = q.reshape(height, width, heads, -1)
    for s, ks in _shifted(k, height, width, radius):
        out[:, :, s] = np.einsum("ijhd,ijhd->hij", qg, ks).reshape(heads, L) * scale
    if bias is not None:
        out += bias[None, None, :]
    return out


def window_aggregate(alpha, v, height, width, radius):
    """Per-head sparse product ``P_h v_h`` with ``P_h`` holding ``alpha`` at the slots."""
    heads, L, S = alpha.shape
    slots = slot_index(height, width, radius)
    indptr = np.arange(0, L * S + 1, S)
    out = np.empty((L, heads, v.shape[2]))
    for h in range(heads):
        P = sp.csr_matrix((alpha[h].ravel(), slots.ravel(), indptr), shape=(L, L))
        out[:, h] = P @ v[:, h]
    return out
