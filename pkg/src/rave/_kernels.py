"""Causal softmax kernels: numba-compiled loops with a vectorized numpy fallback.

Both paths take a stack of square logit blocks ``(M, N, N)`` and treat
column ``j > i`` of row ``i`` as excluded from the reduction (never as an
infinite float). Set ``RAVE_DISABLE_NUMBA=1`` before import to force the
numpy path; ``use_backend`` switches at runtime (tests and the benchmark use
it to compare the two).
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("RAVE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


_BACKEND = "numba" if HAVE_NUMBA and not _env_disabled() else "numpy"


def backend() -> str:
    return _BACKEND


def use_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable in this environment")
    prev, _BACKEND = _BACKEND, name
    return prev


# ---------------------------------------------------------------------------
# numpy path


def _causal_softmax_np(logits: np.ndarray) -> np.ndarray:
    n = logits.shape[-1]
    allowed = np.tri(n, dtype=bool)
    # masked entries are replaced by 0 before exp so huge logits above the
    # diagonal can never overflow into inf * 0
    masked = np.where(allowed, logits, -np.inf)
    row_max = masked.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(np.where(allowed, logits - row_max, 0.0)), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _causal_softmax_grad_np(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    # probs are exactly 0 above the diagonal, so the masked columns drop out
    inner = (probs * grad_probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _causal_softmax_nb(logits):
        m_blocks, n, _ = logits.shape
        out = np.zeros_like(logits)
        for m in range(m_blocks):
            for i in range(n):
                row_max = logits[m, i, 0]
                for j in range(1, i + 1):
                    if logits[m, i, j] > row_max:
                        row_max = logits[m, i, j]
                total = 0.0
                for j in range(i + 1):
                    e = np.exp(logits[m, i, j] - row_max)
                    out[m, i, j] = e
                    total += e
                for j in range(i + 1):
                    out[m, i, j] = out[m, i, j] / total
        return out

    @numba.njit(cache=True)
    def _causal_softmax_grad_nb(probs, grad_probs):
        m_blocks, n, _ = probs.shape
        out = np.zeros_like(probs)
        for m in range(m_blocks):
            for i in range(n):
                inner = 0.0
                for j in range(i + 1):
                    inner += probs[m, i, j] * grad_probs[m, i, j]
                for j in range(i + 1):
                    out[m, i, j] = probs[m, i, j] * (grad_probs[m, i, j] - inner)
        return out


def _as_blocks(x: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ValueError(f"expected (..., N, N) logits, got shape {x.shape}")
    shape = x.shape
    return np.ascontiguousarray(x.reshape((-1,) + shape[-2:])), shape


def causal_softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax of ``(..., N, N)`` logits restricted to ``j <= i``."""
    if _BACKEND == "numpy":
        return _causal_softmax_np(logits)
    blocks, shape = _as_blocks(logits)
    return _causal_softmax_nb(blocks).reshape(shape)


def causal_softmax_grad(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`causal_softmax` given its output."""
    if _BACKEND == "numpy":
        return _causal_softmax_grad_np(probs, grad_probs)
    p_blocks, shape = _as_blocks(probs)
    g_blocks, _ = _as_blocks(np.asarray(grad_probs, dtype=probs.dtype))
    return _causal_softmax_grad_nb(p_blocks, g_blocks).reshape(shape)
