"""Dense numeric kernels shared by every other module.

Tensors are plain ``numpy.ndarray`` objects in float32 (float64 is accepted
for gradient checking). Masked softmax and RMS normalization come from a compiled extension when
it is importable; otherwise a numpy fallback with identical semantics is
used. Set ``PLATEAU_LAB_BACKEND=python`` to force the fallback. SiLU always
runs through numpy, whose vectorized ``exp`` beats a scalar C loop.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import _fallback

logger = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

DTYPE = np.float32
DEFAULT_EPS = 1e-6

_BACKENDS = {"python": _fallback}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def _pick_backend(name: str | None):
    name = (name or "auto").lower()
    if name == "auto":
        name = "compiled" if _compiled is not None else "python"
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(_BACKENDS)}")
    return name, _BACKENDS[name]


BACKEND, _impl = _pick_backend(os.environ.get("PLATEAU_LAB_BACKEND"))


def active_backend() -> str:
    return BACKEND


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def use_backend(name: str) -> str:
    """Switch the active kernel backend; returns the previous backend name."""
    global BACKEND, _impl
    previous = BACKEND
    BACKEND, _impl = _pick_backend(name)
    return previous


@dataclass(frozen=True)
class AttnMask:
    """Banned (query, key) grid. ``banned[i, j]`` True means key j is hidden from query i."""

    banned: np.ndarray
    causal: bool = True

    def __post_init__(self):
        if self.banned.ndim != 2:
            raise ValueError("banned grid must be 2-D")
        if self.causal:
            q, k = self.banned.shape
            upper = np.triu(np.ones((q, k), dtype=bool), k=1 + (k - q))
            if np.any(upper & ~self.banned):
                raise ValueError("causal mask must ban every future key")

    @classmethod
    def causal_mask(cls, n: int) -> "AttnMask":
        return cls(np.triu(np.ones((n, n), dtype=bool), k=1), causal=True)

    @classmethod
    def unmasked(cls, q: int, k: int) -> "AttnMask":
        return cls(np.zeros((q, k), dtype=bool), causal=False)


def _check_finite(out: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{name} produced non-finite values")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return _check_finite(np.matmul(a, b), "matmul")


def masked_softmax(scores: np.ndarray, mask: AttnMask | np.ndarray | None) -> np.ndarray:
    """Softmax over the last axis with banned entries forced to exactly zero.

    ``scores`` has shape ``(..., queries, keys)``; the mask grid is shared by
    all leading axes. The row maximum is taken over permitted keys only.
    """
    scores = np.asarray(scores)
    if scores.dtype not in (np.float32, np.float64):
        scores = scores.astype(DTYPE)
    banned = mask.banned if isinstance(mask, AttnMask) else mask
    q, k = scores.shape[-2:]
    if banned is None:
        banned = np.zeros((q, k), dtype=bool)
    if banned.shape != (q, k):
        raise ValueError(f"mask shape {banned.shape} does not match scores {(q, k)}")
    flat = np.ascontiguousarray(scores.reshape(-1, q, k))
    out = np.empty_like(flat)
    _impl.masked_softmax_rows(flat, np.ascontiguousarray(banned, dtype=np.uint8), out)
    return _check_finite(out.reshape(scores.shape), "masked_softmax")


def rms_norm_with_inv(x: np.ndarray, gain: np.ndarray, eps: float = DEFAULT_EPS):
    """RMS-normalize rows of ``x``; also returns the per-row inverse RMS."""
    x = np.asarray(x)
    d = x.shape[-1]
    if d == 0:
        raise ValueError("rms_norm on zero-length rows")
    if gain.shape != (d,):
        raise ValueError(f"gain shape {gain.shape} does not match row length {d}")
    flat = np.ascontiguousarray(x.reshape(-1, d))
    out = np.empty_like(flat)
    inv = np.empty(flat.shape[0], dtype=flat.dtype)
    _impl.rms_norm_rows(flat, np.ascontiguousarray(gain, dtype=flat.dtype), float(eps), out, inv)
    _check_finite(out, "rms_norm")
    return out.reshape(x.shape), inv.reshape(x.shape[:-1])


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    return rms_norm_with_inv(x, gain, eps)[0]


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    _fallback.silu_flat(flat, out)
    return out.reshape(x.shape)


def silu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """``grad * d silu(x) / dx``, fused."""
    x = np.ascontiguousarray(x)
    grad = np.ascontiguousarray(grad, dtype=x.dtype)
    out = np.empty_like(x)
    _fallback.silu_backward_flat(x.reshape(-1), grad.reshape(-1), out.reshape(-1))
    return out


def linear(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """``x @ weight.T`` over the last axis, computed as one 2-D product."""
    out = np.reshape(x, (-1, x.shape[-1])) @ weight.T
    return out.reshape(x.shape[:-1] + (weight.shape[0],))


def init_normal(rng: np.random.Generator, shape, std: float, dtype=DTYPE) -> np.ndarray:
    """Seeded Gaussian initialization."""
    return (rng.standard_normal(shape) * std).astype(dtype)


__all__ = [
    "AttnMask",
    "BACKEND",
    "DEFAULT_EPS",
    "DTYPE",
    "active_backend",
    "available_backends",
    "init_normal",
    "masked_softmax",
    "matmul",
    "rms_norm",
    "rms_norm_with_inv",
    "silu",
    "silu_backward",
    "linear",
    "use_backend",
]
