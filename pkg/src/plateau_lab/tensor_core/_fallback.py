"""Pure numpy implementations of the row kernels."""

import numpy as np


def masked_softmax_rows(scores, banned, out):
    permitted = ~banned.astype(bool)
    empty = ~permitted.any(axis=1)
    if empty.any():
        raise ValueError(f"query row {int(np.argmax(empty))} has no permitted key")
    work = np.where(permitted, scores, -np.inf)
    work -= work.max(axis=-1, keepdims=True)
    np.exp(work, out=work)
    work /= work.sum(axis=-1, keepdims=True)
    out[...] = work


def rms_norm_rows(x, gain, eps, out, inv_rms):
    ms = np.mean(np.square(x, dtype=np.float64), axis=-1)
    inv = 1.0 / np.sqrt(ms + eps)
    inv_rms[...] = inv
    out[...] = x * inv[:, None] * gain


def silu_flat(x, out):
    out[...] = x / (1.0 + np.exp(-x))


def silu_backward_flat(x, grad, out):
    sig = 1.0 / (1.0 + np.exp(-x))
    out[...] = grad * sig * (1.0 + x * (1.0 - sig))
