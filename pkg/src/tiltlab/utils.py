"""Small shared helpers: seed derivation and stable softmax pieces."""

from __future__ import annotations

import numpy as np

__all__ = ["splitmix64", "derive_seed", "logsumexp", "softmax_rows"]

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the splitmix64 bit mixer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return (x ^ (x >> 31)) & _MASK


def derive_seed(seed: int, stream: int) -> int:
    """Independent stream seed: seed XOR splitmix64(stream index)."""
    return (int(seed) ^ splitmix64(int(stream))) & _MASK


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)


def softmax_rows(a: np.ndarray, axis: int = -1) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    e = np.exp(a - amax)
    return e / np.sum(e, axis=axis, keepdims=True)
