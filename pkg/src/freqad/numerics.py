"""Dense float64 numerics: radix-2 FFT, stable reductions, activations.

Everything here is a pure function over numpy arrays. Spatial transforms act on
the trailing two axes and require power-of-two extents; all real arithmetic is
64-bit. The forward transform is unnormalized and the inverse carries the full
1/(H*W) factor, so ``ifft2(fft2(x)) == x``.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "NumericsError",
    "fft2",
    "ifft2",
    "ifft2_complex",
    "amplitude",
    "phase",
    "stable_softmax",
    "sigmoid",
    "softplus",
    "silu",
    "cosine_similarity",
]


class NumericsError(ValueError):
    """A numeric contract was violated (shape, domain, or residue)."""


# =====================================================================
# radix-2 Cooley-Tukey, iterative, vectorized over leading axes
# =====================================================================

_REV_CACHE: dict[int, np.ndarray] = {}
_TW_CACHE: dict[tuple[int, bool], np.ndarray] = {}


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reversal(n: int) -> np.ndarray:
    perm = _REV_CACHE.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        perm = np.zeros(n, dtype=np.intp)
        for i in range(1, n):
            # reversal of i follows from the reversal of i >> 1
            perm[i] = (perm[i >> 1] >> 1) | ((i & 1) << (bits - 1))
        _REV_CACHE[n] = perm
    return perm


def _twiddles(m: int, inverse: bool) -> np.ndarray:
    key = (m, inverse)
    tw = _TW_CACHE.get(key)
    if tw is None:
        sign = 1.0 if inverse else -1.0
        k = np.arange(m // 2)
        tw = np.exp(sign * 2j * np.pi * k / m)
        _TW_CACHE[key] = tw
    return tw


def _fft_last_axis(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    y = np.ascontiguousarray(x[..., _bit_reversal(n)]).astype(np.complex128)
    m = 2
    while m <= n:
        half = m // 2
        tw = _twiddles(m, inverse)
        v = y.reshape(y.shape[:-1] + (n // m, m))
        even = v[..., :half].copy()
        odd = v[..., half:] * tw
        v[..., :half] = even + odd
        v[..., half:] = even - odd
        m *= 2
    return y


def _check_spatial(x: np.ndarray) -> tuple[int, int]:
    if x.ndim < 2:
        raise NumericsError(f"need at least 2 axes for a 2-D transform, got shape {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if h == 0 or w == 0:
        raise NumericsError(f"empty spatial dimensions in shape {x.shape}")
    if not (_is_pow2(h) and _is_pow2(w)):
        raise NumericsError(f"spatial extents must be powers of two, got {h}x{w}")
    return h, w


def fft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized 2-D DFT over the trailing two axes.

    Accepts real or complex input; returns complex128. A constant map of value
    v on HxW lands v*H*W in the DC bin and zero elsewhere.
    """
    x = np.asarray(x)
    _check_spatial(x)
    y = _fft_last_axis(x, inverse=False)
    y = np.swapaxes(_fft_last_axis(np.swapaxes(y, -1, -2), inverse=False), -1, -2)
    return y


def ifft2_complex(x: np.ndarray) -> np.ndarray:
    """Inverse 2-D DFT with the 1/(H*W) factor, complex output."""
    x = np.asarray(x)
    h, w = _check_spatial(x)
    y = _fft_last_axis(x, inverse=True)
    y = np.swapaxes(_fft_last_axis(np.swapaxes(y, -1, -2), inverse=True), -1, -2)
    return y / (h * w)


def ifft2(x: np.ndarray, imag_tol: float = 1e-6) -> np.ndarray:
    """Inverse 2-D DFT of a spectrum declared real-representable.

    Returns the real part; raises NumericsError if the largest imaginary
    residue exceeds ``imag_tol``, which catches spectra that lost conjugate
    symmetry upstream.
    """
    y = ifft2_complex(x)
    residue = float(np.max(np.abs(y.imag))) if y.size else 0.0
    if residue > imag_tol:
        raise NumericsError(
            f"imaginary residue {residue:.3e} exceeds {imag_tol:.1e}; spectrum is not conjugate-symmetric"
        )
    return np.ascontiguousarray(y.real)


def amplitude(x: np.ndarray) -> np.ndarray:
    return np.abs(x)


def phase(x: np.ndarray) -> np.ndarray:
    return np.angle(x)


# =====================================================================
# reductions and activations
# =====================================================================


def stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax; rows sum to one to within 1e-12."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise NumericsError("softmax over an empty axis")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two flattened vectors, clipped to [-1, 1].

    Two zero vectors are defined as identical (returns 1.0); a single zero
    vector is orthogonal to anything (returns 0.0).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise NumericsError(f"shape mismatch {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
