"""Dense numeric kernels: radix-2 FFT and circular convolution.

Arrays are plain numpy arrays. Every transform acts on the last axis, so a
stack of vectors ``(..., n)`` is processed in one call.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidLength

_BITREV_CACHE: dict[int, np.ndarray] = {}
_KERNEL_CACHE: dict[tuple[int, bool], np.ndarray] = {}
_TWIDDLE_CACHE: dict[tuple[int, bool], np.ndarray] = {}
_BASE = 32


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reversal(n: int) -> np.ndarray:
    perm = _BITREV_CACHE.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        perm = np.zeros(n, dtype=np.int64)
        for b in range(bits):
            perm |= ((idx >> b) & 1) << (bits - 1 - b)
        _BITREV_CACHE[n] = perm
    return perm


def _base_kernel(m: int, inverse: bool) -> np.ndarray:
    key = (m, inverse)
    if key not in _KERNEL_CACHE:
        sign = 1.0 if inverse else -1.0
        k = np.arange(m)
        dft = np.exp(sign * 2j * np.pi * (np.outer(k, k) % m) / m)
        _KERNEL_CACHE[key] = dft[:, _bit_reversal(m)].T.copy()
    return _KERNEL_CACHE[key]


def _twiddle(size: int, inverse: bool) -> np.ndarray:
    key = (size, inverse)
    if key not in _TWIDDLE_CACHE:
        sign = 1.0 if inverse else -1.0
        _TWIDDLE_CACHE[key] = np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)
    return _TWIDDLE_CACHE[key]


def fft(x, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis.

    Args:
        x: real or complex array whose last dimension is a power of two.
        inverse: compute the inverse transform, including the ``1/n`` factor.

    Returns:
        complex128 array of the same shape.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1] if x.ndim else 0
    if not is_power_of_two(n):
        raise InvalidLength(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    out = x[..., _bit_reversal(n)]
    # the first log2(base) butterfly stages collapse into one dense DFT per
    # block; the block holds its inputs in bit-reversed order
    base = min(n, _BASE)
    blocks = out.reshape(lead + (n // base, base))
    out = (blocks @ _base_kernel(base, inverse)).reshape(lead + (n,))
    size = 2 * base
    while size <= n:
        half = size // 2
        blocks = out.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddle(size, inverse)
        nxt = np.empty_like(blocks)
        np.add(even, odd, out=nxt[..., :half])
        np.subtract(even, odd, out=nxt[..., half:])
        out = nxt.reshape(lead + (n,))
        size *= 2
    if inverse:
        out = out / n
    return out


def ifft(x) -> np.ndarray:
    return fft(x, inverse=True)


def circular_convolve(a, b) -> np.ndarray:
    """``c[j] = sum_i a[i] * b[(j - i) mod d]`` computed in the Fourier domain.

    Inputs are real with equal power-of-two length on the last axis; leading
    axes broadcast.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise InvalidLength(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    if not is_power_of_two(a.shape[-1]):
        raise InvalidLength(f"convolution length must be a power of two, got {a.shape[-1]}")
    return ifft(fft(a) * fft(b)).real


def circular_correlate(g, b) -> np.ndarray:
    """``r[i] = sum_j g[j] * b[(j - i) mod d]``, the adjoint of convolving with ``b``."""
    g = np.asarray(g, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if g.shape[-1] != b.shape[-1]:
        raise InvalidLength(f"length mismatch: {g.shape[-1]} vs {b.shape[-1]}")
    return ifft(fft(g) * np.conj(fft(b))).real
