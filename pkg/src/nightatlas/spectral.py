"""Radix-2 2D discrete Fourier transform and magnitude-spectrum features."""

from __future__ import annotations

import numpy as np


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    p = 1
    while p < n:
        p <<= 1
    return p


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_rows(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative Cooley-Tukey over the last axis of a 2D complex array."""
    n = a.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"length {n} is not a power of two")
    out = a[:, _bit_reverse_indices(n)].astype(np.complex128)
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(out.shape[0], n // size, size)
        even = blocks[:, :, :half].copy()
        odd = blocks[:, :, half:] * tw
        blocks[:, :, :half] = even + odd
        blocks[:, :, half:] = even - odd
        size *= 2
    return out


def fft2d(img: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2D DFT (``exp(-2 pi i ...)``), rows then columns.

    Both dimensions must be powers of two; pad with :func:`pad_to_pow2` first.
    """
    x = np.asarray(img, dtype=np.complex128)
    if x.ndim != 2:
        raise ValueError("fft2d expects a 2D grid")
    rows = _fft_rows(x)
    return _fft_rows(rows.T).T


def ifft2d(grid: np.ndarray) -> np.ndarray:
    x = np.asarray(grid, dtype=np.complex128)
    h, w = x.shape
    rows = _fft_rows(x, inverse=True)
    return _fft_rows(rows.T, inverse=True).T / (h * w)


def magnitude_spectrum(grid: np.ndarray, shift: bool = False, log: bool = False) -> np.ndarray:
    mag = np.hypot(grid.real, grid.imag)
    if shift:
        mag = np.roll(mag, (mag.shape[0] // 2, mag.shape[1] // 2), axis=(0, 1))
    if log:
        mag = np.log1p(mag)
    return mag


def pad_to_pow2(img: np.ndarray) -> np.ndarray:
    """Zero-pad at the bottom/right up to power-of-two height and width."""
    h, w = img.shape
    ph, pw = next_power_of_two(h), next_power_of_two(w)
    if (ph, pw) == (h, w):
        return np.asarray(img, dtype=np.float64)
    out = np.zeros((ph, pw), dtype=np.float64)
    out[:h, :w] = img
    return out


def spectral_features(img: np.ndarray, shift: bool = False, log: bool = False) -> np.ndarray:
    """Unrolled magnitude spectrum of the zero-padded image (224x224 -> 65536 values)."""
    return magnitude_spectrum(fft2d(pad_to_pow2(img)), shift=shift, log=log).ravel()
