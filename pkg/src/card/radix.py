"""
Radix decomposition of box-bounded coordinates into digit streams plus a
bounded continuous residual, and its exact inverse.

A coordinate ``x`` in ``[-a/2, a/2)`` is written as

    x = a * (0.d1 d2 ... dL)_r - a/2 + y,    y in [0, a / r**L)

Digits are obtained from the integer ``m = floor((x/a + 1/2) * r**L)`` and then
corrected against the residual computed in coordinate space, so the digits
are always consistent with the residual even when the scaled value rounds
across a cell boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CodecError, ScaleError


@dataclass(frozen=True)
class RadixConfig:
    """Radix ``r``, depth ``L`` and box scale ``a`` (Angstrom-like units)."""

    r: int = 4
    L: int = 3
    a: float = 30.0

    def __post_init__(self):
        if int(self.r) != self.r or self.r < 2:
            raise ValueError(f"radix must be an integer >= 2, got {self.r}")
        if int(self.L) != self.L or self.L < 1:
            raise ValueError(f"depth must be an integer >= 1, got {self.L}")
        if not self.a > 0:
            raise ValueError(f"box scale must be positive, got {self.a}")

    @property
    def cell(self):
        """Width of the residual interval, a / r**L."""
        return self.a / self.r ** self.L

    @property
    def n_classes(self):
        return self.r ** 3

    @property
    def log_jacobian(self):
        """3 (L ln r - ln a): log of the residual rescaling to the unit cube."""
        return 3.0 * (self.L * math.log(self.r) - math.log(self.a))


@dataclass
class MixedSequence:
    """Digits ``(N, L, 3)`` in ``[0, r)`` and residuals ``(N, 3)`` in ``[0, a/r^L)``.

    Leading batch dimensions are allowed on both arrays.
    """

    digits: np.ndarray
    residuals: np.ndarray

    @property
    def n_atoms(self):
        return self.residuals.shape[-2]


def _check_box(x, cfg):
    x = np.asarray(x, dtype=np.float64)
    half = cfg.a / 2.0
    bad = ~((x >= -half) & (x < half))
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        atom = int(idx[-2]) if x.ndim >= 2 else int(idx[0])
        raise ScaleError(
            f"coordinate {x[tuple(idx)]!r} of atom {atom} outside [-{half}, {half})")
    return x


def truncation(m, depth, cfg):
    """Coordinate of the depth-``depth`` truncation with digit integer ``m``."""
    return cfg.a * (np.asarray(m, dtype=np.float64) / float(cfg.r ** depth)) - cfg.a / 2.0


def _encode_int(x, cfg):
    """Integer digit word m in [0, r^L) and residual y in [0, a/r^L)."""
    x = _check_box(x, cfg)
    R = cfg.r ** cfg.L
    cell = cfg.cell
    m = np.floor((x / cfg.a + 0.5) * R).astype(np.int64)
    m = np.clip(m, 0, R - 1)
    for _ in range(3):
        y = x - truncation(m, cfg.L, cfg)
        down = (y < 0) & (m > 0)
        up = (y >= cell) & (m < R - 1)
        if not (np.any(down) or np.any(up)):
            break
        m = m - down + up
    y = x - truncation(m, cfg.L, cfg)
    tol = 1e-12 * cfg.a
    if np.any(y < -tol) or np.any(y >= cell + tol):
        raise CodecError("residual fell outside its interval beyond tolerance")
    y = np.clip(y, 0.0, np.nextafter(cell, 0.0))
    return m, y


def word_to_digits(m, cfg):
    """Split integer words into L base-r digits, most significant first."""
    m = np.asarray(m, dtype=np.int64)
    out = np.empty(m.shape + (cfg.L,), dtype=np.int64)
    rest = m.copy()
    for l in range(cfg.L - 1, -1, -1):
        out[..., l] = rest % cfg.r
        rest //= cfg.r
    return out


def digits_to_word(d, cfg):
    d = np.asarray(d, dtype=np.int64)
    m = np.zeros(d.shape[:-1], dtype=np.int64)
    for l in range(d.shape[-1]):
        m = m * cfg.r + d[..., l]
    return m


def encode(x, cfg=RadixConfig()):
    """Map coordinates ``(..., N, 3)`` to a MixedSequence.

    Raises
    ------
    ScaleError
        If any coordinate lies outside the half-open box [-a/2, a/2).
    """
    m, y = _encode_int(x, cfg)
    d = word_to_digits(m, cfg)  # (..., N, 3, L)
    return MixedSequence(digits=np.swapaxes(d, -1, -2), residuals=y)


def _validate(seq, cfg):
    d = np.asarray(seq.digits)
    y = np.asarray(seq.residuals, dtype=np.float64)
    if d.shape[-2] != cfg.L or d.shape[-1] != 3:
        raise CodecError(f"digits must have trailing shape ({cfg.L}, 3), got {d.shape}")
    if np.any(d < 0) or np.any(d >= cfg.r):
        raise CodecError("digit out of range [0, r)")
    if np.any(y < 0) or np.any(y >= cfg.cell):
        raise CodecError("residual outside [0, a/r^L)")
    return d, y


def decode(seq, cfg=RadixConfig()):
    """Inverse of :func:`encode`: coordinates ``(..., N, 3)``."""
    d, y = _validate(seq, cfg)
    m = digits_to_word(np.swapaxes(d, -1, -2), cfg)
    return truncation(m, cfg.L, cfg) + y


def depth_words(digits, cfg):
    """Integer words of every truncation depth: ``(..., N, L, 3)``.

    ``out[..., l, :]`` holds the word made of the first ``l + 1`` digits.
    """
    d = np.asarray(digits, dtype=np.int64)
    out = np.empty_like(d)
    acc = np.zeros(d.shape[:-2] + (3,), dtype=np.int64)
    for l in range(d.shape[-2]):
        acc = acc * cfg.r + d[..., l, :]
        out[..., l, :] = acc
    return out


def class_index(triple, r):
    """Digit triple (kx, ky, kz) -> class k = (kx ky kz)_r."""
    t = np.asarray(triple, dtype=np.int64)
    return (t[..., 0] * r + t[..., 1]) * r + t[..., 2]


def class_triple(k, r):
    """Class k in [0, r^3) -> digit triple, most significant first."""
    k = np.asarray(k, dtype=np.int64)
    if np.any(k < 0) or np.any(k >= r ** 3):
        raise CodecError(f"class index out of range [0, {r ** 3})")
    return np.stack([k // (r * r), (k // r) % r, k % r], axis=-1)


def assemble_log_density(per_position, n_positions=None):
    """Sum of per-position conditional log-densities.

    The digit positions contribute no Jacobian and the residual rescaling is
    accounted for inside each residual term, so the total is a plain sum.
    """
    v = np.asarray(per_position, dtype=np.float64)
    if n_positions is not None and v.shape[-1] != n_positions:
        raise ValueError(f"expected {n_positions} per-position values, got {v.shape[-1]}")
    return v.sum(axis=-1)
