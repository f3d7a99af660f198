"""Uniform quantization of latents and a static-model range coder.

Quantization clips each latent dimension to ``mean +- k*std`` (k = 3) and
cuts that interval into ``2**bits`` equal bins. Reconstruction uses bin
centers. Dimensions with zero spread are degenerate: they always emit
symbol 0 and reconstruct to their mean.

Entropy coding uses one frequency table for all dimensions, counted over a
training corpus with add-one smoothing, and a 32-bit integer range coder
with carry propagation. Bitstream: bytes are emitted most significant
first; the coder keeps 32-bit ``low`` and ``range``; it renormalizes
whenever ``range < 2**24``; ``range`` starts at ``2**32 - 1``; the stream
ends by flushing the 4 bytes of ``low``.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .inr import BaseParams, Modulations

MASK32 = 0xFFFFFFFF
RENORM = 1 << 24
# Largest total the coder accepts; bigger tables are rescaled for coding.
MAX_TOTAL = 1 << 16


class CoderError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerParams:
    bits: int
    mean: np.ndarray
    std: np.ndarray
    k: float = 3.0

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ValueError(f"bits must be in [1, 16], got {self.bits}")
        if np.any(np.asarray(self.std) < 0):
            raise ValueError("std entries must be non-negative")
        if np.shape(self.mean) != np.shape(self.std):
            raise ValueError("mean and std must have the same shape")

    @property
    def bins(self) -> int:
        return 1 << self.bits

    @property
    def degenerate(self) -> np.ndarray:
        return np.asarray(self.std) == 0

    @property
    def lower(self) -> np.ndarray:
        return self.mean - self.k * self.std

    @property
    def upper(self) -> np.ndarray:
        return self.mean + self.k * self.std

    @property
    def width(self) -> np.ndarray:
        return 2 * self.k * self.std / self.bins

    def with_bits(self, bits: int) -> "QuantizerParams":
        return QuantizerParams(bits, self.mean, self.std, self.k)


def _latents(corpus) -> np.ndarray:
    if isinstance(corpus, np.ndarray):
        return np.atleast_2d(corpus).astype(np.float64)
    rows = [m.latent if isinstance(m, Modulations) else np.asarray(m) for m in corpus]
    if not rows:
        raise ValueError("empty calibration corpus")
    return np.stack(rows).astype(np.float64)


def calibrate(modulation_corpus, bits: int, k: float = 3.0) -> QuantizerParams:
    """Per-dimension mean and population std over a corpus of latents."""
    x = _latents(modulation_corpus)
    if x.shape[0] == 0:
        raise ValueError("empty calibration corpus")
    return QuantizerParams(bits, x.mean(axis=0), x.std(axis=0), k)


def quantize(phi, qp: QuantizerParams) -> np.ndarray:
    """Bin indices in [0, 2**bits); works on a vector or rows of latents."""
    v = np.asarray(phi.latent if isinstance(phi, Modulations) else phi, dtype=np.float64)
    if v.shape[-1:] != np.shape(qp.mean):
        raise ValueError(f"latent length {v.shape[-1:]} does not match quantizer {np.shape(qp.mean)}")
    lo, hi, w = qp.lower, qp.upper, qp.width
    degenerate = qp.degenerate
    safe_w = np.where(degenerate, 1.0, w)
    s = np.floor((np.clip(v, lo, hi) - lo) / safe_w)
    s = np.clip(s, 0, qp.bins - 1)
    return np.where(degenerate, 0, s).astype(np.int64)


def dequantize(symbols, qp: QuantizerParams) -> np.ndarray:
    s = np.asarray(symbols)
    if s.size and (s.min() < 0 or s.max() >= qp.bins):
        raise ValueError(f"symbols must lie in [0, {qp.bins})")
    if s.shape[-1:] != np.shape(qp.mean):
        raise ValueError(f"symbol length {s.shape[-1:]} does not match quantizer {np.shape(qp.mean)}")
    value = qp.lower + (s + 0.5) * qp.width
    return np.where(qp.degenerate, qp.mean, value)


def coin_k(bits: int) -> float:
    """Clip multiplier for quantizing whole-network weights at ``bits``."""
    return 3.0 + 3.0 * (bits - 1) / 15.0


def coin_weight_quantize(theta: BaseParams, bits: int) -> BaseParams:
    """Quantize all weights and all biases of a network, each group with its own range."""
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must be in [1, 16], got {bits}")
    k = coin_k(bits)
    groups = {
        "weights": [n for n, _ in theta.items() if not n.startswith("b")],
        "biases": [n for n, _ in theta.items() if n.startswith("b")],
    }
    out = dict(theta.params)
    for names in groups.values():
        flat = np.concatenate([theta.params[n].ravel() for n in names])
        qp = QuantizerParams(bits, np.array([flat.mean()]), np.array([flat.std()]), k)
        for n in names:
            v = theta.params[n].reshape(-1, 1)
            out[n] = dequantize(quantize(v, qp), qp).reshape(theta.params[n].shape)
    return theta.replace(out)


# ---------------------------------------------------------------- frequency model

@dataclass(frozen=True)
class FrequencyModel:
    """Smoothed symbol counts; every symbol has a count of at least one."""

    counts: tuple[int, ...]

    def __post_init__(self):
        if not self.counts or min(self.counts) < 1:
            raise ValueError("every count must be >= 1")

    @property
    def bits(self) -> int:
        return int(math.log2(len(self.counts)))

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def cumulative(self) -> list[int]:
        """Running totals, starting after the first symbol and ending at ``total``."""
        out, acc = [], 0
        for c in self.counts:
            acc += c
            out.append(acc)
        return out

    def probabilities(self) -> np.ndarray:
        c = np.asarray(self.counts, dtype=np.float64)
        return c / c.sum()

    def coding_table(self) -> tuple[list[int], list[int], int]:
        """(freqs, starts, total) used by the coder, rescaled to at most MAX_TOTAL."""
        freqs = list(self.counts)
        total = sum(freqs)
        while total > MAX_TOTAL and total > len(freqs):
            freqs = [max(1, (c + 1) // 2) for c in freqs]
            total = sum(freqs)
        if total > MAX_TOTAL:
            raise ValueError(f"alphabet of {len(freqs)} symbols exceeds coder precision")
        starts, acc = [], 0
        for c in freqs:
            starts.append(acc)
            acc += c
        return freqs, starts, total

    def cross_entropy_bits(self, symbols: Sequence[int]) -> float:
        p = self.probabilities()
        return float(-np.log2(p[np.asarray(symbols, dtype=np.int64)]).sum())


def build_freq(symbol_corpus: Iterable[int], bits: int) -> FrequencyModel:
    """Count symbols and add one to every count."""
    bins = 1 << bits
    s = np.asarray(list(symbol_corpus) if not isinstance(symbol_corpus, np.ndarray) else symbol_corpus,
                   dtype=np.int64).ravel()
    if s.size and (s.min() < 0 or s.max() >= bins):
        raise ValueError(f"corpus symbol out of range [0, {bins})")
    counts = np.bincount(s, minlength=bins) + 1
    return FrequencyModel(tuple(int(c) for c in counts))


# ---------------------------------------------------------------- range coder

def ac_encode(symbols: Iterable[int], fm: FrequencyModel) -> bytes:
    freqs, starts, total = fm.coding_table()
    n_sym = len(freqs)
    out = bytearray()
    low, rng = 0, MASK32
    for s in symbols:
        s = int(s)
        if not 0 <= s < n_sym:
            raise CoderError(f"symbol {s} outside the model alphabet")
        r = rng // total
        low += r * starts[s]
        rng = r * freqs[s]
        if low > MASK32:
            low &= MASK32
            i = len(out) - 1
            while out[i] == 0xFF:
                out[i] = 0
                i -= 1
            out[i] += 1
        while rng < RENORM:
            out.append(low >> 24)
            low = (low << 8) & MASK32
            rng <<= 8
    out += low.to_bytes(4, "big")
    return bytes(out)


def ac_decode(data: bytes, n_symbols: int, fm: FrequencyModel) -> np.ndarray:
    """Inverse of :func:`ac_encode` for the same model.

    A different model is not detected here; it just produces other symbols.
    """
    if n_symbols == 0:
        return np.zeros(0, dtype=np.int64)
    freqs, starts, total = fm.coding_table()
    if len(data) < 4:
        raise CoderError("truncated input")
    code = int.from_bytes(data[:4], "big")
    pos, end = 4, len(data)
    rng = MASK32
    out = np.empty(n_symbols, dtype=np.int64)
    for i in range(n_symbols):
        r = rng // total
        v = code // r
        if v >= total:
            raise CoderError("corrupt input")
        s = bisect.bisect_right(starts, v) - 1
        code -= r * starts[s]
        rng = r * freqs[s]
        while rng < RENORM:
            if pos >= end:
                raise CoderError("truncated input")
            code = (code << 8) | data[pos]
            pos += 1
            rng <<= 8
        out[i] = s
    return out
