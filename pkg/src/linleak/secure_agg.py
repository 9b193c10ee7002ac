"""Pairwise-mask secure aggregation over a prime field.

Client ``m`` sends ``q_m + sum_{j>m} PRG(s_mj) - sum_{j<m} PRG(s_jm)`` (mod p);
the masks cancel in the sum so the server learns only the aggregate.

PRG: counter-mode SplitMix64.  Element ``i`` of the stream for seed ``s`` is
``mix64(s + (i + 1) * 0x9E3779B97F4A7C15) >> (64 - bitlen(p))``, reduced once
mod ``p``.  It is deterministic and seekable, not cryptographically strong;
pair seeds come from configuration (trusted setup), not key agreement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, CountMismatch, MissingSeed

log = logging.getLogger(__name__)

MERSENNE_61 = (1 << 61) - 1


@dataclass(frozen=True)
class FieldParams:
    modulus: int = MERSENNE_61
    frac_bits: int = 24
    clip_bound: float = 1.0e3

    @property
    def scale(self) -> float:
        return float(2**self.frac_bits)

    def check(self, num_clients: int):
        if not 2 < self.modulus < 2**62:
            raise ConfigError("modulus must be a prime below 2^62", {"modulus": self.modulus})
        if num_clients * self.scale * self.clip_bound >= self.modulus / 2:
            raise ConfigError("aggregate may wrap around the field",
                              {"clip_bound": self.clip_bound, "frac_bits": self.frac_bits})


@dataclass
class MaskedUpdate:
    field_values: np.ndarray     # uint64 residues in [0, modulus)
    client_index: int

    def density(self) -> float:
        return float(np.count_nonzero(self.field_values)) / max(1, self.field_values.size)

    def nbytes(self, datasize: int = 4) -> int:
        return self.field_values.size * datasize


@dataclass
class AggregateUpdate:
    values: np.ndarray           # dequantized float64 sum
    num_clients: int


@dataclass
class QuantizeResult:
    residues: np.ndarray
    clipped: int


def quantize(v, fp: FieldParams) -> QuantizeResult:
    """``round(v * scale) mod p``; entries beyond ``clip_bound`` are clipped and counted."""
    v = np.asarray(v, dtype=np.float64)
    over = np.abs(v) > fp.clip_bound
    clipped = int(np.count_nonzero(over))
    if clipped:
        log.warning("quantize: %d entries clipped to +/-%g", clipped, fp.clip_bound)
        v = np.clip(v, -fp.clip_bound, fp.clip_bound)
    q = np.rint(v * fp.scale).astype(np.int64)
    neg = q < 0
    u = q.view(np.uint64)
    np.add(u, np.uint64(fp.modulus), out=u, where=neg)
    return QuantizeResult(u, clipped)


def dequantize(q, fp: FieldParams) -> np.ndarray:
    """Centered lift of residues back to reals."""
    q = np.asarray(q, dtype=np.uint64)
    half = np.uint64(fp.modulus // 2)
    signed = q.astype(np.int64)
    signed = np.where(q > half, signed - np.int64(fp.modulus), signed)
    return signed.astype(np.float64) / fp.scale


def pair_seeds(num_clients: int, master_seed: int) -> dict:
    """Deterministic 64-bit seed per unordered pair ``(i, j)``, ``i < j``."""
    ss = np.random.SeedSequence(master_seed)
    out = {}
    for i in range(num_clients):
        for j in range(i + 1, num_clients):
            child = np.random.SeedSequence(ss.entropy, spawn_key=(i, j))
            out[(i, j)] = int(child.generate_state(1, np.uint64)[0])
    return out


def _mask_terms(m: int, num_clients: int, seeds: dict):
    s, sign = [], []
    for j in range(num_clients):
        if j == m:
            continue
        key = (min(m, j), max(m, j))
        if key not in seeds:
            raise MissingSeed(f"no seed for client pair {key}")
        s.append(seeds[key])
        sign.append(1 if j > m else -1)
    return np.array(s, dtype=np.uint64), np.array(sign, dtype=np.int8)


def mask(q, m: int, seeds: dict, fp: FieldParams, num_clients: int | None = None) -> MaskedUpdate:
    """Add client ``m``'s pairwise masks to its quantized update."""
    if num_clients is None:
        num_clients = 1 + max([m] + [j for _, j in seeds])
    out = np.array(q.residues if isinstance(q, QuantizeResult) else q, dtype=np.uint64, copy=True)
    s, sign = _mask_terms(m, num_clients, seeds)
    if s.size:
        kernels.prg_mask(out, s, sign, fp.modulus)
    return MaskedUpdate(out, m)


def accumulate(total: np.ndarray, v: np.ndarray, fp: FieldParams) -> np.ndarray:
    """In-place ``total = (total + v) mod p`` for residues already in ``[0, p)``."""
    total += v
    # wrap-around makes total - p huge whenever total < p
    np.minimum(total, total - np.uint64(fp.modulus), out=total)
    return total


def field_sum(masked, fp: FieldParams, expected: int | None = None):
    """Sum residues mod p; returns (sum, count).  Accepts any iterable."""
    total = None
    count = 0
    for mu in masked:
        v = mu.field_values if isinstance(mu, MaskedUpdate) else np.asarray(mu, dtype=np.uint64)
        if total is None:
            total = v.copy()
        else:
            if v.shape != total.shape:
                raise CountMismatch("masked updates differ in length")
            accumulate(total, v, fp)
        count += 1
    if expected is not None and count != expected:
        raise CountMismatch(f"expected {expected} masked updates, got {count}")
    if total is None:
        raise CountMismatch("no masked updates to aggregate")
    return total, count


def aggregate(masked, fp: FieldParams, expected: int | None = None) -> AggregateUpdate:
    total, count = field_sum(masked, fp, expected)
    return AggregateUpdate(dequantize(total, fp), count)
