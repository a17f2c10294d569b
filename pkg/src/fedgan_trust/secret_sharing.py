"""Shamir secret sharing over a prime field.

Shares of one split carry a common 32-byte digest (config plus a random
split nonce), so shares from different splits cannot be mixed silently.

Share wire format (big-endian)::

    index:u32 | len(value):u32 | value bytes | digest (32 bytes)
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from .modmath import Prng, modinv


class SharingError(ValueError):
    pass


class ShareConfigError(SharingError):
    pass


class SecretDomainError(SharingError):
    pass


class InsufficientSharesError(SharingError):
    pass


class DuplicateShareError(SharingError):
    pass


class MixedSplitError(SharingError):
    pass


@dataclass(frozen=True)
class ShareConfig:
    n_shares: int
    threshold: int
    field_prime: int

    def __post_init__(self):
        if not 2 <= self.threshold <= self.n_shares:
            raise ShareConfigError(
                f"threshold must satisfy 2 <= t <= n, got t={self.threshold}, n={self.n_shares}")
        if self.field_prime <= self.n_shares:
            raise ShareConfigError("field prime must exceed the number of shares")

    def to_bytes(self) -> bytes:
        p = self.field_prime.to_bytes((self.field_prime.bit_length() + 7) // 8, "big")
        return struct.pack(">II", self.n_shares, self.threshold) + p

    def to_dict(self):
        return {"n_shares": self.n_shares, "threshold": self.threshold, "field_prime": hex(self.field_prime)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_shares"], d["threshold"], int(d["field_prime"], 16))


@dataclass(frozen=True)
class SecretShare:
    index: int
    value: int
    digest: bytes

    def to_bytes(self) -> bytes:
        v = self.value.to_bytes(max(1, (self.value.bit_length() + 7) // 8), "big")
        return struct.pack(">II", self.index, len(v)) + v + self.digest

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SecretShare":
        if len(raw) < 8 + 32:
            raise SharingError("share encoding too short")
        index, vlen = struct.unpack_from(">II", raw)
        if len(raw) != 8 + vlen + 32:
            raise SharingError("share encoding has inconsistent length")
        value = int.from_bytes(raw[8:8 + vlen], "big")
        return cls(index, value, raw[8 + vlen:])


def _eval_poly(coeffs, x, p):
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * x + c) % p
    return acc


def split(secret: int, cfg: ShareConfig, rng: Prng) -> list:
    """Evaluate a random degree t-1 polynomial with constant term ``secret`` at x = 1..n."""
    p = cfg.field_prime
    if not 0 <= secret < p:
        raise SecretDomainError("secret must lie in [0, field_prime)")
    coeffs = [secret] + [rng.randbelow(p) for _ in range(cfg.threshold - 1)]
    digest = hashlib.sha256(b"shamir-split" + cfg.to_bytes() + rng.bytes(16)).digest()
    return [SecretShare(x, _eval_poly(coeffs, x, p), digest) for x in range(1, cfg.n_shares + 1)]


def lagrange_at_zero(indices, p: int) -> dict:
    """Coefficients l_i with f(0) = sum_i l_i f(i) over GF(p)."""
    coeffs = {}
    for i in indices:
        num, den = 1, 1
        for j in indices:
            if j != i:
                num = num * j % p
                den = den * (j - i) % p
        coeffs[i] = num * modinv(den, p) % p
    return coeffs


def check_shares(shares, cfg: ShareConfig):
    shares = list(shares)
    if len(shares) < cfg.threshold:
        raise InsufficientSharesError(f"need {cfg.threshold} shares, got {len(shares)}")
    seen = set()
    for s in shares:
        if s.index in seen:
            raise DuplicateShareError(f"duplicate share index {s.index}")
        if not 1 <= s.index <= cfg.n_shares:
            raise SharingError(f"share index {s.index} outside 1..{cfg.n_shares}")
        seen.add(s.index)
    if len({s.digest for s in shares}) != 1:
        raise MixedSplitError("shares come from different splits")
    return shares


def reconstruct(shares, cfg: ShareConfig) -> int:
    shares = check_shares(shares, cfg)
    p = cfg.field_prime
    lag = lagrange_at_zero([s.index for s in shares], p)
    return sum(lag[s.index] * s.value for s in shares) % p
