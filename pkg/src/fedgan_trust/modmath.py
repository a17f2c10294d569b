"""Integer arithmetic helpers, primality testing and a seedable byte stream.

Integers are plain Python ``int`` values (arbitrary precision, always
canonical); the hot modular exponentiation is delegated to GMP through
``gmpy2``.

The random source is SHA-256 in counter mode.  Block ``i`` of the stream
identified by ``(seed, label)`` is::

    SHA256( b"fedgan-prng" || seed as 8-byte big-endian || len(label) as
            4-byte big-endian || label utf-8 || i as 8-byte big-endian )

and the stream is the concatenation of blocks ``0, 1, 2, ...``.  Nothing
depends on platform word size or endianness, so a seed reproduces the same
bytes everywhere.
"""
from __future__ import annotations

import hashlib
import math
import struct

import gmpy2
import numpy as np

MILLER_RABIN_ROUNDS = 40

_SMALL_PRIMES = [p for p in range(3, 1000) if all(p % d for d in range(2, int(p ** 0.5) + 1))]


class ModMathError(ValueError):
    pass


class InvalidModulusError(ModMathError):
    pass


class NoInverseError(ModMathError):
    def __init__(self, a, modulus, gcd):
        super().__init__(f"{a} has no inverse modulo {modulus} (gcd={gcd})")
        self.gcd = gcd


class KeySizeError(ModMathError):
    pass


class Prng:
    """Deterministic counter-mode byte stream.

    Instances are single-owner.  ``substream(label)`` derives an independent
    stream without touching the parent's position.
    """

    _BLOCKS_PER_REFILL = 64

    def __init__(self, seed: int, label: str = ""):
        if not 0 <= seed < 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = seed
        self.label = label
        lab = label.encode("utf-8")
        self._prefix = b"fedgan-prng" + struct.pack(">QI", seed, len(lab)) + lab
        self._counter = 0
        self._buf = bytearray()

    def __repr__(self):
        return f"Prng(seed={self.seed}, label={self.label!r})"

    def substream(self, label: str) -> "Prng":
        return Prng(self.seed, f"{self.label}/{label}" if self.label else label)

    def _refill(self, need):
        blocks = max(self._BLOCKS_PER_REFILL, -(-need // 32))
        prefix = self._prefix
        chunks = []
        for i in range(self._counter, self._counter + blocks):
            chunks.append(hashlib.sha256(prefix + i.to_bytes(8, "big")).digest())
        self._counter += blocks
        self._buf += b"".join(chunks)

    def bytes(self, k: int) -> bytes:
        if len(self._buf) < k:
            self._refill(k - len(self._buf))
        out = bytes(self._buf[:k])
        del self._buf[:k]
        return out

    def randbits(self, k: int) -> int:
        if k <= 0:
            return 0
        nbytes = (k + 7) // 8
        value = int.from_bytes(self.bytes(nbytes), "big")
        return value >> (nbytes * 8 - k)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("upper bound must be positive")
        k = n.bit_length()
        while True:
            r = self.randbits(k)
            if r < n:
                return r

    def randrange(self, lo: int, hi: int) -> int:
        return lo + self.randbelow(hi - lo)

    def uniform(self, size) -> np.ndarray:
        """Doubles in [0, 1) built from the top 53 bits of each 8-byte word."""
        count = int(np.prod(size))
        words = np.frombuffer(self.bytes(8 * count), dtype=">u8")
        return ((words >> np.uint64(11)).astype(np.float64) * 2.0 ** -53).reshape(size)

    def normal(self, size, loc=0.0, scale=1.0) -> np.ndarray:
        """Box-Muller transform of two uniform draws per value."""
        count = int(np.prod(size))
        u = self.uniform((2, count))
        u1 = 1.0 - u[0]  # (0, 1], keeps log finite
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u[1])
        return (loc + scale * z).reshape(size)


def modpow(base: int, exp: int, modulus: int) -> int:
    if modulus < 2:
        raise InvalidModulusError(f"modulus must be >= 2, got {modulus}")
    if exp < 0:
        raise ValueError("negative exponent; use modinv")
    return int(gmpy2.powmod(base, exp, modulus))


def modinv(a: int, modulus: int) -> int:
    if modulus < 2:
        raise InvalidModulusError(f"modulus must be >= 2, got {modulus}")
    g = math.gcd(a, modulus)
    if g != 1:
        raise NoInverseError(a, modulus, g)
    return int(gmpy2.invert(a, modulus))


def lcm(a: int, b: int) -> int:
    return a // math.gcd(a, b) * b


def is_probable_prime(n: int, rng: Prng, rounds: int = MILLER_RABIN_ROUNDS) -> bool:
    """Trial division by primes below 1000, then Miller-Rabin with witnesses from ``rng``."""
    if n < 2:
        return False
    if n == 2:
        return True
    if n % 2 == 0:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    if n < 1000 * 1000:
        return True  # no factor below sqrt(n)
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    nm = gmpy2.mpz(n)
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = gmpy2.powmod(a, d, nm)
        if x == 1 or x == nm - 1:
            continue
        for _ in range(s - 1):
            x = gmpy2.powmod(x, 2, nm)
            if x == nm - 1:
                break
        else:
            return False
    return True


def gen_prime(bits: int, rng: Prng) -> int:
    """Probable prime with exactly ``bits`` bits."""
    if bits < 8:
        raise KeySizeError(f"prime size must be at least 8 bits, got {bits}")
    witness_rng = rng.substream("miller-rabin")
    while True:
        cand = rng.randbits(bits) | (1 << (bits - 1)) | 1
        if is_probable_prime(cand, witness_rng):
            return cand


def next_prime(n: int, rng: Prng | None = None) -> int:
    """Smallest probable prime strictly greater than ``n``."""
    rng = rng or Prng(0, "next-prime")
    cand = n + 1
    if cand <= 2:
        return 2
    if cand % 2 == 0:
        cand += 1
    while not is_probable_prime(cand, rng):
        cand += 2
    return cand
