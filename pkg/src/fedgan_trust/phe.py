"""Paillier encryption with g = n + 1, a fixed-point codec and threshold decryption.

Threshold decryption
--------------------
Key generation also derives an exponent ``d`` with ``d = 0 (mod lambda)`` and
``d = 1 (mod n)``.  For any ciphertext ``c`` of ``m``,
``c^d mod n^2 = 1 + m*n``, so ``m = L(c^d mod n^2)`` needs no ``mu``.

``d`` is Shamir-shared over GF(P) with P the smallest prime above ``n^2``
(a public bound on ``d`` that says nothing about ``lambda``).  For a fixed
participant set S with Lagrange coefficients ``l_i`` over GF(P), party i
publishes ``c^(e_i) mod n^2`` where ``e_i = l_i * s_i mod P``.  Over the
integers ``sum(e_i) = d + w*P`` for a wrap count ``0 <= w < |S|``, so the
combiner multiplies the components and removes ``c^(w*P)``; the correct
``w`` is the unique one leaving a value congruent to 1 modulo ``n``.  That
wrap correction is the only combining constant.  Nobody ever holds ``d``.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import gmpy2
import numpy as np

from .modmath import KeySizeError, Prng, gen_prime, lcm, modinv, modpow, next_prime
from .secret_sharing import SecretShare, ShareConfig, check_shares, lagrange_at_zero

TEST_PLAINTEXT = 424242


class PheError(ValueError):
    pass


class PlaintextOverflowError(PheError):
    pass


class KeyMismatchError(PheError):
    pass


class CodecRangeError(PheError):
    pass


class CodecCapacityError(PheError):
    pass


class InsufficientPartialsError(PheError):
    pass


class PartialMismatchError(PheError):
    pass


class CombineError(PheError):
    pass


def _int_bytes(x: int) -> bytes:
    return x.to_bytes(max(1, (x.bit_length() + 7) // 8), "big")


@dataclass(frozen=True)
class PublicKey:
    n: int

    @property
    def g(self) -> int:
        return self.n + 1

    @property
    def nsquare(self) -> int:
        return self.n * self.n

    @property
    def width(self) -> int:
        """Bytes needed for a ciphertext."""
        return (self.nsquare.bit_length() + 7) // 8

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(b"paillier-pk" + _int_bytes(self.n) + _int_bytes(self.g)).digest()

    def to_dict(self):
        return {"n": hex(self.n), "g": hex(self.g)}

    @classmethod
    def from_dict(cls, d):
        pk = cls(int(d["n"], 16))
        if "g" in d and int(d["g"], 16) != pk.g:
            raise PheError("only g = n + 1 is supported")
        return pk


@dataclass(frozen=True)
class PheKeyPair:
    public: PublicKey
    lam: int
    mu: int
    threshold_exponent: int
    p: int = field(default=0, repr=False)
    q: int = field(default=0, repr=False)


@dataclass(frozen=True)
class Ciphertext:
    value: int
    key_digest: bytes

    def to_bytes(self, width: int | None = None) -> bytes:
        width = width or (self.value.bit_length() + 7) // 8
        return self.key_digest + self.value.to_bytes(width, "big")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Ciphertext":
        return cls(int.from_bytes(raw[32:], "big"), raw[:32])

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()


def keypair_from_primes(p: int, q: int) -> PheKeyPair:
    n = p * q
    if p == q or math.gcd(n, (p - 1) * (q - 1)) != 1:
        raise PheError("primes unsuitable for Paillier")
    lam = lcm(p - 1, q - 1)
    nsq = n * n
    mu = modinv((modpow(n + 1, lam, nsq) - 1) // n, n)
    d = lam * modinv(lam, n)  # CRT: 0 mod lam, 1 mod n
    return PheKeyPair(PublicKey(n), lam, mu, d, p, q)


def keygen(bits: int, rng: Prng) -> PheKeyPair:
    """Key pair from two ``bits``-bit primes."""
    if bits < 16:
        raise KeySizeError(f"need at least 16-bit primes, got {bits}")
    while True:
        p = gen_prime(bits, rng)
        q = gen_prime(bits, rng)
        if p != q and math.gcd(p * q, (p - 1) * (q - 1)) == 1:
            return keypair_from_primes(p, q)


def keypair_from_exponent(n: int, d: int, rng: Prng | None = None) -> PheKeyPair:
    """Recover the full key pair from the threshold exponent.

    ``d`` is a multiple of lambda, which is enough to factor ``n``.
    """
    if d % n != 1 % n:
        raise PheError("exponent is not congruent to 1 mod n")
    rng = rng or Prng(0, "factor")
    t, s = d, 0
    while t % 2 == 0:
        t //= 2
        s += 1
    for _ in range(256):
        a = rng.randrange(2, n - 1)
        g = math.gcd(a, n)
        if g != 1:
            return keypair_from_primes(min(g, n // g), max(g, n // g))
        x = modpow(a, t, n)
        for _ in range(s):
            y = x * x % n
            if y == 1 and x not in (1, n - 1):
                f = math.gcd(x - 1, n)
                return keypair_from_primes(min(f, n // f), max(f, n // f))
            x = y
    raise PheError("exponent does not factor the modulus")


def _draw_r(n: int, rng: Prng) -> int:
    while True:
        r = rng.randrange(2, n)
        if math.gcd(r, n) == 1:
            return r


def raw_encrypt(pk: PublicKey, m: int, rng: Prng, r: int | None = None) -> int:
    n, nsq = pk.n, pk.nsquare
    if not 0 <= m < n:
        raise PlaintextOverflowError(f"plaintext must lie in [0, n), n={n}")
    if r is None:
        r = _draw_r(n, rng)
    return (1 + m * n) % nsq * int(gmpy2.powmod(r, n, nsq)) % nsq


def encrypt(pk: PublicKey, m: int, rng: Prng, r: int | None = None) -> Ciphertext:
    return Ciphertext(raw_encrypt(pk, m, rng, r), pk.digest)


def _check_key(pk: PublicKey, c: Ciphertext):
    if c.key_digest != pk.digest:
        raise KeyMismatchError("ciphertext was produced under a different public key")


def raw_decrypt(kp: PheKeyPair, value: int) -> int:
    n = kp.public.n
    if kp.p and kp.q:
        return _crt_decrypt(kp, value)
    u = modpow(value, kp.lam, n * n)
    return (u - 1) // n * kp.mu % n


def _crt_params(kp: PheKeyPair):
    cache = _CRT_CACHE.get(kp.public.n)
    if cache is None:
        p, q = kp.p, kp.q
        psq, qsq = p * p, q * q
        hp = modinv((modpow(kp.public.g, p - 1, psq) - 1) // p, p)
        hq = modinv((modpow(kp.public.g, q - 1, qsq) - 1) // q, q)
        cache = (p, q, gmpy2.mpz(psq), gmpy2.mpz(qsq), hp, hq, modinv(p, q))
        _CRT_CACHE[kp.public.n] = cache
    return cache


_CRT_CACHE: dict = {}


def _crt_decrypt(kp: PheKeyPair, value: int) -> int:
    p, q, psq, qsq, hp, hq, pinv = _crt_params(kp)
    mp = (int(gmpy2.powmod(value, p - 1, psq)) - 1) // p * hp % p
    mq = (int(gmpy2.powmod(value, q - 1, qsq)) - 1) // q * hq % q
    return mp + ((mq - mp) * pinv % q) * p


def decrypt(kp: PheKeyPair, c: Ciphertext) -> int:
    _check_key(kp.public, c)
    return raw_decrypt(kp, c.value)


def decrypt_with_exponent(pk: PublicKey, d: int, c: Ciphertext) -> int:
    _check_key(pk, c)
    return (modpow(c.value, d, pk.nsquare) - 1) // pk.n


def add(pk: PublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    _check_key(pk, c1)
    _check_key(pk, c2)
    return Ciphertext(c1.value * c2.value % pk.nsquare, pk.digest)


def scalar_mul(pk: PublicKey, c: Ciphertext, k: int) -> Ciphertext:
    _check_key(pk, c)
    return Ciphertext(modpow(c.value, k, pk.nsquare), pk.digest)


# -- vectors -----------------------------------------------------------------

@dataclass(frozen=True)
class CipherVector:
    """Ciphertexts under one key.

    Wire format: key digest (32) | count:u32 | width:u16 | values, each
    ``width`` bytes big-endian.
    """

    values: tuple
    key_digest: bytes
    width: int

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i) -> Ciphertext:
        return Ciphertext(self.values[i], self.key_digest)

    def to_bytes(self) -> bytes:
        w = self.width
        body = b"".join(v.to_bytes(w, "big") for v in self.values)
        return self.key_digest + struct.pack(">IH", len(self.values), w) + body

    def hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CipherVector":
        digest, count, w = cls.header(raw)
        body = raw[38:]
        if len(body) != count * w:
            raise PheError("cipher vector length does not match its header")
        vals = tuple(int.from_bytes(body[i:i + w], "big") for i in range(0, len(body), w))
        return cls(vals, digest, w)

    @classmethod
    def from_hex(cls, s: str) -> "CipherVector":
        return cls.from_bytes(bytes.fromhex(s))

    @staticmethod
    def header(raw: bytes):
        """(key digest, count, width) without decoding the values."""
        if len(raw) < 38:
            raise PheError("cipher vector shorter than its header")
        count, w = struct.unpack_from(">IH", raw, 32)
        return raw[:32], count, w


def encrypt_vector(pk: PublicKey, ms, rng: Prng) -> CipherVector:
    return CipherVector(tuple(raw_encrypt(pk, int(m), rng) for m in ms), pk.digest, pk.width)


def decrypt_vector(kp: PheKeyPair, cv: CipherVector) -> list:
    if cv.key_digest != kp.public.digest:
        raise KeyMismatchError("vector was produced under a different public key")
    return [raw_decrypt(kp, v) for v in cv.values]


def add_vectors(pk: PublicKey, a: CipherVector, b: CipherVector) -> CipherVector:
    return sum_vectors(pk, [a, b])


def sum_vectors(pk: PublicKey, vectors) -> CipherVector:
    """Homomorphic elementwise sum."""
    vectors = list(vectors)
    if not vectors:
        raise PheError("nothing to sum")
    if any(v.key_digest != pk.digest for v in vectors):
        raise KeyMismatchError("vectors under different keys")
    length = len(vectors[0])
    if any(len(v) != length for v in vectors):
        raise PheError("vectors differ in length")
    nsq = gmpy2.mpz(pk.nsquare)
    acc = [gmpy2.mpz(v) for v in vectors[0].values]
    for vec in vectors[1:]:
        acc = [a * b % nsq for a, b in zip(acc, vec.values)]
    return CipherVector(tuple(int(a) for a in acc), pk.digest, pk.width)


# -- fixed point ---------------------------------------------------------------

@dataclass(frozen=True)
class FixedPointCodec:
    """Reals to residues mod n: round(x * scale), negatives wrap to n - |.|."""

    n: int
    scale: int = 2 ** 16
    bound: float = 64.0

    def __post_init__(self):
        if self.scale <= 0 or self.scale & (self.scale - 1):
            raise PheError("scale must be a power of two")

    def check_capacity(self, consortium_size: int):
        if consortium_size * self.bound * self.scale >= self.n / 2:
            raise CodecCapacityError(
                f"{consortium_size} parties x bound {self.bound} x scale {self.scale} "
                f"can wrap modulo a {self.n.bit_length()}-bit n")

    def encode(self, x: float) -> int:
        return self.encode_vector([x])[0]

    def encode_vector(self, v) -> list:
        arr = np.asarray(v, dtype=np.float64).ravel()
        if arr.size and not np.all(np.abs(arr) <= self.bound):
            raise CodecRangeError(f"value outside [-{self.bound}, {self.bound}]")
        ints = np.rint(arr * self.scale).astype(np.int64)
        n = self.n
        return [int(i) % n for i in ints]

    def lift(self, m: int) -> int:
        """Centered representative in (-n/2, n/2]."""
        m %= self.n
        return m - self.n if m > self.n // 2 else m

    def decode_vector(self, ms) -> np.ndarray:
        return np.array([self.lift(m) for m in ms], dtype=np.float64) / self.scale

    def decode(self, m: int) -> float:
        return float(self.decode_vector([m])[0])


# -- threshold decryption --------------------------------------------------------

@dataclass(frozen=True)
class PartialDecryption:
    share_index: int
    component: int
    ciphertext_digest: bytes
    participants: tuple


def _participants(share_cfg: ShareConfig, participants):
    if participants is None:
        participants = range(1, share_cfg.n_shares + 1)
    participants = tuple(sorted(set(participants)))
    if len(participants) < share_cfg.threshold:
        raise InsufficientPartialsError(
            f"participant set {participants} smaller than threshold {share_cfg.threshold}")
    return participants


def share_exponent(share: SecretShare, share_cfg: ShareConfig, participants=None) -> int:
    participants = _participants(share_cfg, participants)
    if share.index not in participants:
        raise PheError(f"share {share.index} is not in participant set {participants}")
    lag = lagrange_at_zero(participants, share_cfg.field_prime)
    return lag[share.index] * share.value % share_cfg.field_prime


def partial_decrypt(share: SecretShare, c: Ciphertext, pk: PublicKey, share_cfg: ShareConfig,
                    participants=None) -> PartialDecryption:
    _check_key(pk, c)
    participants = _participants(share_cfg, participants)
    e = share_exponent(share, share_cfg, participants)
    return PartialDecryption(share.index, modpow(c.value, e, pk.nsquare), c.digest, participants)


def _check_partials(parts, share_cfg: ShareConfig):
    parts = list(parts)
    if len(parts) < share_cfg.threshold:
        raise InsufficientPartialsError(f"need {share_cfg.threshold} partials, got {len(parts)}")
    sets = {p.participants for p in parts}
    if len(sets) != 1:
        raise PartialMismatchError("partials computed for different participant sets")
    indices = [p.share_index for p in parts]
    if len(set(indices)) != len(indices):
        raise PartialMismatchError("duplicate share index among partials")
    if tuple(sorted(indices)) != next(iter(sets)):
        raise InsufficientPartialsError("partials missing for part of the participant set")
    return parts


def _combine_value(components, c_value: int, pk: PublicKey, share_cfg: ShareConfig) -> int:
    n, nsq = pk.n, pk.nsquare
    prod = gmpy2.mpz(1)
    for comp in components:
        prod = prod * comp % nsq
    corr = gmpy2.invert(gmpy2.powmod(c_value, share_cfg.field_prime, nsq), nsq)
    found = []
    for wrap in range(len(components)):
        if prod % n == 1:
            found.append(int((prod - 1) // n))
        prod = prod * corr % nsq
    if len(found) != 1:
        raise CombineError(f"{len(found)} candidate plaintexts; partials are inconsistent")
    return found[0]


def combine_partials(parts, c: Ciphertext, pk: PublicKey, share_cfg: ShareConfig) -> int:
    parts = _check_partials(parts, share_cfg)
    if any(p.ciphertext_digest != c.digest for p in parts):
        raise PartialMismatchError("partials refer to a different ciphertext")
    return _combine_value([p.component for p in parts], c.value, pk, share_cfg)


def partial_decrypt_vector(share: SecretShare, cv: CipherVector, pk: PublicKey, share_cfg: ShareConfig,
                           participants=None) -> list:
    """Components for every element; one exponent shared by the whole vector."""
    if cv.key_digest != pk.digest:
        raise KeyMismatchError("vector was produced under a different public key")
    e = share_exponent(share, share_cfg, participants)
    nsq = gmpy2.mpz(pk.nsquare)
    return [int(gmpy2.powmod(v, e, nsq)) for v in cv.values]


def combine_partials_vector(components_by_index: dict, cv: CipherVector, pk: PublicKey,
                            share_cfg: ShareConfig, participants=None) -> list:
    """``components_by_index`` maps share index to the list from :func:`partial_decrypt_vector`."""
    participants = _participants(share_cfg, participants)
    if tuple(sorted(components_by_index)) != participants:
        raise InsufficientPartialsError(
            f"have partials from {sorted(components_by_index)}, need exactly {participants}")
    cols = [components_by_index[i] for i in participants]
    if any(len(col) != len(cv) for col in cols):
        raise PartialMismatchError("partial vector length differs from ciphertext vector")
    return [_combine_value(comps, v, pk, share_cfg) for v, *comps in zip(cv.values, *cols)]


def field_prime_for(pk: PublicKey) -> int:
    """Smallest prime above n^2, a public bound on the threshold exponent."""
    return next_prime(pk.nsquare)
