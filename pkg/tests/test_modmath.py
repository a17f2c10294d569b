import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgan_trust.modmath import (InvalidModulusError, KeySizeError, NoInverseError, Prng, gen_prime,
                                  is_probable_prime, lcm, modinv, modpow, next_prime)

SMALL_PRIMES = [p for p in range(2, 1000) if all(p % d for d in range(2, int(p ** 0.5) + 1))]


def test_modpow_hand_vectors():
    assert modpow(2, 10, 1000) == 24
    assert modpow(158, 4, 225) == 121
    # square-and-multiply by hand: 158^2 = 24964 = 214 (mod 225)
    assert 158 * 158 % 225 == 214 and 214 * 214 % 225 == 121


@pytest.mark.parametrize("x,m", [(0, 2), (5, 7), (10 ** 30, 97), (3, 2 ** 127 - 1)])
def test_modpow_zero_exponent(x, m):
    assert modpow(x, 0, m) == 1


@pytest.mark.parametrize("m", [0, 1])
def test_modpow_rejects_tiny_modulus(m):
    with pytest.raises(InvalidModulusError):
        modpow(3, 2, m)


def test_modinv_hand_vectors():
    assert modinv(4, 15) == 4
    assert modinv(3, 17) == 6
    assert modinv(1, 99) == 1


def test_modinv_reports_gcd():
    with pytest.raises(NoInverseError) as exc:
        modinv(6, 15)
    assert exc.value.gcd == 3


@settings(max_examples=10_000, deadline=None)
@given(st.integers(1, 2 ** 128), st.integers(2, 2 ** 128))
def test_modinv_property(a, m):
    if math.gcd(a, m) != 1:
        with pytest.raises(NoInverseError):
            modinv(a, m)
    else:
        assert modinv(a, m) * a % m == 1 % m


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 2 ** 16), st.integers(2, 10 ** 6))
def test_modpow_matches_repeated_multiplication(b, e, m):
    acc = 1 % m
    for _ in range(e):
        acc = acc * b % m
    assert modpow(b, e, m) == acc


@given(st.integers(0, 2 ** 200), st.integers(0, 2 ** 200), st.integers(2, 2 ** 100))
def test_mod_addition_distributes(a, b, m):
    assert (a + b) % m == ((a % m) + (b % m)) % m


def test_lcm():
    assert lcm(2, 4) == 4
    assert lcm(4, 6) == 12


def test_prng_reproducible_first_megabyte():
    a, b = Prng(99), Prng(99)
    assert a.bytes(10 ** 6) == b.bytes(10 ** 6)


def test_prng_chunking_does_not_change_stream():
    a, b = Prng(5, "x"), Prng(5, "x")
    joined = b"".join(a.bytes(k) for k in (1, 7, 31, 33, 1000, 3))
    assert joined == b.bytes(len(joined))


def test_prng_first_block_is_documented_hash():
    import hashlib
    import struct
    expected = hashlib.sha256(b"fedgan-prng" + struct.pack(">QI", 7, 3) + b"abc" + (0).to_bytes(8, "big")).digest()
    assert Prng(7, "abc").bytes(32) == expected


def test_prng_substreams_are_independent():
    root = Prng(1)
    a = root.substream("a").bytes(64)
    b = root.substream("b").bytes(64)
    assert a != b
    # deriving a substream does not move the parent
    assert Prng(1).bytes(16) == root.bytes(16)
    assert Prng(1, "a").bytes(64) == a


def test_prng_seed_range():
    with pytest.raises(ValueError):
        Prng(2 ** 64)
    with pytest.raises(ValueError):
        Prng(-1)


def test_prng_randbelow_range_and_coverage(rng):
    draws = [rng.randbelow(10) for _ in range(2000)]
    assert set(draws) == set(range(10))


def test_prng_uniform_and_normal_moments():
    r = Prng(3)
    u = r.uniform(20000)
    assert u.min() >= 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.01
    z = r.normal(20000, 3.0, 2.0)
    assert abs(z.mean() - 3.0) < 0.05
    assert abs(z.std() - 2.0) < 0.05


def test_gen_prime_eight_bits():
    p = gen_prime(8, Prng(1))
    assert 128 <= p <= 255
    assert all(p % q for q in range(2, p))


@pytest.mark.parametrize("bits", [8, 16, 64, 128, 256])
def test_gen_prime_size_and_trial_division(bits):
    p = gen_prime(bits, Prng(bits, "gp"))
    assert p.bit_length() == bits
    assert all(p % q for q in SMALL_PRIMES if q < p)


def test_gen_prime_deterministic():
    assert gen_prime(128, Prng(8)) == gen_prime(128, Prng(8))


def test_gen_prime_too_small():
    with pytest.raises(KeySizeError):
        gen_prime(7, Prng(0))


def test_is_probable_prime_known_values(rng):
    assert is_probable_prime(2 ** 127 - 1, rng)
    assert not is_probable_prime(2 ** 127 + 1, rng)
    # Carmichael numbers fool Fermat but not Miller-Rabin
    for c in (561, 41041, 825265, 321197185):
        assert not is_probable_prime(c, rng)
    assert [n for n in range(100) if is_probable_prime(n, rng)] == [p for p in SMALL_PRIMES if p < 100]


def test_next_prime():
    assert next_prime(13) == 17
    assert next_prime(1) == 2
    assert next_prime(225) == 227
