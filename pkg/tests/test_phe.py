import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgan_trust.modmath import KeySizeError, Prng
from fedgan_trust.phe import (Ciphertext, CipherVector, CodecCapacityError, CodecRangeError,
                              CombineError, FixedPointCodec, InsufficientPartialsError, KeyMismatchError,
                              PartialMismatchError, PheError, PlaintextOverflowError, PublicKey, add, combine_partials,
                              combine_partials_vector, decrypt, decrypt_vector, decrypt_with_exponent, encrypt,
                              encrypt_vector, field_prime_for, keygen, keypair_from_exponent,
                              keypair_from_primes, partial_decrypt, partial_decrypt_vector, raw_decrypt,
                              scalar_mul, sum_vectors)
from fedgan_trust.secret_sharing import ShareConfig, split


def test_tiny_key_by_hand(tiny_kp):
    kp = tiny_kp
    assert kp.public.n == 15 and kp.public.g == 16 and kp.lam == 4
    assert kp.mu == 4
    assert kp.threshold_exponent % 4 == 0 and kp.threshold_exponent % 15 == 1


def test_tiny_encrypt_decrypt_by_hand(tiny_kp):
    c = encrypt(tiny_kp.public, 2, Prng(0), r=2)
    # 16^2 * 2^15 = 31 * 143 = 158 (mod 225)
    assert c.value == 158
    assert decrypt(tiny_kp, c) == 2
    # L(158^4 mod 225) = L(121) = 8, 8 * mu = 32 = 2 (mod 15)
    assert pow(158, 4, 225) == 121 and (121 - 1) // 15 == 8


def test_crt_and_textbook_decrypt_agree(kp64):
    textbook = keypair_from_primes(kp64.p, kp64.q)
    object.__setattr__(textbook, "p", 0)
    r = Prng(1)
    for _ in range(200):
        m = r.randbelow(kp64.public.n)
        c = encrypt(kp64.public, m, r)
        assert raw_decrypt(textbook, c.value) == m == decrypt(kp64, c)


@settings(max_examples=10_000, deadline=None)
@given(st.integers(0, 2 ** 127), st.integers(0, 2 ** 64 - 1))
def test_roundtrip_property(kp64, m, seed):
    m %= kp64.public.n
    assert decrypt(kp64, encrypt(kp64.public, m, Prng(seed))) == m


@settings(max_examples=10_000, deadline=None)
@given(st.integers(0, 2 ** 128), st.integers(0, 2 ** 128), st.integers(0, 2 ** 64 - 1))
def test_additive_homomorphism_property(kp64, a, b, seed):
    pk = kp64.public
    a, b = a % pk.n, b % pk.n
    r = Prng(seed)
    assert decrypt(kp64, add(pk, encrypt(pk, a, r), encrypt(pk, b, r))) == (a + b) % pk.n


@settings(max_examples=500, deadline=None)
@given(st.integers(0, 2 ** 128), st.integers(0, 2 ** 10))
def test_scalar_multiplication(kp64, m, k):
    pk = kp64.public
    m %= pk.n
    assert decrypt(kp64, scalar_mul(pk, encrypt(pk, m, Prng(k)), k)) == k * m % pk.n


def test_probabilistic_and_zero(kp64):
    pk, r = kp64.public, Prng(3)
    c1, c2 = encrypt(pk, 9, r), encrypt(pk, 9, r)
    assert c1.value != c2.value
    assert decrypt(kp64, c1) == decrypt(kp64, c2) == 9
    z = encrypt(pk, 0, r)
    assert decrypt(kp64, z) == 0
    assert decrypt(kp64, add(pk, c1, z)) == 9


def test_sum_of_ones(kp64):
    pk, r = kp64.public, Prng(4)
    acc = encrypt(pk, 1, r)
    for _ in range(99):
        acc = add(pk, acc, encrypt(pk, 1, r))
    assert decrypt(kp64, acc) == 100


def test_tampered_ciphertext_changes_plaintext(kp64):
    c = encrypt(kp64.public, 1234, Prng(5))
    bad = Ciphertext(c.value + 1, c.key_digest)
    assert decrypt(kp64, bad) != 1234


def test_errors(kp64, kp128):
    with pytest.raises(PlaintextOverflowError):
        encrypt(kp64.public, kp64.public.n, Prng(0))
    c = encrypt(kp64.public, 1, Prng(0))
    with pytest.raises(KeyMismatchError):
        decrypt(kp128, c)
    with pytest.raises(KeyMismatchError):
        add(kp64.public, c, encrypt(kp128.public, 1, Prng(0)))
    with pytest.raises(KeySizeError):
        keygen(8, Prng(0))


def test_keygen_deterministic():
    assert keygen(64, Prng(77)) == keygen(64, Prng(77))
    assert keygen(64, Prng(77)) != keygen(64, Prng(78))


def test_threshold_exponent_decrypts(kp64):
    c = encrypt(kp64.public, 555, Prng(6))
    assert decrypt_with_exponent(kp64.public, kp64.threshold_exponent, c) == 555


def test_key_recovered_from_exponent(kp128):
    rec = keypair_from_exponent(kp128.public.n, kp128.threshold_exponent)
    assert {rec.p, rec.q} == {kp128.p, kp128.q}
    assert rec.lam == kp128.lam and rec.mu == kp128.mu


def test_public_key_dict_roundtrip(kp64):
    assert PublicKey.from_dict(kp64.public.to_dict()) == kp64.public


# -- codec -------------------------------------------------------------------

def test_codec_examples(kp64):
    codec = FixedPointCodec(kp64.public.n)
    assert codec.encode(0.5) == 32768
    assert codec.encode(-0.25) == kp64.public.n - 16384
    assert abs(codec.decode(codec.encode(0.1)) - 0.1) <= 2 ** -17


def test_codec_range_and_capacity(kp64, tiny_kp):
    codec = FixedPointCodec(kp64.public.n)
    with pytest.raises(CodecRangeError):
        codec.encode(64.5)
    codec.check_capacity(3)
    with pytest.raises(CodecCapacityError):
        FixedPointCodec(tiny_kp.public.n).check_capacity(1)


@given(st.lists(st.floats(-64, 64, allow_nan=False), min_size=1, max_size=50))
def test_codec_roundtrip_bound(kp64, values):
    codec = FixedPointCodec(kp64.public.n)
    back = codec.decode_vector(codec.encode_vector(values))
    assert np.all(np.abs(back - np.array(values)) <= 1 / (2 * codec.scale) + 1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-64, 64, allow_nan=False), min_size=4, max_size=4), min_size=1, max_size=5))
def test_homomorphic_sum_decodes_within_k_half_steps(kp64, vecs):
    pk = kp64.public
    codec = FixedPointCodec(pk.n)
    r = Prng(len(vecs))
    cvs = [encrypt_vector(pk, codec.encode_vector(v), r) for v in vecs]
    total = codec.decode_vector(decrypt_vector(kp64, sum_vectors(pk, cvs)))
    k = len(vecs)
    assert np.all(np.abs(total - np.sum(vecs, axis=0)) <= k / (2 * codec.scale) + 1e-12)


def test_cipher_vector_bytes(kp64):
    cv = encrypt_vector(kp64.public, [1, 2, 3], Prng(0))
    assert CipherVector.from_bytes(cv.to_bytes()) == cv
    assert CipherVector.from_hex(cv.hex()) == cv
    assert CipherVector.header(cv.to_bytes()) == (kp64.public.digest, 3, kp64.public.width)


# -- threshold decryption -------------------------------------------------------

def _shares(kp, n, t, seed=0):
    cfg = ShareConfig(n, t, field_prime_for(kp.public))
    return cfg, split(kp.threshold_exponent, cfg, Prng(seed, "shares"))


def test_three_of_three_recovers_seven(kp64):
    cfg, shares = _shares(kp64, 3, 3)
    c = encrypt(kp64.public, 7, Prng(1))
    parts = [partial_decrypt(s, c, kp64.public, cfg) for s in shares]
    assert combine_partials(parts, c, kp64.public, cfg) == 7 == decrypt(kp64, c)


def test_two_partials_insufficient_for_t3(kp64):
    cfg, shares = _shares(kp64, 3, 3)
    c = encrypt(kp64.public, 7, Prng(1))
    parts = [partial_decrypt(s, c, kp64.public, cfg) for s in shares[:2]]
    with pytest.raises(InsufficientPartialsError):
        combine_partials(parts, c, kp64.public, cfg)


def test_mixed_ciphertexts_rejected(kp64):
    cfg, shares = _shares(kp64, 3, 3)
    c1 = encrypt(kp64.public, 7, Prng(1))
    c2 = encrypt(kp64.public, 8, Prng(2))
    parts = [partial_decrypt(shares[0], c1, kp64.public, cfg)] + \
            [partial_decrypt(s, c2, kp64.public, cfg) for s in shares[1:]]
    with pytest.raises(PartialMismatchError):
        combine_partials(parts, c2, kp64.public, cfg)


@pytest.mark.parametrize("n,t", [(3, 2), (5, 3), (4, 4), (7, 5)])
def test_subset_threshold(kp64, n, t):
    cfg, shares = _shares(kp64, n, t, seed=n * t)
    r = Prng(n + t)
    for _ in range(5):
        m = r.randbelow(kp64.public.n)
        c = encrypt(kp64.public, m, r)
        chosen = shares[n - t:]
        ids = [s.index for s in chosen]
        parts = [partial_decrypt(s, c, kp64.public, cfg, ids) for s in chosen]
        assert combine_partials(parts, c, kp64.public, cfg) == m


def test_corrupted_partial_detected(kp64):
    cfg, shares = _shares(kp64, 3, 3)
    c = encrypt(kp64.public, 7, Prng(1))
    parts = [partial_decrypt(s, c, kp64.public, cfg) for s in shares]
    bad = parts[0].__class__(parts[0].share_index, parts[0].component * 2 % kp64.public.nsquare,
                             parts[0].ciphertext_digest, parts[0].participants)
    with pytest.raises(CombineError):
        combine_partials([bad] + parts[1:], c, kp64.public, cfg)


def test_vector_threshold_matches_full_decrypt(kp128):
    pk = kp128.public
    cfg, shares = _shares(kp128, 3, 3, seed=9)
    r = Prng(10)
    ms = [r.randbelow(pk.n) for _ in range(30)]
    cv = encrypt_vector(pk, ms, r)
    comps = {s.index: partial_decrypt_vector(s, cv, pk, cfg) for s in shares}
    assert combine_partials_vector(comps, cv, pk, cfg) == ms == decrypt_vector(kp128, cv)


def test_field_prime_exceeds_exponent(kp64):
    p = field_prime_for(kp64.public)
    assert p > kp64.public.nsquare > kp64.threshold_exponent


def test_cipher_vector_rejects_truncated_header():
    with pytest.raises(PheError):
        CipherVector.from_bytes(b"\x00" * 37)
    with pytest.raises(PheError):
        CipherVector.header(b"")
