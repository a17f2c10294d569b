"""Key sharing on its own: three registries, any decryption needs all three partials."""
from fedgan_trust.modmath import Prng
from fedgan_trust.phe import (FixedPointCodec, combine_partials_vector, encrypt_vector, field_prime_for, keygen,
                              partial_decrypt_vector, sum_vectors)
from fedgan_trust.secret_sharing import ShareConfig, SharingError, reconstruct, split

rng = Prng(2024, "demo")
kp = keygen(128, rng.substream("key"))
pk = kp.public
cfg = ShareConfig(3, 3, field_prime_for(pk))
shares = split(kp.threshold_exponent, cfg, rng.substream("shares"))
codec = FixedPointCodec(pk.n, 2 ** 16, 64.0)

local = [[0.25, -1.5, 3.0], [0.75, -0.5, 1.0], [0.5, -1.0, 2.0]]
ciphertexts = [encrypt_vector(pk, codec.encode_vector(v), rng) for v in local]
total = sum_vectors(pk, ciphertexts)

participants = (1, 2, 3)
partials = {s.index: partial_decrypt_vector(s, total, pk, cfg, participants) for s in shares}
sums = combine_partials_vector(partials, total, pk, cfg, participants)
print("average from partial decryptions:", codec.decode_vector(sums) / 3)

try:
    reconstruct(shares[:2], cfg)
except SharingError as e:
    print("two shares are not enough:", e)
