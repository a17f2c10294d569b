"""Smart contracts for the key-distribution channel and the GAN channel.

Contracts only read and write world state through the transaction context,
so every replica computes the same result.  Large ciphertext vectors live
in transaction payloads; world-state entries hold small records pointing at
the transaction that carries them.

World-state layout on the GAN channel::

    config                      consortium configuration, public key, layout
    rec/{G|D}/{r}/{i}           record of registry r, iteration i
    last/{G|D}/{r}              last iteration recorded
    trigger/{round}             contributors to a merge round
    avg/{round}                 canonical average (first verified submission)
    avgconf/{round}/{r}         confirming duplicate submitted by registry r
    partial/{round}/{r}         partial decryption posted by registry r
    rounds_completed            number of committed averages
    violation/{r}/{i}, halted/{r}
    stopped                     who stopped training, and where
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .ledger import ContractError, canonical_json
from .phe import (TEST_PLAINTEXT, CipherVector, CodecCapacityError, FixedPointCodec, PublicKey,
                  encrypt, field_prime_for, keygen, sum_vectors)
from .secret_sharing import ShareConfig, split

KEY_CHANNEL = "key-distribution"
GAN_CHANNEL = "gan-interaction"

DEFAULT_GEN_LOSS_THRESHOLD = round(math.log(2) + 0.05, 6)


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ConsortiumConfig:
    n_members: int = 3
    merge_interval: int = 5
    gen_loss_threshold: float = DEFAULT_GEN_LOSS_THRESHOLD
    min_merge_rounds: int | None = None
    key_bits: int = 128
    threshold: int | None = None
    scale_bits: int = 16
    bound: float = 64.0

    def __post_init__(self):
        if self.min_merge_rounds is None:
            object.__setattr__(self, "min_merge_rounds", self.n_members)
        if self.threshold is None:
            object.__setattr__(self, "threshold", self.n_members)
        self.validate()

    def validate(self):
        if not isinstance(self.n_members, int) or self.n_members <= 1:
            raise ConfigError("members", f"need more than one member, got {self.n_members}")
        if self.merge_interval < 1:
            raise ConfigError("merge_interval", "must be at least 1")
        if not 2 <= self.threshold <= self.n_members:
            raise ConfigError("threshold", f"must satisfy 2 <= t <= {self.n_members}, got {self.threshold}")
        if not (self.gen_loss_threshold > 0 and math.isfinite(self.gen_loss_threshold)):
            raise ConfigError("gen_loss_threshold", "must be a positive finite number")
        if self.min_merge_rounds < 1:
            raise ConfigError("min_merge_rounds", "must be at least 1")
        if self.key_bits < 16:
            raise ConfigError("key_bits", "need at least 16-bit primes")
        if not 0 <= self.scale_bits <= 40:
            raise ConfigError("codec.scale_bits", "must be in [0, 40]")
        if not self.bound > 0:
            raise ConfigError("codec.bound", "must be positive")
        # smallest possible modulus has 2*key_bits - 1 bits
        if self.n_members * self.bound * 2 ** self.scale_bits >= 2 ** (2 * self.key_bits - 2):
            raise ConfigError("codec", "consortium_size * bound * scale must stay below n/2")

    @property
    def scale(self) -> int:
        return 2 ** self.scale_bits

    @property
    def participants(self) -> tuple:
        """Registries that post partial decryptions: the first t ordinals."""
        return tuple(range(1, self.threshold + 1))

    def codec(self, pk: PublicKey) -> FixedPointCodec:
        c = FixedPointCodec(pk.n, self.scale, self.bound)
        c.check_capacity(self.n_members)
        return c

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def member_name(ordinal: int) -> str:
    return f"registry-{ordinal}"


def ordinal_of(member: str) -> int:
    try:
        return int(member.rsplit("-", 1)[1])
    except (ValueError, IndexError):
        raise ContractError(f"unrecognised member identity {member!r}") from None


@dataclass
class TrainingRecord:
    registry: int
    iteration: int
    role: str  # "G" or "D"
    enc_weights: CipherVector
    enc_gradients: CipherVector
    synthetic_data_hash: bytes
    real_data_hash: bytes | None = None
    d_loss: float | None = None
    g_loss: float | None = None

    def to_payload(self) -> dict:
        out = {"registry": self.registry, "iteration": self.iteration, "role": self.role,
               "enc_weights": self.enc_weights.hex(), "enc_gradients": self.enc_gradients.hex(),
               "synthetic_data_hash": self.synthetic_data_hash.hex()}
        if self.role == "D":
            out.update(real_data_hash=self.real_data_hash.hex(), d_loss=self.d_loss, g_loss=self.g_loss)
        return out

    @classmethod
    def from_payload(cls, p: dict) -> "TrainingRecord":
        return cls(p["registry"], p["iteration"], p["role"], CipherVector.from_hex(p["enc_weights"]),
                   CipherVector.from_hex(p["enc_gradients"]), bytes.fromhex(p["synthetic_data_hash"]),
                   bytes.fromhex(p["real_data_hash"]) if "real_data_hash" in p else None,
                   p.get("d_loss"), p.get("g_loss"))


@dataclass
class AverageRecord:
    round: int
    role: str
    enc_sum: CipherVector
    participant_count: int
    contributors: list = field(default_factory=list)  # tx ids (bytes)

    def to_payload(self) -> dict:
        return {"role": self.role, "enc_sum": self.enc_sum.hex(),
                "contributors": [t.hex() for t in self.contributors]}

    @classmethod
    def from_payload(cls, round_, count, p) -> "AverageRecord":
        return cls(round_, p["role"], CipherVector.from_hex(p["enc_sum"]), count,
                   [bytes.fromhex(t) for t in p["contributors"]])


def average_payload(round_: int, records) -> dict:
    records = list(records)
    return {"round": round_, "participant_count": records[0].participant_count,
            "averages": [r.to_payload() for r in records]}


# -- key-distribution channel -----------------------------------------------

def keygen_contract(ctx, payload: bytes):
    """Generate the consortium key pair, share the threshold exponent, forget the key."""
    if ctx.get("initialized") is not None:
        raise ContractError("key material already initialised")
    req = _json(payload)
    members = ctx.members
    n_shares = int(req["n_shares"])
    if n_shares != len(members):
        raise ContractError(f"need one share per member ({len(members)}), got {n_shares}")
    rng = ctx.entropy("keygen")
    kp = keygen(int(req["key_bits"]), rng.substream("primes"))
    pk = kp.public
    share_cfg = ShareConfig(n_shares, int(req["threshold"]), field_prime_for(pk))
    shares = split(kp.threshold_exponent, share_cfg, rng.substream("shamir"))
    for i, share in enumerate(shares):
        ctx.put_private(members[i], "key_share", share.to_bytes())
    test_ct = encrypt(pk, TEST_PLAINTEXT, rng.substream("test-ciphertext"))
    del kp, shares  # only the shares in the private collections survive
    ctx.put_json("public_key", pk.to_dict())
    ctx.put_json("share_config", share_cfg.to_dict())
    ctx.put_json("test_ciphertext", {"value": hex(test_ct.value), "key_digest": test_ct.key_digest.hex()})
    ctx.put("initialized", b"1")


KEY_CONTRACTS = {"keygen": keygen_contract}


# -- GAN channel ---------------------------------------------------------------

def _json(payload: bytes):
    try:
        return json.loads(payload)
    except ValueError as e:
        raise ContractError(f"malformed payload: {e}") from None


def _config(ctx):
    cfg = ctx.get_json("config")
    if cfg is None:
        raise ContractError("consortium not initialised")
    return cfg


def _require_submitter(ctx, registry: int):
    if ordinal_of(ctx.submitter) != registry:
        raise ContractError(f"{ctx.submitter} cannot submit on behalf of registry {registry}")


def _require_training_open(ctx, registry: int):
    if ctx.get("stopped") is not None:
        raise ContractError("training stopped; submission rejected after stop")
    if ctx.get(f"halted/{registry}") is not None:
        raise ContractError(f"registry {registry} halted after a violation")


def _check_vector(hex_str, pk_digest, length, what):
    try:
        raw = bytes.fromhex(hex_str)
        digest, count, _ = CipherVector.header(raw)
    except (ValueError, TypeError) as e:
        raise ContractError(f"{what}: malformed ciphertext vector ({e})") from None
    if digest.hex() != pk_digest:
        raise ContractError(f"{what}: not encrypted under the consortium key")
    if count != length:
        raise ContractError(f"{what}: expected {length} ciphertexts, got {count}")


def _check_hash(h, what):
    try:
        ok = len(bytes.fromhex(h)) == 32
    except (ValueError, TypeError):
        ok = False
    if not ok:
        raise ContractError(f"{what} must be a 32-byte hash")


def init_consortium_contract(ctx, payload: bytes):
    if ctx.get("config") is not None:
        raise ContractError("consortium already initialised")
    req = _json(payload)
    try:
        cc = ConsortiumConfig.from_dict(req["consortium"])
    except (ConfigError, TypeError, KeyError) as e:
        raise ContractError(f"invalid consortium config: {e}") from None
    if cc.n_members != len(ctx.members):
        raise ContractError("n_members does not match channel membership")
    pk = PublicKey.from_dict(req["public_key"])
    try:
        cc.codec(pk)
    except CodecCapacityError as e:
        raise ContractError(str(e)) from None
    cfg = dict(req)
    cfg["key_digest"] = pk.digest.hex()
    cfg["participants"] = list(cc.participants)
    ctx.put_json("config", cfg)
    ctx.put_json("rounds_completed", 0)


def _check_sequence(ctx, role, registry, iteration):
    last = ctx.get_json(f"last/{role}/{registry}", 0)
    if iteration != last + 1:
        raise ContractError(f"sequence error: registry {registry} {role} iteration {iteration} after {last}")


def record_generator_contract(ctx, payload: bytes):
    p = _json(payload)
    cfg = _config(ctx)
    r, i = int(p["registry"]), int(p["iteration"])
    if p.get("role") != "G":
        raise ContractError("role must be G")
    _require_submitter(ctx, r)
    _require_training_open(ctx, r)
    _check_sequence(ctx, "G", r, i)
    k = cfg["consortium"]["merge_interval"]
    if i > 1 and (i - 1) % k == 0 and ctx.get(f"avg/{(i - 1) // k}") is None:
        raise ContractError(f"iteration {i} starts before merge round {(i - 1) // k} is committed")
    n = cfg["n_params"]["G"]
    _check_vector(p["enc_weights"], cfg["key_digest"], n, "enc_weights")
    _check_vector(p["enc_gradients"], cfg["key_digest"], n, "enc_gradients")
    _check_hash(p["synthetic_data_hash"], "synthetic_data_hash")
    ctx.put_json(f"rec/G/{r}/{i}", {"tx": ctx.tx_id.hex(), "synthetic_data_hash": p["synthetic_data_hash"]})
    ctx.put_json(f"last/G/{r}", i)
    ctx.emit("GeneratorRecorded", {"registry": r, "iteration": i, "tx": ctx.tx_id.hex()})


def _stop_allowed(ctx, cfg, g_loss):
    cc = cfg["consortium"]
    return g_loss <= cc["gen_loss_threshold"] and ctx.get_json("rounds_completed", 0) >= cc["min_merge_rounds"]


def _apply_stop(ctx, registry, iteration):
    ctx.put_json("stopped", {"registry": registry, "iteration": iteration, "tx": ctx.tx_id.hex()})
    ctx.emit("Stop", {"registry": registry, "iteration": iteration})


def record_discriminator_contract(ctx, payload: bytes):
    p = _json(payload)
    cfg = _config(ctx)
    r, i = int(p["registry"]), int(p["iteration"])
    if p.get("role") != "D":
        raise ContractError("role must be D")
    _require_submitter(ctx, r)
    _require_training_open(ctx, r)
    gen = ctx.get_json(f"rec/G/{r}/{i}")
    if gen is None:
        raise ContractError(f"orphan discriminator record: no generator record for registry {r} iteration {i}")
    _check_sequence(ctx, "D", r, i)
    n = cfg["n_params"]["D"]
    _check_vector(p["enc_weights"], cfg["key_digest"], n, "enc_weights")
    _check_vector(p["enc_gradients"], cfg["key_digest"], n, "enc_gradients")
    _check_hash(p["real_data_hash"], "real_data_hash")
    if p["synthetic_data_hash"] != gen["synthetic_data_hash"]:
        raise ContractError("synthetic data hash does not match the generator record")
    d_loss, g_loss = p["d_loss"], p["g_loss"]
    if not all(isinstance(x, (int, float)) and math.isfinite(x) for x in (d_loss, g_loss)):
        raise ContractError("losses must be finite numbers")
    ctx.put_json(f"rec/D/{r}/{i}", {"tx": ctx.tx_id.hex(), "d_loss": d_loss, "g_loss": g_loss})
    ctx.put_json(f"last/D/{r}", i)
    accepted = _stop_allowed(ctx, cfg, g_loss)
    ctx.emit("DiscriminatorRecorded", {"registry": r, "iteration": i, "tx": ctx.tx_id.hex()})
    ctx.emit("GeneratorLoss", {"registry": r, "iteration": i, "g_loss": g_loss, "d_loss": d_loss,
                               "accepted": accepted})
    k = cfg["consortium"]["merge_interval"]
    n_members = cfg["consortium"]["n_members"]
    if i % k == 0:
        round_ = i // k
        recs = [ctx.get_json(f"rec/D/{q}/{i}") if q != r else {"tx": ctx.tx_id.hex()}
                for q in range(1, n_members + 1)]
        if all(recs):
            gens = [ctx.get_json(f"rec/G/{q}/{i}")["tx"] for q in range(1, n_members + 1)]
            trig = {"round": round_, "iteration": i, "generator": gens, "discriminator": [x["tx"] for x in recs]}
            ctx.put_json(f"trigger/{round_}", trig)
            ctx.emit("MergeTrigger", trig)
    if accepted:
        _apply_stop(ctx, r, i)


def _weights_of(ctx, tx_hex):
    tx = ctx.get_tx(bytes.fromhex(tx_hex))
    return CipherVector.from_hex(_json(tx.payload)["enc_weights"])


def record_average_contract(ctx, payload: bytes):
    """Accept an encrypted sum only if it equals the re-computed product of the round's ciphertexts."""
    p = _json(payload)
    cfg = _config(ctx)
    if ctx.get("stopped") is not None:
        raise ContractError("training stopped; average rejected after stop")
    round_ = int(p["round"])
    trig = ctx.get_json(f"trigger/{round_}")
    if trig is None:
        raise ContractError(f"no merge trigger for round {round_}")
    n_members = cfg["consortium"]["n_members"]
    if p["participant_count"] != n_members:
        raise ContractError(f"participant_count {p['participant_count']} != consortium size {n_members}")
    pk = PublicKey.from_dict(cfg["public_key"])
    expected = {"G": trig["generator"], "D": trig["discriminator"]}
    roles = sorted(a["role"] for a in p["averages"])
    if roles != ["D", "G"]:
        raise ContractError("an average must cover both generator and discriminator")
    for avg in p["averages"]:
        role = avg["role"]
        if avg["contributors"] != expected[role]:
            raise ContractError(f"{role} contributors differ from the round {round_} trigger")
        recomputed = sum_vectors(pk, [_weights_of(ctx, t) for t in expected[role]])
        if recomputed.hex() != avg["enc_sum"]:
            raise ContractError(f"poisoned average: {role} sum for round {round_} does not match "
                                f"the recorded ciphertexts")
    me = ordinal_of(ctx.submitter)
    existing = ctx.get_json(f"avg/{round_}")
    if existing is not None:
        ctx.put_json(f"avgconf/{round_}/{me}", {"tx": ctx.tx_id.hex(), "confirms": existing["tx"]})
        return
    ctx.put_json(f"avg/{round_}", {"tx": ctx.tx_id.hex(), "count": n_members})
    ctx.put_json("rounds_completed", ctx.get_json("rounds_completed", 0) + 1)
    ctx.emit("AveragedWeights", {"round": round_, "tx": ctx.tx_id.hex()})


def post_partial_contract(ctx, payload: bytes):
    p = _json(payload)
    cfg = _config(ctx)
    round_ = int(p["round"])
    avg = ctx.get_json(f"avg/{round_}")
    if avg is None:
        raise ContractError(f"partial decryption for unknown average round {round_}")
    idx = int(p["share_index"])
    _require_submitter(ctx, idx)
    participants = cfg["participants"]
    if p["participants"] != participants or idx not in participants:
        raise ContractError(f"share {idx} / participant set does not match {participants}")
    if ctx.get(f"partial/{round_}/{idx}") is not None:
        raise ContractError(f"registry {idx} already posted a partial for round {round_}")
    for role in ("G", "D"):
        _check_vector(p["components"][role], cfg["key_digest"], cfg["n_params"][role], f"{role} components")
    ctx.put_json(f"partial/{round_}/{idx}", {"tx": ctx.tx_id.hex()})
    posted = sum(ctx.get(f"partial/{round_}/{q}") is not None for q in participants)
    ctx.emit("PartialDecryptionPosted", {"round": round_, "share_index": idx, "posted": posted,
                                         "complete": posted == len(participants), "average_tx": avg["tx"]})


def report_violation_contract(ctx, payload: bytes):
    """A discriminator found that its local synthetic batch does not match the on-chain hash."""
    p = _json(payload)
    _config(ctx)
    r, i = int(p["registry"]), int(p["iteration"])
    _require_submitter(ctx, r)
    gen = ctx.get_json(f"rec/G/{r}/{i}")
    if gen is None:
        raise ContractError("violation refers to a missing generator record")
    if p["onchain_hash"] != gen["synthetic_data_hash"]:
        raise ContractError("violation report misquotes the on-chain hash")
    if p["computed_hash"] == p["onchain_hash"]:
        raise ContractError("hashes match; nothing to report")
    ctx.put_json(f"violation/{r}/{i}", {"tx": ctx.tx_id.hex(), "kind": p["kind"]})
    ctx.put_json(f"halted/{r}", {"iteration": i})


def record_stop_contract(ctx, payload: bytes):
    """Explicit stop; a no-op if training is already stopped."""
    p = _json(payload)
    cfg = _config(ctx)
    if ctx.get("stopped") is not None:
        return
    r, i = int(p["registry"]), int(p["iteration"])
    _require_submitter(ctx, r)
    rec = ctx.get_json(f"rec/D/{r}/{i}")
    if rec is None or not _stop_allowed(ctx, cfg, rec["g_loss"]):
        raise ContractError("stop condition not reached")
    _apply_stop(ctx, r, i)


GAN_CONTRACTS = {
    "init_consortium": init_consortium_contract,
    "record_generator": record_generator_contract,
    "record_discriminator": record_discriminator_contract,
    "record_average": record_average_contract,
    "post_partial": post_partial_contract,
    "report_violation": report_violation_contract,
    "record_stop": record_stop_contract,
}


def initialise_consortium(ledger, cc: ConsortiumConfig, extra: dict, members=None):
    """Create both channels, run key generation and publish the consortium config.

    ``extra`` carries the agreed model layout (``gan``, ``n_params``,
    ``architecture``) that goes on-chain next to the public key.
    Returns the public key.
    """
    members = members or [member_name(i) for i in range(1, cc.n_members + 1)]
    ledger.create_channel(KEY_CHANNEL, members, KEY_CONTRACTS)
    ledger.create_channel(GAN_CHANNEL, members, GAN_CONTRACTS)
    ledger.submit(KEY_CHANNEL, members[0], "keygen",
                  {"key_bits": cc.key_bits, "n_shares": cc.n_members, "threshold": cc.threshold})
    pk = PublicKey.from_dict(ledger.query_json(KEY_CHANNEL, members[0], "public_key"))
    share_cfg = ledger.query_json(KEY_CHANNEL, members[0], "share_config")
    ledger.submit(GAN_CHANNEL, members[0], "init_consortium",
                  {"consortium": cc.to_dict(), "public_key": pk.to_dict(), "share_config": share_cfg, **extra})
    return pk


def encode_payload(obj) -> bytes:
    return canonical_json(obj)
