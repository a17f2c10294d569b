"""Registry applications and the deterministic simulation driver.

Each registry runs three reactive applications (generator, discriminator,
parameters merger) that talk to each other only through ledger commits and
events.  One seeded round-robin scheduler drives every application of every
registry, so a (config, seed) pair fixes the whole transcript.

Recorded quantities, per iteration ``i`` of registry ``r``:

* generator record: the weights that produced batch ``i`` and the gradient
  that moved the previous weights to them (zero after bootstrap or a merge);
* discriminator record: the weights used to classify batch ``i`` and the
  gradient of ``d_loss`` at those weights.

With this layout an auditor can replay every local SGD step from the chain.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import contracts as C
from .contracts import ConfigError, ConsortiumConfig, TrainingRecord, member_name
from .gan import (DataDistribution, GanConfig, ModelParams, SyntheticBatch, TrainingFault, batch_bytes,
                  batch_from_bytes,
                  discriminator_pass, generator_forward, generator_gradients, sgd_step)
from .ledger import ContractRejected, Ledger, canonical_json
from .modmath import Prng
from .phe import (CipherVector, CodecRangeError, combine_partials_vector, encrypt_vector,
                  partial_decrypt_vector, sum_vectors)
from .secret_sharing import SecretShare, ShareConfig

FAULT_KINDS = ("byzantine-merger", "tamper-fake-data", "forge-record")


class StallError(RuntimeError):
    """No application could make progress and training has not stopped."""

    def __init__(self, reason, result=None):
        super().__init__(reason)
        self.reason = reason
        self.result = result


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class Fault:
    kind: str
    registry: int
    iteration: int | None = None

    @classmethod
    def parse(cls, spec: str) -> "Fault":
        parts = spec.split(":")
        if parts[0] not in FAULT_KINDS or len(parts) not in (2, 3):
            raise ConfigError("faults", f"cannot parse fault {spec!r}; expected one of "
                                        f"{', '.join(FAULT_KINDS)} as kind:R[:iter]")
        try:
            nums = [int(x) for x in parts[1:]]
        except ValueError:
            raise ConfigError("faults", f"non-integer field in {spec!r}") from None
        if parts[0] == "tamper-fake-data" and len(nums) != 2:
            raise ConfigError("faults", "tamper-fake-data needs registry and iteration")
        if parts[0] == "byzantine-merger" and len(nums) != 1:
            raise ConfigError("faults", "byzantine-merger takes only a registry")
        it = nums[1] if len(nums) > 1 else (2 if parts[0] == "forge-record" else None)
        return cls(parts[0], nums[0], it)

    def __str__(self):
        return self.kind + ":" + ":".join(str(x) for x in (self.registry, self.iteration) if x is not None)


@dataclass(frozen=True)
class SimulationConfig:
    consortium: ConsortiumConfig = field(default_factory=ConsortiumConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    data: DataDistribution = field(default_factory=DataDistribution)
    seed: int = 42
    max_iterations: int = 5000
    dataset_rows: int = 1000
    faults: tuple = ()

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations", "must be at least 1")
        if self.dataset_rows < 1:
            raise ConfigError("dataset_rows", "must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed", "must fit in 64 bits")
        try:
            self.data.data_dim
        except ValueError as e:
            raise ConfigError("data.kind", str(e)) from None
        if self.gan.lr < 0 or self.gan.batch_size < 1:
            raise ConfigError("gan", "lr must be >= 0 and batch_size >= 1")
        for f in self.faults:
            if not 1 <= f.registry <= self.consortium.n_members:
                raise ConfigError("faults", f"{f} names a registry outside 1..{self.consortium.n_members}")

    def to_dict(self) -> dict:
        cc = self.consortium
        return {
            "members": cc.n_members, "merge_interval": cc.merge_interval, "threshold": cc.threshold,
            "gen_loss_threshold": cc.gen_loss_threshold, "min_merge_rounds": cc.min_merge_rounds,
            "key_bits": cc.key_bits, "codec": {"scale_bits": cc.scale_bits, "bound": cc.bound},
            "gan": {"noise_dim": self.gan.noise_dim, "hidden": self.gan.hidden, "lr": self.gan.lr,
                    "batch_size": self.gan.batch_size, "init_scale": self.gan.init_scale},
            "data": self.data.to_dict(), "seed": self.seed, "max_iterations": self.max_iterations,
            "dataset_rows": self.dataset_rows, "faults": [str(f) for f in self.faults],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        d = dict(d)
        known = {"members", "merge_interval", "threshold", "gen_loss_threshold", "min_merge_rounds",
                 "key_bits", "codec", "gan", "data", "seed", "max_iterations", "dataset_rows", "faults"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config field")
        codec = d.get("codec", {})
        cc_kwargs = {k: d[src] for k, src in [("n_members", "members"), ("merge_interval", "merge_interval"),
                                              ("threshold", "threshold"),
                                              ("gen_loss_threshold", "gen_loss_threshold"),
                                              ("min_merge_rounds", "min_merge_rounds"),
                                              ("key_bits", "key_bits")] if src in d}
        for k in ("scale_bits", "bound"):
            if k in codec:
                cc_kwargs[k] = codec[k]
        for k, v in cc_kwargs.items():
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(k, f"expected a number, got {v!r}")
        consortium = ConsortiumConfig(**cc_kwargs)
        try:
            gan = GanConfig(**d.get("gan", {}))
        except TypeError as e:
            raise ConfigError("gan", str(e)) from None
        data = DataDistribution.from_dict(d.get("data", {"kind": "gaussian1d", "mu": 3.0, "sigma": 1.0}))
        faults = tuple(Fault.parse(s) for s in d.get("faults", []))
        extra = {k: d[k] for k in ("seed", "max_iterations", "dataset_rows") if k in d}
        return cls(consortium, gan, data, faults=faults, **extra)

    @classmethod
    def load(cls, path) -> "SimulationConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except ValueError as e:
                raise ConfigError("config", f"not valid JSON: {e}") from None
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "SimulationConfig":
        return SimulationConfig(self.consortium, self.gan, self.data, seed, self.max_iterations,
                                self.dataset_rows, self.faults)

    def with_faults(self, faults) -> "SimulationConfig":
        return SimulationConfig(self.consortium, self.gan, self.data, self.seed, self.max_iterations,
                                self.dataset_rows, tuple(faults))

    @property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict())).hexdigest()

    def fault(self, kind, registry):
        return next((f for f in self.faults if f.kind == kind and f.registry == registry), None)


def quality_config(seed: int = 42) -> SimulationConfig:
    """Longer run used to check the final global model against the target distribution."""
    cc = ConsortiumConfig(n_members=3, merge_interval=5, min_merge_rounds=200, key_bits=64)
    return SimulationConfig(cc, GanConfig(lr=0.1), seed=seed, max_iterations=5000)


class LocalFileStore:
    """Synthetic batches by iteration; stands in for a registry's local filesystem."""

    def __init__(self):
        self._files = {}
        self._digests = {}

    def put(self, iteration: int, batch: SyntheticBatch) -> bytes:
        raw = batch.to_bytes()
        self._files[iteration] = raw
        self._digests[iteration] = hashlib.sha256(raw).digest()
        return self._digests[iteration]

    def read(self, iteration: int) -> bytes:
        return self._files[iteration]

    def get(self, iteration: int) -> bytes:
        raw = self._files[iteration]
        if hashlib.sha256(raw).digest() != self._digests[iteration]:
            raise IntegrityError(f"stored batch {iteration} no longer matches its digest")
        return raw

    def corrupt(self, iteration: int, offset: int = 12):
        raw = bytearray(self._files[iteration])
        raw[offset % len(raw)] ^= 0x01
        self._files[iteration] = bytes(raw)

    def __contains__(self, iteration):
        return iteration in self._files


def _codec_encode(codec, vec):
    try:
        return codec.encode_vector(vec)
    except CodecRangeError as e:
        raise TrainingFault(f"parameter outside codec range: {e}") from None


class RegistryNode:
    """Generator, discriminator and merger applications of one registry."""

    def __init__(self, sim: "Simulation", ordinal: int, g_init: ModelParams, d_init: ModelParams):
        self.sim = sim
        self.ordinal = ordinal
        self.name = member_name(ordinal)
        cfg = sim.config
        rng = Prng(cfg.seed, f"registry-{ordinal}")
        self.noise_rng = rng.substream("noise")
        self.data_rng = rng.substream("data")
        self.enc_rng = rng.substream("encrypt")
        self.dataset_rng = rng.substream("dataset")
        self.files = LocalFileStore()
        self.g = g_init.copy()
        self.d = d_init.copy()
        self.g_iteration = 0
        self.d_iteration = 0
        self.noise = {}
        self.fake_grad = {}  # handed from discriminator to generator inside the registry
        self.waiting_for_average = False
        self.last_losses = None
        self.last_average = None  # (round, height)
        self.halted = False
        self.done = {"G": False, "D": False, "M": False}
        self.rejections = []
        self.violations = []
        ledger = sim.ledger
        ch = C.GAN_CHANNEL
        me = self.ordinal
        self.sub_g = ledger.subscribe(ch, self.name, {"GeneratorLoss", "PartialDecryptionPosted", "Stop"},
                                      lambda ev: ev.type != "GeneratorLoss" or ev.get("registry") == me)
        self.sub_d = ledger.subscribe(ch, self.name, {"GeneratorRecorded", "PartialDecryptionPosted", "Stop"},
                                      lambda ev: ev.type != "GeneratorRecorded" or ev.get("registry") == me)
        self.sub_m = ledger.subscribe(ch, self.name, {"MergeTrigger", "AveragedWeights", "Stop"})

    # -- helpers -----------------------------------------------------------

    @property
    def finished(self):
        return all(self.done.values())

    def _submit(self, contract, payload):
        self.sim.ledger.advance()
        return self.sim.ledger.submit(C.GAN_CHANNEL, self.name, contract, payload)

    def _stopped(self):
        return self.sim.ledger.query(C.GAN_CHANNEL, self.name, "stopped") is not None

    def _encrypt(self, vec):
        return encrypt_vector(self.sim.pk, _codec_encode(self.sim.codec, vec), self.enc_rng)

    def _combine(self, ev, role):
        """Combine the posted partial decryptions of one averaged role into plaintext weights."""
        sim = self.sim
        round_ = ev.get("round")
        avg_tx = sim.gan_channel.get_tx(bytes.fromhex(ev.get("average_tx")))
        avg = next(a for a in avg_tx.payload_json()["averages"] if a["role"] == role)
        cv = CipherVector.from_hex(avg["enc_sum"])
        comps = {}
        for q in sim.consortium.participants:
            ref = sim.ledger.query_json(C.GAN_CHANNEL, self.name, f"partial/{round_}/{q}")
            ptx = sim.gan_channel.get_tx(bytes.fromhex(ref["tx"]))
            comps[q] = list(CipherVector.from_hex(ptx.payload_json()["components"][role]).values)
        sums = combine_partials_vector(comps, cv, sim.pk, sim.share_cfg, sim.consortium.participants)
        n = avg_tx.payload_json()["participant_count"]
        flat = sim.codec.decode_vector(sums) / n
        if sim.shadow is not None:
            sim.shadow.append({"kind": "combined", "registry": self.ordinal, "round": round_, "role": role,
                               "sums": sums, "average": flat})
        return flat, round_, sim.gan_channel.tx_height(avg_tx.tx_id)

    # -- generator -----------------------------------------------------------

    def _generate(self, grads_flat):
        sim = self.sim
        it = self.g_iteration + 1
        if it > sim.config.max_iterations:
            self.done["G"] = True
            return
        noise = self.noise_rng.normal((sim.config.gan.batch_size, sim.config.gan.noise_dim))
        batch = generator_forward(self.g, noise, it)
        digest = self.files.put(it, batch)
        self.noise[it] = noise
        weights = self.g.flatten()
        recorded = weights
        forge = sim.config.fault("forge-record", self.ordinal)
        if forge is not None and forge.iteration == it:
            recorded = weights.copy()
            recorded[0] += 0.01
        rec = TrainingRecord(self.ordinal, it, "G", self._encrypt(recorded), self._encrypt(grads_flat), digest)
        if self._stopped():
            self.done["G"] = True
            return
        try:
            self._submit("record_generator", rec.to_payload())
        except ContractRejected:
            if self._stopped():
                self.done["G"] = True
                return
            raise
        self.g_iteration = it
        if sim.shadow is not None:
            sim.shadow.append({"kind": "G", "registry": self.ordinal, "iteration": it, "weights": weights,
                               "grads": np.asarray(grads_flat, dtype=np.float64), "fake": batch.rows})
        tamper = sim.config.fault("tamper-fake-data", self.ordinal)
        if tamper is not None and tamper.iteration == it:
            self.files.corrupt(it)
        self.noise.pop(it - 2, None)

    def step_generator(self) -> bool:
        if self.done["G"]:
            return False
        if self.g_iteration == 0:
            self._generate(np.zeros(self.g.n_params))
            return True
        ev = self.sub_g.poll()
        if ev is None:
            return False
        K = self.sim.consortium.merge_interval
        if ev.type == "Stop":
            self.done["G"] = True
        elif ev.type == "GeneratorLoss":
            i = ev.get("iteration")
            if ev.get("accepted"):
                self.done["G"] = True
            elif i % K == 0:
                self.waiting_for_average = True
            else:
                grads = generator_gradients(self.g, self.noise[i], self.fake_grad.pop(i))
                self.g = sgd_step(self.g, grads, self.sim.config.gan.lr)
                self._generate(grads.flatten())
        elif ev.type == "PartialDecryptionPosted" and ev.get("complete"):
            flat, round_, height = self._combine(ev, "G")
            self.g = self.g.unflatten(flat)
            self.last_average = (round_, height)
            self.sim.record_global(round_, height, self.g)
            if self.sim.shadow is not None:
                self.sim.shadow.append({"kind": "applied", "role": "G", "registry": self.ordinal,
                                        "round": round_, "weights": self.g.flatten()})
            self.waiting_for_average = False
            self._generate(np.zeros(self.g.n_params))
        return True

    # -- discriminator -------------------------------------------------------

    def step_discriminator(self) -> bool:
        if self.done["D"]:
            return False
        ev = self.sub_d.poll()
        if ev is None:
            return False
        sim = self.sim
        if ev.type == "Stop":
            self.done["D"] = True
        elif ev.type == "PartialDecryptionPosted" and ev.get("complete"):
            flat, round_, _ = self._combine(ev, "D")
            self.d = self.d.unflatten(flat)
            if sim.shadow is not None:
                sim.shadow.append({"kind": "applied", "role": "D", "registry": self.ordinal,
                                   "round": round_, "weights": self.d.flatten()})
        elif ev.type == "GeneratorRecorded":
            self._discriminate(ev.get("iteration"))
        return True

    def _discriminate(self, it):
        sim = self.sim
        onchain = sim.ledger.query_json(C.GAN_CHANNEL, self.name, f"rec/G/{self.ordinal}/{it}")
        raw = self.files.read(it)
        computed = hashlib.sha256(raw).hexdigest()
        if computed != onchain["synthetic_data_hash"]:
            self._submit("report_violation", {"registry": self.ordinal, "iteration": it,
                                              "kind": "synthetic-hash-mismatch",
                                              "onchain_hash": onchain["synthetic_data_hash"],
                                              "computed_hash": computed})
            self.violations.append({"registry": self.ordinal, "iteration": it, "kind": "synthetic-hash-mismatch"})
            self.halted = True
            self.done = {k: True for k in self.done}
            return
        fake = batch_from_bytes(raw)
        real = sim.config.data.sample(self.data_rng, sim.config.gan.batch_size)
        out = discriminator_pass(self.d, real, fake)
        weights = self.d.flatten()
        grads = out.grads.flatten()
        rec = TrainingRecord(self.ordinal, it, "D", self._encrypt(weights), self._encrypt(grads),
                             bytes.fromhex(computed), hashlib.sha256(batch_bytes(real)).digest(),
                             out.d_loss, out.g_loss)
        if self._stopped():
            self.done["D"] = True
            return
        try:
            self._submit("record_discriminator", rec.to_payload())
        except ContractRejected:
            if self._stopped():
                self.done["D"] = True
                return
            raise
        self.d_iteration = it
        self.last_losses = (out.d_loss, out.g_loss)
        self.fake_grad[it] = out.fake_grad
        if sim.shadow is not None:
            sim.shadow.append({"kind": "D", "registry": self.ordinal, "iteration": it, "weights": weights,
                               "grads": grads, "real": real, "fake": fake,
                               "d_loss": out.d_loss, "g_loss": out.g_loss})
        self.d = sgd_step(self.d, out.grads, sim.config.gan.lr)

    # -- merger -------------------------------------------------------------------

    def step_merger(self) -> bool:
        if self.done["M"]:
            return False
        ev = self.sub_m.poll()
        if ev is None:
            return False
        if ev.type == "Stop":
            self.done["M"] = True
        elif ev.type == "MergeTrigger":
            self._merge(ev)
        elif ev.type == "AveragedWeights":
            self._post_partial(ev)
        return True

    def _merge(self, ev):
        sim = self.sim
        if self._stopped():
            return
        round_ = ev.get("round")
        avgs = []
        for role, key in (("G", "generator"), ("D", "discriminator")):
            txs = ev.get(key)
            vecs = [CipherVector.from_hex(sim.gan_channel.get_tx(bytes.fromhex(t)).payload_json()["enc_weights"])
                    for t in txs]
            total = sum_vectors(sim.pk, vecs)
            if role == "G" and sim.config.fault("byzantine-merger", self.ordinal):
                # swap in a fresh encryption of zero for the first element
                vals = list(total.values)
                vals[0] = encrypt_vector(sim.pk, [0], self.enc_rng).values[0]
                total = CipherVector(tuple(vals), total.key_digest, total.width)
            avgs.append(C.AverageRecord(round_, role, total, sim.consortium.n_members,
                                        [bytes.fromhex(t) for t in txs]))
        try:
            self._submit("record_average", C.average_payload(round_, avgs))
        except ContractRejected as e:
            self.rejections.append({"registry": self.ordinal, "round": round_, "contract": "record_average",
                                    "reason": e.reason, "tx": e.tx_id.hex()})

    def _post_partial(self, ev):
        sim = self.sim
        if self.ordinal not in sim.consortium.participants:
            return
        round_ = ev.get("round")
        avg_tx = sim.gan_channel.get_tx(bytes.fromhex(ev.get("tx")))
        share = SecretShare.from_bytes(sim.ledger.get_private(C.KEY_CHANNEL, self.name, self.name, "key_share"))
        comps = {}
        for a in avg_tx.payload_json()["averages"]:
            cv = CipherVector.from_hex(a["enc_sum"])
            vals = partial_decrypt_vector(share, cv, sim.pk, sim.share_cfg, sim.consortium.participants)
            comps[a["role"]] = CipherVector(tuple(vals), sim.pk.digest, sim.pk.width).hex()
        self._submit("post_partial", {"round": round_, "share_index": share.index,
                                      "participants": list(sim.consortium.participants), "components": comps})

    def final_dataset(self, params: ModelParams, rows: int) -> np.ndarray:
        noise = self.dataset_rng.normal((rows, params.weights[0].shape[1]))
        return generator_forward(params, noise).rows


@dataclass
class SimulationResult:
    config: SimulationConfig
    ledger: Ledger
    nodes: list
    summary: dict
    final_generator: ModelParams | None
    datasets: dict
    shadow: list | None = None
    transcript_path: str | None = None

    def transcript_lines(self):
        return list(self.ledger.transcript_lines())

    def transcript_bytes(self) -> bytes:
        return "".join(line + "\n" for line in self.ledger.transcript_lines()).encode()

    def shares(self) -> dict:
        """Each registry's exported key share bytes, keyed by ordinal."""
        return {n.ordinal: self.ledger.get_private(C.KEY_CHANNEL, n.name, n.name, "key_share")
                for n in self.nodes}


class Simulation:
    def __init__(self, config: SimulationConfig, test_mode: bool = False):
        self.config = config
        self.consortium = config.consortium
        self.shadow = [] if test_mode else None
        entropy = Prng(config.seed, "ledger-entropy").randbits(64)
        self.ledger = Ledger(entropy)
        dim = config.data.data_dim
        g_arch = config.gan.generator_arch(dim)
        d_arch = config.gan.discriminator_arch(dim)
        init_rng = Prng(config.seed, "consortium-init")
        self.g_init = g_arch.init(init_rng.substream("generator"), config.gan.init_scale)
        self.d_init = d_arch.init(init_rng.substream("discriminator"), config.gan.init_scale)
        extra = {
            "gan": self.config.to_dict()["gan"],
            "n_params": {"G": self.g_init.n_params, "D": self.d_init.n_params},
            "architecture": {"G": self.g_init.architecture_digest().hex(),
                             "D": self.d_init.architecture_digest().hex()},
        }
        self.pk = C.initialise_consortium(self.ledger, self.consortium, extra)
        self.share_cfg = ShareConfig.from_dict(self.ledger.query_json(C.KEY_CHANNEL, member_name(1), "share_config"))
        self.codec = self.consortium.codec(self.pk)
        self.gan_channel = self.ledger.channel(C.GAN_CHANNEL)
        self.nodes = [RegistryNode(self, r, self.g_init, self.d_init)
                      for r in range(1, self.consortium.n_members + 1)]
        self.global_model = None  # (round, height, params)

    def record_global(self, round_, height, params):
        if self.global_model is None or round_ > self.global_model[0]:
            self.global_model = (round_, height, params.copy())

    def _pass(self) -> bool:
        progressed = False
        for node in self.nodes:
            for step in (node.step_generator, node.step_discriminator, node.step_merger):
                progressed |= step()
        return progressed

    def _stall_reason(self):
        halted = [n.ordinal for n in self.nodes if n.halted]
        if halted:
            return f"registries {halted} halted after a violation; the remaining registries cannot complete a merge round"
        capped = [n.ordinal for n in self.nodes if n.g_iteration >= self.config.max_iterations]
        if capped:
            return f"iteration cap {self.config.max_iterations} reached without a Stop"
        waiting = {n.ordinal: [k for k, v in n.done.items() if not v] for n in self.nodes}
        return f"no event fired for a full scheduler pass; waiting applications: {waiting}"

    def run(self) -> SimulationResult:
        while True:
            if not self._pass():
                break
        stopped = self.ledger.query_json(C.GAN_CHANNEL, member_name(1), "stopped")
        result = self._result(stopped)
        if stopped is None or not all(n.finished for n in self.nodes):
            reason = self._stall_reason()
            result.summary["status"] = "stalled"
            result.summary["stall_reason"] = reason
            raise StallError(reason, result)
        return result

    def _result(self, stopped) -> SimulationResult:
        final = self.global_model[2] if self.global_model else None
        datasets = {}
        if final is not None:
            for node in self.nodes:
                datasets[node.ordinal] = node.final_dataset(final, self.config.dataset_rows)
        stop = None
        if stopped is not None:
            stop = dict(stopped)
            stop["height"] = self.gan_channel.tx_height(bytes.fromhex(stopped["tx"]))
        summary = {
            "status": "stopped",
            "config_digest": self.config.digest,
            "seed": self.config.seed,
            "merge_rounds": self.ledger.query_json(C.GAN_CHANNEL, member_name(1), "rounds_completed", 0),
            "stop": stop,
            "final_model_height": self.global_model[1] if self.global_model else None,
            "final_model_round": self.global_model[0] if self.global_model else None,
            "iterations": {str(n.ordinal): n.g_iteration for n in self.nodes},
            "final_losses": {str(n.ordinal): (None if n.last_losses is None else
                                              {"d_loss": n.last_losses[0], "g_loss": n.last_losses[1]})
                             for n in self.nodes},
            "rejected_averages": [r for n in self.nodes for r in n.rejections],
            "violations": [v for n in self.nodes for v in n.violations],
            "halted": [n.ordinal for n in self.nodes if n.halted],
            "blocks": {cid: ch.height for cid, ch in sorted(self.ledger.channels.items())},
        }
        return SimulationResult(self.config, self.ledger, self.nodes, summary, final, datasets, self.shadow)


def run_simulation(config: SimulationConfig, out_dir=None, test_mode: bool = False) -> SimulationResult:
    """Initialise the consortium and drive every registry until Stop.

    Raises :class:`StallError` (carrying the partial result) if training
    cannot finish.  When ``out_dir`` is given the transcript, share files,
    datasets and summary are written there, even for a stalled run.
    """
    sim = Simulation(config, test_mode)
    try:
        result = sim.run()
    except StallError as e:
        if out_dir is not None and e.result is not None:
            write_outputs(e.result, out_dir)
        raise
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: SimulationResult, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {"transcript": os.path.join(out_dir, "transcript.jsonl")}
    result.ledger.export_transcript(paths["transcript"])
    result.transcript_path = paths["transcript"]
    with open(paths["transcript"], "rb") as fh:
        result.summary["transcript_sha256"] = hashlib.sha256(fh.read()).hexdigest()
    share_dir = os.path.join(out_dir, "shares")
    os.makedirs(share_dir, exist_ok=True)
    paths["shares"] = []
    for ordinal, raw in sorted(result.shares().items()):
        p = os.path.join(share_dir, f"{member_name(ordinal)}.share")
        with open(p, "wb") as fh:
            fh.write(raw)
        paths["shares"].append(p)
    paths["datasets"] = []
    for ordinal, rows in sorted(result.datasets.items()):
        p = os.path.join(out_dir, f"synthetic-{member_name(ordinal)}.csv")
        write_dataset(p, rows, result.summary["config_digest"], result.summary["final_model_height"])
        paths["datasets"].append(p)
    paths["summary"] = os.path.join(out_dir, "summary.json")
    with open(paths["summary"], "w", encoding="utf-8") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def write_dataset(path, rows: np.ndarray, config_digest: str, model_height):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_digest={config_digest}\n")
        fh.write(f"# final_model_height={model_height}\n")
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(rows.shape[1])])
        for row in rows:
            w.writerow([repr(float(x)) for x in row])


def read_dataset(path):
    """Returns (header dict, rows)."""
    header = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            header[k] = v
        else:
            body.append(line)
    rows = np.array([[float(x) for x in r] for r in csv.reader(body[1:])], dtype=np.float64)
    return header, rows
