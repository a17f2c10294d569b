"""External auditor: rebuild the master key from collected shares, decrypt the
transcript and check integrity, accountability and average correctness.

The audit needs only the transcript file and the share files.

Report JSON schema::

    {
      "verdict": "pass" | "fail",
      "chain_integrity": {channel: {"ok": bool, "first_bad_height": int | null, "blocks": int}},
      "parse_errors": [{"line": int, "error": str}],
      "records_decrypted": int,
      "records_expected": int,
      "average_checks": [{"round", "role", "max_deviation", "tolerance", "ok",
                          "threshold_match": bool | null, "tx", "height"}],
      "hash_crosschecks": [{"registry", "iteration", "ok"}],
      "sequence_checks": [{"registry", "role", "iterations", "ok"}],
      "replay_checks": {"enabled": bool, "checked": int, "failed": int},
      "violations": [{"source": "onchain" | "audit", "kind", "registry", "iteration" | "round",
                      "height", "detail"}],
      "notes": [str]
    }

``onchain`` violations are incidents the protocol itself detected and
recorded (rejected averages, hash-mismatch reports); they are history and do
not fail the verdict.  ``audit`` violations are discrepancies found by the
auditor and always fail it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import contracts as C
from .contracts import ordinal_of
from .ledger import Block, fold_state, verify_blocks
from .phe import (Ciphertext, CipherVector, FixedPointCodec, PheError, PheKeyPair, PublicKey, TEST_PLAINTEXT,
                  combine_partials_vector, decrypt_vector, decrypt_with_exponent, keypair_from_exponent)
from .secret_sharing import SecretShare, ShareConfig, SharingError, reconstruct

TRAINING_CONTRACTS = ("record_generator", "record_discriminator")


class AuditError(Exception):
    pass


class AuditInputError(AuditError):
    """Missing, insufficient or malformed audit inputs."""


class WrongKeyError(AuditError):
    """The reconstructed key does not decrypt the on-chain test ciphertext."""


@dataclass
class Transcript:
    blocks: dict  # channel -> list of Block in file order
    parse_errors: list = field(default_factory=list)
    lines: int = 0

    def chain(self, channel):
        return self.blocks.get(channel, [])


def parse_transcript(path_or_lines) -> Transcript:
    """Parse transcript JSON lines.  Bad lines are reported, not fatal."""
    if isinstance(path_or_lines, (str, bytes)) or hasattr(path_or_lines, "__fspath__"):
        with open(path_or_lines, encoding="utf-8", errors="replace") as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(path_or_lines)
    out = Transcript({})
    out.lines = len(lines)
    for no, line in enumerate(lines):
        obj = None
        try:
            obj = json.loads(line)
            if obj["seq"] != no:
                raise ValueError(f"sequence number {obj['seq']} at line {no}")
            tx = bytes.fromhex(obj["tx"]) if obj["tx"] is not None else None
            block = Block(int(obj["height"]), bytes.fromhex(obj["prev_hash"]),
                          (tx,) if tx is not None else (), bytes.fromhex(obj["block_hash"]))
            events = [{"type": t, "payload": json.loads(b)} for x in block.transactions() for t, b in x.events]
            if events != obj["events"]:
                raise ValueError("event copy does not match the transaction's events")
            channel = obj["channel"]
            if not isinstance(channel, str):
                raise ValueError("channel must be a string")
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
            out.parse_errors.append({"line": no, "error": str(e),
                                     "channel": _maybe(obj, "channel"), "height": _maybe(obj, "height")})
            continue
        out.blocks.setdefault(channel, []).append(block)
    return out


def _maybe(obj, key):
    try:
        return obj[key]
    except (KeyError, TypeError):
        return None


def chain_integrity(tr: Transcript) -> dict:
    result = {}
    bad_lines = {}
    for err in tr.parse_errors:
        if isinstance(err.get("channel"), str) and isinstance(err.get("height"), int):
            bad_lines.setdefault(err["channel"], []).append(err["height"])
    for cid in sorted(set(tr.blocks) | set(bad_lines)):
        blocks = tr.blocks.get(cid, [])
        bad = verify_blocks(blocks)
        if cid in bad_lines:
            first = min(bad_lines[cid])
            bad = first if bad is None else min(bad, first)
        result[cid] = {"ok": bad is None, "first_bad_height": bad, "blocks": len(blocks)}
    return result


def key_material(tr: Transcript):
    """Public key, share config and test ciphertext from the key channel's history."""
    state = fold_state(tr.chain(C.KEY_CHANNEL))
    try:
        pk = PublicKey.from_dict(json.loads(state["public_key"]))
        share_cfg = ShareConfig.from_dict(json.loads(state["share_config"]))
        tc = json.loads(state["test_ciphertext"])
    except KeyError as e:
        raise AuditInputError(f"key channel lacks {e}") from None
    return pk, share_cfg, Ciphertext(int(tc["value"], 16), bytes.fromhex(tc["key_digest"]))


def load_shares(paths) -> list:
    shares = []
    for p in paths:
        try:
            with open(p, "rb") as fh:
                shares.append(SecretShare.from_bytes(fh.read()))
        except OSError as e:
            raise AuditInputError(f"cannot read share file {p}: {e}") from None
        except SharingError as e:
            raise AuditInputError(f"{p}: {e}") from None
    return shares


def collect_and_reconstruct(shares, share_cfg: ShareConfig, pk: PublicKey, test_ct: Ciphertext) -> PheKeyPair:
    """Rebuild the master key from at least t shares and check it on the test ciphertext."""
    try:
        d = reconstruct(shares, share_cfg)
    except SharingError as e:
        raise AuditInputError(str(e)) from None
    try:
        ok = decrypt_with_exponent(pk, d, test_ct) == TEST_PLAINTEXT
    except PheError:
        ok = False
    if not ok:
        raise WrongKeyError("reconstructed key does not decrypt the initialisation test ciphertext")
    return keypair_from_exponent(pk.n, d)


@dataclass
class AuditReport:
    chain_integrity: dict
    parse_errors: list = field(default_factory=list)
    records_decrypted: int = 0
    records_expected: int = 0
    average_checks: list = field(default_factory=list)
    hash_crosschecks: list = field(default_factory=list)
    sequence_checks: list = field(default_factory=list)
    replay_checks: dict = field(default_factory=lambda: {"enabled": False, "checked": 0, "failed": 0})
    violations: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def chain_ok(self):
        return all(v["ok"] for v in self.chain_integrity.values()) and not self.parse_errors

    @property
    def verdict(self) -> str:
        ok = (self.chain_ok
              and self.records_decrypted == self.records_expected
              and all(a["ok"] for a in self.average_checks)
              and all(h["ok"] for h in self.hash_crosschecks)
              and all(s["ok"] for s in self.sequence_checks)
              and not any(v["source"] == "audit" for v in self.violations))
        return "pass" if ok else "fail"

    def bad_heights(self) -> dict:
        return {cid: v["first_bad_height"] for cid, v in self.chain_integrity.items() if not v["ok"]}

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict, "chain_integrity": self.chain_integrity, "parse_errors": self.parse_errors,
            "records_decrypted": self.records_decrypted, "records_expected": self.records_expected,
            "average_checks": self.average_checks, "hash_crosschecks": self.hash_crosschecks,
            "sequence_checks": self.sequence_checks, "replay_checks": self.replay_checks,
            "violations": self.violations, "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        out = [f"audit verdict: {self.verdict.upper()}", "chain integrity:"]
        for cid, v in sorted(self.chain_integrity.items()):
            state = "ok" if v["ok"] else f"BROKEN at height {v['first_bad_height']}"
            out.append(f"  {cid}: {state} ({v['blocks']} blocks)")
        for e in self.parse_errors:
            out.append(f"  parse error, line {e['line']}: {e['error']}")
        out.append(f"records decrypted: {self.records_decrypted} / {self.records_expected}")
        if self.average_checks:
            worst = max(a["max_deviation"] for a in self.average_checks)
            bad = sum(not a["ok"] for a in self.average_checks)
            out.append(f"average checks: {len(self.average_checks)} ({bad} failed), max deviation {worst:.3g}")
        if self.hash_crosschecks:
            out.append(f"hash cross-checks: {len(self.hash_crosschecks)} "
                       f"({sum(not h['ok'] for h in self.hash_crosschecks)} failed)")
        if self.sequence_checks:
            out.append(f"sequence checks: {len(self.sequence_checks)} "
                       f"({sum(not s['ok'] for s in self.sequence_checks)} failed)")
        rc = self.replay_checks
        if rc["enabled"]:
            out.append(f"replay checks: {rc['checked']} ({rc['failed']} failed)")
        out.append(f"violations: {len(self.violations)}")
        for v in self.violations:
            where = f"iteration {v.get('iteration')}"
            if "round" in v:
                where = f"round {v['round']} (" + where + ")"
            out.append(f"  [{v['source']}] {v['kind']}: registry {v.get('registry')}, {where}, "
                       f"height {v.get('height')}: {v.get('detail', '')}")
        for n in self.notes:
            out.append(f"note: {n}")
        return "\n".join(out)


class _Auditor:
    def __init__(self, tr: Transcript, kp: PheKeyPair, replay: bool):
        self.tr = tr
        self.kp = kp
        self.pk = kp.public
        self.replay = replay
        self.records = {}  # (role, r, i) -> dict
        self.averages = {}  # round -> {"G": array, "D": array}
        self.report = None

    def _decrypt(self, hex_str):
        cv = CipherVector.from_hex(hex_str)
        if cv.key_digest != self.pk.digest:
            raise PheError("vector under a foreign key")
        return cv, decrypt_vector(self.kp, cv)

    def run(self) -> AuditReport:
        rep = AuditReport(chain_integrity(self.tr), list(self.tr.parse_errors))
        self.report = rep
        if not rep.chain_ok:
            rep.notes.append("chain integrity failed; records were not decrypted")
            return rep
        blocks = self.tr.chain(C.GAN_CHANNEL)
        txs = [(b.height, t) for b in blocks for t in b.transactions()]
        cfg_tx = next((t for _, t in txs if t.contract == "init_consortium" and t.valid), None)
        if cfg_tx is None:
            rep.notes.append("no consortium initialisation on the GAN channel")
            rep.records_expected = 1
            return rep
        cfg = cfg_tx.payload_json()
        self.cc = C.ConsortiumConfig.from_dict(cfg["consortium"])
        self.lr = cfg["gan"]["lr"]
        self.codec = FixedPointCodec(self.pk.n, self.cc.scale, self.cc.bound)
        share_cfg = ShareConfig.from_dict(cfg["share_config"])
        stop_height = None
        partials = {}
        for height, tx in txs:
            if not tx.valid:
                self._invalid(height, tx)
                continue
            c = tx.contract
            if stop_height is not None and c in TRAINING_CONTRACTS + ("record_average",):
                rep.violations.append({"source": "audit", "kind": "record-after-stop", "height": height,
                                       "registry": ordinal_of(tx.submitter), "detail": c})
            if c in TRAINING_CONTRACTS:
                rep.records_expected += 1
                self._training(height, tx)
            elif c == "record_average":
                rep.records_expected += 1
                self._average(height, tx)
            elif c == "post_partial":
                p = tx.payload_json()
                partials.setdefault(p["round"], {})[p["share_index"]] = p
            elif c == "report_violation":
                p = tx.payload_json()
                rep.violations.append({"source": "onchain", "kind": p["kind"], "registry": p["registry"],
                                       "iteration": p["iteration"], "height": height,
                                       "detail": f"on-chain hash {p['onchain_hash'][:16]}..., local batch "
                                                 f"hashes to {p['computed_hash'][:16]}..."})
            for etype, _ in tx.events:
                if etype == "Stop" and stop_height is None:
                    stop_height = height
        self._threshold_checks(partials, share_cfg)
        self._crosschecks()
        self._sequences()
        if self.replay:
            self._replay()
        return rep

    def _invalid(self, height, tx):
        reason = tx.status.split(": ", 1)[-1]
        try:
            p = tx.payload_json()
        except ValueError:
            p = {}
        v = {"source": "onchain", "kind": f"rejected-{tx.contract.replace('_', '-')}", "height": height,
             "registry": ordinal_of(tx.submitter), "detail": reason}
        if tx.contract == "record_average" and "round" in p:
            v["round"] = p["round"]
            v["iteration"] = p["round"] * self.cc.merge_interval
            v["kind"] = "rejected-average"
            v["detail"] = reason + self._poison_detail(p)
        elif "iteration" in p:
            v["iteration"] = p["iteration"]
        self.report.violations.append(v)

    def _poison_detail(self, p):
        """Which elements of a rejected sum differ from the honest sum of its claimed contributors."""
        parts = []
        for avg in p.get("averages", []):
            try:
                _, got = self._decrypt(avg["enc_sum"])
                contrib = [self.records[(avg["role"], r + 1, p["round"] * self.cc.merge_interval)]
                           for r in range(self.cc.n_members)]
            except (KeyError, PheError, ValueError):
                continue
            want = np.sum([self.codec.decode_vector(c["weights_raw"]) for c in contrib], axis=0)
            diff = np.flatnonzero(np.abs(self.codec.decode_vector(got) - want) > 1.0 / self.cc.scale)
            if len(diff):
                parts.append(f"{avg['role']} elements {diff[:5].tolist()} differ from the recorded ciphertexts")
        return ("; " + "; ".join(parts)) if parts else ""

    def _training(self, height, tx):
        p = tx.payload_json()
        role, r, i = p["role"], p["registry"], p["iteration"]
        try:
            _, w = self._decrypt(p["enc_weights"])
            _, g = self._decrypt(p["enc_gradients"])
        except (PheError, ValueError) as e:
            self.report.violations.append({"source": "audit", "kind": "undecryptable-record", "registry": r,
                                           "iteration": i, "height": height, "detail": str(e)})
            return
        self.report.records_decrypted += 1
        self.records[(role, r, i)] = {"weights": self.codec.decode_vector(w), "weights_raw": w,
                                      "grads": self.codec.decode_vector(g), "height": height,
                                      "synthetic": p["synthetic_data_hash"], "tx": tx.tx_id.hex()}

    def _average(self, height, tx):
        p = tx.payload_json()
        round_, count = p["round"], p["participant_count"]
        tol = count / (2 * self.cc.scale)
        decoded = {}
        for avg in p["averages"]:
            role = avg["role"]
            try:
                _, sums = self._decrypt(avg["enc_sum"])
            except (PheError, ValueError) as e:
                self.report.violations.append({"source": "audit", "kind": "undecryptable-average",
                                               "round": round_, "height": height, "detail": str(e)})
                return
            mean = self.codec.decode_vector(sums) / count
            contrib = []
            for t in avg["contributors"]:
                rec = next((v for v in self.records.values() if v["tx"] == t), None)
                if rec is None:
                    break
                contrib.append(rec["weights"])
            if len(contrib) != len(avg["contributors"]):
                dev, ok = float("inf"), False
            else:
                dev = float(np.max(np.abs(mean - np.mean(contrib, axis=0))))
                ok = dev <= tol
            decoded[role] = mean
            self.report.average_checks.append({"round": round_, "role": role, "max_deviation": dev,
                                               "tolerance": tol, "ok": ok, "threshold_match": None,
                                               "tx": tx.tx_id.hex(), "height": height,
                                               "enc_sum": avg["enc_sum"], "sums": sums})
        self.report.records_decrypted += 1
        self.averages.setdefault(round_, decoded)

    def _threshold_checks(self, partials, share_cfg):
        """Combined partial decryptions must equal full-key decryption of the canonical sum."""
        participants = self.cc.participants
        canonical = {}
        for a in self.report.average_checks:
            canonical.setdefault((a["round"], a["role"]), a)
        for (round_, role), a in canonical.items():
            posted = partials.get(round_, {})
            if tuple(sorted(posted)) != participants:
                continue
            comps = {q: list(CipherVector.from_hex(posted[q]["components"][role]).values) for q in participants}
            try:
                combined = combine_partials_vector(comps, CipherVector.from_hex(a["enc_sum"]), self.pk,
                                                   share_cfg, participants)
                a["threshold_match"] = combined == a["sums"]
            except PheError:
                a["threshold_match"] = False
            if not a["threshold_match"]:
                a["ok"] = False
                self.report.violations.append({"source": "audit", "kind": "bad-partial-decryption",
                                               "round": round_, "height": a["height"],
                                               "detail": f"{role} partials do not combine to the sum"})
        for a in self.report.average_checks:
            a.pop("enc_sum", None)
            a.pop("sums", None)

    def _crosschecks(self):
        for (role, r, i), rec in sorted(self.records.items()):
            if role != "D":
                continue
            gen = self.records.get(("G", r, i))
            ok = gen is not None and gen["synthetic"] == rec["synthetic"]
            self.report.hash_crosschecks.append({"registry": r, "iteration": i, "ok": ok})
            if not ok:
                self.report.violations.append({"source": "audit", "kind": "synthetic-hash-crosscheck",
                                               "registry": r, "iteration": i, "height": rec["height"],
                                               "detail": "discriminator record does not match generator digest"})

    def _sequences(self):
        seqs = {}
        for role, r, i in self.records:
            seqs.setdefault((r, role), []).append(i)
        for (r, role), its in sorted(seqs.items()):
            its.sort()
            ok = its == list(range(1, len(its) + 1))
            self.report.sequence_checks.append({"registry": r, "role": role, "iterations": len(its), "ok": ok})

    def _replay(self):
        """Re-run the local SGD bookkeeping: each recorded weight vector must follow from the previous one."""
        K, S, lr = self.cc.merge_interval, self.cc.scale, self.lr
        tol = (2 + lr) / (2 * S) * 1.01 + 1e-12
        rc = self.report.replay_checks
        rc["enabled"] = True
        for (role, r, i), rec in sorted(self.records.items()):
            if role == "G":
                prev = self.records.get(("G", r, i - 1))
                if prev is None:
                    continue
                if (i - 1) % K == 0:
                    expect = self.averages.get((i - 1) // K, {}).get("G")
                else:
                    expect = prev["weights"] - lr * rec["grads"]
                where, ref = i, rec
            else:
                nxt = self.records.get(("D", r, i + 1))
                if nxt is None:
                    continue
                if i % K == 0:
                    expect = self.averages.get(i // K, {}).get("D")
                else:
                    expect = rec["weights"] - lr * rec["grads"]
                where, ref = i + 1, nxt
            if expect is None:
                continue
            rc["checked"] += 1
            dev = float(np.max(np.abs(ref["weights"] - expect)))
            if dev > tol:
                rc["failed"] += 1
                self.report.violations.append({
                    "source": "audit", "kind": "replay-mismatch", "registry": r, "iteration": where,
                    "height": ref["height"],
                    "detail": f"{role} weights deviate by {dev:.3g} from the replayed update (tolerance {tol:.3g})"})


def verify_transcript(tr: Transcript, kp: PheKeyPair, replay: bool = True) -> AuditReport:
    return _Auditor(tr, kp, replay).run()


def audit(transcript, share_paths=None, shares=None, replay: bool = True) -> AuditReport:
    """Full pipeline.  ``shares`` may be given directly instead of ``share_paths``."""
    tr = transcript if isinstance(transcript, Transcript) else parse_transcript(transcript)
    report = AuditReport(chain_integrity(tr), list(tr.parse_errors))
    if not report.chain_ok:
        report.notes.append("chain integrity failed; key reconstruction and decryption skipped")
        return report
    if shares is None:
        shares = load_shares(share_paths or [])
    pk, share_cfg, test_ct = key_material(tr)
    kp = collect_and_reconstruct(shares, share_cfg, pk, test_ct)
    return verify_transcript(tr, kp, replay)
