"""Simulated permissioned ledger: channels, hash-chained blocks, world state,
private data collections and ordered event delivery.

Every submission is executed against each member's replica of the world
state; the write sets, private writes and events must be byte-identical
on all replicas (unanimous endorsement) before the single sequencer
appends a block.  A contract that rejects its input still yields a block,
flagged INVALID and carrying no writes, so rejected attempts stay on the
record.

Canonical transaction bytes (all integers big-endian)::

    tx_id            32 bytes = SHA256(submitter | contract | payload | tick)
    submitter        u16 length + utf-8
    contract         u16 length + utf-8
    tick             u64
    payload          u32 length + bytes
    read_set         u32 count, each u16 length + utf-8 key
    write_set        u32 count, each u16 length + key, u8 present, u32 length + value
    events           u16 count, each u16 length + type, u32 length + canonical JSON
    status           u16 length + utf-8 ("VALID" or "INVALID: <reason>")

Block hash = SHA256(height:u64 | prev_hash | tx count:u32 | (u32 length + tx bytes)*).
The genesis block (height 0, zero prev_hash) holds one configuration
transaction naming the channel members and contracts.

Transcript export is JSON lines, one per block in global commit order::

    {"seq", "channel", "height", "prev_hash", "block_hash", "tx", "events"}

where ``tx`` is the canonical hex and ``events`` a decoded convenience copy.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import deque
from dataclasses import dataclass, field

from .modmath import Prng

ZERO_HASH = b"\x00" * 32

EVENT_TYPES = (
    "GeneratorRecorded",
    "DiscriminatorRecorded",
    "GeneratorLoss",
    "MergeTrigger",
    "AveragedWeights",
    "PartialDecryptionPosted",
    "Stop",
)

VALID = "VALID"


class LedgerError(Exception):
    pass


class ChannelExistsError(LedgerError):
    pass


class AuthorizationError(LedgerError):
    pass


class UnknownContractError(LedgerError):
    pass


class EndorsementError(LedgerError):
    """Replicas computed different results; nothing was committed."""


class ContractError(LedgerError):
    """Raised by contract code to reject a transaction."""


class ContractRejected(LedgerError):
    """The transaction was committed as INVALID."""

    def __init__(self, tx_id, reason):
        super().__init__(reason)
        self.tx_id = tx_id
        self.reason = reason


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


def _s16(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack(">H", len(b)) + b


def _b32(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def compute_tx_id(submitter: str, contract: str, payload: bytes, tick: int) -> bytes:
    return sha256(_s16(submitter), _s16(contract), _b32(payload), struct.pack(">Q", tick))


@dataclass(frozen=True)
class Transaction:
    tx_id: bytes
    submitter: str
    contract: str
    tick: int
    payload: bytes
    read_set: tuple = ()
    write_set: tuple = ()  # ((key, value-or-None), ...)
    events: tuple = ()  # ((type, canonical json bytes), ...)
    status: str = VALID

    @property
    def valid(self) -> bool:
        return self.status == VALID

    def payload_json(self):
        return json.loads(self.payload)

    def to_bytes(self) -> bytes:
        out = [self.tx_id, _s16(self.submitter), _s16(self.contract), struct.pack(">Q", self.tick),
               _b32(self.payload), struct.pack(">I", len(self.read_set))]
        out += [_s16(k) for k in self.read_set]
        out.append(struct.pack(">I", len(self.write_set)))
        for k, v in self.write_set:
            out.append(_s16(k))
            out.append(b"\x00" + _b32(b"") if v is None else b"\x01" + _b32(v))
        out.append(struct.pack(">H", len(self.events)))
        for etype, body in self.events:
            out.append(_s16(etype))
            out.append(_b32(body))
        out.append(_s16(self.status))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Transaction":
        r = _Reader(raw)
        tx_id = r.take(32)
        submitter, contract = r.s16(), r.s16()
        tick = r.unpack(">Q")
        payload = r.b32()
        reads = tuple(r.s16() for _ in range(r.unpack(">I")))
        writes = []
        for _ in range(r.unpack(">I")):
            k = r.s16()
            present = r.take(1)
            v = r.b32()
            writes.append((k, v if present == b"\x01" else None))
        events = tuple((r.s16(), r.b32()) for _ in range(r.unpack(">H")))
        status = r.s16()
        if r.pos != len(raw):
            raise ValueError("trailing bytes after transaction")
        return cls(tx_id, submitter, contract, tick, payload, reads, tuple(writes), events, status)


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, k):
        if self.pos + k > len(self.raw):
            raise ValueError("truncated transaction")
        out = self.raw[self.pos:self.pos + k]
        self.pos += k
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def s16(self):
        return self.take(self.unpack(">H")).decode("utf-8")

    def b32(self):
        return self.take(self.unpack(">I"))


def block_hash(height: int, prev_hash: bytes, tx_bytes) -> bytes:
    h = hashlib.sha256(struct.pack(">Q", height) + prev_hash + struct.pack(">I", len(tx_bytes)))
    for t in tx_bytes:
        h.update(_b32(t))
    return h.digest()


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    tx_bytes: tuple
    block_hash: bytes

    @classmethod
    def make(cls, height, prev_hash, txs):
        raw = tuple(t.to_bytes() for t in txs)
        return cls(height, prev_hash, raw, block_hash(height, prev_hash, raw))

    def transactions(self):
        return [Transaction.from_bytes(t) for t in self.tx_bytes]


def verify_blocks(blocks) -> int | None:
    """First height whose hash or back-link is wrong, or None."""
    prev = ZERO_HASH
    for h, b in enumerate(blocks):
        if b is None or b.height != h or b.prev_hash != prev:
            return h
        if block_hash(b.height, b.prev_hash, b.tx_bytes) != b.block_hash:
            return h
        prev = b.block_hash
    return None


@dataclass(frozen=True)
class Event:
    type: str
    channel_id: str
    tx_id: bytes
    height: int
    seq: int
    payload: dict = field(hash=False, compare=False)

    def get(self, key, default=None):
        return self.payload.get(key, default)


class Subscription:
    """Ordered, exactly-once event queue for one member."""

    def __init__(self, member, types=None, predicate=None):
        self.member = member
        self.types = frozenset(types) if types else None
        self.predicate = predicate
        self._queue = deque()
        self.delivered = 0

    def matches(self, ev: Event) -> bool:
        if self.types is not None and ev.type not in self.types:
            return False
        return self.predicate is None or self.predicate(ev)

    def _deliver(self, ev):
        self._queue.append(ev)

    def pending(self) -> int:
        return len(self._queue)

    def poll(self):
        if not self._queue:
            return None
        self.delivered += 1
        return self._queue.popleft()

    def __iter__(self):
        while self._queue:
            yield self.poll()


class TxContext:
    """What a contract sees while executing against one replica."""

    def __init__(self, channel, replica: dict, tx_id: bytes, submitter: str, tick: int, entropy_seed: int):
        self.channel = channel
        self._state = replica
        self.tx_id = tx_id
        self.submitter = submitter
        self.tick = tick
        self._entropy_seed = entropy_seed
        self.reads = []
        self.writes = {}
        self.events = []
        self.private = {}

    @property
    def members(self):
        return self.channel.members

    def get(self, key: str):
        if key in self.writes:
            return self.writes[key]
        self.reads.append(key)
        return self._state.get(key)

    def get_json(self, key: str, default=None):
        raw = self.get(key)
        return default if raw is None else json.loads(raw)

    def put(self, key: str, value: bytes):
        self.writes[key] = value

    def put_json(self, key: str, obj):
        self.put(key, canonical_json(obj))

    def emit(self, event_type: str, payload: dict):
        if event_type not in EVENT_TYPES:
            raise LedgerError(f"unknown event type {event_type}")
        self.events.append((event_type, canonical_json(payload)))

    def put_private(self, member: str, key: str, value: bytes):
        if member not in self.channel.members:
            raise ContractError(f"{member} is not a member of {self.channel.channel_id}")
        self.private[(member, key)] = value
        self.put(pdc_hash_key(member, key), sha256(value).hex().encode())

    def get_tx(self, tx_id: bytes) -> Transaction:
        return self.channel.get_tx(tx_id)

    def entropy(self, label: str) -> Prng:
        """Randomness shared by all replicas but never written to the chain."""
        seed = int.from_bytes(sha256(struct.pack(">Q", self._entropy_seed), self.tx_id)[:8], "big")
        return Prng(seed, label)

    def result(self):
        return (tuple(sorted(self.writes.items())), tuple(self.events),
                tuple(sorted(self.private.items())))


def pdc_hash_key(member: str, key: str) -> str:
    return f"pdc/{member}/{key}"


class Channel:
    def __init__(self, ledger, channel_id, members, contracts):
        self.ledger = ledger
        self.channel_id = channel_id
        self.members = tuple(members)
        self.contracts = dict(contracts)
        self.blocks = []
        self.member_chains = {m: [] for m in self.members}
        self.replicas = {m: {} for m in self.members}
        self.pdc_stores = {m: {} for m in self.members}
        self.subscriptions = []
        self.replica_hooks = {}  # member -> fn(contract, result) -> result, fault injection
        self._tx_index = {}
        self._event_seq = 0
        genesis = Transaction(
            compute_tx_id("", "_genesis", b"", 0), "", "_genesis", 0,
            canonical_json({"channel": channel_id, "members": list(self.members),
                            "contracts": sorted(self.contracts)}))
        self._append([genesis], [])

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def world_state(self) -> dict:
        return self.replicas[self.members[0]]

    def get_tx(self, tx_id: bytes) -> Transaction:
        try:
            return self._tx_index[tx_id][1]
        except KeyError:
            raise ContractError(f"unknown transaction {tx_id.hex()}") from None

    def tx_height(self, tx_id: bytes) -> int:
        return self._tx_index[tx_id][0]

    def _append(self, txs, events):
        prev = self.blocks[-1].block_hash if self.blocks else ZERO_HASH
        block = Block.make(len(self.blocks), prev, txs)
        self.blocks.append(block)
        for m in self.members:
            self.member_chains[m].append(block)
        for t in txs:
            self._tx_index[t.tx_id] = (block.height, t)
        self.ledger._record_commit(self, block, txs)
        delivered = []
        for etype, body in events:
            ev = Event(etype, self.channel_id, txs[0].tx_id, block.height, self._event_seq, json.loads(body))
            self._event_seq += 1
            delivered.append(ev)
            for sub in self.subscriptions:
                if sub.matches(ev):
                    sub._deliver(ev)
        return block, delivered

    def state_hash(self, member=None) -> bytes:
        state = self.replicas[member or self.members[0]]
        h = hashlib.sha256()
        for k in sorted(state):
            h.update(_s16(k) + _b32(state[k]))
        return h.digest()


def fold_state(blocks) -> dict:
    """Rebuild a world state by applying every valid write set in order."""
    state = {}
    for b in blocks:
        for t in b.transactions():
            if not t.valid:
                continue
            for k, v in t.write_set:
                if v is None:
                    state.pop(k, None)
                else:
                    state[k] = v
    return state


def state_digest(state: dict) -> bytes:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(_s16(k) + _b32(state[k]))
    return h.digest()


class Ledger:
    """A consortium network hosting any number of channels."""

    def __init__(self, entropy_seed: int = 0):
        self.channels = {}
        self._entropy_seed = entropy_seed
        self._commit_log = []  # (channel_id, height) in global commit order
        self.tick = 0

    def advance(self, ticks: int = 1) -> int:
        self.tick += ticks
        return self.tick

    def create_channel(self, channel_id: str, members, contracts: dict) -> Channel:
        if channel_id in self.channels:
            raise ChannelExistsError(f"channel {channel_id!r} already exists")
        members = list(members)
        if not members:
            raise LedgerError("a channel needs at least one member")
        if len(set(members)) != len(members):
            raise LedgerError("duplicate channel member")
        ch = Channel(self, channel_id, members, contracts)
        self.channels[channel_id] = ch
        return ch

    def channel(self, channel_id) -> Channel:
        try:
            return self.channels[channel_id]
        except KeyError:
            raise LedgerError(f"no channel {channel_id!r}") from None

    def _record_commit(self, channel, block, txs):
        self._commit_log.append((channel.channel_id, block.height))

    def _execute(self, ch: Channel, tx_id, submitter, contract, payload):
        fn = ch.contracts[contract]
        results = {}
        reads = ()
        for m in ch.members:
            ctx = TxContext(ch, ch.replicas[m], tx_id, submitter, self.tick, self._entropy_seed)
            try:
                fn(ctx, payload)
                res = ("ok",) + ctx.result()
            except ContractError as e:
                res = ("rejected", str(e))
            hook = ch.replica_hooks.get(m)
            if hook is not None:
                res = hook(contract, res)
            results[m] = res
            reads = tuple(dict.fromkeys(ctx.reads))
        first = results[ch.members[0]]
        divergent = [m for m, r in results.items() if r != first]
        if divergent:
            raise EndorsementError(
                f"{contract} by {submitter}: replicas {divergent} disagree with {ch.members[0]}")
        return first, reads

    def submit(self, channel_id: str, submitter: str, contract: str, payload: bytes) -> bytes:
        """Endorse on every replica, then commit one block.  Returns the tx id."""
        ch = self.channel(channel_id)
        if submitter not in ch.members:
            raise AuthorizationError(f"{submitter} is not a member of {channel_id}")
        if contract not in ch.contracts:
            raise UnknownContractError(f"contract {contract!r} not deployed on {channel_id}")
        if isinstance(payload, (dict, list)):
            payload = canonical_json(payload)
        tx_id = compute_tx_id(submitter, contract, payload, self.tick)
        if tx_id in ch._tx_index:
            raise LedgerError("duplicate transaction")
        result, reads = self._execute(ch, tx_id, submitter, contract, payload)
        if result[0] == "rejected":
            tx = Transaction(tx_id, submitter, contract, self.tick, payload, status=f"INVALID: {result[1]}")
            ch._append([tx], [])
            raise ContractRejected(tx_id, result[1])
        _, writes, events, private = result
        tx = Transaction(tx_id, submitter, contract, self.tick, payload, reads, writes, events)
        for m in ch.members:
            rep = ch.replicas[m]
            for k, v in writes:
                if v is None:
                    rep.pop(k, None)
                else:
                    rep[k] = v
        for (member, key), value in private:
            ch.pdc_stores[member][key] = value
        ch._append([tx], events)
        return tx_id

    def put_private(self, channel_id: str, member: str, key: str, value: bytes) -> bytes:
        """Store ``value`` in ``member``'s collection; only its hash goes on-chain."""
        ch = self.channel(channel_id)
        if member not in ch.members:
            raise AuthorizationError(f"{member} is not a member of {channel_id}")
        digest = sha256(value)
        payload = canonical_json({"member": member, "key": key, "hash": digest.hex()})
        tx_id = compute_tx_id(member, "_pdc_put", payload, self.tick)
        tx = Transaction(tx_id, member, "_pdc_put", self.tick, payload,
                         write_set=((pdc_hash_key(member, key), digest.hex().encode()),))
        for m in ch.members:
            ch.replicas[m][pdc_hash_key(member, key)] = digest.hex().encode()
        ch.pdc_stores[member][key] = value
        ch._append([tx], [])
        return digest

    def get_private(self, channel_id: str, viewer: str, owner: str, key: str) -> bytes:
        ch = self.channel(channel_id)
        if viewer != owner:
            raise AuthorizationError(f"{viewer} cannot read {owner}'s private collection")
        return ch.pdc_stores[owner][key]

    def verify_private(self, channel_id: str, owner: str, key: str) -> bool:
        ch = self.channel(channel_id)
        on_chain = ch.world_state.get(pdc_hash_key(owner, key))
        value = ch.pdc_stores[owner].get(key)
        return value is not None and on_chain == sha256(value).hex().encode()

    def query(self, channel_id: str, member: str, key: str):
        ch = self.channel(channel_id)
        if member not in ch.members:
            raise AuthorizationError(f"{member} is not a member of {channel_id}")
        return ch.replicas[member].get(key)

    def query_json(self, channel_id, member, key, default=None):
        raw = self.query(channel_id, member, key)
        return default if raw is None else json.loads(raw)

    def subscribe(self, channel_id: str, member: str, types=None, predicate=None) -> Subscription:
        ch = self.channel(channel_id)
        if member not in ch.members:
            raise AuthorizationError(f"{member} is not a member of {channel_id}")
        sub = Subscription(member, types, predicate)
        ch.subscriptions.append(sub)
        return sub

    def transcript_lines(self):
        for seq, (cid, height) in enumerate(self._commit_log):
            yield transcript_line(seq, cid, self.channels[cid].blocks[height])

    def export_transcript(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.transcript_lines():
                fh.write(line)
                fh.write("\n")


def verify_chain(channel: Channel) -> int | None:
    return verify_blocks(channel.blocks)


def transcript_line(seq: int, channel_id: str, block: Block) -> str:
    txs = block.transactions()
    return json.dumps({
        "seq": seq,
        "channel": channel_id,
        "height": block.height,
        "prev_hash": block.prev_hash.hex(),
        "block_hash": block.block_hash.hex(),
        "tx": block.tx_bytes[0].hex() if block.tx_bytes else None,
        "events": [{"type": t, "payload": json.loads(b)} for tx in txs for t, b in tx.events],
    }, sort_keys=True, separators=(",", ":"))
