"""Watchtower actors for the three privacy levels.

A tower keeps one constant-size record per channel and replaces it on every
ingest. Ingest records travel as length-prefixed bytes so transcripts replay
bit-exactly:

    record   := u32 total_len | 32B channel_id | u8 level | payload
    level 1  := punish kit (below), in the clear
    level 2  := CipherPacket bytes (12B iv | u32 len | ciphertext | 16B tag)
    level 3  := u32 index | 32B chain key

    punish kit := u32 bound | u8 n_tx | n_tx * (u32 len | tx bytes | u8 n_in |
                  n_in * (u32 leaf | u8 slot_type | 64B aggregate))
                  slot_type: 0 covenant only, 1 scraped one-time sig + covenant

Level-3 registration carries the static rebuild inputs; the per-state facts
(bound, signatures) arrive through the on-chain packet, so the record never
grows. Towers hold no one-time private keys and cannot make an honest client's
latest-state assert punishable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import wire
from .chain import Accepted, Chain, Outpoint, Transaction
from .crypto import (
    CipherPacket,
    CovenantKeySet,
    CovenantSignature,
    IntegrityError,
    OTPublicKey,
    OTSignature,
    RecoveryError,
    covenant_verify,
    decode_digits,
    decrypt,
    hashchain_walk,
    ots_recover_value,
    stream_xor,
)
from .script import OutputLock, Witness, build_witness_for
from .txgraph import L3_CIPHERTEXT_LEN, build_punish_pair, parse_l3_payload

SETUP_UNILATERAL_INDEX = 1  # funding transaction output layout is fixed
RELAY_EXIT_INDEX = 0


class TowerError(Exception):
    pass


# ---------------------------------------------------------------------------
# Wire codecs
# ---------------------------------------------------------------------------

def encode_record(channel: bytes, level: int, payload: bytes) -> bytes:
    body = channel + bytes([level]) + payload
    return len(body).to_bytes(4, "big") + body


def decode_record(data: bytes) -> tuple[bytes, int, bytes]:
    total = int.from_bytes(data[:4], "big")
    body = data[4:4 + total]
    if len(body) != total or total < 33:
        raise TowerError("malformed ingest record")
    return body[:32], body[32], body[33:]


@dataclass
class KitEntry:
    tx: Transaction
    witness_specs: list[tuple[int, int, bytes]]  # (leaf, slot_type, aggregate)


@dataclass
class PunishKit:
    bound: int
    entries: list[KitEntry]


def parse_punish_kit(payload: bytes) -> PunishKit:
    r = wire.reader(payload)
    bound = r.u32()
    entries = []
    for _ in range(r.u8()):
        tx = wire.tx_from_bytes(r.take(r.u32()))
        specs = []
        for _ in range(r.u8()):
            specs.append((r.u32(), r.u8(), r.take(64)))
        entries.append(KitEntry(tx, specs))
    return PunishKit(bound, entries)


# ---------------------------------------------------------------------------
# Level-3 static registration data
# ---------------------------------------------------------------------------

@dataclass
class L3Statics:
    """Everything a deterministic rebuild of the punish pair needs."""

    keyset: CovenantKeySet
    watched: str
    watched_pub: OTPublicKey
    epsilon: int
    i_bal: int
    wt_reward: int
    winner_address: OutputLock
    tower_address: OutputLock
    name_prefix: str
    dispute_outpoint: Outpoint
    initial_funds: Outpoint

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += self.keyset.pub_a + self.keyset.pub_b
        out += b"\x00" if self.watched == "alice" else b"\x01"
        out += wire.ot_pub_to_bytes(self.watched_pub)
        out += self.epsilon.to_bytes(8, "big")
        out += self.i_bal.to_bytes(8, "big")
        out += self.wt_reward.to_bytes(8, "big")
        out += wire.lock_to_bytes(self.winner_address)
        out += wire.lock_to_bytes(self.tower_address)
        prefix = self.name_prefix.encode()
        out += len(prefix).to_bytes(1, "big") + prefix
        out += self.dispute_outpoint.txid + self.dispute_outpoint.index.to_bytes(4, "big")
        out += self.initial_funds.txid + self.initial_funds.index.to_bytes(4, "big")
        return bytes(out)

    @staticmethod
    def from_bytes(data: bytes) -> "L3Statics":
        r = wire.reader(data)
        keyset = CovenantKeySet(r.take(32), r.take(32))
        watched = "alice" if r.u8() == 0 else "bob"
        watched_pub = wire.ot_pub_from_reader(r)
        epsilon = r.u64()
        i_bal = r.u64()
        wt_reward = r.u64()
        winner = wire.lock_from_reader(r)
        tower = wire.lock_from_reader(r)
        prefix = r.take(r.u8()).decode()
        dispute = Outpoint(r.take(32), r.u32())
        funds = Outpoint(r.take(32), r.u32())
        return L3Statics(keyset, watched, watched_pub, epsilon, i_bal, wt_reward,
                         winner, tower, prefix, dispute, funds)

    def rebuild(self, bound: int):
        return build_punish_pair(
            self.keyset, self.watched, self.watched_pub, bound,
            self.epsilon, self.i_bal, self.dispute_outpoint, self.initial_funds,
            self.winner_address, self.name_prefix, self.tower_address,
            self.wt_reward,
        )


# ---------------------------------------------------------------------------
# Per-channel records
# ---------------------------------------------------------------------------

@dataclass
class TowerRecord:
    level: int
    channel: bytes
    payload: bytes = b""          # level 1: kit, level 2: packet bytes
    l3_index: int | None = None
    l3_key: bytes | None = None
    statics_bytes: bytes = b""    # level 3 registration, fixed size
    last_tick: int = 0
    defended: bool = False
    armed_kit: "PunishKit | None" = None  # dispute-time only

    def size_bytes(self) -> int:
        extra = 36 if self.level == 3 else 0
        return len(self.channel) + 1 + len(self.payload) + len(self.statics_bytes) + extra


# ---------------------------------------------------------------------------
# The tower
# ---------------------------------------------------------------------------

class Watchtower:
    """Constant-storage monitor; broadcasts punishment when a client is wronged."""

    def __init__(self, name: str, chain: Chain):
        self.name = name
        self.chain = chain
        self.records: dict[bytes, TowerRecord] = {}
        self.transcript: list[dict] = []
        self.log: list[dict] = []
        self.chain_cursor = 0
        self.now = 0
        self.watch_commits: dict[bytes, bytes] = {}  # commit txid -> channel
        self.betrayal_kit: PunishKit | None = None
        self.last_rebuilt: tuple | None = None  # (commit, punish, hash steps)

    def _log(self, event: str, **detail) -> None:
        self.log.append({"tick": self.now, "actor": self.name, "event": event, **detail})

    # -- registration and ingest ------------------------------------------------

    def register(self, channel: bytes, level: int, statics: L3Statics | None = None) -> None:
        record = TowerRecord(level=level, channel=channel)
        if statics is not None:
            record.statics_bytes = statics.to_bytes()
        self.records[channel] = record
        self.transcript.append({"tick": self.now, "kind": "register",
                                "channel": channel.hex(), "level": level})

    def ingest(self, record_bytes: bytes, tick: int) -> None:
        self.transcript.append({"tick": tick, "kind": "ingest",
                                "bytes": record_bytes})
        channel, level, payload = decode_record(record_bytes)
        record = self.records.get(channel)
        if record is None:
            self._log("unknown_channel", channel=channel.hex()[:12])
            raise TowerError("UnknownChannel")
        if level != record.level:
            raise TowerError("record level does not match registration")
        if level in (1, 2):
            record.payload = payload
        else:
            record.l3_index = int.from_bytes(payload[:4], "big")
            record.l3_key = payload[4:36]
        record.last_tick = tick

    def storage_size(self, channel: bytes) -> int:
        return self.records[channel].size_bytes()

    # -- chain watching -----------------------------------------------------------

    def tick(self, now: int) -> None:
        self.now = now
        log = self.chain.confirmed_log
        while self.chain_cursor < len(log):
            height, tx = log[self.chain_cursor]
            self.chain_cursor += 1
            self._observe(tx)

    def _observe(self, tx: Transaction) -> None:
        # asserts on commits already under watch (levels 1 and 3)
        for txin in tx.inputs:
            channel = self.watch_commits.get(txin.outpoint.txid)
            if channel is None or txin.outpoint.index != 0:
                continue
            if txin.witness is None or txin.witness.leaf_index != 0:
                continue
            record = self.records.get(channel)
            if record is None or record.defended:
                continue
            kit = record.armed_kit
            if kit is None and record.level == 1 and record.payload:
                kit = parse_punish_kit(record.payload)
            if kit is not None:
                self._consider_punish(record, txin.witness, kit)
        for record in list(self.records.values()):
            if record.defended:
                continue
            if record.level == 1:
                self._observe_l1(record, tx)
            elif record.level == 2:
                self._observe_l2(record, tx)
            else:
                self._observe_l3(record, tx)

    # level 1: follow the funding transaction's exit output
    def _observe_l1(self, record: TowerRecord, tx: Transaction) -> None:
        exit_outpoint = Outpoint(record.channel, SETUP_UNILATERAL_INDEX)
        if len(tx.inputs) == 1 and tx.inputs[0].outpoint == exit_outpoint:
            self.watch_commits[tx.txid] = record.channel
            self._log("commit_seen", channel=record.channel.hex()[:12])
            if self.betrayal_kit is not None:
                self._broadcast_betrayal()

    # level 2: a packet key appearing in any witness identifies a dispute
    def _observe_l2(self, record: TowerRecord, tx: Transaction) -> None:
        if not record.payload:
            return
        packet = _packet_from_bytes(record.payload)
        for txin in tx.inputs:
            if txin.witness is None:
                continue
            has_ots = any(isinstance(i, OTSignature) for i in txin.witness.items)
            for item in txin.witness.items:
                if not isinstance(item, bytes) or len(item) != 32:
                    continue
                try:
                    plain = decrypt(item, packet)
                except IntegrityError:
                    if has_ots:
                        self._log("decrypt_failure", channel=record.channel.hex()[:12])
                    continue
                self._log("dispute_decrypted", channel=record.channel.hex()[:12])
                self._consider_punish(record, txin.witness, parse_punish_kit(plain))
                return

    # level 3: the relay's id is the channel id; the commit carries the packet
    def _observe_l3(self, record: TowerRecord, tx: Transaction) -> None:
        spends_relay = any(
            t.outpoint == Outpoint(record.channel, RELAY_EXIT_INDEX) for t in tx.inputs
        )
        if not spends_relay:
            return
        payload = next((o.op_return_payload for o in tx.outputs
                        if o.op_return_payload is not None
                        and len(o.op_return_payload) == 8 + 2 * L3_CIPHERTEXT_LEN), None)
        if payload is None:
            return
        statics = L3Statics.from_bytes(record.statics_bytes)
        isn, bound, cipher_wta, cipher_wtb = parse_l3_payload(payload)
        cipher = cipher_wta if statics.watched == "bob" else cipher_wtb
        if record.l3_key is None or record.l3_index is None or isn + 1 > record.l3_index:
            self._log("stale_record", channel=record.channel.hex()[:12],
                      exit_isn=isn, held=record.l3_index)
            return
        steps = record.l3_index - (isn + 1)
        key = hashchain_walk(record.l3_key, steps)
        plain = stream_xor(key, cipher)
        sigs = _parse_l3_records(plain)
        if sigs is None:
            self._log("decrypt_failure", channel=record.channel.hex()[:12])
            return
        pair = statics.rebuild(bound)
        commit_built = pair[f"{statics.name_prefix}commit_punish_{statics.watched}"]
        punish_built = pair[f"{statics.name_prefix}punish_{statics.watched}"]
        registry = self.chain.registry
        if not (covenant_verify(registry, statics.keyset, commit_built.txid, 0,
                                CovenantSignature(sigs[0]))
                and covenant_verify(registry, statics.keyset, punish_built.txid, 0,
                                    CovenantSignature(sigs[1]))):
            self._log("decrypt_failure", channel=record.channel.hex()[:12])
            return
        self._log("l3_rebuilt", channel=record.channel.hex()[:12],
                  hash_steps=steps, bound=bound, isn=isn)
        self.last_rebuilt = (commit_built, punish_built, steps)
        record.armed_kit = PunishKit(bound=bound, entries=[
            KitEntry(commit_built.tx, [(0, 0, sigs[0])]),
            KitEntry(punish_built.tx, [(0, 0, sigs[1]), (0, 1, sigs[1])]),
        ])
        self.watch_commits[tx.txid] = record.channel

    # the scraped assert decides whether the stored pair applies
    def _consider_punish(self, record: TowerRecord, witness: Witness,
                         kit: PunishKit) -> None:
        ots_item = next((i for i in witness.items if isinstance(i, OTSignature)), None)
        if ots_item is None:
            return
        watched_pub, bound = _kit_punish_terms(kit)
        try:
            value = decode_digits(watched_pub.params, ots_item.digits)
        except RecoveryError:
            return
        if value >= bound:
            self._log("assert_not_stale", value=value, bound=bound)
            return
        try:
            ots_recover_value(watched_pub, ots_item)
        except RecoveryError:
            return  # not signed by the watched party; the client itself asserted
        self._log("punishing", channel=record.channel.hex()[:12],
                  value=value, bound=bound)
        self._broadcast_kit(kit, ots_item)
        record.defended = True

    def _broadcast_kit(self, kit: PunishKit, ots_item: OTSignature | None) -> None:
        for entry in kit.entries:
            for idx, (leaf, slot_type, agg) in enumerate(entry.witness_specs):
                sig = CovenantSignature(agg)
                if slot_type == 1:
                    witness = build_witness_for(
                        ("ots_sig", "covenant"),
                        {"ots_sig": ots_item, "covenant": sig}, leaf)
                else:
                    witness = build_witness_for(("covenant",), {"covenant": sig}, leaf)
                entry.tx.inputs[idx].witness = witness
            result = self.chain.submit(entry.tx)
            ok = isinstance(result, Accepted)
            self._log("broadcast", txid=entry.tx.txid.hex()[:12], ok=ok,
                      detail="" if ok else result.reason)

    # -- misbehavior (scripted collusion) ----------------------------------------

    def arm_betrayal(self, stale_kit_payload: bytes) -> None:
        """Collude: retain an old pair and fire its commitment on any exit."""
        self.betrayal_kit = parse_punish_kit(stale_kit_payload)

    def _broadcast_betrayal(self) -> None:
        # only the commitment: burning the dispute output it spends is the attack
        commit_entry = self.betrayal_kit.entries[-2]
        leaf, _, agg = commit_entry.witness_specs[0]
        commit_entry.tx.inputs[0].witness = build_witness_for(
            ("covenant",), {"covenant": CovenantSignature(agg)}, leaf)
        result = self.chain.submit(commit_entry.tx)
        self._log("betrayal_commit", ok=isinstance(result, Accepted))
        self.betrayal_kit = None


def _packet_from_bytes(data: bytes) -> CipherPacket:
    iv = data[:12]
    ct_len = int.from_bytes(data[12:16], "big")
    ciphertext = data[16:16 + ct_len]
    tag = data[16 + ct_len:16 + ct_len + 16]
    return CipherPacket(iv, ciphertext, tag)


def _parse_l3_records(plain: bytes) -> tuple[bytes, bytes] | None:
    if len(plain) != 130 or plain[0] != 0x01 or plain[65] != 0x02:
        return None
    return plain[1:65], plain[66:130]


def _kit_punish_terms(kit: PunishKit) -> tuple[OTPublicKey, int]:
    """Pull the watched one-time key and bound out of the commitment's script."""
    commit_tx = kit.entries[-2].tx
    script = commit_tx.outputs[0].lock.scripts[0]
    pub = bound = None
    for op in script:
        if op.kind == "ot_csigv":
            pub = op.args[0][0]
        elif op.kind == "push_int":
            bound = op.args[0]
    if pub is None or bound is None:
        raise TowerError("kit commitment lacks a punish script")
    return pub, bound


# ---------------------------------------------------------------------------
# Privacy audits
# ---------------------------------------------------------------------------

def transcript_ingest_bytes(tower: Watchtower) -> bytes:
    return b"".join(e["bytes"] for e in tower.transcript if e["kind"] == "ingest")


def find_leaks(blob: bytes, forbidden: list[bytes]) -> list[bytes]:
    """Byte patterns that must not appear in a tower's pre-dispute view."""
    return [pattern for pattern in forbidden if pattern and pattern in blob]


def ingest_schedule(tower: Watchtower, channel: bytes) -> list[tuple[int, int]]:
    """(tick, payload size) per ingest for one channel; the tower-visible cadence."""
    out = []
    for e in tower.transcript:
        if e["kind"] != "ingest":
            continue
        ch, _, payload = decode_record(e["bytes"])
        if ch == channel:
            out.append((e["tick"], len(payload)))
    return out
