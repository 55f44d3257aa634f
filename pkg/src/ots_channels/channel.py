"""Per-party protocol engines: setup handshake, the nine-step update dance,
closes, and reactions to everything the chain shows.

Engines are single-threaded event-loop state machines. Each tick they drain
their inbox, scan newly confirmed transactions, and run timers. All randomness
flows from a per-engine seeded generator, so identical scenarios replay
byte-identically.

Honest engines keep one state's material: the newest fully signed exit set and
the newest punish pair against the counterparty. The only per-state residue is
the timeout archive, two 32-byte counterparty partials per state keyed by
commit txid, which is what lets a party time out a stale commit that is never
asserted. Adversarial engines (scenario-flagged) additionally retain old exit
sets so they can try to use them.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import txgraph, wire
from .chain import Accepted, Chain, Outpoint, Transaction, TxInput, TxOutput
from .crypto import (
    CovenantKeySet,
    CovenantSignature,
    HashChain,
    OTKeyPair,
    OTParams,
    OTSignature,
    covenant_combine,
    covenant_partial,
    covenant_partial_verify,
    encrypt,
    hash160,
    hashchain_values,
    ots_keygen,
    ots_recover_value,
    ots_sign,
    party_sign,
    sha256,
    stream_xor,
)
from .htlc import (
    CLAIM_LEAF,
    CLAIM_SLOTS,
    Htlc,
    REFUND_LEAF,
    REFUND_SLOTS,
    add_htlc,
    fail_htlc,
    settle_htlc,
)
from .script import Witness, build_witness_for
from .txgraph import (
    ASSERT_LEAF,
    BuiltTx,
    ChannelParams,
    EXPIRE_ALICE_LEAF,
    EXPIRE_BOB_LEAF,
    InputPlan,
    READY_FAST_LEAF,
    READY_FAST_SLOTS,
    StateSnapshot,
    build_cooperative_close,
    build_exit_set,
    build_punish_pair,
    build_punish_set,
    build_setup,
    build_wt_structures,
    setup_anchors,
)

ALICE = "alice"
BOB = "bob"

INIT = "init"
OPEN = "open"
UPDATING = "updating"
COOP_CLOSING = "coop_closing"
EXITING = "exiting"
DISPUTING = "disputing"
ENFORCING_TIMEOUT = "timed_out_enforcing"
CLOSED = "closed"
ABORTED = "aborted"

DEFAULT_STEP_TIMEOUT = 10  # ticks without progress before aborting an update

OT_PARAMS = OTParams(32, 4)


class ChannelError(Exception):
    pass


class EsnOverflowError(ChannelError):
    pass


def other(role: str) -> str:
    return BOB if role == ALICE else ALICE


# ---------------------------------------------------------------------------
# Sequence management
# ---------------------------------------------------------------------------

@dataclass
class SequenceManager:
    """Internal numbers step by one; signed numbers jump to hide the rate."""

    isn: int = 0
    esn: int = 0
    d_bound: int = 16
    report_every: int = 0  # 0: never informed, k: every k-th state informed
    value_bits: int = 32

    def is_reported(self, isn: int) -> bool:
        return self.report_every > 0 and isn % self.report_every == 0

    def gap_is_random(self, isn: int) -> bool:
        return self.is_reported(isn) or self.is_reported(isn + 1)

    def draw_gap(self, isn: int, rng: random.Random) -> int:
        return rng.randint(1, self.d_bound) if self.gap_is_random(isn) else 1

    def validate_gap(self, isn: int, gap: int) -> bool:
        if self.gap_is_random(isn):
            return 1 <= gap <= self.d_bound
        return gap == 1

    def check_overflow(self, esn: int) -> None:
        if esn >= 1 << self.value_bits:
            raise EsnOverflowError("sequence space exhausted; channel must close")


# ---------------------------------------------------------------------------
# Messages and stored material
# ---------------------------------------------------------------------------

@dataclass
class Msg:
    kind: str
    sender: str
    body: dict


@dataclass
class ExitMaterial:
    """Everything needed to drive one state's unilateral exit."""

    state: StateSnapshot
    templates: dict[str, BuiltTx]
    peer_partials: dict[tuple, bytes]

    def size_bytes(self) -> int:
        total = sum(len(b.tx.full_bytes()) for b in self.templates.values())
        total += sum(len(v) + 8 for v in self.peer_partials.values())
        return total


@dataclass
class PunishStore:
    """The newest fully signed punish pair against the counterparty."""

    isn: int
    esn: int
    commit_punish: BuiltTx
    punish: BuiltTx
    peer_partials: dict[tuple, bytes]

    def size_bytes(self) -> int:
        total = len(self.commit_punish.tx.full_bytes()) + len(self.punish.tx.full_bytes())
        total += sum(len(v) + 8 for v in self.peer_partials.values())
        return total


@dataclass
class PendingUpdate:
    new_state: StateSnapshot
    payer: str
    exit_set: dict[str, BuiltTx] | None = None
    punish_set: dict[str, BuiltTx] | None = None
    peer_partials: dict[tuple, bytes] = field(default_factory=dict)
    steps_done: set = field(default_factory=set)
    last_progress: int = 0
    l3_wt_set: dict[str, BuiltTx] | None = None
    l3_wt_peer_partials: dict[tuple, bytes] = field(default_factory=dict)
    l3_cipher_mine: bytes | None = None
    l3_cipher_theirs: bytes | None = None


def _step3_names(towers: bool, level: int) -> list[str]:
    """Everything cross-signed in the bulk exchange, except the commit set."""
    names = ["assert_exit", "finalize_exit", "expire_alice", "expire_bob",
             "punish_alice", "punish_bob"]
    if towers and level < 3:
        names += ["wta_punish_bob", "wtb_punish_alice"]
    return names


def _commit_punish_names(of_role: str, towers: bool, level: int) -> list[str]:
    wt_prefix = "wtb_" if of_role == ALICE else "wta_"
    names = [f"commit_punish_{of_role}"]
    if towers and level < 3:
        names.append(f"{wt_prefix}commit_punish_{of_role}")
    return names


# ---------------------------------------------------------------------------
# The engine
# ---------------------------------------------------------------------------

class PeerEngine:
    """One channel party: a protocol state machine over messages, chain, timers."""

    def __init__(self, role: str, chain: Chain, rng_seed: int,
                 deposit: int, *, epsilon: int = 1000, timeout: int = 6,
                 privacy_level: int = 1, towers: bool = False,
                 d_bound: int = 16, report_every: int = 0,
                 wt_reward: int = 0, chain_length: int = 4096,
                 step_timeout: int = DEFAULT_STEP_TIMEOUT,
                 shared_tower_paths: bool = False,
                 retain_history: bool = False):
        self.role = role
        self.chain = chain
        self.rng = random.Random(rng_seed)
        self.deposit = deposit
        self.epsilon = epsilon
        self.timeout = timeout
        self.privacy_level = privacy_level
        self.towers = towers
        self.wt_reward = wt_reward
        self.chain_length = chain_length
        self.step_timeout = step_timeout
        self.shared_tower_paths = shared_tower_paths
        self.retain_history = retain_history

        self.phase = INIT
        self.params: ChannelParams | None = None
        self.anchors: txgraph.Anchors | None = None
        self.setup_built: BuiltTx | None = None
        self.wt_structure: BuiltTx | None = None
        self.wt_structure_peer_partials: dict[tuple, bytes] = {}
        self.snapshot: StateSnapshot | None = None
        self.seq = SequenceManager(d_bound=d_bound, report_every=report_every)

        # key material
        self.cov_secret = self.rng.randbytes(32)
        self.cov_pub = chain.registry.register(self.cov_secret)
        self.sig_secret = self.rng.randbytes(32)
        self.sig_pub = chain.registry.register(self.sig_secret)
        self.ot_key: OTKeyPair = ots_keygen(OT_PARAMS, self.rng.randbytes(32))
        self.timeout_preimage = self.rng.randbytes(32)
        self.p_e: bytes | None = None
        # level 3: I own the key chain gating the pairs that punish me
        self.l3_chain_values: list[bytes] | None = None
        self.l3_peer_keys: dict[int, bytes] = {}
        self.l3_cipher_prev_theirs: bytes | None = None
        self.l3_expected_plain_prev: bytes | None = None

        # peer identity, filled during the handshake
        self.peer_cov_pub: bytes | None = None
        self.peer_sig_pub: bytes | None = None
        self.peer_ot_pub = None
        self.peer_deposit: int | None = None
        self.peer_funding: list[tuple[Outpoint, int]] = []
        self.peer_h: bytes | None = None
        self.funding: list[tuple[Outpoint, int]] = []
        self.is_proposer = False
        self.esn0_gap: int | None = None
        self.wt_random_x: bytes | None = None

        # per-state material
        self.exit_material: ExitMaterial | None = None
        self.punish_store: PunishStore | None = None
        self.timeout_archive: dict[bytes, tuple[int, bytes, bytes]] = {}
        self.old_exit_material: dict[int, ExitMaterial] = {}
        self.htlc_preimages: dict[bytes, bytes] = {}

        self.pending: PendingUpdate | None = None
        self.pending_setup: dict | None = None
        self.pending_close: dict | None = None

        # transport and logging
        self.peer_inbox: list[Msg] | None = None
        self.inbox: list[Msg] = []
        self.log: list[dict] = []
        self.now = 0
        self.offline_until = -1

        # adversary knobs
        self.halt_at_step: int | None = None
        self.corrupt_setup_sig = False
        self.withhold_fast_reveal = False

        # chain watching and dispute state
        self.chain_cursor = 0
        self.observed_commit: dict | None = None
        self.exit_drive: dict | None = None
        self.peer_timeout_preimage: bytes | None = None
        self.fast_preimage: bytes | None = None
        self.final_result: str | None = None
        self.published: dict[bytes, str] = {}
        self.finalize_watch: dict | None = None

        # tower handoff state (the harness relays records on its schedule)
        self.tower_kit: dict | None = None
        self.tower_immediate: list[dict] = []

    # -- plumbing ------------------------------------------------------------

    def connect(self, peer: "PeerEngine") -> None:
        self.peer_inbox = peer.inbox

    def _send(self, kind: str, **body) -> None:
        if self.peer_inbox is not None:
            self.peer_inbox.append(Msg(kind, self.role, body))
            self._log("send", kind=kind)

    def _log(self, event: str, **detail) -> None:
        self.log.append({"tick": self.now, "actor": self.role, "event": event, **detail})

    def _set_phase(self, phase: str) -> None:
        if phase != self.phase:
            self._log("phase", frm=self.phase, to=phase)
            self.phase = phase

    def _halted(self, step: int) -> bool:
        return self.halt_at_step is not None and step >= self.halt_at_step

    @property
    def my_address(self):
        return self.params.alice_address if self.role == ALICE else self.params.bob_address

    def onchain_balance(self) -> int:
        return self.chain.balance_of(self.my_address)

    def ready_for_action(self) -> bool:
        return (self.phase == OPEN and self.pending is None
                and self.pending_close is None and self.exit_drive is None)

    def tick(self, now: int) -> None:
        self.now = now
        if now < self.offline_until:
            return
        # drain in place: the peer holds a reference to this very list
        pending = list(self.inbox)
        self.inbox.clear()
        for msg in pending:
            self._dispatch(msg)
        self._scan_chain()
        self._run_timers()

    def _dispatch(self, msg: Msg) -> None:
        handler = getattr(self, f"_handle_{msg.kind}", None)
        if handler is None:
            self._log("drop", kind=msg.kind)
            return
        handler(msg.body)

    # -- handshake -----------------------------------------------------------

    def _hello_body(self) -> dict:
        return dict(
            role=self.role,
            deposit=self.deposit,
            funding=list(self.funding),
            cov_pub=self.cov_pub,
            sig_pub=self.sig_pub,
            ot_pub=self.ot_key.public,
            h_preimage=hash160(self.timeout_preimage),
            epsilon=self.epsilon,
            timeout=self.timeout,
            privacy_level=self.privacy_level,
        )

    def begin_setup(self) -> None:
        """The funding proposer starts the handshake and later broadcasts."""
        self.is_proposer = True
        body = self._hello_body()
        if self.privacy_level >= 2:
            self.p_e = self.rng.randbytes(32)
            self.wt_random_x = self.rng.randbytes(16)
            body["p_e"] = self.p_e
            body["wt_x"] = self.wt_random_x
        self.esn0_gap = self.seq.draw_gap(0, self.rng)
        body["esn0_gap"] = self.esn0_gap
        self._send("hello", **body)
        self.pending_setup = {"stage": "hello_sent", "peer_partials": {}}

    def _handle_hello(self, body: dict) -> None:
        if self.phase != INIT or self.pending_setup is not None:
            return
        for key in ("epsilon", "timeout", "privacy_level"):
            if body[key] != getattr(self, key):
                self._abort_setup("HandshakeMismatch: config disagreement")
                return
        self._absorb_peer(body)
        self.p_e = body.get("p_e")
        self.wt_random_x = body.get("wt_x")
        self.esn0_gap = body["esn0_gap"]
        if not self.seq.validate_gap(0, self.esn0_gap):
            self._abort_setup("HandshakeMismatch: bad initial gap")
            return
        self.pending_setup = {"stage": "ack_sent", "peer_partials": {}}
        self._send("hello_ack", **self._hello_body())
        self._prepare_channel()
        self._send_setup_sigs()

    def _handle_hello_ack(self, body: dict) -> None:
        if self.pending_setup is None or self.pending_setup.get("stage") != "hello_sent":
            return
        self._absorb_peer(body)
        self.pending_setup["stage"] = "ack_received"
        self._prepare_channel()
        self._send_setup_sigs()

    def _absorb_peer(self, body: dict) -> None:
        self.peer_cov_pub = body["cov_pub"]
        self.peer_sig_pub = body["sig_pub"]
        self.peer_ot_pub = body["ot_pub"]
        self.peer_deposit = body["deposit"]
        self.peer_funding = body["funding"]
        self.peer_h = body["h_preimage"]

    def _mine_or_theirs(self, want_role: str, mine, theirs):
        return mine if self.role == want_role else theirs

    def _prepare_channel(self) -> None:
        """Derive the shared parameters and the state-0 template set."""
        keyset = CovenantKeySet(
            self._mine_or_theirs(ALICE, self.cov_pub, self.peer_cov_pub),
            self._mine_or_theirs(BOB, self.cov_pub, self.peer_cov_pub),
        )
        wta_pub = wtb_pub = None
        if self.towers:
            # tower signing identities derive from the channel, so both parties
            # and both towers compute the same reward addresses
            wta_pub = self.chain.registry.register(sha256(keyset.pub_a + b"wta"))
            wtb_pub = self.chain.registry.register(sha256(keyset.pub_b + b"wtb"))
        self.params = ChannelParams(
            i_bal=self.deposit + self.peer_deposit,
            epsilon=self.epsilon,
            timeout=self.timeout,
            keyset=keyset,
            alice_sig_pub=self._mine_or_theirs(ALICE, self.sig_pub, self.peer_sig_pub),
            bob_sig_pub=self._mine_or_theirs(BOB, self.sig_pub, self.peer_sig_pub),
            h_a=self._mine_or_theirs(ALICE, hash160(self.timeout_preimage), self.peer_h),
            h_b=self._mine_or_theirs(BOB, hash160(self.timeout_preimage), self.peer_h),
            k_a_pub=self._mine_or_theirs(ALICE, self.ot_key.public, self.peer_ot_pub),
            k_b_pub=self._mine_or_theirs(BOB, self.ot_key.public, self.peer_ot_pub),
            privacy_level=self.privacy_level,
            h_e=hash160(self.p_e) if self.p_e is not None else None,
            wt_random_x=self.wt_random_x,
            wta_sig_pub=wta_pub,
            wtb_sig_pub=wtb_pub,
            wt_reward=self.wt_reward,
            chain_length=self.chain_length,
        )
        alice_deposit = self._mine_or_theirs(ALICE, self.deposit, self.peer_deposit)
        bob_deposit = self._mine_or_theirs(BOB, self.deposit, self.peer_deposit)
        alice_funding = self._mine_or_theirs(ALICE, self.funding, self.peer_funding)
        bob_funding = self._mine_or_theirs(BOB, self.funding, self.peer_funding)
        self.setup_built = build_setup(
            self.params, alice_funding, bob_funding, alice_deposit, bob_deposit
        )
        if self.privacy_level >= 2:
            self.wt_structure = build_wt_structures(self.params, self.setup_built)
        self.anchors = setup_anchors(self.params, self.setup_built, self.wt_structure)
        self.snapshot = StateSnapshot(0, self.esn0_gap, alice_deposit, bob_deposit)
        self.seq.isn, self.seq.esn = 0, self.esn0_gap
        if self.privacy_level == 3:
            seed = self.rng.randbytes(32)
            self.l3_chain_values = hashchain_values(HashChain(seed, self.chain_length))
            self.pending_setup["wt_set"] = self._l3_wt_set(self.snapshot)

    # level-3 tower pairs carry bound esn+1: they punish this very state once
    # the next state's key reveal makes them decryptable
    def _l3_wt_set(self, state: StateSnapshot) -> dict[str, BuiltTx]:
        p = self.params
        out: dict[str, BuiltTx] = {}
        out.update(build_punish_pair(
            p.keyset, "bob", p.k_b_pub, state.esn + 1, p.epsilon, p.i_bal,
            self.anchors.wta_disputes, self.anchors.initial_funds,
            p.alice_address, "wta_", p.wta_address, p.wt_reward,
        ))
        out.update(build_punish_pair(
            p.keyset, "alice", p.k_a_pub, state.esn + 1, p.epsilon, p.i_bal,
            self.anchors.wtb_disputes, self.anchors.initial_funds,
            p.bob_address, "wtb_", p.wtb_address, p.wt_reward,
        ))
        return out

    def _my_l3_pair_names(self) -> tuple[tuple[int, str], tuple[int, str]]:
        """The pair punishing me; I encrypt its aggregate signatures."""
        if self.role == ALICE:
            return ((0x01, "wtb_commit_punish_alice"), (0x02, "wtb_punish_alice"))
        return ((0x01, "wta_commit_punish_bob"), (0x02, "wta_punish_bob"))

    def _peer_l3_pair_names(self) -> tuple[tuple[int, str], tuple[int, str]]:
        if self.role == ALICE:
            return ((0x01, "wta_commit_punish_bob"), (0x02, "wta_punish_bob"))
        return ((0x01, "wtb_commit_punish_alice"), (0x02, "wtb_punish_alice"))

    def _l3_records(self, names, wt_set: dict[str, BuiltTx],
                    peer_partials: dict[tuple, bytes]) -> bytes:
        records = b""
        for tag, name in names:
            built = wt_set[name]
            agg = self._aggregate(built, built.input_plans[0].leaf, peer_partials)
            records += bytes([tag]) + agg.token
        return records

    def _l3_cipher(self, state: StateSnapshot, wt_set, peer_partials) -> bytes:
        if state.isn + 1 > self.chain_length:
            raise EsnOverflowError("key chain exhausted; channel must close")
        plain = self._l3_records(self._my_l3_pair_names(), wt_set, peer_partials)
        return stream_xor(self.l3_chain_values[state.isn + 1], plain)

    def _l3_payload(self, state: StateSnapshot, cipher_mine: bytes,
                    cipher_theirs: bytes) -> bytes:
        cipher_wta = self._mine_or_theirs(BOB, cipher_mine, cipher_theirs)
        cipher_wtb = self._mine_or_theirs(ALICE, cipher_mine, cipher_theirs)
        return txgraph.l3_payload_pair(state.isn, state.esn + 1, cipher_wta, cipher_wtb)

    def _state0_exit_set(self) -> dict[str, BuiltTx]:
        ps = self.pending_setup
        if ps.get("exit_set") is None:
            payload = None
            if self.privacy_level == 3:
                payload = self._l3_payload(self.snapshot, ps["l3_cipher_mine"],
                                           ps["l3_cipher_theirs"])
            ps["exit_set"] = build_exit_set(self.params, self.snapshot,
                                            self.anchors, payload)
        return ps["exit_set"]

    def _exit_ready_at_setup(self) -> bool:
        return self.privacy_level != 3 or self.pending_setup.get("l3_cipher_theirs") is not None

    def _setup_main_targets(self) -> list[tuple[str, BuiltTx, int, int]]:
        targets = []
        exit_set = self._state0_exit_set()
        for name, built in exit_set.items():
            for idx, plan in enumerate(built.input_plans):
                targets.append((name, built, idx, plan.leaf))
        fin = exit_set["finalize_exit"]
        targets.append(("finalize_exit", fin, 1, READY_FAST_LEAF))
        if self.wt_structure is not None:
            for idx, plan in enumerate(self.wt_structure.input_plans):
                targets.append((self.wt_structure.name, self.wt_structure, idx, plan.leaf))
        return targets

    def _send_setup_sigs(self) -> None:
        ps = self.pending_setup
        partials = {}
        if self.privacy_level == 3:
            # tower pairs sign first: the commit embeds their encrypted sigs
            for name, built in ps["wt_set"].items():
                for idx, plan in enumerate(built.input_plans):
                    partials[(name, idx, plan.leaf)] = self._partial(built, plan.leaf)
        else:
            for name, built, idx, leaf in self._setup_main_targets():
                partials[(name, idx, leaf)] = self._partial(built, leaf)
        if self.corrupt_setup_sig and partials:
            first = sorted(partials)[0]
            partials[first] = bytes(32)
        funding_sigs = [party_sign(self.sig_secret, self.sig_pub,
                                   self.setup_built.txid, 0) for _ in self.funding]
        self._send("setup_sigs", partials=partials, funding_sigs=funding_sigs)

    def _setup_lookup(self) -> dict[str, BuiltTx]:
        lookup: dict[str, BuiltTx] = {}
        if self._exit_ready_at_setup():
            lookup.update(self._state0_exit_set())
        if self.wt_structure is not None:
            lookup[self.wt_structure.name] = self.wt_structure
        if self.pending_setup.get("wt_set"):
            lookup.update(self.pending_setup["wt_set"])
        return lookup

    def _verify_and_store_setup_partials(self, partials: dict) -> bool:
        lookup = self._setup_lookup()
        for (name, idx, leaf), partial in partials.items():
            built = lookup.get(name)
            if built is None or not covenant_partial_verify(
                self.chain.registry, self.peer_cov_pub, partial, built.txid, leaf
            ):
                self._abort_setup(f"HandshakeMismatch: bad signature on {name}")
                return False
            self.pending_setup["peer_partials"][(name, idx, leaf)] = partial
        return True

    def _handle_setup_sigs(self, body: dict) -> None:
        if self.pending_setup is None:
            return
        if not self._verify_and_store_setup_partials(body["partials"]):
            return
        self.pending_setup["funding_sigs"] = body["funding_sigs"]
        if self.privacy_level == 3:
            cipher = self._l3_cipher(self.snapshot, self.pending_setup["wt_set"],
                                     self.pending_setup["peer_partials"])
            self.pending_setup["l3_cipher_mine"] = cipher
            self._send("setup_cipher", cipher=cipher)
            return
        self._maybe_finish_setup()

    def _handle_setup_cipher(self, body: dict) -> None:
        if self.pending_setup is None:
            return
        self.pending_setup["l3_cipher_theirs"] = body["cipher"]
        partials = {}
        for name, built, idx, leaf in self._setup_main_targets():
            partials[(name, idx, leaf)] = self._partial(built, leaf)
        self._send("setup_sigs2", partials=partials)
        self._maybe_finish_setup()

    def _handle_setup_sigs2(self, body: dict) -> None:
        if self.pending_setup is None:
            return
        if self._verify_and_store_setup_partials(body["partials"]):
            self._maybe_finish_setup()

    def _maybe_finish_setup(self) -> None:
        ps = self.pending_setup
        if ps is None or "funding_sigs" not in ps or not self._exit_ready_at_setup():
            return
        needed = {(name, idx, leaf) for name, _, idx, leaf in self._setup_main_targets()}
        if ps.get("wt_set"):
            for name, built in ps["wt_set"].items():
                for idx, plan in enumerate(built.input_plans):
                    needed.add((name, idx, plan.leaf))
        if not needed.issubset(ps["peer_partials"].keys()):
            return
        exit_set = self._state0_exit_set()
        partials = dict(ps["peer_partials"])
        self.exit_material = ExitMaterial(self.snapshot, exit_set, partials)
        self._archive_timeout_entry(exit_set, partials, 0)
        if self.wt_structure is not None:
            self.wt_structure_peer_partials = {
                k: v for k, v in partials.items() if k[0] == self.wt_structure.name
            }
        if self.privacy_level == 3:
            self.l3_cipher_prev_theirs = ps["l3_cipher_theirs"]
            self.l3_expected_plain_prev = self._l3_records(
                self._peer_l3_pair_names(), ps["wt_set"], partials
            )
        ps["stage"] = "await_confirm"
        if self.is_proposer:
            self._broadcast_setup(ps["funding_sigs"])

    def _broadcast_setup(self, peer_funding_sigs: list) -> None:
        tx = self.setup_built.tx
        my_sigs = iter([party_sign(self.sig_secret, self.sig_pub, tx.txid, 0)
                        for _ in self.funding])
        their_sigs = iter(peer_funding_sigs)
        alice_count = len(self.funding) if self.role == ALICE else len(self.peer_funding)
        for i, txin in enumerate(tx.inputs):
            alice_input = i < alice_count
            from_me = alice_input == (self.role == ALICE)
            txin.witness = Witness((next(my_sigs) if from_me else next(their_sigs),), 0)
        result = self._submit("setup", tx)
        if not isinstance(result, Accepted):
            self._abort_setup(f"FundingRejected: {result.reason}")

    def _abort_setup(self, reason: str) -> None:
        self._log("abort", reason=reason)
        self._send("abort", reason=reason)
        self.pending_setup = None
        self._set_phase(ABORTED)

    # -- update dance ----------------------------------------------------------

    def start_update(self, op: dict) -> None:
        """Propose the next state; ``op`` describes a payment or an HTLC action."""
        if self.phase != OPEN or self.pending is not None:
            raise ChannelError("engine is not free to update")
        new_isn = self.snapshot.isn + 1
        gap = self.seq.draw_gap(new_isn, self.rng)
        self.seq.check_overflow(self.snapshot.esn + gap)
        new_state = self._apply_op(self.snapshot, op, payer=self.role,
                                   new_isn=new_isn, new_esn=self.snapshot.esn + gap)
        self.pending = PendingUpdate(new_state, payer=self.role, last_progress=self.now)
        self._set_phase(UPDATING)
        self._send("update_propose", isn=new_isn, esn=new_state.esn, op=op,
                   payer=self.role)

    def _apply_op(self, state: StateSnapshot, op: dict, payer: str,
                  new_isn: int, new_esn: int) -> StateSnapshot:
        kind = op["kind"]
        base = StateSnapshot(new_isn, new_esn, state.a_bal, state.b_bal,
                             state.htlcs, state.fee_commit)
        if kind == "pay":
            amount = op["amount"]
            if amount <= 0:
                raise ChannelError("payment must be positive")
            delta = -amount if payer == ALICE else amount
            a_bal, b_bal = base.a_bal + delta, base.b_bal - delta
            if a_bal < 0 or b_bal < 0:
                raise ChannelError("payment exceeds payer balance")
            return StateSnapshot(new_isn, new_esn, a_bal, b_bal,
                                 base.htlcs, base.fee_commit)
        if kind == "add_htlc":
            return add_htlc(base, Htlc(op["direction"], op["amount"],
                                       op["payment_hash"], op["expiry"]))
        if kind == "settle_htlc":
            return settle_htlc(base, op["payment_hash"], op["preimage"])
        if kind == "fail_htlc":
            return fail_htlc(base, op["payment_hash"])
        if kind == "noop":
            return base
        raise ChannelError(f"unknown update op {kind}")

    def _handle_update_propose(self, body: dict) -> None:
        if self.phase != OPEN or self.pending is not None:
            return
        if body["isn"] != self.snapshot.isn + 1:
            self._abort(f"BadProposal: expected isn {self.snapshot.isn + 1}")
            return
        if not self.seq.validate_gap(body["isn"], body["esn"] - self.snapshot.esn):
            self._abort("BadProposal: gap outside the agreed rule")
            return
        try:
            self.seq.check_overflow(body["esn"])
            new_state = self._apply_op(self.snapshot, body["op"], payer=body["payer"],
                                       new_isn=body["isn"], new_esn=body["esn"])
        except Exception as exc:
            self._abort(f"BadProposal: {exc}")
            return
        if body["op"].get("kind") == "settle_htlc":
            self.htlc_preimages[body["op"]["payment_hash"]] = body["op"]["preimage"]
        self.pending = PendingUpdate(new_state, payer=body["payer"],
                                     last_progress=self.now)
        self._set_phase(UPDATING)
        if self._halted(3):
            return
        self._send("update_accept", isn=body["isn"])
        self._after_accept()

    def _handle_update_accept(self, body: dict) -> None:
        p = self.pending
        if p is None or body["isn"] != p.new_state.isn:
            return
        p.last_progress = self.now
        if self._halted(3):
            return
        self._after_accept()

    def _after_accept(self) -> None:
        if self.privacy_level == 3:
            self._send_wt_sigs()
        else:
            self._build_update_templates()
            self._send_step3()

    def _build_update_templates(self, payload: bytes | None = None) -> None:
        p = self.pending
        p.exit_set = build_exit_set(self.params, p.new_state, self.anchors, payload)
        p.punish_set = build_punish_set(
            self.params, p.new_state, self.anchors,
            include_towers=self.towers and self.privacy_level < 3,
        )

    def _send_wt_sigs(self) -> None:
        p = self.pending
        p.l3_wt_set = self._l3_wt_set(p.new_state)
        partials = {}
        for name, built in p.l3_wt_set.items():
            for idx, plan in enumerate(built.input_plans):
                partials[(name, idx, plan.leaf)] = self._partial(built, plan.leaf)
        self._send("wt_sigs", isn=p.new_state.isn, partials=partials)

    def _handle_wt_sigs(self, body: dict) -> None:
        p = self.pending
        if p is None or body["isn"] != p.new_state.isn:
            return
        if p.l3_wt_set is None:
            self.inbox.append(Msg("wt_sigs", other(self.role), body))
            return
        for (name, idx, leaf), partial in body["partials"].items():
            built = p.l3_wt_set.get(name)
            if built is None or not covenant_partial_verify(
                self.chain.registry, self.peer_cov_pub, partial, built.txid, leaf
            ):
                self._abort(f"BadSignature: tower pair {name}")
                return
            p.l3_wt_peer_partials[(name, idx, leaf)] = partial
        p.last_progress = self.now
        p.l3_cipher_mine = self._l3_cipher(p.new_state, p.l3_wt_set,
                                           p.l3_wt_peer_partials)
        reveal = self.l3_chain_values[p.new_state.isn]
        self._send("wt_cipher", isn=p.new_state.isn, cipher=p.l3_cipher_mine,
                   key_reveal=reveal)

    def _handle_wt_cipher(self, body: dict) -> None:
        p = self.pending
        if p is None or body["isn"] != p.new_state.isn:
            return
        if not self._verify_l3_reveal(body["isn"], body["key_reveal"]):
            self._abort("BadTowerPacket: previous packet failed verification")
            return
        p.l3_cipher_theirs = body["cipher"]
        p.last_progress = self.now
        payload = self._l3_payload(p.new_state, p.l3_cipher_mine, p.l3_cipher_theirs)
        self._build_update_templates(payload)
        self._send_step3()

    def _verify_l3_reveal(self, isn: int, key: bytes) -> bool:
        """The revealed chain value must open last state's embedded packet."""
        if isn - 1 in self.l3_peer_keys and sha256(key) != self.l3_peer_keys[isn - 1]:
            return False
        if self.l3_cipher_prev_theirs is not None and self.l3_expected_plain_prev is not None:
            if stream_xor(key, self.l3_cipher_prev_theirs) != self.l3_expected_plain_prev:
                return False
        self.l3_peer_keys[isn] = key
        return True

    def _send_step3(self) -> None:
        p = self.pending
        partials = {}
        for name in _step3_names(self.towers, self.privacy_level):
            built = p.exit_set.get(name) or p.punish_set.get(name)
            for idx, plan in enumerate(built.input_plans):
                partials[(name, idx, plan.leaf)] = self._partial(built, plan.leaf)
        fin = p.exit_set["finalize_exit"]
        partials[("finalize_exit", 1, READY_FAST_LEAF)] = self._partial(fin, READY_FAST_LEAF)
        self._send("sig_bundle", isn=p.new_state.isn, step=3, partials=partials)
        p.steps_done.add("sent3")
        self._advance_dance()

    def _handle_sig_bundle(self, body: dict) -> None:
        p = self.pending
        if p is None or body["isn"] != p.new_state.isn:
            return
        if p.exit_set is None:
            self.inbox.append(Msg("sig_bundle", other(self.role), body))
            return
        lookup = dict(p.exit_set)
        lookup.update(p.punish_set)
        for (name, idx, leaf), partial in body["partials"].items():
            built = lookup.get(name)
            if built is None or not covenant_partial_verify(
                self.chain.registry, self.peer_cov_pub, partial, built.txid, leaf
            ):
                self._abort(f"BadSignature: {name}")
                return
        p.peer_partials.update(body["partials"])
        p.steps_done.add(body["step"])
        p.last_progress = self.now
        self._advance_dance()

    def _advance_dance(self) -> None:
        """Fire whichever dance obligations are unlocked for my side."""
        p = self.pending
        if p is None or "sent3" not in p.steps_done:
            return
        if p.payer == self.role:
            if 3 in p.steps_done and 4 in p.steps_done and "sent5" not in p.steps_done:
                if self._halted(5):
                    return
                self._send_commit_punish_partials(step=5)
                p.steps_done.add("sent5")
                if self._halted(6):
                    return
                self._send_commit_exit_partial(step=6)
                p.steps_done.add("sent6")
            if 7 in p.steps_done and "done" not in p.steps_done:
                if self._halted(9):
                    return
                p.steps_done.add("done")
                self._complete_update()
        else:
            if 3 in p.steps_done and "sent4" not in p.steps_done:
                if self._halted(4):
                    return
                self._send_commit_exit_partial(step=4)
                p.steps_done.add("sent4")
            if 5 in p.steps_done and 6 in p.steps_done and "sent7" not in p.steps_done:
                if self._halted(7):
                    return
                self._send_commit_punish_partials(step=7)
                p.steps_done.add("sent7")
                if self._halted(8):
                    return
                p.steps_done.add("done")
                self._complete_update()

    def _send_commit_exit_partial(self, step: int) -> None:
        p = self.pending
        built = p.exit_set["commit_exit"]
        leaf = built.input_plans[0].leaf
        self._send("sig_bundle", isn=p.new_state.isn, step=step,
                   partials={("commit_exit", 0, leaf): self._partial(built, leaf)})

    def _send_commit_punish_partials(self, step: int) -> None:
        """Hand over the material that lets the peer punish my old states."""
        p = self.pending
        partials = {}
        for name in _commit_punish_names(self.role, self.towers, self.privacy_level):
            built = p.punish_set[name]
            leaf = built.input_plans[0].leaf
            partials[(name, 0, leaf)] = self._partial(built, leaf)
        self._send("sig_bundle", isn=p.new_state.isn, step=step, partials=partials)

    # -- promotion and completion ----------------------------------------------

    def _have_full_exit(self, p: PendingUpdate) -> bool:
        commit = p.exit_set["commit_exit"]
        leaf = commit.input_plans[0].leaf
        if ("commit_exit", 0, leaf) not in p.peer_partials:
            return False
        return any(k[0] == "assert_exit" for k in p.peer_partials)

    def _promote_pending(self) -> None:
        """Adopt whatever the interrupted dance already made safe to use.

        Once my step-5/7 material is out, the old state is punishable against
        me, so a fully signed new exit set must replace the old one. A newly
        complete punish pair is likewise adopted: it covers strictly more.
        """
        p = self.pending
        if p is None or p.exit_set is None:
            return
        if self._have_full_exit(p):
            if self.retain_history and self.exit_material is not None:
                self.old_exit_material[self.exit_material.state.isn] = self.exit_material
            self.exit_material = ExitMaterial(p.new_state, p.exit_set,
                                              dict(p.peer_partials))
            self._archive_timeout_entry(p.exit_set, p.peer_partials, p.new_state.isn)
        peer = other(self.role)
        names = (f"commit_punish_{peer}", f"punish_{peer}")
        have = {k[0] for k in p.peer_partials}
        if all(n in have for n in names):
            self.punish_store = PunishStore(
                p.new_state.isn, p.new_state.esn,
                p.punish_set[names[0]], p.punish_set[names[1]],
                {k: v for k, v in p.peer_partials.items() if k[0] in names},
            )

    def _complete_update(self) -> None:
        p = self.pending
        new_state = p.new_state
        self._promote_pending()
        self.snapshot = new_state
        self.seq.isn, self.seq.esn = new_state.isn, new_state.esn
        if self.towers:
            self._tower_handoff(p)
        if self.privacy_level == 3:
            self.l3_cipher_prev_theirs = p.l3_cipher_theirs
            self.l3_expected_plain_prev = self._l3_records(
                self._peer_l3_pair_names(), p.l3_wt_set, p.l3_wt_peer_partials
            )
        self.pending = None
        self._set_phase(OPEN)
        self._log("update_complete", isn=new_state.isn, esn=new_state.esn,
                  a_bal=new_state.a_bal, b_bal=new_state.b_bal)

    def _archive_timeout_entry(self, exit_set: dict[str, BuiltTx],
                               peer_partials: dict[tuple, bytes], isn: int) -> None:
        name = f"expire_{other(self.role)}"
        built = exit_set[name]
        leaf = built.input_plans[0].leaf
        p0 = peer_partials.get((name, 0, leaf))
        p1 = peer_partials.get((name, 1, 0))
        if p0 is not None and p1 is not None:
            self.timeout_archive[exit_set["commit_exit"].txid] = (isn, p0, p1)

    # -- tower handoffs ----------------------------------------------------------

    def _my_tower_pair_names(self) -> tuple[str, str]:
        """The pair my tower broadcasts: it punishes the counterparty."""
        peer = other(self.role)
        if self.shared_tower_paths:
            return (f"commit_punish_{peer}", f"punish_{peer}")
        prefix = "wta_" if self.role == ALICE else "wtb_"
        return (f"{prefix}commit_punish_{peer}", f"{prefix}punish_{peer}")

    def _tower_handoff(self, p: PendingUpdate) -> None:
        commit_name, punish_name = self._my_tower_pair_names()
        if self.privacy_level == 1:
            kit = self._punish_kit(
                [p.punish_set[commit_name], p.punish_set[punish_name]],
                p.peer_partials, p.new_state.esn,
            )
            self.tower_immediate.append({
                "level": 1, "channel": self.setup_built.txid, "payload": kit,
            })
        elif self.privacy_level == 2:
            kit = self._punish_kit(
                [self.wt_structure, p.punish_set[commit_name], p.punish_set[punish_name]],
                p.peer_partials, p.new_state.esn,
            )
            self.tower_kit = {"level": 2, "channel": self.wt_structure.txid,
                              "plain": kit}
        else:
            index = p.new_state.isn
            if index in self.l3_peer_keys:
                self.tower_kit = {
                    "level": 3, "channel": self.wt_structure.txid,
                    "key": self.l3_peer_keys[index], "index": index,
                }

    def tower_record(self) -> dict | None:
        """A fresh handoff record for the fixed-interval sender, if any."""
        kit = self.tower_kit
        if kit is None:
            return None
        if kit["level"] == 2:
            iv = self.rng.randbytes(12)
            packet = encrypt(self.p_e, kit["plain"], iv)
            return {"level": 2, "channel": kit["channel"],
                    "payload": packet.serialize()}
        payload = kit["index"].to_bytes(4, "big") + kit["key"]
        return {"level": 3, "channel": kit["channel"], "payload": payload}

    def _punish_kit(self, builts: list[BuiltTx], peer_partials: dict[tuple, bytes],
                    bound: int) -> bytes:
        """Wire broadcast kit: bound, then each tx with per-input signatures."""
        out = bytearray(bound.to_bytes(4, "big"))
        out.append(len(builts))
        for built in builts:
            tx_bytes = wire.tx_to_bytes(built.tx)
            out += len(tx_bytes).to_bytes(4, "big") + tx_bytes
            out.append(len(built.tx.inputs))
            for idx, plan in enumerate(built.input_plans):
                agg = self._aggregate_any(built, plan.leaf, peer_partials)
                slot_type = 1 if "ots_sig" in plan.slots else (
                    2 if "preimage" in plan.slots else 0)
                out += plan.leaf.to_bytes(4, "big")
                out.append(slot_type)
                out += agg.token
        return bytes(out)

    # -- signing helpers -----------------------------------------------------------

    def _partial(self, built: BuiltTx, leaf: int) -> bytes:
        return covenant_partial(self.cov_secret, built.txid, leaf)

    def _aggregate(self, built: BuiltTx, leaf: int,
                   peer_partials: dict[tuple, bytes]) -> CovenantSignature:
        theirs = None
        for (name, _, key_leaf), partial in peer_partials.items():
            if name == built.name and key_leaf == leaf:
                theirs = partial
                break
        if theirs is None:
            raise ChannelError(f"missing counterparty partial for {built.name}/{leaf}")
        return covenant_combine(self.params.keyset, {
            self.cov_pub: covenant_partial(self.cov_secret, built.txid, leaf),
            self.peer_cov_pub: theirs,
        })

    def _aggregate_any(self, built: BuiltTx, leaf: int,
                       peer_partials: dict[tuple, bytes] | None) -> CovenantSignature:
        sources = [peer_partials or {}, self.wt_structure_peer_partials]
        if self.exit_material is not None:
            sources.append(self.exit_material.peer_partials)
        for source in sources:
            try:
                return self._aggregate(built, leaf, source)
            except ChannelError:
                continue
        raise ChannelError(f"no counterparty partial for {built.name}/{leaf}")

    def _submit(self, label: str, tx: Transaction):
        result = self.chain.submit(tx)
        ok = isinstance(result, Accepted)
        self._log("publish", tx=label, txid=tx.txid.hex()[:12], ok=ok,
                  detail="" if ok else f"{result.reason}: {result.detail}")
        if ok:
            self.published[tx.txid] = label
        return result

    def _publish_built(self, built: BuiltTx, peer_partials: dict[tuple, bytes] | None,
                       leaf_overrides: dict[int, tuple[int, tuple[str, ...]]] | None = None,
                       **extra) -> bool:
        materials = {
            "branch": self.role == BOB,
            "preimage": self.timeout_preimage,
            "preimage_e": self.p_e,
        }
        materials.update(extra)
        tx = built.tx
        for idx, plan in enumerate(built.input_plans):
            leaf, slots = plan.leaf, plan.slots
            if leaf_overrides and idx in leaf_overrides:
                leaf, slots = leaf_overrides[idx]
            mats = dict(materials)
            mats["covenant"] = self._aggregate_any(built, leaf, peer_partials)
            if "sig" in slots:
                mats["sig"] = party_sign(self.sig_secret, self.sig_pub, tx.txid, leaf)
            tx.inputs[idx].witness = build_witness_for(slots, mats, leaf)
        return isinstance(self._submit(built.name, tx), Accepted)

    # -- closes and exits ------------------------------------------------------------

    def start_cooperative_close(self, close_fee: int = 0) -> None:
        if self.snapshot is None:
            raise ChannelError("no channel to close")
        self._set_phase(COOP_CLOSING)
        self.pending_close = {"fee": close_fee, "requested_at": self.now,
                              "initiator": True}
        self._send("close_request", isn=self.snapshot.isn, fee=close_fee)

    def _close_built(self, fee: int) -> BuiltTx:
        return build_cooperative_close(self.params, self.snapshot, self.setup_built, fee)

    def _handle_close_request(self, body: dict) -> None:
        if self.halt_at_step is not None:
            return  # an irresponsible peer ignores close requests
        if self.phase in (CLOSED, EXITING) or self.snapshot is None:
            return
        if body["isn"] != self.snapshot.isn or self.snapshot.htlcs:
            self._send("abort", reason="CloseRejected")
            return
        built = self._close_built(body["fee"])
        partials = {(built.name, idx, plan.leaf): self._partial(built, plan.leaf)
                    for idx, plan in enumerate(built.input_plans)}
        self._set_phase(COOP_CLOSING)
        self.pending_close = {"fee": body["fee"], "initiator": False,
                              "requested_at": self.now, "txid": built.txid}
        self._send("close_accept", isn=body["isn"], fee=body["fee"], partials=partials)

    def _handle_close_accept(self, body: dict) -> None:
        if self.pending_close is None or not self.pending_close.get("initiator"):
            return
        built = self._close_built(body["fee"])
        for (name, idx, leaf), partial in body["partials"].items():
            if not covenant_partial_verify(self.chain.registry, self.peer_cov_pub,
                                           partial, built.txid, leaf):
                self._abort("BadSignature: close")
                return
        self.pending_close["txid"] = built.txid
        self._publish_built(built, body["partials"])

    def start_unilateral_exit(self) -> None:
        """Publish my newest commit; assert, then finalize after the window."""
        if self.exit_material is None:
            raise ChannelError("nothing to exit with")
        self._begin_exit(self.exit_material, assert_state=True)

    def start_cheat_exit(self, isn: int) -> None:
        """Adversary: exit with a retained old state."""
        self._begin_exit(self._retained(isn), assert_state=True)

    def start_commit_stall(self, isn: int | None = None) -> None:
        """Adversary: publish a commit and never assert it."""
        material = self._retained(isn) if isn is not None else self.exit_material
        self._begin_exit(material, assert_state=False)

    def _retained(self, isn: int) -> ExitMaterial:
        if self.exit_material is not None and self.exit_material.state.isn == isn:
            return self.exit_material
        if isn in self.old_exit_material:
            return self.old_exit_material[isn]
        raise ChannelError(f"no retained exit material for state {isn}")

    def _begin_exit(self, material: ExitMaterial, assert_state: bool) -> None:
        self._set_phase(EXITING)
        self.exit_drive = {"material": material, "assert": assert_state,
                           "stage": "relay" if self.privacy_level == 3 else "commit"}
        self._drive_exit()

    def _drive_exit(self) -> None:
        drive = self.exit_drive
        if drive is None:
            return
        material: ExitMaterial = drive["material"]
        templates = material.templates
        stage = drive["stage"]
        if stage == "relay":
            src = self.setup_built.outpoint("unilateral_exit")
            if self.chain.spender_of(src) is None and self.chain.confirmations(src) is not None:
                if not self._publish_built(self.wt_structure,
                                           self.wt_structure_peer_partials):
                    self.exit_drive = None
                    return
            drive["stage"] = "commit"
            return
        if stage == "commit":
            src = self.anchors.commit_src
            if self.chain.confirmations(src) is None:
                return  # source not confirmed yet (or already spent: scan reacts)
            if not self._publish_built(templates["commit_exit"], material.peer_partials):
                self.exit_drive = None
                return
            drive["stage"] = "committed"
            return
        if stage == "committed":
            commit_out = templates["commit_exit"].outpoint("commit_exit_out")
            if self.chain.confirmations(commit_out) is None:
                return
            if not drive["assert"]:
                drive["stage"] = "stalling"
                return
            sig = ots_sign(self.ot_key, material.state.esn)
            if self._publish_built(templates["assert_exit"], material.peer_partials,
                                   ots_sig=sig):
                drive["stage"] = "asserted"
            return
        if stage == "asserted":
            ready = templates["assert_exit"].outpoint("ready_out")
            conf = self.chain.confirmations(ready)
            if conf is None:
                return
            if self.fast_preimage is not None:
                mine_is_a = self.role == ALICE
                ok = self._publish_built(
                    templates["finalize_exit"], material.peer_partials,
                    leaf_overrides={1: (READY_FAST_LEAF, READY_FAST_SLOTS)},
                    preimage_a=self.timeout_preimage if mine_is_a else self.fast_preimage,
                    preimage_b=self.fast_preimage if mine_is_a else self.timeout_preimage,
                )
            elif conf >= self.timeout:
                ok = self._publish_built(templates["finalize_exit"],
                                         material.peer_partials)
            else:
                return
            if ok:
                drive["stage"] = "finalize_submitted"
            return
        if stage == "finalize_submitted":
            fin = templates["finalize_exit"]
            if fin.txid in self.chain.confirmed:
                drive["stage"] = "finalized"
                self._note_finalize(fin, material.state)
                self.final_result = self.final_result or "exited"
                self._set_phase(CLOSED)

    def _note_finalize(self, fin: BuiltTx, state: StateSnapshot) -> None:
        if state.htlcs:
            self.finalize_watch = {"built": fin, "state": state, "claimed": set()}

    # -- chain scanning and reactions ----------------------------------------------

    def _scan_chain(self) -> None:
        log = self.chain.confirmed_log
        while self.chain_cursor < len(log):
            height, tx = log[self.chain_cursor]
            self.chain_cursor += 1
            self._classify(tx, height)
        self._drive_exit()
        self._resolve_htlcs()

    def _spends(self, tx: Transaction, outpoint: Outpoint | None) -> bool:
        return outpoint is not None and any(t.outpoint == outpoint for t in tx.inputs)

    def _classify(self, tx: Transaction, height: int) -> None:
        if self.setup_built is None:
            return
        if tx.txid == self.setup_built.txid:
            self._on_setup_confirmed()
            return
        if self.params is None:
            return
        if self._spends(tx, self.anchors.initial_funds):
            self._on_funds_spent(tx)
            return
        unilateral = self.setup_built.outpoint("unilateral_exit")
        if self._spends(tx, unilateral):
            if self.privacy_level == 3:
                self._extract_committer(tx.inputs[0].witness)
            else:
                self._on_commit_confirmed(tx, height)
            return
        if self.privacy_level == 3 and self._spends(tx, self.anchors.commit_src):
            self._on_commit_confirmed(tx, height)
            return
        if (self.observed_commit is not None
                and self._spends(tx, Outpoint(self.observed_commit["txid"], 0))):
            self._on_commit_out_spent(tx)

    def _on_setup_confirmed(self) -> None:
        if self.phase == INIT:
            self.pending_setup = None
            self._set_phase(OPEN)
            self._log("channel_open", esn=self.snapshot.esn,
                      a_bal=self.snapshot.a_bal, b_bal=self.snapshot.b_bal)

    def _extract_committer(self, witness: Witness) -> str:
        """The revealed timeout preimage names the party driving the exit."""
        preimage, branch = witness.items[0], witness.items[1]
        committer = BOB if branch else ALICE
        if committer != self.role:
            self.peer_timeout_preimage = preimage
        return committer

    def _on_commit_confirmed(self, tx: Transaction, height: int) -> None:
        if self.privacy_level < 3:
            committer = self._extract_committer(tx.inputs[0].witness)
        else:
            relay = self.chain.spender_of(self.setup_built.outpoint("unilateral_exit"))
            committer = (self._extract_committer(relay.inputs[0].witness)
                         if relay is not None else other(self.role))
        self.observed_commit = {"txid": tx.txid, "committer": committer,
                                "height": height, "asserted": False}
        if committer != self.role:
            self._log("counterparty_commit", txid=tx.txid.hex()[:12], height=height)
            if self.phase in (OPEN, UPDATING, COOP_CLOSING, ABORTED):
                self._set_phase(DISPUTING)

    def _on_commit_out_spent(self, tx: Transaction) -> None:
        oc = self.observed_commit
        oc["asserted"] = True
        witness = next(t.witness for t in tx.inputs
                       if t.outpoint == Outpoint(oc["txid"], 0))
        if witness.leaf_index != ASSERT_LEAF:
            self._log("commit_expired", txid=tx.txid.hex()[:12])
            return
        items = list(witness.items)
        if self.privacy_level >= 2:
            items = items[1:]  # drop the packet-key preimage
        ots_item, branch = items[0], items[1]
        asserter = BOB if branch else ALICE
        pub = self.params.k_b_pub if asserter == BOB else self.params.k_a_pub
        value = ots_recover_value(pub, ots_item)
        self._log("assert_observed", by=asserter, value=value)
        if asserter == self.role:
            return
        if self.punish_store is not None and value < self.punish_store.esn:
            self._punish(ots_item)
        elif (self.snapshot is not None and value == self.snapshot.esn
              and not self.withhold_fast_reveal and self.halt_at_step is None
              and self.phase in (OPEN, DISPUTING, UPDATING, COOP_CLOSING)):
            # honest latest exit: hand over my preimage so it finalizes fast
            self._send("fast_reveal", preimage=self.timeout_preimage)

    def _handle_fast_reveal(self, body: dict) -> None:
        if self.peer_h is not None and hash160(body["preimage"]) == self.peer_h:
            self.fast_preimage = body["preimage"]

    def _punish(self, ots_item: OTSignature) -> None:
        store = self.punish_store
        self._set_phase(DISPUTING)
        self._log("punishing", bound=store.esn)
        ok = self._publish_built(store.commit_punish, store.peer_partials)
        ok2 = self._publish_built(store.punish, store.peer_partials, ots_sig=ots_item)
        if ok and ok2:
            self.final_result = "punished_counterparty"

    def _on_funds_spent(self, tx: Transaction) -> None:
        """The deposit moved: payout, punishment, timeout, or cooperative close."""
        label = self.published.get(tx.txid)
        mine = label is not None
        if (self.pending_close is not None
                and tx.txid == self.pending_close.get("txid")):
            label = "cooperative_close"
            self.final_result = "cooperative_close"
            self.pending_close = None
        to_me = sum(o.amount for o in tx.outputs
                    if o.lock.commitment == self.my_address.commitment)
        self._log("funds_resolved", tx=label or "counterparty_tx", mine=mine,
                  amount_to_me=to_me, txid=tx.txid.hex()[:12])
        if (self.exit_material is not None
                and tx.txid == self.exit_material.templates["finalize_exit"].txid):
            self._note_finalize(self.exit_material.templates["finalize_exit"],
                                self.exit_material.state)
        if self.exit_drive is not None and not mine:
            self.exit_drive = None
        if self.final_result is None:
            if mine:
                self.final_result = "exited" if label == "finalize_exit" else label
            else:
                self.final_result = "lost_dispute" if to_me == 0 else "counterparty_resolved"
        if not (mine and label == "finalize_exit" and self.exit_drive is not None):
            self._set_phase(CLOSED)

    def _resolve_htlcs(self) -> None:
        watch = self.finalize_watch
        if watch is None or watch["built"].txid not in self.chain.confirmed:
            return
        built, state = watch["built"], watch["state"]
        for i, htlc in enumerate(state.htlcs):
            key = f"htlc_{i}"
            if key in watch["claimed"] or key not in built.output_names:
                continue
            outpoint = built.outpoint(key)
            if self.chain.confirmations(outpoint) is None:
                if self.chain.spent_index.get(outpoint) is not None:
                    watch["claimed"].add(key)  # the other side resolved it
                continue
            i_receive = (htlc.direction == "alice_to_bob") == (self.role == BOB)
            preimage = self.htlc_preimages.get(htlc.payment_hash)
            next_height = self.chain.height + 1
            if i_receive and preimage is not None and next_height < htlc.expiry:
                if self._spend_htlc(outpoint, htlc, preimage, claim=True):
                    watch["claimed"].add(key)
            elif not i_receive and next_height >= htlc.expiry:
                if self._spend_htlc(outpoint, htlc, None, claim=False):
                    watch["claimed"].add(key)

    def _spend_htlc(self, outpoint: Outpoint, htlc: Htlc,
                    preimage: bytes | None, claim: bool) -> bool:
        tx = Transaction([TxInput(outpoint)],
                         [TxOutput(htlc.amount, self.my_address)])
        leaf = CLAIM_LEAF if claim else REFUND_LEAF
        slots = CLAIM_SLOTS if claim else REFUND_SLOTS
        mats = {
            "htlc_preimage": preimage,
            "sig": party_sign(self.sig_secret, self.sig_pub, tx.txid, leaf),
        }
        tx.inputs[0].witness = build_witness_for(slots, mats, leaf)
        label = "htlc_claim" if claim else "htlc_refund"
        return isinstance(self._submit(label, tx), Accepted)

    # -- timers ---------------------------------------------------------------------

    def _run_timers(self) -> None:
        if self.halt_at_step is not None:
            return  # a frozen adversary never reacts on its own
        if (self.pending is not None
                and self.now - self.pending.last_progress > self.step_timeout):
            self._abort(f"Timeout: update stalled at tick {self.now}")
        if self.pending_close is not None and self.pending_close.get("initiator"):
            confirmed = self.pending_close.get("txid") in self.chain.confirmed
            if confirmed:
                self.final_result = "cooperative_close"
                self.pending_close = None
                self._set_phase(CLOSED)
            elif (self.pending_close.get("txid") is None
                  and self.now - self.pending_close["requested_at"] > self.step_timeout):
                self._log("close_unresponsive")
                self.pending_close = None
                if self.exit_drive is None and self.phase != CLOSED:
                    self.start_unilateral_exit()
        oc = self.observed_commit
        if (oc is not None and not oc["asserted"] and oc["committer"] != self.role
                and self.phase != CLOSED
                and self.chain.height - oc["height"] >= self.timeout):
            self._enforce_timeout(oc)

    def _enforce_timeout(self, oc: dict) -> None:
        """Sweep a committed-but-never-asserted exit after the dispute window."""
        entry = self.timeout_archive.get(oc["txid"])
        if entry is None or self.peer_timeout_preimage is None:
            return
        _, partial0, partial1 = entry
        self._set_phase(ENFORCING_TIMEOUT)
        name = f"expire_{oc['committer']}"
        leaf = EXPIRE_ALICE_LEAF if oc["committer"] == ALICE else EXPIRE_BOB_LEAF
        tx = Transaction(
            [TxInput(Outpoint(oc["txid"], 0)), TxInput(self.anchors.initial_funds)],
            [TxOutput(self.params.i_bal + self.params.epsilon, self.my_address)],
        )
        built = BuiltTx(name, tx, {"swept": 0}, [
            InputPlan("commit", leaf, ("preimage_peer", "covenant")),
            InputPlan("funds", 0, ("covenant",)),
        ])
        partials = {(name, 0, leaf): partial0, (name, 1, 0): partial1}
        tx.inputs[0].witness = build_witness_for(
            ("preimage_peer", "covenant"),
            {"preimage_peer": self.peer_timeout_preimage,
             "covenant": self._aggregate(built, leaf, partials)},
            leaf,
        )
        tx.inputs[1].witness = build_witness_for(
            ("covenant",), {"covenant": self._aggregate(built, 0, partials)}, 0,
        )
        if isinstance(self._submit(name, tx), Accepted):
            oc["asserted"] = True  # stop retrying; the funds spend resolves it
            self.final_result = "expired_counterparty"

    def _abort(self, reason: str) -> None:
        self._log("abort", reason=reason)
        self._send("abort", reason=reason)
        self._promote_pending()
        self.pending = None
        self._set_phase(ABORTED)
        # closing is still worth attempting; silence falls back to an exit
        self.start_cooperative_close(0)

    def _handle_abort(self, body: dict) -> None:
        self._log("peer_abort", reason=body.get("reason", ""))
        if self.pending is not None:
            self._promote_pending()
            self.pending = None
            if self.phase == UPDATING:
                self._set_phase(OPEN)
