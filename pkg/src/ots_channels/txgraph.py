"""Builders for every transaction template in the channel graph.

All builders are pure functions of (parameters, state, anchor outpoints), so
both parties and watchtowers reconstruct byte-identical transactions from
parameters plus signatures alone. Amounts follow the connector scheme: the
funding transaction carries the total deposit plus 11 connector units (3e on
the unilateral-exit output covering the worst-case unconfirmed depth of three,
2e on each of four dispute outputs; at privacy levels 2 and 3 the four
watchtower units move onto a 4e anchor for the detached dispute structure).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .chain import Outpoint, Transaction, TxInput, TxOutput
from .crypto import CovenantKeySet, OTPublicKey
from .htlc import Htlc, htlc_lock
from .script import (
    OutputLock,
    ScriptOp,
    chashv,
    covenant_check,
    cseqv,
    csigv,
    cvalv,
    op_else,
    op_endif,
    op_if,
    op_less_than,
    op_verify,
    ot_csigv,
    push_int,
)


class TxGraphError(Exception):
    pass


class InsufficientFundingError(TxGraphError):
    pass


class StateZeroError(TxGraphError):
    """State 0 has no punish material: nothing older exists to revoke."""


class WrongLevelError(TxGraphError):
    pass


# ---------------------------------------------------------------------------
# Parameters and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelParams:
    """Everything both parties agree on at setup; immutable afterwards."""

    i_bal: int
    epsilon: int
    timeout: int
    keyset: CovenantKeySet
    alice_sig_pub: bytes
    bob_sig_pub: bytes
    h_a: bytes
    h_b: bytes
    k_a_pub: OTPublicKey
    k_b_pub: OTPublicKey
    privacy_level: int = 1
    h_e: bytes | None = None
    wt_random_x: bytes | None = None
    wta_sig_pub: bytes | None = None
    wtb_sig_pub: bytes | None = None
    wt_reward: int = 0
    chain_length: int = 4096

    def __post_init__(self) -> None:
        if self.i_bal <= 0:
            raise ValueError("total deposit must be positive")
        if self.epsilon <= 0:
            raise ValueError("connector amount must be positive")
        if self.timeout < 1:
            raise ValueError("dispute window must be at least one block")
        if self.privacy_level not in (1, 2, 3):
            raise ValueError("privacy level is 1, 2 or 3")
        if self.privacy_level >= 2 and (self.h_e is None or self.wt_random_x is None):
            raise ValueError("levels 2 and 3 need h_e and the random anchor payload")
        if not 0 <= self.wt_reward <= self.epsilon:
            raise ValueError("tower reward comes out of one connector unit")

    @property
    def alice_address(self) -> OutputLock:
        return OutputLock.single((csigv(self.alice_sig_pub),))

    @property
    def bob_address(self) -> OutputLock:
        return OutputLock.single((csigv(self.bob_sig_pub),))

    @property
    def shared_address(self) -> OutputLock:
        return OutputLock.tree([(csigv(self.alice_sig_pub),), (csigv(self.bob_sig_pub),)])

    @property
    def wta_address(self) -> OutputLock | None:
        if self.wta_sig_pub is None:
            return None
        return OutputLock.single((csigv(self.wta_sig_pub),))

    @property
    def wtb_address(self) -> OutputLock | None:
        if self.wtb_sig_pub is None:
            return None
        return OutputLock.single((csigv(self.wtb_sig_pub),))

    @property
    def covenant_lock(self) -> OutputLock:
        return OutputLock.single((covenant_check(self.keyset),))


@dataclass(frozen=True)
class StateSnapshot:
    """One channel state: balances, sequence numbers, open HTLCs."""

    isn: int
    esn: int
    a_bal: int
    b_bal: int
    htlcs: tuple[Htlc, ...] = ()
    fee_commit: int = 0

    def check_conservation(self, i_bal: int) -> None:
        total = self.a_bal + self.b_bal + sum(h.amount for h in self.htlcs) + self.fee_commit
        if total != i_bal:
            raise TxGraphError(
                f"state {self.isn}: balances {total} do not reconstruct deposit {i_bal}"
            )
        if self.a_bal < 0 or self.b_bal < 0 or self.fee_commit < 0:
            raise TxGraphError("negative balance component")
        if self.esn < self.isn:
            raise TxGraphError("external sequence number below internal")


# ---------------------------------------------------------------------------
# Built templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InputPlan:
    """How one template input is satisfied: source output, leaf, witness slots."""

    source: str
    leaf: int
    slots: tuple[str, ...]


@dataclass
class BuiltTx:
    name: str
    tx: Transaction
    output_names: dict[str, int]
    input_plans: list[InputPlan]

    @property
    def txid(self) -> bytes:
        return self.tx.txid

    def outpoint(self, output_name: str) -> Outpoint:
        return self.tx.outpoint(self.output_names[output_name])


@dataclass(frozen=True)
class Anchors:
    """Outpoints the per-state templates attach to."""

    initial_funds: Outpoint
    commit_src: Outpoint          # unilateral-exit output, or the level-3 relay
    bob_disputes: Outpoint
    alice_disputes: Outpoint
    wtb_disputes: Outpoint | None = None
    wta_disputes: Outpoint | None = None


# ---------------------------------------------------------------------------
# Scripts
# ---------------------------------------------------------------------------

def unilateral_exit_script(params: ChannelParams) -> tuple[ScriptOp, ...]:
    """Spender reveals its timeout preimage; branch selects whose."""
    return (
        covenant_check(params.keyset),
        op_if(), chashv(params.h_b), op_else(), chashv(params.h_a), op_endif(),
    )


UNILATERAL_EXIT_SLOTS = ("preimage", "branch", "covenant")


def commit_exit_lock(params: ChannelParams, esn: int) -> OutputLock:
    """Three leaves: assert the embedded sequence number, or time the committer out."""
    assert_leaf: tuple[ScriptOp, ...] = (
        covenant_check(params.keyset, 0),
        op_if(), ot_csigv((params.k_b_pub,)), cvalv(esn),
        op_else(), ot_csigv((params.k_a_pub,)), cvalv(esn), op_endif(),
    )
    if params.privacy_level >= 2:
        assert_leaf = assert_leaf + (chashv(params.h_e),)
    expire_alice_leaf = (covenant_check(params.keyset, 1), cseqv(params.timeout), chashv(params.h_a))
    expire_bob_leaf = (covenant_check(params.keyset, 2), cseqv(params.timeout), chashv(params.h_b))
    return OutputLock.tree([assert_leaf, expire_alice_leaf, expire_bob_leaf])


ASSERT_LEAF = 0
EXPIRE_ALICE_LEAF = 1
EXPIRE_BOB_LEAF = 2


def assert_slots(params: ChannelParams) -> tuple[str, ...]:
    if params.privacy_level >= 2:
        return ("preimage_e", "ots_sig", "branch", "covenant")
    return ("ots_sig", "branch", "covenant")


def ready_lock(params: ChannelParams) -> OutputLock:
    """Finalize after the dispute window, or immediately with both preimages."""
    wait_leaf = (covenant_check(params.keyset, 0), cseqv(params.timeout))
    fast_leaf = (covenant_check(params.keyset, 1), chashv(params.h_a), chashv(params.h_b))
    return OutputLock.tree([wait_leaf, fast_leaf])


READY_WAIT_LEAF = 0
READY_FAST_LEAF = 1
READY_WAIT_SLOTS = ("covenant",)
READY_FAST_SLOTS = ("preimage_b", "preimage_a", "covenant")


def punish_lock(keyset: CovenantKeySet, watched_pub: OTPublicKey, bound: int) -> OutputLock:
    """Requires an on-chain one-time signature recovering m with m < bound."""
    return OutputLock.single((
        covenant_check(keyset),
        ot_csigv((watched_pub,)),
        push_int(bound),
        op_less_than(),
        op_verify(),
    ))


PUNISH_SLOTS = ("ots_sig", "covenant")
COVENANT_SLOTS = ("covenant",)
ADDRESS_SLOTS = ("sig",)


# ---------------------------------------------------------------------------
# Funding
# ---------------------------------------------------------------------------

SETUP_CONNECTORS = 11  # 3e exit + 4 * 2e disputes (or 2 * 2e + 4e anchor)


def required_funding(params: ChannelParams) -> int:
    return params.i_bal + SETUP_CONNECTORS * params.epsilon


def party_funding_shares(params: ChannelParams, a_deposit: int, b_deposit: int) -> tuple[int, int]:
    """What each party owes the funding transaction; connectors split evenly."""
    if a_deposit + b_deposit != params.i_bal:
        raise TxGraphError("deposits must sum to the channel total")
    connectors = SETUP_CONNECTORS * params.epsilon
    bob_share = connectors // 2
    return a_deposit + (connectors - bob_share), b_deposit + bob_share


def build_setup(params: ChannelParams,
                alice_funding: list[tuple[Outpoint, int]],
                bob_funding: list[tuple[Outpoint, int]],
                a_deposit: int, b_deposit: int) -> BuiltTx:
    """The only transaction that is always published on-chain."""
    alice_owes, bob_owes = party_funding_shares(params, a_deposit, b_deposit)
    alice_total = sum(a for _, a in alice_funding)
    bob_total = sum(a for _, a in bob_funding)
    if alice_total < alice_owes or bob_total < bob_owes:
        raise InsufficientFundingError(
            f"funding short: alice {alice_total}/{alice_owes}, bob {bob_total}/{bob_owes}"
        )
    e = params.epsilon
    outputs = [
        TxOutput(params.i_bal, params.covenant_lock),
        TxOutput(3 * e, OutputLock.single(unilateral_exit_script(params))),
        TxOutput(2 * e, params.covenant_lock),
        TxOutput(2 * e, params.covenant_lock),
    ]
    names = {"initial_funds": 0, "unilateral_exit": 1, "bob_disputes": 2, "alice_disputes": 3}
    if params.privacy_level == 1:
        outputs.append(TxOutput(2 * e, params.covenant_lock))
        outputs.append(TxOutput(2 * e, params.covenant_lock))
        names["wtb_disputes"] = 4
        names["wta_disputes"] = 5
        next_index = 6
    else:
        outputs.append(TxOutput(4 * e, params.covenant_lock))
        names["wt_anchor"] = 4
        next_index = 5
    if alice_total > alice_owes:
        outputs.append(TxOutput(alice_total - alice_owes, params.alice_address))
        names["alice_change"] = next_index
        next_index += 1
    if bob_total > bob_owes:
        outputs.append(TxOutput(bob_total - bob_owes, params.bob_address))
        names["bob_change"] = next_index
    inputs = [TxInput(op) for op, _ in alice_funding] + [TxInput(op) for op, _ in bob_funding]
    plans = [InputPlan("external:alice", 0, ADDRESS_SLOTS) for _ in alice_funding]
    plans += [InputPlan("external:bob", 0, ADDRESS_SLOTS) for _ in bob_funding]
    return BuiltTx("setup", Transaction(inputs, outputs), names, plans)


def setup_anchors(params: ChannelParams, setup: BuiltTx,
                  wt_structure: BuiltTx | None = None) -> Anchors:
    """Resolve the per-state attachment points for the configured privacy level."""
    if params.privacy_level == 1:
        return Anchors(
            initial_funds=setup.outpoint("initial_funds"),
            commit_src=setup.outpoint("unilateral_exit"),
            bob_disputes=setup.outpoint("bob_disputes"),
            alice_disputes=setup.outpoint("alice_disputes"),
            wtb_disputes=setup.outpoint("wtb_disputes"),
            wta_disputes=setup.outpoint("wta_disputes"),
        )
    if wt_structure is None:
        raise TxGraphError("levels 2 and 3 need the detached dispute structure")
    commit_src = (setup.outpoint("unilateral_exit") if params.privacy_level == 2
                  else wt_structure.outpoint("start_exit_out"))
    return Anchors(
        initial_funds=setup.outpoint("initial_funds"),
        commit_src=commit_src,
        bob_disputes=setup.outpoint("bob_disputes"),
        alice_disputes=setup.outpoint("alice_disputes"),
        wtb_disputes=wt_structure.outpoint("wtb_disputes"),
        wta_disputes=wt_structure.outpoint("wta_disputes"),
    )


# ---------------------------------------------------------------------------
# Detached watchtower structures (levels 2 and 3)
# ---------------------------------------------------------------------------

def build_wt_structures(params: ChannelParams, setup: BuiltTx) -> BuiltTx:
    """The unpredictable-id transaction the tower punish paths hang off.

    Level 2 detaches only the dispute outputs; level 3 also relays the whole
    exit path through it. The random payload makes the id unguessable.
    """
    if params.privacy_level == 1:
        raise WrongLevelError("level 1 towers attach to the funding transaction")
    e = params.epsilon
    if params.privacy_level == 2:
        tx = Transaction(
            inputs=[TxInput(setup.outpoint("wt_anchor"))],
            outputs=[
                TxOutput(2 * e, params.covenant_lock),
                TxOutput(2 * e, params.covenant_lock),
                TxOutput(0, params.covenant_lock, op_return_payload=params.wt_random_x),
            ],
        )
        names = {"wtb_disputes": 0, "wta_disputes": 1}
        plans = [InputPlan("setup:wt_anchor", 0, COVENANT_SLOTS)]
        return BuiltTx("wt_disputes", tx, names, plans)
    tx = Transaction(
        inputs=[TxInput(setup.outpoint("unilateral_exit")),
                TxInput(setup.outpoint("wt_anchor"))],
        outputs=[
            TxOutput(3 * e, params.covenant_lock),
            TxOutput(2 * e, params.covenant_lock),
            TxOutput(2 * e, params.covenant_lock),
            TxOutput(0, params.covenant_lock, op_return_payload=params.wt_random_x),
        ],
    )
    names = {"start_exit_out": 0, "wtb_disputes": 1, "wta_disputes": 2}
    plans = [InputPlan("setup:unilateral_exit", 0, UNILATERAL_EXIT_SLOTS),
             InputPlan("setup:wt_anchor", 0, COVENANT_SLOTS)]
    return BuiltTx("start_exit", tx, names, plans)


# ---------------------------------------------------------------------------
# Per-state exit set
# ---------------------------------------------------------------------------

def build_exit_set(params: ChannelParams, state: StateSnapshot, anchors: Anchors,
                   l3_payload: bytes | None = None) -> dict[str, BuiltTx]:
    """Commit, assert, finalize, and both timeout transactions for one state."""
    state.check_conservation(params.i_bal)
    e = params.epsilon
    commit_outputs = [TxOutput(2 * e, commit_exit_lock(params, state.esn))]
    commit_names = {"commit_exit_out": 0}
    if params.privacy_level == 3:
        if l3_payload is None:
            raise TxGraphError("level 3 commits carry the tower packet payload")
        commit_outputs.append(TxOutput(0, params.covenant_lock, op_return_payload=l3_payload))
    commit_slots = (UNILATERAL_EXIT_SLOTS if params.privacy_level < 3 else COVENANT_SLOTS)
    commit = BuiltTx(
        "commit_exit",
        Transaction([TxInput(anchors.commit_src)], commit_outputs),
        commit_names,
        [InputPlan("anchors:commit_src", 0, commit_slots)],
    )

    assert_tx = BuiltTx(
        "assert_exit",
        Transaction(
            [TxInput(commit.outpoint("commit_exit_out"))],
            [TxOutput(e, ready_lock(params)), TxOutput(e, params.shared_address)],
        ),
        {"ready_out": 0, "cpfp_out": 1},
        [InputPlan("commit_exit:commit_exit_out", ASSERT_LEAF, assert_slots(params))],
    )

    finalize_outputs = []
    finalize_names: dict[str, int] = {}
    if state.a_bal > 0:
        finalize_names["alice_out"] = len(finalize_outputs)
        finalize_outputs.append(TxOutput(state.a_bal, params.alice_address))
    if state.b_bal > 0:
        finalize_names["bob_out"] = len(finalize_outputs)
        finalize_outputs.append(TxOutput(state.b_bal, params.bob_address))
    for i, h in enumerate(state.htlcs):
        finalize_names[f"htlc_{i}"] = len(finalize_outputs)
        finalize_outputs.append(
            TxOutput(h.amount, htlc_lock(h, params.alice_sig_pub, params.bob_sig_pub))
        )
    finalize = BuiltTx(
        "finalize_exit",
        Transaction(
            [TxInput(anchors.initial_funds), TxInput(assert_tx.outpoint("ready_out"))],
            finalize_outputs,
        ),
        finalize_names,
        [InputPlan("anchors:initial_funds", 0, COVENANT_SLOTS),
         InputPlan("assert_exit:ready_out", READY_WAIT_LEAF, READY_WAIT_SLOTS)],
    )

    # A stalled exit forfeits everything to the other party (one connector
    # unit of the 2e input pays the fee).
    expire_alice = BuiltTx(
        "expire_alice",
        Transaction(
            [TxInput(commit.outpoint("commit_exit_out")), TxInput(anchors.initial_funds)],
            [TxOutput(params.i_bal + e, params.bob_address)],
        ),
        {"swept": 0},
        [InputPlan("commit_exit:commit_exit_out", EXPIRE_ALICE_LEAF, ("preimage_a", "covenant")),
         InputPlan("anchors:initial_funds", 0, COVENANT_SLOTS)],
    )
    expire_bob = BuiltTx(
        "expire_bob",
        Transaction(
            [TxInput(commit.outpoint("commit_exit_out")), TxInput(anchors.initial_funds)],
            [TxOutput(params.i_bal + e, params.alice_address)],
        ),
        {"swept": 0},
        [InputPlan("commit_exit:commit_exit_out", EXPIRE_BOB_LEAF, ("preimage_b", "covenant")),
         InputPlan("anchors:initial_funds", 0, COVENANT_SLOTS)],
    )
    return {
        "commit_exit": commit,
        "assert_exit": assert_tx,
        "finalize_exit": finalize,
        "expire_alice": expire_alice,
        "expire_bob": expire_bob,
    }


# ---------------------------------------------------------------------------
# Punish sets
# ---------------------------------------------------------------------------

def build_punish_pair(keyset: CovenantKeySet, watched: str, watched_pub: OTPublicKey,
                      bound: int, epsilon: int, i_bal: int,
                      dispute_outpoint: Outpoint, initial_funds: Outpoint,
                      winner_address: OutputLock, name_prefix: str = "",
                      tower_address: OutputLock | None = None,
                      wt_reward: int = 0) -> dict[str, BuiltTx]:
    """Commitment-to-punish plus the punishment itself, against one party.

    The commitment's output script admits any scraped one-time signature whose
    recovered value is strictly below ``bound``; the punishment pays the whole
    deposit to the winner (plus a connector-funded tower reward if configured).
    Takes bare arguments so watchtowers can rebuild pairs from registration
    data alone.
    """
    commit = BuiltTx(
        f"{name_prefix}commit_punish_{watched}",
        Transaction(
            [TxInput(dispute_outpoint)],
            [TxOutput(epsilon, punish_lock(keyset, watched_pub, bound))],
        ),
        {"punish_out": 0},
        [InputPlan("anchors:disputes", 0, COVENANT_SLOTS)],
    )
    outputs = [TxOutput(i_bal, winner_address)]
    names = {"swept": 0}
    if tower_address is not None and wt_reward > 0:
        outputs.append(TxOutput(wt_reward, tower_address))
        names["reward"] = 1
    punish = BuiltTx(
        f"{name_prefix}punish_{watched}",
        Transaction(
            [TxInput(initial_funds), TxInput(commit.outpoint("punish_out"))],
            outputs,
        ),
        names,
        [InputPlan("anchors:initial_funds", 0, COVENANT_SLOTS),
         InputPlan("commit_punish:punish_out", 0, PUNISH_SLOTS)],
    )
    return {commit.name: commit, punish.name: punish}


def _pair_args(params: ChannelParams, watched: str) -> dict:
    return dict(
        keyset=params.keyset,
        watched=watched,
        watched_pub=params.k_a_pub if watched == "alice" else params.k_b_pub,
        epsilon=params.epsilon,
        i_bal=params.i_bal,
        winner_address=params.bob_address if watched == "alice" else params.alice_address,
    )


def build_punish_set(params: ChannelParams, state: StateSnapshot,
                     anchors: Anchors, include_towers: bool = True) -> dict[str, BuiltTx]:
    """All punish material for one state; rejects state 0."""
    if state.isn < 1:
        raise StateZeroError("no punish material exists for the initial state")
    out: dict[str, BuiltTx] = {}
    out.update(build_punish_pair(
        bound=state.esn, dispute_outpoint=anchors.bob_disputes,
        initial_funds=anchors.initial_funds, **_pair_args(params, "alice"),
    ))
    out.update(build_punish_pair(
        bound=state.esn, dispute_outpoint=anchors.alice_disputes,
        initial_funds=anchors.initial_funds, **_pair_args(params, "bob"),
    ))
    if include_towers and anchors.wta_disputes is not None:
        out.update(build_punish_pair(
            bound=state.esn, dispute_outpoint=anchors.wta_disputes,
            initial_funds=anchors.initial_funds, name_prefix="wta_",
            tower_address=params.wta_address, wt_reward=params.wt_reward,
            **_pair_args(params, "bob"),
        ))
    if include_towers and anchors.wtb_disputes is not None:
        out.update(build_punish_pair(
            bound=state.esn, dispute_outpoint=anchors.wtb_disputes,
            initial_funds=anchors.initial_funds, name_prefix="wtb_",
            tower_address=params.wtb_address, wt_reward=params.wt_reward,
            **_pair_args(params, "alice"),
        ))
    return out


# ---------------------------------------------------------------------------
# Cooperative close
# ---------------------------------------------------------------------------

def build_cooperative_close(params: ChannelParams, state: StateSnapshot,
                            setup: BuiltTx, close_fee: int,
                            sweep_connectors: bool = True) -> BuiltTx:
    """One transaction spending straight off the funding transaction.

    With both balances positive the fee splits evenly and the swept connector
    surplus likewise; a party with zero balance drops out and the other takes
    a single output of everything minus the fee.
    """
    if state.htlcs:
        raise TxGraphError("settle or fail open htlcs before closing")
    state.check_conservation(params.i_bal)
    inputs = [TxInput(setup.outpoint("initial_funds"))]
    plans = [InputPlan("setup:initial_funds", 0, COVENANT_SLOTS)]
    swept = 0
    if sweep_connectors:
        connector_names = ["unilateral_exit", "bob_disputes", "alice_disputes"]
        connector_names += (["wtb_disputes", "wta_disputes"]
                            if params.privacy_level == 1 else ["wt_anchor"])
        for cname in connector_names:
            idx = setup.output_names[cname]
            inputs.append(TxInput(setup.outpoint(cname)))
            slots = UNILATERAL_EXIT_SLOTS if cname == "unilateral_exit" else COVENANT_SLOTS
            plans.append(InputPlan(f"setup:{cname}", 0, slots))
            swept += setup.tx.outputs[idx].amount
    total_in = params.i_bal + swept
    if close_fee > total_in:
        raise TxGraphError("close fee exceeds channel funds")
    outputs = []
    names = {}
    if state.a_bal > 0 and state.b_bal > 0:
        surplus = swept - close_fee
        alice_amount = state.a_bal + surplus - surplus // 2
        bob_amount = state.b_bal + surplus // 2
        names = {"alice_out": 0, "bob_out": 1}
        outputs = [TxOutput(alice_amount, params.alice_address),
                   TxOutput(bob_amount, params.bob_address)]
    elif state.a_bal > 0:
        names = {"alice_out": 0}
        outputs = [TxOutput(total_in - close_fee, params.alice_address)]
    else:
        names = {"bob_out": 0}
        outputs = [TxOutput(total_in - close_fee, params.bob_address)]
    return BuiltTx("coop_close", Transaction(inputs, outputs), names, plans)


# ---------------------------------------------------------------------------
# Level-3 packet payload
# ---------------------------------------------------------------------------

L3_CIPHERTEXT_LEN = 130  # two 65-byte signature records per tower packet


def l3_payload_pair(isn: int, bound: int, cipher_wta: bytes, cipher_wtb: bytes) -> bytes:
    """OP_RETURN payload on a commit: plaintext index and bound, two packets."""
    for cipher in (cipher_wta, cipher_wtb):
        if len(cipher) != L3_CIPHERTEXT_LEN:
            raise TxGraphError(f"level-3 ciphertext must be {L3_CIPHERTEXT_LEN} bytes")
    return (isn.to_bytes(4, "big") + bound.to_bytes(4, "big")
            + cipher_wta + cipher_wtb)


def parse_l3_payload(payload: bytes) -> tuple[int, int, bytes, bytes]:
    if len(payload) != 8 + 2 * L3_CIPHERTEXT_LEN:
        raise TxGraphError("malformed level-3 payload")
    return (int.from_bytes(payload[:4], "big"),
            int.from_bytes(payload[4:8], "big"),
            payload[8:8 + L3_CIPHERTEXT_LEN],
            payload[8 + L3_CIPHERTEXT_LEN:])


# ---------------------------------------------------------------------------
# Weight estimation (reference constants)
# ---------------------------------------------------------------------------

WEIGHT_PREIMAGE = 21
WEIGHT_INPUT_AGGREGATE = 272
WEIGHT_OUTPUT = 124
WEIGHT_OTS_WITNESS = 800
WEIGHT_FINALIZE_2IN_2OUT = 792

_WEIGHT_COMPONENTS: dict[str, list[tuple[str, int]]] = {
    "commit_exit": [
        ("timeout preimage", WEIGHT_PREIMAGE),
        ("input with aggregate signature", WEIGHT_INPUT_AGGREGATE),
        ("output", WEIGHT_OUTPUT),
    ],
    "assert_exit": [
        ("signed sequence number", WEIGHT_OTS_WITNESS),
        ("input with aggregate signature", WEIGHT_INPUT_AGGREGATE),
        ("output", WEIGHT_OUTPUT),
    ],
    "finalize_exit": [
        ("two inputs, two outputs", WEIGHT_FINALIZE_2IN_2OUT),
    ],
}


@dataclass(frozen=True)
class WeightReport:
    per_tx: dict[str, int]
    components: dict[str, list[tuple[str, int]]]

    @property
    def total(self) -> int:
        return sum(self.per_tx.values())


def estimate_weight(tx_name: str) -> int:
    if tx_name not in _WEIGHT_COMPONENTS:
        raise TxGraphError(f"no weight model for {tx_name}")
    return sum(w for _, w in _WEIGHT_COMPONENTS[tx_name])


def exit_path_weight_report() -> WeightReport:
    """The unilateral-exit path's virtual weight, per transaction and total."""
    per_tx = {name: estimate_weight(name) for name in _WEIGHT_COMPONENTS}
    return WeightReport(per_tx, dict(_WEIGHT_COMPONENTS))


# ---------------------------------------------------------------------------
# Template audits
# ---------------------------------------------------------------------------

def audit_template_closure(templates: dict[str, BuiltTx],
                           external: set[Outpoint]) -> None:
    """Every input resolves to an output built in the set or known on-chain."""
    produced: set[Outpoint] = set(external)
    for built in templates.values():
        for i in range(len(built.tx.outputs)):
            produced.add(built.tx.outpoint(i))
    for built in templates.values():
        for txin in built.tx.inputs:
            if txin.outpoint not in produced:
                raise TxGraphError(
                    f"{built.name} input {txin.outpoint.short()} resolves nowhere"
                )
