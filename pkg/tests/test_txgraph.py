import dataclasses

import pytest

from ots_channels.chain import Outpoint
from ots_channels.crypto import (
    CovenantKeySet,
    CovenantSignature,
    OTParams,
    OTSignature,
    PartySignature,
    SignerRegistry,
    covenant_combine,
    covenant_partial,
    hash160,
    ots_keygen,
    ots_sign,
    party_sign,
    sha256,
)
from ots_channels.htlc import Htlc
from ots_channels.script import ExecContext, Witness, execute
from ots_channels.txgraph import (
    Anchors,
    ChannelParams,
    InsufficientFundingError,
    StateSnapshot,
    StateZeroError,
    TxGraphError,
    WrongLevelError,
    audit_template_closure,
    build_cooperative_close,
    build_exit_set,
    build_punish_set,
    build_setup,
    build_wt_structures,
    estimate_weight,
    exit_path_weight_report,
    l3_payload_pair,
    parse_l3_payload,
    party_funding_shares,
    required_funding,
    setup_anchors,
)


class Rig:
    """Hand-built channel context: secrets, parameters, and anchor outpoints."""

    def __init__(self, privacy_level=1, htlcs=(), wt_reward=200):
        self.registry = SignerRegistry()
        self.cov_secrets = (b"A" * 32, b"B" * 32)
        keyset = CovenantKeySet(*[self.registry.register(s) for s in self.cov_secrets])
        self.sig_secrets = (b"a" * 32, b"b" * 32)
        self.sig_pubs = tuple(self.registry.register(s) for s in self.sig_secrets)
        self.wt_secrets = (b"w" * 32, b"W" * 32)
        self.wt_pubs = tuple(self.registry.register(s) for s in self.wt_secrets)
        self.ot_alice = ots_keygen(OTParams(), b"\x01" * 32)
        self.ot_bob = ots_keygen(OTParams(), b"\x02" * 32)
        self.p_a, self.p_b, self.p_e = b"\xaa" * 32, b"\xbb" * 32, b"\xee" * 32
        self.params = ChannelParams(
            i_bal=100_000, epsilon=1_000, timeout=6, keyset=keyset,
            alice_sig_pub=self.sig_pubs[0], bob_sig_pub=self.sig_pubs[1],
            h_a=hash160(self.p_a), h_b=hash160(self.p_b),
            k_a_pub=self.ot_alice.public, k_b_pub=self.ot_bob.public,
            privacy_level=privacy_level,
            h_e=hash160(self.p_e) if privacy_level >= 2 else None,
            wt_random_x=b"x" * 16 if privacy_level >= 2 else None,
            wta_sig_pub=self.wt_pubs[0], wtb_sig_pub=self.wt_pubs[1],
            wt_reward=wt_reward,
        )
        self.funding_a = [(Outpoint(sha256(b"fa"), 0), 56_000)]
        self.funding_b = [(Outpoint(sha256(b"fb"), 0), 56_500)]
        self.setup = build_setup(self.params, self.funding_a, self.funding_b,
                                 50_000, 50_000)
        self.wt_structure = None
        if privacy_level >= 2:
            self.wt_structure = build_wt_structures(self.params, self.setup)
        self.anchors = setup_anchors(self.params, self.setup, self.wt_structure)
        self.state = StateSnapshot(3, 10, 60_000 - sum(h.amount for h in htlcs),
                                   40_000, tuple(htlcs))
        payload = None
        if privacy_level == 3:
            payload = l3_payload_pair(self.state.isn, self.state.esn + 1,
                                      b"\x00" * 130, b"\x01" * 130)
        self.exit_set = build_exit_set(self.params, self.state, self.anchors, payload)
        self.punish_set = build_punish_set(self.params, self.state, self.anchors)

    def aggregate(self, txid, leaf):
        return covenant_combine(self.params.keyset, {
            pub: covenant_partial(secret, txid, leaf)
            for pub, secret in zip((self.params.keyset.pub_a, self.params.keyset.pub_b),
                                   self.cov_secrets)
        })

    def ctx(self, txid, leaf, confirmations=50, height=100):
        return ExecContext(tx_digest=txid, input_index=0, chain_height=height,
                           confirmations=confirmations, leaf_index=leaf,
                           registry=self.registry)


@pytest.fixture(scope="module")
def rig():
    return Rig()


# ---------------------------------------------------------------------------
# amounts and layout
# ---------------------------------------------------------------------------

def test_setup_amounts(rig):
    outs = rig.setup.tx.outputs
    names = rig.setup.output_names
    assert outs[names["initial_funds"]].amount == 100_000
    assert outs[names["unilateral_exit"]].amount == 3_000
    for name in ("bob_disputes", "alice_disputes", "wtb_disputes", "wta_disputes"):
        assert outs[names[name]].amount == 2_000


def test_funding_shares_and_change():
    rig = Rig()
    alice_owes, bob_owes = party_funding_shares(rig.params, 50_000, 50_000)
    assert alice_owes + bob_owes == required_funding(rig.params) == 111_000
    outs = rig.setup.tx.outputs
    names = rig.setup.output_names
    assert outs[names["alice_change"]].amount == 56_000 - alice_owes
    assert outs[names["bob_change"]].amount == 56_500 - bob_owes
    # exact funding produces a change-free transaction
    exact = build_setup(rig.params, [(Outpoint(sha256(b"xa"), 0), alice_owes)],
                        [(Outpoint(sha256(b"xb"), 0), bob_owes)], 50_000, 50_000)
    assert "alice_change" not in exact.output_names
    assert "bob_change" not in exact.output_names
    assert sum(o.amount for o in exact.tx.outputs) == 111_000


def test_insufficient_funding():
    rig = Rig()
    with pytest.raises(InsufficientFundingError):
        build_setup(rig.params, [(Outpoint(sha256(b"xa"), 0), 100)],
                    rig.funding_b, 50_000, 50_000)


def test_level2_moves_tower_outputs_off_setup():
    rig = Rig(privacy_level=2)
    assert "wta_disputes" not in rig.setup.output_names
    assert "wt_anchor" in rig.setup.output_names
    assert rig.setup.tx.outputs[rig.setup.output_names["wt_anchor"]].amount == 4_000
    assert "wta_disputes" in rig.wt_structure.output_names


def test_detached_structure_id_depends_on_payload():
    one = Rig(privacy_level=2)
    two = Rig(privacy_level=2)
    altered = dataclasses.replace(two.params, wt_random_x=b"y" * 16)
    rebuilt = build_wt_structures(altered, two.setup)
    assert one.wt_structure.txid != rebuilt.txid


def test_wrong_level_rejected(rig):
    with pytest.raises(WrongLevelError):
        build_wt_structures(rig.params, rig.setup)


def test_finalize_balance_arithmetic(rig):
    # conservation oracle: outputs plus the connector fee reconstruct the inputs
    fin = rig.exit_set["finalize_exit"]
    outs = fin.tx.outputs
    assert outs[fin.output_names["alice_out"]].amount == 60_000
    assert outs[fin.output_names["bob_out"]].amount == 40_000
    in_total = 100_000 + 1_000  # deposit plus the ready connector
    assert in_total - sum(o.amount for o in outs) == 1_000


def test_expire_pays_everything_to_the_other_party(rig):
    expire_alice = rig.exit_set["expire_alice"]
    out = expire_alice.tx.outputs[0]
    assert out.amount == 101_000  # all channel funds plus one connector unit
    assert out.lock.commitment == rig.params.bob_address.commitment
    expire_bob = rig.exit_set["expire_bob"]
    assert expire_bob.tx.outputs[0].lock.commitment == rig.params.alice_address.commitment


def test_punish_pays_deposit_to_winner(rig):
    punish = rig.punish_set["punish_alice"]
    assert punish.tx.outputs[0].amount == 100_000
    assert punish.tx.outputs[0].lock.commitment == rig.params.bob_address.commitment
    wt_punish = rig.punish_set["wtb_punish_alice"]
    assert wt_punish.tx.outputs[0].amount == 100_000
    assert wt_punish.tx.outputs[1].amount == 200  # reward out of the connector


def test_state_zero_has_no_punish_material(rig):
    state0 = StateSnapshot(0, 1, 50_000, 50_000)
    with pytest.raises(StateZeroError):
        build_punish_set(rig.params, state0, rig.anchors)


def test_template_closure(rig):
    templates = {"setup": rig.setup}
    templates.update(rig.exit_set)
    templates.update(rig.punish_set)
    external = {op for op, _ in rig.funding_a + rig.funding_b}
    audit_template_closure(templates, external)


def test_rebuild_determinism(rig):
    again = build_exit_set(rig.params, rig.state, rig.anchors)
    for name, built in rig.exit_set.items():
        assert built.tx.full_bytes() == again[name].tx.full_bytes(), name


def test_conservation_validator(rig):
    with pytest.raises(TxGraphError):
        StateSnapshot(1, 2, 60_000, 50_000).check_conservation(100_000)
    with pytest.raises(TxGraphError):
        build_exit_set(rig.params, StateSnapshot(1, 2, 60_000, 50_000), rig.anchors)


# ---------------------------------------------------------------------------
# weights (reference constants)
# ---------------------------------------------------------------------------

def test_weight_components():
    assert estimate_weight("commit_exit") == 21 + 272 + 124 == 417
    assert estimate_weight("assert_exit") == 800 + 272 + 124 == 1196
    assert estimate_weight("finalize_exit") == 792
    report = exit_path_weight_report()
    assert report.total == 2405
    assert report.per_tx == {"commit_exit": 417, "assert_exit": 1196,
                             "finalize_exit": 792}
    assert report.total == sum(report.per_tx.values())


# ---------------------------------------------------------------------------
# cooperative close
# ---------------------------------------------------------------------------

def test_coop_close_even_split(rig):
    state = StateSnapshot(5, 12, 50_000, 50_000)
    built = build_cooperative_close(rig.params, state, rig.setup, close_fee=400)
    outs = built.tx.outputs
    # each pays half the fee; the swept connectors split evenly
    swept = 11_000
    each = 50_000 + (swept - 400) // 2
    assert outs[built.output_names["alice_out"]].amount == each
    assert outs[built.output_names["bob_out"]].amount == each
    assert sum(o.amount for o in outs) + 400 == 111_000


def test_coop_close_zero_balance_single_output(rig):
    state = StateSnapshot(5, 12, 100_000, 0)
    built = build_cooperative_close(rig.params, state, rig.setup, close_fee=500)
    assert len(built.tx.outputs) == 1
    assert built.tx.outputs[0].amount == 111_000 - 500
    assert built.tx.outputs[0].lock.commitment == rig.params.alice_address.commitment


def test_coop_close_no_sweep(rig):
    state = StateSnapshot(5, 12, 70_000, 30_000)
    built = build_cooperative_close(rig.params, state, rig.setup, close_fee=0,
                                    sweep_connectors=False)
    assert len(built.tx.inputs) == 1
    assert sum(o.amount for o in built.tx.outputs) == 100_000


def test_coop_close_rejects_open_htlcs(rig):
    htlc = Htlc("alice_to_bob", 5_000, b"\x01" * 20, 50)
    state = StateSnapshot(5, 12, 55_000, 40_000, (htlc,))
    with pytest.raises(TxGraphError):
        build_cooperative_close(rig.params, state, rig.setup, 0)


# ---------------------------------------------------------------------------
# level-3 payload codec
# ---------------------------------------------------------------------------

def test_l3_payload_roundtrip():
    wta, wtb = bytes(range(130)), bytes(reversed(range(130)))
    payload = l3_payload_pair(7, 99, wta, wtb)
    assert parse_l3_payload(payload) == (7, 99, wta, wtb)
    with pytest.raises(TxGraphError):
        l3_payload_pair(7, 99, b"short", wtb)
    with pytest.raises(TxGraphError):
        parse_l3_payload(payload + b"x")


# ---------------------------------------------------------------------------
# exhaustive spend-path matrix
# ---------------------------------------------------------------------------

def corrupt(item):
    if isinstance(item, CovenantSignature):
        return CovenantSignature(bytes([item.token[0] ^ 1]) + item.token[1:])
    if isinstance(item, OTSignature):
        first = bytes([item.chain_values[0][0] ^ 1]) + item.chain_values[0][1:]
        return OTSignature(item.digits, (first,) + item.chain_values[1:])
    if isinstance(item, PartySignature):
        return PartySignature(item.pub, bytes([item.mac[0] ^ 1]) + item.mac[1:])
    if isinstance(item, bool):
        return not item
    if isinstance(item, bytes):
        return bytes([item[0] ^ 1]) + item[1:]
    if isinstance(item, int):
        return item + 1
    raise AssertionError(f"no corruption rule for {type(item)}")


def honest_paths(rig):
    """Every spendable (lock, leaf) with an honest witness and its context."""
    params, state = rig.params, rig.state
    esn = state.esn
    alice_sig_a = ots_sign(ots_keygen(OTParams(), b"\x01" * 32), esn)
    bob_sig = ots_sign(ots_keygen(OTParams(), b"\x02" * 32), esn)
    stale_sig = ots_sign(ots_keygen(OTParams(), b"\x03" * 32), 5)  # value 5 < 10
    # the stale signature must come from the watched key to satisfy punishment
    stale_alice = ots_sign(ots_keygen(OTParams(), b"\x01" * 32), 5)
    stale_bob = ots_sign(ots_keygen(OTParams(), b"\x02" * 32), 5)

    setup_outs = rig.setup.tx.outputs
    names = rig.setup.output_names
    commit = rig.exit_set["commit_exit"]
    assert_tx = rig.exit_set["assert_exit"]
    paths = []

    def cov(txid, leaf):
        return rig.aggregate(txid, leaf)

    # funding exit output: both branches
    unilateral = setup_outs[names["unilateral_exit"]].lock
    txid = commit.txid
    paths.append(("unilateral/alice", unilateral, 0,
                  Witness((rig.p_a, False, cov(txid, 0)), 0), rig.ctx(txid, 0)))
    paths.append(("unilateral/bob", unilateral, 0,
                  Witness((rig.p_b, True, cov(txid, 0)), 0), rig.ctx(txid, 0)))
    # plain covenant outputs
    cp_txid = rig.punish_set["commit_punish_alice"].txid
    paths.append(("bob_disputes", setup_outs[names["bob_disputes"]].lock, 0,
                  Witness((cov(cp_txid, 0),), 0), rig.ctx(cp_txid, 0)))
    # commit output, all three leaves
    commit_lock = commit.tx.outputs[0].lock
    a_txid = assert_tx.txid
    paths.append(("commit/assert/alice", commit_lock, 0,
                  Witness((stale_alice if False else alice_sig_a, False, cov(a_txid, 0)), 0),
                  rig.ctx(a_txid, 0)))
    paths.append(("commit/assert/bob", commit_lock, 0,
                  Witness((bob_sig, True, cov(a_txid, 0)), 0), rig.ctx(a_txid, 0)))
    ea_txid = rig.exit_set["expire_alice"].txid
    eb_txid = rig.exit_set["expire_bob"].txid
    paths.append(("commit/expire_alice", commit_lock, 1,
                  Witness((rig.p_a, cov(ea_txid, 1)), 1), rig.ctx(ea_txid, 1)))
    paths.append(("commit/expire_bob", commit_lock, 2,
                  Witness((rig.p_b, cov(eb_txid, 2)), 2), rig.ctx(eb_txid, 2)))
    # the payout gate: wait leaf and fast leaf
    ready_lock = assert_tx.tx.outputs[0].lock
    f_txid = rig.exit_set["finalize_exit"].txid
    paths.append(("ready/wait", ready_lock, 0,
                  Witness((cov(f_txid, 0),), 0), rig.ctx(f_txid, 0)))
    paths.append(("ready/fast", ready_lock, 1,
                  Witness((rig.p_b, rig.p_a, cov(f_txid, 1)), 1), rig.ctx(f_txid, 1)))
    # punishment outputs
    pa = rig.punish_set["punish_alice"]
    pa_lock = rig.punish_set["commit_punish_alice"].tx.outputs[0].lock
    paths.append(("punish_alice", pa_lock, 0,
                  Witness((stale_alice, cov(pa.txid, 0)), 0), rig.ctx(pa.txid, 0)))
    pb = rig.punish_set["punish_bob"]
    pb_lock = rig.punish_set["commit_punish_bob"].tx.outputs[0].lock
    paths.append(("punish_bob", pb_lock, 0,
                  Witness((stale_bob, cov(pb.txid, 0)), 0), rig.ctx(pb.txid, 0)))
    # party addresses and the fee-bump output
    spend_txid = sha256(b"spend")
    sig_a = party_sign(rig.sig_secrets[0], rig.sig_pubs[0], spend_txid, 0)
    paths.append(("alice_address", params.alice_address, 0,
                  Witness((sig_a,), 0), rig.ctx(spend_txid, 0)))
    sig_b = party_sign(rig.sig_secrets[1], rig.sig_pubs[1], spend_txid, 1)
    paths.append(("shared/bob", params.shared_address, 1,
                  Witness((sig_b,), 1), rig.ctx(spend_txid, 1)))
    return paths


def test_path_matrix_honest_witnesses_succeed(rig):
    for name, lock, leaf, witness, ctx in honest_paths(rig):
        script = lock.reveal(leaf)
        result = execute(script, witness, ctx)
        assert result.ok, (name, result.reason)


def test_path_matrix_single_item_corruption_fails(rig):
    for name, lock, leaf, witness, ctx in honest_paths(rig):
        script = lock.reveal(leaf)
        for i in range(len(witness.items)):
            items = list(witness.items)
            items[i] = corrupt(items[i])
            result = execute(script, Witness(tuple(items), witness.leaf_index), ctx)
            assert not result.ok, (name, i)


def test_path_matrix_cross_leaf_witnesses_fail(rig):
    paths = honest_paths(rig)
    by_lock = {}
    for name, lock, leaf, witness, ctx in paths:
        by_lock.setdefault(lock.commitment, []).append((name, lock, leaf, witness, ctx))
    for group in by_lock.values():
        for name, lock, leaf, witness, ctx in group:
            for other_name, _, other_leaf, other_witness, _ in group:
                if other_leaf == leaf:
                    continue
                script = lock.reveal(leaf)
                moved = Witness(other_witness.items, leaf)
                result = execute(script, moved, ctx)
                assert not result.ok, (name, other_name)


def test_punish_rejects_boundary_value(rig):
    # the guard is strict: a signature of the embedded bound itself fails
    boundary = ots_sign(ots_keygen(OTParams(), b"\x01" * 32), rig.state.esn)
    pa = rig.punish_set["punish_alice"]
    lock = rig.punish_set["commit_punish_alice"].tx.outputs[0].lock
    witness = Witness((boundary, rig.aggregate(pa.txid, 0)), 0)
    result = execute(lock.reveal(0), witness, rig.ctx(pa.txid, 0))
    assert not result.ok and "ValueMismatch" in result.reason


def test_htlc_outputs_on_finalize():
    htlc = Htlc("alice_to_bob", 5_000, hash160(b"\x99" * 32), 80)
    rig = Rig(htlcs=(htlc,))
    fin = rig.exit_set["finalize_exit"]
    assert "htlc_0" in fin.output_names
    out = fin.tx.outputs[fin.output_names["htlc_0"]]
    assert out.amount == 5_000
    # claim before expiry with the preimage and the receiver's signature
    txid = sha256(b"claimtx")
    sig_b = party_sign(rig.sig_secrets[1], rig.sig_pubs[1], txid, 0)
    witness = Witness((b"\x99" * 32, sig_b), 0)
    assert execute(out.lock.reveal(0), witness,
                   rig.ctx(txid, 0, height=79)).ok
    assert not execute(out.lock.reveal(0), witness,
                       rig.ctx(txid, 0, height=80)).ok
    # refund at or after expiry with the sender's signature
    sig_a = party_sign(rig.sig_secrets[0], rig.sig_pubs[0], txid, 1)
    refund = Witness((sig_a,), 1)
    assert not execute(out.lock.reveal(1), refund, rig.ctx(txid, 1, height=79)).ok
    assert execute(out.lock.reveal(1), refund, rig.ctx(txid, 1, height=80)).ok
