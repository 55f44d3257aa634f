import random

import pytest

from ots_channels.channel import (
    ALICE,
    BOB,
    CLOSED,
    EsnOverflowError,
    OPEN,
    SequenceManager,
    other,
)
from ots_channels.harness import World


def open_world(seed=7, **cfg) -> World:
    config = {"towers": False, "timeout": 5}
    config.update(cfg)
    world = World(config, seed=seed)
    world.open_channel()
    return world


def settle(world, max_ticks=120):
    world.run_until(
        lambda: world.alice.phase == CLOSED and world.bob.phase == CLOSED,
        max_ticks,
    )


# ---------------------------------------------------------------------------
# setup
# ---------------------------------------------------------------------------

def test_symmetric_open():
    world = open_world(alice_deposit=50_000, bob_deposit=50_000)
    for engine in (world.alice, world.bob):
        assert engine.phase == OPEN
        assert engine.snapshot.isn == 0
        assert engine.snapshot.a_bal == 50_000
        assert engine.snapshot.b_bal == 50_000
    assert world.alice.setup_built.txid == world.bob.setup_built.txid


def test_wrong_setup_signature_aborts():
    world = World({"towers": False}, seed=8)
    world.bob.corrupt_setup_sig = True
    world.alice.begin_setup()
    world.run_until(lambda: world.alice.phase == "aborted", 30)
    assert world.alice.phase == "aborted"
    assert any("HandshakeMismatch" in e.get("reason", "")
               for e in world.alice.log if e["event"] == "abort")


def test_exit_at_state_zero_returns_deposits():
    world = open_world(alice_deposit=30_000, bob_deposit=70_000)
    world.alice.start_unilateral_exit()
    settle(world)
    assert world.alice.onchain_balance() == 30_000
    assert world.bob.onchain_balance() == 70_000


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

def test_payment_arithmetic_both_views():
    world = open_world()
    world.pay("alice", 10_000)
    world.pay("bob", 2_500)
    for engine in (world.alice, world.bob):
        assert engine.snapshot.isn == 2
        assert engine.snapshot.a_bal == 42_500
        assert engine.snapshot.b_bal == 57_500


def test_overpayment_rejected():
    world = open_world()
    with pytest.raises(Exception):
        world.alice.start_update({"kind": "pay", "amount": 60_000})


def test_esn_strictly_increases_and_matches():
    world = open_world(report_every=1, d_bound=16, seed=12)
    seen = [world.alice.snapshot.esn]
    for _ in range(10):
        world.pay("alice", 10)
        assert world.alice.snapshot.esn == world.bob.snapshot.esn
        seen.append(world.alice.snapshot.esn)
    assert all(b > a for a, b in zip(seen, seen[1:]))
    gaps = [b - a for a, b in zip(seen, seen[1:])]
    assert all(1 <= g <= 16 for g in gaps)


def test_esn_gap_is_one_when_unreported():
    world = open_world(report_every=0)
    for _ in range(5):
        world.pay("bob", 10)
    assert world.alice.snapshot.esn == world.alice.snapshot.isn + world.alice.esn0_gap


def test_sequence_manager_rules():
    rng = random.Random(1)
    seq = SequenceManager(d_bound=8, report_every=3)
    # state 3 is reported, so gaps into 2 (j+1 reported), 3, and 4 are random
    assert seq.gap_is_random(2) and seq.gap_is_random(3)
    assert not seq.gap_is_random(4) or seq.is_reported(4)
    assert seq.draw_gap(1, rng) == 1  # neither 1 nor 2 reported
    assert 1 <= seq.draw_gap(2, rng) <= 8
    assert seq.validate_gap(1, 1) and not seq.validate_gap(1, 2)
    assert seq.validate_gap(3, 8) and not seq.validate_gap(3, 9)


def test_esn_overflow_forces_close():
    seq = SequenceManager(value_bits=8)
    with pytest.raises(EsnOverflowError):
        seq.check_overflow(256)
    seq.check_overflow(255)


# ---------------------------------------------------------------------------
# exits and reactions
# ---------------------------------------------------------------------------

def test_honest_exit_latest_state_balances():
    world = open_world(alice_deposit=60_000, bob_deposit=40_000)
    world.pay("alice", 10_000)
    world.alice.start_unilateral_exit()
    settle(world)
    assert world.alice.onchain_balance() == 50_000
    assert world.bob.onchain_balance() == 50_000
    assert world.alice.final_result == "exited"


def test_awake_counterparty_enables_fast_finalize():
    world = open_world()
    world.pay("bob", 1_000)
    world.alice.start_unilateral_exit()
    settle(world)
    # finalize landed well before the dispute window could have elapsed
    fin = world.alice.exit_material.templates["finalize_exit"]
    commit = world.alice.exit_material.templates["commit_exit"]
    fin_height = world.chain.confirmed[fin.txid][1]
    commit_height = world.chain.confirmed[commit.txid][1]
    assert fin_height - commit_height < world.alice.timeout


def test_sleepy_counterparty_means_full_window():
    world = open_world()
    world.pay("bob", 1_000)
    world.bob.offline_until = 10_000
    world.alice.start_unilateral_exit()
    world.run_until(lambda: world.alice.phase == CLOSED, 120)
    fin = world.alice.exit_material.templates["finalize_exit"]
    assert_tx = world.alice.exit_material.templates["assert_exit"]
    fin_height = world.chain.confirmed[fin.txid][1]
    assert_height = world.chain.confirmed[assert_tx.txid][1]
    assert fin_height - assert_height >= world.alice.timeout


def test_stale_assert_is_punished():
    world = open_world()
    world.bob.retain_history = True
    for _ in range(4):
        world.pay("alice", 1_000)
    world.bob.start_cheat_exit(1)
    settle(world)
    assert world.alice.final_result == "punished_counterparty"
    assert world.alice.onchain_balance() == 100_000
    assert world.bob.onchain_balance() == 0


def test_latest_assert_never_punished():
    world = open_world()
    for _ in range(3):
        world.pay("alice", 1_000)
    world.bob.start_unilateral_exit()
    settle(world)
    assert world.alice.final_result != "punished_counterparty"
    assert world.bob.final_result == "exited"
    assert world.bob.onchain_balance() == 53_000


def test_commit_stall_expired_by_counterparty():
    world = open_world()
    world.bob.retain_history = True
    world.pay("bob", 2_000)
    world.pay("alice", 500)
    world.bob.start_commit_stall(1)
    world.run_until(lambda: world.alice.final_result is not None, 120)
    assert world.alice.final_result == "expired_counterparty"
    assert world.alice.onchain_balance() == 101_000


def test_unresponsive_close_falls_back_to_exit():
    world = open_world()
    world.pay("alice", 5_000)
    world.bob.halt_at_step = 1  # irresponsible from now on
    world.alice.start_cooperative_close(100)
    world.run_until(lambda: world.alice.phase == CLOSED, 140)
    assert world.alice.final_result == "exited"
    assert world.alice.onchain_balance() == 45_000


def test_cooperative_close_sweeps_connectors():
    world = open_world()
    world.pay("alice", 5_000)
    world.alice.start_cooperative_close(0)
    settle(world)
    total = world.alice.onchain_balance() + world.bob.onchain_balance()
    assert total == 111_000  # deposit plus every connector unit


# ---------------------------------------------------------------------------
# interrupted updates (the dance's step-by-step exposure)
# ---------------------------------------------------------------------------

def halted_world(halt_step, adversary=BOB, seed=42):
    world = open_world(seed=seed)
    world.engine(adversary).retain_history = True
    world.pay("alice", 5_000)
    world.pay("bob", 1_000)
    world.engine(adversary).halt_at_step = halt_step
    payer = world.engine(ALICE)
    payer.start_update({"kind": "pay", "amount": 2_000})
    world.run_ticks(3)
    return world


def test_halt_after_commit_signature_old_and_new_are_safe_for_payer():
    # payee stops after handing over the commit signature: the payer can use
    # either state without punishment, and chooses the newer one
    world = halted_world(5)
    assert world.alice.pending is not None
    world.alice._promote_pending()
    assert world.alice.exit_material.state.isn == 3
    world.run_until(lambda: world.alice.phase == CLOSED, 160)
    assert world.alice.final_result == "exited"
    # the new state paid 2000 to bob
    assert world.alice.onchain_balance() == 42_000


def test_halt_before_commit_keeps_payer_on_old_state():
    world = halted_world(4)
    world.run_until(lambda: world.alice.phase == CLOSED, 160)
    assert world.alice.final_result == "exited"
    assert world.alice.exit_material.state.isn == 2
    assert world.alice.onchain_balance() == 44_000


def test_halt_after_seven_both_sides_hold_new_state():
    # the payer received step 7, so both parties are fully covered on the new
    # state; an old-state exit by the frozen adversary is punishable
    world = halted_world(9)
    world.run_ticks(12)
    world.bob.start_cheat_exit(2)
    world.run_until(lambda: world.alice.final_result is not None, 160)
    assert world.alice.final_result == "punished_counterparty"
    assert world.alice.onchain_balance() == 100_000


def test_message_replay_is_idempotent():
    world = open_world()
    captured = []

    class Tap(list):
        def append(self, msg):
            captured.append(msg)
            super().append(msg)

    tap = Tap()
    world.bob.inbox = tap
    world.alice.peer_inbox = tap
    world.pay("alice", 1_000)
    assert captured
    before = (world.bob.snapshot, world.bob.punish_store.esn)
    for msg in captured:  # an attacker replays the whole update verbatim
        world.bob.inbox.append(msg)
    world.run_ticks(5)
    assert (world.bob.snapshot, world.bob.punish_store.esn) == before
    assert world.bob.phase == OPEN


# ---------------------------------------------------------------------------
# storage discipline
# ---------------------------------------------------------------------------

def test_honest_material_is_constant_size():
    world = open_world()
    world.pay("alice", 100)
    exit_size = world.alice.exit_material.size_bytes()
    store_size = world.alice.punish_store.size_bytes()
    for _ in range(30):
        world.pay("alice", 100)
    assert world.alice.exit_material.size_bytes() == exit_size
    assert world.alice.punish_store.size_bytes() == store_size
    assert not world.alice.old_exit_material  # honest engines do not hoard


def test_timeout_archive_grows_only_by_constant_entries():
    world = open_world()
    world.pay("alice", 100)
    baseline = len(world.alice.timeout_archive)
    per_state = 4 + 32 + 32  # isn plus two counterparty partials
    for _ in range(10):
        world.pay("alice", 100)
    assert len(world.alice.timeout_archive) == baseline + 10
    for isn, p0, p1 in world.alice.timeout_archive.values():
        assert len(p0) == 32 and len(p1) == 32
