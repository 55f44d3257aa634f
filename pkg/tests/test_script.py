import pytest

from ots_channels.crypto import (
    CovenantKeySet,
    OTParams,
    OTSignature,
    SignerRegistry,
    covenant_combine,
    covenant_partial,
    hash160,
    ots_keygen,
    ots_sign,
    party_sign,
    sha256,
)
from ots_channels.script import (
    ExecContext,
    MissingItemError,
    LeafNotInTreeError,
    OutputLock,
    Witness,
    build_witness_for,
    cbeforev,
    chashv,
    cheightv,
    covenant_check,
    cseqv,
    csigv,
    cvalv,
    disassemble,
    execute,
    lock_of,
    op_dup,
    op_else,
    op_endif,
    op_if,
    op_less_than,
    op_return,
    op_verify,
    ot_csigv,
    push_bytes,
    push_int,
    script_bytes,
)


@pytest.fixture
def registry():
    return SignerRegistry()


def ctx(registry, digest=b"\x11" * 32, height=100, confirmations=0, leaf=0):
    return ExecContext(tx_digest=digest, input_index=0, chain_height=height,
                       confirmations=confirmations, leaf_index=leaf,
                       registry=registry)


def agg(registry, keyset, secrets, digest, leaf):
    return covenant_combine(keyset, {
        pub: covenant_partial(secret, digest, leaf)
        for pub, secret in zip((keyset.pub_a, keyset.pub_b), secrets)
    })


def test_push_and_verify(registry):
    result = execute((push_int(1), op_verify()), Witness(()), ctx(registry))
    assert result.ok
    result = execute((push_int(0), op_verify()), Witness(()), ctx(registry))
    assert not result.ok and "VerifyFailed" in result.reason


def test_less_than_is_strict(registry):
    # m on the stack, bound pushed by the script: succeeds only when m < bound
    for m, bound, expect in ((50, 100, True), (100, 100, False), (101, 100, False)):
        script = (push_int(bound), op_less_than(), op_verify())
        result = execute(script, Witness((m,)), ctx(registry))
        assert result.ok is expect, (m, bound)
    failing = execute((push_int(100), op_less_than(), op_verify()),
                      Witness((100,)), ctx(registry))
    assert "ValueMismatch" in failing.reason


def test_dup_and_stack_underflow(registry):
    result = execute((op_dup(),), Witness(()), ctx(registry))
    assert not result.ok and "StackUnderflow" in result.reason
    result = execute((push_int(3), op_dup(), op_less_than(), op_verify()),
                     Witness(()), ctx(registry))
    assert not result.ok  # 3 < 3 is false


def test_branching(registry):
    script = (op_if(), push_int(1), op_else(), push_int(0), op_endif(), op_verify())
    assert execute(script, Witness((True,)), ctx(registry)).ok
    assert not execute(script, Witness((False,)), ctx(registry)).ok


def test_bad_nesting(registry):
    result = execute((op_else(),), Witness(()), ctx(registry))
    assert "BadNesting" in result.reason
    result = execute((op_if(), push_int(1)), Witness((True,)), ctx(registry))
    assert "BadNesting" in result.reason


def test_chashv_oracle(registry):
    # independent recomputation: spending item must hash160 to the commitment
    preimage = b"\x42" * 32
    script = (chashv(hash160(preimage)),)
    assert execute(script, Witness((preimage,)), ctx(registry)).ok
    flipped = bytes([preimage[0] ^ 1]) + preimage[1:]
    result = execute(script, Witness((flipped,)), ctx(registry))
    assert not result.ok and "HashMismatch" in result.reason


def test_cseqv_monotone(registry):
    script = (cseqv(6), push_int(1))
    outcomes = [execute(script, Witness(()), ctx(registry, confirmations=c)).ok
                for c in range(12)]
    assert outcomes == [False] * 6 + [True] * 6
    failing = execute(script, Witness(()), ctx(registry, confirmations=5))
    assert "SeqNotMatured" in failing.reason


def test_height_windows(registry):
    claim = (cbeforev(50), push_int(1))
    refund = (cheightv(50), push_int(1))
    assert execute(claim, Witness(()), ctx(registry, height=49)).ok
    assert not execute(claim, Witness(()), ctx(registry, height=50)).ok
    assert not execute(refund, Witness(()), ctx(registry, height=49)).ok
    assert execute(refund, Witness(()), ctx(registry, height=50)).ok


def test_cvalv(registry):
    assert execute((cvalv(7),), Witness((7,)), ctx(registry)).ok
    result = execute((cvalv(7),), Witness((8,)), ctx(registry))
    assert "ValueMismatch" in result.reason


def test_covenant_check_op(registry):
    secrets = (b"a" * 32, b"b" * 32)
    keyset = CovenantKeySet(*[registry.register(s) for s in secrets])
    digest = sha256(b"spendtx")
    script = (covenant_check(keyset),)
    good = agg(registry, keyset, secrets, digest, 0)
    assert execute(script, Witness((good,)), ctx(registry, digest=digest)).ok
    other = agg(registry, keyset, secrets, sha256(b"other"), 0)
    result = execute(script, Witness((other,)), ctx(registry, digest=digest))
    assert "SigInvalid" in result.reason


def test_covenant_path_binding(registry):
    # a signature made for leaf 1 must not satisfy leaf 2's covenant check
    secrets = (b"a" * 32, b"b" * 32)
    keyset = CovenantKeySet(*[registry.register(s) for s in secrets])
    digest = sha256(b"spendtx")
    leaf1_sig = agg(registry, keyset, secrets, digest, 1)
    script = (covenant_check(keyset, 2),)
    result = execute(script, Witness((leaf1_sig,), leaf_index=2),
                     ctx(registry, digest=digest, leaf=2))
    assert "SigInvalid" in result.reason
    leaf2_sig = agg(registry, keyset, secrets, digest, 2)
    assert execute(script, Witness((leaf2_sig,), leaf_index=2),
                   ctx(registry, digest=digest, leaf=2)).ok


def test_csigv(registry):
    secret = b"s" * 32
    pub = registry.register(secret)
    digest = sha256(b"t")
    sig = party_sign(secret, pub, digest, 0)
    assert execute((csigv(pub),), Witness((sig,)), ctx(registry, digest=digest)).ok
    wrong = party_sign(secret, pub, sha256(b"u"), 0)
    assert not execute((csigv(pub),), Witness((wrong,)),
                       ctx(registry, digest=digest)).ok


def test_ot_csigv_pushes_recovered_value(registry):
    key = ots_keygen(OTParams(), b"\x07" * 32)
    sig = ots_sign(key, 50)
    script = (ot_csigv((key.public,)), cvalv(50))
    assert execute(script, Witness((sig,)), ctx(registry)).ok
    # integrity: corrupting any chain element invalidates the signature
    broken = OTSignature(sig.digits, (sha256(b"junk"),) + sig.chain_values[1:])
    result = execute(script, Witness((broken,)), ctx(registry))
    assert "SigInvalid" in result.reason
    # the pushed value is checked downstream
    assert not execute((ot_csigv((key.public,)), cvalv(51)),
                       Witness((sig,)), ctx(registry)).ok


def test_op_return_unspendable(registry):
    result = execute((op_return(b"data"),), Witness(()), ctx(registry))
    assert "Unspendable" in result.reason


def test_locks_and_reveal():
    single = lock_of([(push_int(1),)])
    assert single.kind == "wsh"
    assert single.reveal(0) == (push_int(1),)
    tree = lock_of([(push_int(1),), (push_int(2),), (push_int(3),)])
    assert tree.kind == "tap"
    assert tree.reveal(2) == (push_int(3),)
    with pytest.raises(LeafNotInTreeError):
        tree.reveal(3)
    with pytest.raises(LeafNotInTreeError):
        tree.leaf_of((push_int(9),))
    assert tree.leaf_of((push_int(2),)) == 1


def test_commitment_binds_order():
    a = OutputLock.tree([(push_int(1),), (push_int(2),)])
    b = OutputLock.tree([(push_int(2),), (push_int(1),)])
    assert a.commitment != b.commitment


def test_build_witness_missing_item():
    with pytest.raises(MissingItemError):
        build_witness_for(("preimage", "covenant"), {"covenant": object()})
    w = build_witness_for(("a", "b"), {"a": 1, "b": 2}, leaf_index=1)
    assert w.items == (1, 2) and w.leaf_index == 1


def test_execute_is_pure(registry):
    key = ots_keygen(OTParams(), b"\x07" * 32)
    sig = ots_sign(key, 9)
    script = (ot_csigv((key.public,)), cvalv(9))
    witness = Witness((sig,))
    context = ctx(registry)
    first = execute(script, witness, context)
    second = execute(script, witness, context)
    assert first.ok and second.ok and first.stack == second.stack


def test_disassembly_one_op_per_line():
    script = (push_int(5), op_if(), chashv(b"\x00" * 20), op_endif())
    text = disassemble(script)
    assert text.splitlines() == ["PUSHINT 5", "IF", "CHASHV " + "00" * 20, "ENDIF"]
    assert script_bytes(script) == script_bytes(tuple(script))
