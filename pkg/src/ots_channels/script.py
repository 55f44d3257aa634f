"""Stack-based script interpreter for output locks and spending witnesses.

Scripts are small op lists; outputs commit to a single script (wsh) or an
ordered leaf list (tap, NUMS internal key, no key-path spend). Witness stacks
hold typed items: bytes, ints, one-time signatures, covenant and single-party
signatures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .crypto import (
    CovenantKeySet,
    CovenantSignature,
    OTPublicKey,
    OTSignature,
    PartySignature,
    RecoveryError,
    SignerRegistry,
    hash160,
    ots_recover_value,
    party_verify,
    covenant_verify,
    sha256,
)

MAX_STACK_INT = (1 << 32) - 1


class ScriptError(Exception):
    pass


class LeafNotInTreeError(ScriptError):
    pass


class MissingItemError(ScriptError):
    pass


@dataclass(frozen=True)
class ScriptOp:
    kind: str
    args: tuple = ()

    def __str__(self) -> str:
        return _format_op(self)


def push_bytes(data: bytes) -> ScriptOp:
    return ScriptOp("push_bytes", (data,))


def push_int(value: int) -> ScriptOp:
    if not 0 <= value <= MAX_STACK_INT:
        raise ValueError("stack integers are unsigned 32-bit")
    return ScriptOp("push_int", (value,))


def op_dup() -> ScriptOp:
    return ScriptOp("dup")


def op_if() -> ScriptOp:
    return ScriptOp("if")


def op_else() -> ScriptOp:
    return ScriptOp("else")


def op_endif() -> ScriptOp:
    return ScriptOp("endif")


def op_verify() -> ScriptOp:
    return ScriptOp("verify")


def op_less_than() -> ScriptOp:
    return ScriptOp("less_than")


def covenant_check(keyset: CovenantKeySet, path: int | None = None) -> ScriptOp:
    return ScriptOp("covenant_check", (keyset, path))


def csigv(pub: bytes) -> ScriptOp:
    return ScriptOp("csigv", (pub,))


def cseqv(blocks: int) -> ScriptOp:
    """Relative timelock: spent output must have at least ``blocks`` confirmations."""
    return ScriptOp("cseqv", (blocks,))


def chashv(digest20: bytes) -> ScriptOp:
    if len(digest20) != 20:
        raise ValueError("chashv takes a 20-byte digest")
    return ScriptOp("chashv", (digest20,))


def cvalv(value: int) -> ScriptOp:
    return ScriptOp("cvalv", (value,))


def ot_csigv(pubs: tuple[OTPublicKey, ...]) -> ScriptOp:
    return ScriptOp("ot_csigv", (tuple(pubs),))


def cheightv(height: int) -> ScriptOp:
    """Absolute timelock: chain height must be at least ``height``."""
    return ScriptOp("cheightv", (height,))


def cbeforev(height: int) -> ScriptOp:
    """Absolute expiry window: chain height must be strictly below ``height``."""
    return ScriptOp("cbeforev", (height,))


def op_return(data: bytes) -> ScriptOp:
    return ScriptOp("op_return", (data,))


def _format_op(op: ScriptOp) -> str:
    k = op.kind
    if k == "push_bytes":
        return f"PUSHBYTES {op.args[0].hex()}"
    if k == "push_int":
        return f"PUSHINT {op.args[0]}"
    if k == "covenant_check":
        keyset, path = op.args
        suffix = "" if path is None else f"({path})"
        return f"COVENANT_CHECK{suffix} {keyset.pub_a.hex()[:8]}+{keyset.pub_b.hex()[:8]}"
    if k == "csigv":
        return f"CSIGV {op.args[0].hex()[:8]}"
    if k == "cseqv":
        return f"CSEQV {op.args[0]}"
    if k == "chashv":
        return f"CHASHV {op.args[0].hex()}"
    if k == "cvalv":
        return f"CVALV {op.args[0]}"
    if k == "ot_csigv":
        fps = ",".join(p.fingerprint.hex()[:8] for p in op.args[0])
        return f"OT_CSIGV {fps}"
    if k == "cheightv":
        return f"CHEIGHTV {op.args[0]}"
    if k == "cbeforev":
        return f"CBEFOREV {op.args[0]}"
    if k == "op_return":
        return f"OP_RETURN {op.args[0].hex()}"
    return k.upper().replace("_", "")


def disassemble(script: tuple[ScriptOp, ...]) -> str:
    """Textual form, one op per line; used in event logs and golden tests."""
    return "\n".join(str(op) for op in script)


def script_bytes(script: tuple[ScriptOp, ...]) -> bytes:
    """Canonical serialization used for lock commitments."""
    out = bytearray()
    for op in script:
        out += op.kind.encode()
        if op.kind == "push_bytes" or op.kind == "op_return":
            out += b":" + op.args[0]
        elif op.kind in ("push_int", "cseqv", "cvalv", "cheightv", "cbeforev"):
            out += b":" + op.args[0].to_bytes(8, "big")
        elif op.kind == "chashv":
            out += b":" + op.args[0]
        elif op.kind == "csigv":
            out += b":" + op.args[0]
        elif op.kind == "covenant_check":
            keyset, path = op.args
            out += b":" + keyset.pub_a + keyset.pub_b
            out += b"" if path is None else path.to_bytes(4, "big")
        elif op.kind == "ot_csigv":
            for pub in op.args[0]:
                out += b":" + pub.fingerprint
        out += b";"
    return bytes(out)


# ---------------------------------------------------------------------------
# Output locks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OutputLock:
    """Commitment to one script (wsh) or an ordered leaf list (tap)."""

    kind: str
    scripts: tuple[tuple[ScriptOp, ...], ...]

    @staticmethod
    def single(script: tuple[ScriptOp, ...]) -> "OutputLock":
        return OutputLock("wsh", (tuple(script),))

    @staticmethod
    def tree(scripts: list[tuple[ScriptOp, ...]]) -> "OutputLock":
        if not scripts:
            raise ValueError("empty script list")
        return OutputLock("tap", tuple(tuple(s) for s in scripts))

    @property
    def commitment(self) -> bytes:
        if self.kind == "wsh":
            return sha256(b"wsh" + script_bytes(self.scripts[0]))
        return sha256(b"tap" + b"".join(sha256(script_bytes(s)) for s in self.scripts))

    def reveal(self, leaf_index: int = 0) -> tuple[ScriptOp, ...]:
        if not 0 <= leaf_index < len(self.scripts):
            raise LeafNotInTreeError(f"leaf {leaf_index} not in {len(self.scripts)}-leaf lock")
        return self.scripts[leaf_index]

    def leaf_of(self, script: tuple[ScriptOp, ...]) -> int:
        target = script_bytes(tuple(script))
        for i, s in enumerate(self.scripts):
            if script_bytes(s) == target:
                return i
        raise LeafNotInTreeError("script is not committed by this lock")


def lock_of(scripts: list[tuple[ScriptOp, ...]]) -> OutputLock:
    """Single script -> wsh lock; several -> tap tree in the given order."""
    if len(scripts) == 1:
        return OutputLock.single(scripts[0])
    return OutputLock.tree(scripts)


# ---------------------------------------------------------------------------
# Witnesses
# ---------------------------------------------------------------------------

StackItem = "bytes | int | bool | OTSignature | CovenantSignature | PartySignature"


@dataclass(frozen=True)
class Witness:
    """Initial stack, bottom first, plus the revealed leaf for tap locks."""

    items: tuple
    leaf_index: int = 0

    def serialize(self) -> bytes:
        out = bytearray(self.leaf_index.to_bytes(4, "big"))
        for item in self.items:
            out += _item_bytes(item)
        return bytes(out)


def _item_bytes(item) -> bytes:
    if isinstance(item, bool):
        return b"b" + bytes([item])
    if isinstance(item, int):
        return b"i" + item.to_bytes(8, "big")
    if isinstance(item, bytes):
        return b"d" + len(item).to_bytes(4, "big") + item
    if isinstance(item, (OTSignature, CovenantSignature, PartySignature)):
        ser = item.serialize()
        return b"s" + len(ser).to_bytes(4, "big") + ser
    raise TypeError(f"unsupported witness item {type(item)!r}")


def build_witness_for(slots: tuple[str, ...], materials: dict, leaf_index: int = 0) -> Witness:
    """Assemble a witness from named slots, bottom of stack first.

    Raises :class:`MissingItemError` when the caller did not supply an item the
    named path needs.
    """
    items = []
    for name in slots:
        if name not in materials or materials[name] is None:
            raise MissingItemError(f"witness item '{name}' missing")
        items.append(materials[name])
    return Witness(tuple(items), leaf_index)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

@dataclass
class ExecContext:
    """Spend-time facts, supplied by the chain module only."""

    tx_digest: bytes
    input_index: int
    chain_height: int
    confirmations: int
    leaf_index: int
    registry: SignerRegistry
    op_return_payloads: tuple[bytes, ...] = ()


@dataclass
class ExecResult:
    ok: bool
    reason: str | None = None
    stack: list = field(default_factory=list)


def _truthy(item) -> bool:
    if isinstance(item, bool):
        return item
    if isinstance(item, int):
        return item != 0
    if isinstance(item, bytes):
        return any(item)
    return True


def execute(script: tuple[ScriptOp, ...], witness: Witness, ctx: ExecContext) -> ExecResult:
    """Run a revealed script against a witness; pure function of its inputs.

    Success requires every verify-class op to pass, balanced branches, and a
    fully consumed (or truthy-topped) final stack. The failure reason names
    the first failing op.
    """
    stack: list = list(witness.items)
    # branch state: list of (taken_branch_active, seen_else)
    frames: list[list[bool]] = []
    last_compare: str | None = None

    def active() -> bool:
        return all(f[0] for f in frames)

    def fail(kind: str, pos: int, op: ScriptOp) -> ExecResult:
        return ExecResult(False, f"{kind} at op {pos} ({op.kind})", stack)

    for pos, op in enumerate(script):
        k = op.kind
        if k == "if":
            if active():
                if not stack:
                    return fail("StackUnderflow", pos, op)
                frames.append([_truthy(stack.pop()), False])
            else:
                frames.append([False, False])
            continue
        if k == "else":
            if not frames or frames[-1][1]:
                return fail("BadNesting", pos, op)
            frames[-1][1] = True
            frames[-1][0] = not frames[-1][0]
            continue
        if k == "endif":
            if not frames:
                return fail("BadNesting", pos, op)
            frames.pop()
            continue
        if not active():
            continue

        if k == "push_bytes" or k == "push_int":
            stack.append(op.args[0])
        elif k == "dup":
            if not stack:
                return fail("StackUnderflow", pos, op)
            stack.append(stack[-1])
        elif k == "verify":
            if not stack:
                return fail("StackUnderflow", pos, op)
            if not _truthy(stack.pop()):
                kind = "ValueMismatch" if last_compare == "less_than" else "VerifyFailed"
                return fail(kind, pos, op)
        elif k == "less_than":
            if len(stack) < 2:
                return fail("StackUnderflow", pos, op)
            b, a = stack.pop(), stack.pop()
            if not isinstance(a, int) or not isinstance(b, int):
                return fail("TypeMismatch", pos, op)
            stack.append(1 if a < b else 0)
            last_compare = "less_than"
        elif k == "covenant_check":
            keyset, path = op.args
            if path is not None and path != ctx.leaf_index:
                return fail("SigInvalid", pos, op)
            if not stack:
                return fail("StackUnderflow", pos, op)
            sig = stack.pop()
            if not isinstance(sig, CovenantSignature) or not covenant_verify(
                ctx.registry, keyset, ctx.tx_digest, ctx.leaf_index, sig
            ):
                return fail("SigInvalid", pos, op)
        elif k == "csigv":
            if not stack:
                return fail("StackUnderflow", pos, op)
            sig = stack.pop()
            if not isinstance(sig, PartySignature) or not party_verify(
                ctx.registry, sig, op.args[0], ctx.tx_digest, ctx.leaf_index
            ):
                return fail("SigInvalid", pos, op)
        elif k == "cseqv":
            if ctx.confirmations < op.args[0]:
                return fail("SeqNotMatured", pos, op)
        elif k == "cheightv":
            if ctx.chain_height < op.args[0]:
                return fail("HeightNotReached", pos, op)
        elif k == "cbeforev":
            if ctx.chain_height >= op.args[0]:
                return fail("HeightExpired", pos, op)
        elif k == "chashv":
            if not stack:
                return fail("StackUnderflow", pos, op)
            item = stack.pop()
            if not isinstance(item, bytes) or hash160(item) != op.args[0]:
                return fail("HashMismatch", pos, op)
        elif k == "cvalv":
            if not stack:
                return fail("StackUnderflow", pos, op)
            item = stack.pop()
            if item != op.args[0]:
                return fail("ValueMismatch", pos, op)
        elif k == "ot_csigv":
            pubs = op.args[0]
            if len(stack) < len(pubs):
                return fail("StackUnderflow", pos, op)
            recovered = None
            for pub in pubs:
                sig = stack.pop()
                if not isinstance(sig, OTSignature):
                    return fail("SigInvalid", pos, op)
                try:
                    value = ots_recover_value(pub, sig)
                except RecoveryError:
                    return fail("SigInvalid", pos, op)
                if recovered is not None and value != recovered:
                    return fail("SigInvalid", pos, op)
                recovered = value
            stack.append(recovered)
        elif k == "op_return":
            return fail("Unspendable", pos, op)
        else:
            return fail("UnknownOp", pos, op)

    if frames:
        return ExecResult(False, f"BadNesting at end ({len(frames)} open branches)", stack)
    if stack and not _truthy(stack[-1]):
        return ExecResult(False, "FinalStackFalse", stack)
    return ExecResult(True, None, stack)
