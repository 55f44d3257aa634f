"""Binary codec for transactions, locks, and witnesses.

Watchtower packets carry whole transactions, so the byte layout is documented
here and kept stable: transcripts replay bit-exactly.

Transaction: u32 n_in | per input (32B txid, u32 index, u8 has_witness,
witness?) | u32 n_out | per output (u64 amount, u8 has_payload, (u32 len,
payload)?, lock) | u8 has_locktime | u32 locktime?

Lock: u8 kind (0 wsh, 1 tap) | u16 n_scripts | scripts.
Script: u16 n_ops | ops, each u8 opcode + args (layouts below).
Witness: u32 leaf_index | u16 n_items | items, each u8 tag + body.
"""

from __future__ import annotations

from .chain import Outpoint, Transaction, TxInput, TxOutput
from .crypto import (
    CovenantKeySet,
    CovenantSignature,
    OTParams,
    OTPublicKey,
    OTSignature,
    PartySignature,
)
from .script import OutputLock, ScriptOp, Witness

_OP_CODES = {
    "push_bytes": 0, "push_int": 1, "dup": 2, "if": 3, "else": 4, "endif": 5,
    "verify": 6, "less_than": 7, "covenant_check": 8, "csigv": 9, "cseqv": 10,
    "chashv": 11, "cvalv": 12, "ot_csigv": 13, "cheightv": 14, "cbeforev": 15,
    "op_return": 16,
}
_OP_NAMES = {v: k for k, v in _OP_CODES.items()}

_NO_PATH = 0xFFFFFFFF


class WireError(Exception):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WireError("truncated record")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def done(self) -> bool:
        return self.pos == len(self.data)


def _put_bytes(out: bytearray, data: bytes, width: int = 4) -> None:
    out += len(data).to_bytes(width, "big") + data


def _take_bytes(r: _Reader, width: int = 4) -> bytes:
    return r.take(int.from_bytes(r.take(width), "big"))


def _encode_ot_pub(out: bytearray, pub: OTPublicKey) -> None:
    out += pub.params.value_bits.to_bytes(2, "big")
    out += pub.params.chunk_bits.to_bytes(1, "big")
    out += len(pub.digests).to_bytes(2, "big")
    for d in pub.digests:
        out += d


def _decode_ot_pub(r: _Reader) -> OTPublicKey:
    value_bits = r.u16()
    chunk_bits = r.u8()
    count = r.u16()
    digests = tuple(r.take(32) for _ in range(count))
    return OTPublicKey(OTParams(value_bits, chunk_bits), digests)


def _encode_op(out: bytearray, op: ScriptOp) -> None:
    code = _OP_CODES.get(op.kind)
    if code is None:
        raise WireError(f"unknown op {op.kind}")
    out.append(code)
    if op.kind in ("push_bytes", "op_return"):
        _put_bytes(out, op.args[0])
    elif op.kind in ("push_int", "cseqv", "cvalv", "cheightv", "cbeforev"):
        out += op.args[0].to_bytes(8, "big")
    elif op.kind in ("chashv",):
        out += op.args[0]
    elif op.kind == "csigv":
        out += op.args[0]
    elif op.kind == "covenant_check":
        keyset, path = op.args
        out += keyset.pub_a + keyset.pub_b
        out += (_NO_PATH if path is None else path).to_bytes(4, "big")
    elif op.kind == "ot_csigv":
        out.append(len(op.args[0]))
        for pub in op.args[0]:
            _encode_ot_pub(out, pub)


def _decode_op(r: _Reader) -> ScriptOp:
    kind = _OP_NAMES.get(r.u8())
    if kind is None:
        raise WireError("unknown opcode")
    if kind in ("push_bytes", "op_return"):
        return ScriptOp(kind, (_take_bytes(r),))
    if kind in ("push_int", "cseqv", "cvalv", "cheightv", "cbeforev"):
        return ScriptOp(kind, (r.u64(),))
    if kind == "chashv":
        return ScriptOp(kind, (r.take(20),))
    if kind == "csigv":
        return ScriptOp(kind, (r.take(32),))
    if kind == "covenant_check":
        keyset = CovenantKeySet(r.take(32), r.take(32))
        raw = r.u32()
        return ScriptOp(kind, (keyset, None if raw == _NO_PATH else raw))
    if kind == "ot_csigv":
        count = r.u8()
        return ScriptOp(kind, (tuple(_decode_ot_pub(r) for _ in range(count)),))
    return ScriptOp(kind)


def _encode_lock(out: bytearray, lock: OutputLock) -> None:
    out.append(0 if lock.kind == "wsh" else 1)
    out += len(lock.scripts).to_bytes(2, "big")
    for script in lock.scripts:
        out += len(script).to_bytes(2, "big")
        for op in script:
            _encode_op(out, op)


def _decode_lock(r: _Reader) -> OutputLock:
    kind = "wsh" if r.u8() == 0 else "tap"
    scripts = []
    for _ in range(r.u16()):
        scripts.append(tuple(_decode_op(r) for _ in range(r.u16())))
    return OutputLock(kind, tuple(scripts))


def _encode_item(out: bytearray, item) -> None:
    if isinstance(item, bool):
        out += b"\x02" + bytes([item])
    elif isinstance(item, int):
        out += b"\x01" + item.to_bytes(8, "big")
    elif isinstance(item, bytes):
        out.append(0)
        _put_bytes(out, item)
    elif isinstance(item, OTSignature):
        out.append(3)
        out += len(item.digits).to_bytes(2, "big")
        out += bytes(item.digits)
        for cv in item.chain_values:
            out += cv
    elif isinstance(item, CovenantSignature):
        out += b"\x04" + item.token
    elif isinstance(item, PartySignature):
        out += b"\x05" + item.pub + item.mac
    else:
        raise WireError(f"unsupported witness item {type(item)!r}")


def _decode_item(r: _Reader):
    tag = r.u8()
    if tag == 0:
        return _take_bytes(r)
    if tag == 1:
        return r.u64()
    if tag == 2:
        return bool(r.u8())
    if tag == 3:
        count = r.u16()
        digits = tuple(r.take(count))
        chain_values = tuple(r.take(32) for _ in range(count))
        return OTSignature(digits, chain_values)
    if tag == 4:
        return CovenantSignature(r.take(64))
    if tag == 5:
        return PartySignature(r.take(32), r.take(32))
    raise WireError("unknown witness item tag")


def lock_to_bytes(lock: OutputLock) -> bytes:
    out = bytearray()
    _encode_lock(out, lock)
    return bytes(out)


def lock_from_reader(r: _Reader) -> OutputLock:
    return _decode_lock(r)


def ot_pub_to_bytes(pub: OTPublicKey) -> bytes:
    out = bytearray()
    _encode_ot_pub(out, pub)
    return bytes(out)


def ot_pub_from_reader(r: _Reader) -> OTPublicKey:
    return _decode_ot_pub(r)


def reader(data: bytes) -> _Reader:
    return _Reader(data)


def witness_to_bytes(witness: Witness) -> bytes:
    out = bytearray(witness.leaf_index.to_bytes(4, "big"))
    out += len(witness.items).to_bytes(2, "big")
    for item in witness.items:
        _encode_item(out, item)
    return bytes(out)


def witness_from_bytes(data: bytes) -> Witness:
    r = _Reader(data)
    w = _decode_witness(r)
    if not r.done():
        raise WireError("trailing bytes after witness")
    return w


def _decode_witness(r: _Reader) -> Witness:
    leaf = r.u32()
    items = tuple(_decode_item(r) for _ in range(r.u16()))
    return Witness(items, leaf)


def tx_to_bytes(tx: Transaction) -> bytes:
    out = bytearray()
    out += len(tx.inputs).to_bytes(4, "big")
    for txin in tx.inputs:
        out += txin.outpoint.txid + txin.outpoint.index.to_bytes(4, "big")
        if txin.witness is None:
            out.append(0)
        else:
            out.append(1)
            out += witness_to_bytes(txin.witness)
    out += len(tx.outputs).to_bytes(4, "big")
    for txout in tx.outputs:
        out += txout.amount.to_bytes(8, "big")
        if txout.op_return_payload is None:
            out.append(0)
        else:
            out.append(1)
            _put_bytes(out, txout.op_return_payload)
        _encode_lock(out, txout.lock)
    if tx.locktime is None:
        out.append(0)
    else:
        out.append(1)
        out += tx.locktime.to_bytes(4, "big")
    return bytes(out)


def tx_from_bytes(data: bytes) -> Transaction:
    r = _Reader(data)
    tx = _decode_tx(r)
    if not r.done():
        raise WireError("trailing bytes after transaction")
    return tx


def _decode_tx(r: _Reader) -> Transaction:
    inputs = []
    for _ in range(r.u32()):
        outpoint = Outpoint(r.take(32), r.u32())
        witness = _decode_witness(r) if r.u8() else None
        inputs.append(TxInput(outpoint, witness))
    outputs = []
    for _ in range(r.u32()):
        amount = r.u64()
        payload = _take_bytes(r) if r.u8() else None
        lock = _decode_lock(r)
        outputs.append(TxOutput(amount, lock, payload))
    locktime = r.u32() if r.u8() else None
    return Transaction(inputs, outputs, locktime)
