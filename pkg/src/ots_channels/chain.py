"""Deterministic simulated blockchain: UTXO set, mempool, blocks, script checks.

Transactions identify by a hash of their core serialization, which excludes
witnesses, so pre-built unsigned templates keep their ids once signed. The
mempool admits at most one spender per outpoint (first seen wins) and allows
unconfirmed parents within itself; mining confirms pending transactions in
submission order.

Timelock conventions, pinned by tests:

* confirmations of an output confirmed at height h, seen at height H, are H - h
  (zero in its own block); a ``cseqv(T)`` input needs confirmations >= T
* absolute-height ops check the height of the block a transaction is trying to
  enter (current height + 1 at submit time, the block height when mining)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .crypto import SignerRegistry, sha256
from .script import ExecContext, OutputLock, Witness, execute


class ChainError(Exception):
    pass


@dataclass(frozen=True)
class Outpoint:
    txid: bytes
    index: int

    def short(self) -> str:
        return f"{self.txid.hex()[:12]}:{self.index}"


@dataclass
class TxInput:
    outpoint: Outpoint
    witness: Witness | None = None


@dataclass
class TxOutput:
    amount: int
    lock: OutputLock
    op_return_payload: bytes | None = None


@dataclass
class Transaction:
    inputs: list[TxInput]
    outputs: list[TxOutput]
    locktime: int | None = None

    def core_bytes(self) -> bytes:
        """Canonical serialization excluding witnesses; the txid preimage."""
        out = bytearray()
        out += len(self.inputs).to_bytes(4, "big")
        for txin in self.inputs:
            out += txin.outpoint.txid + txin.outpoint.index.to_bytes(4, "big")
        out += len(self.outputs).to_bytes(4, "big")
        for txout in self.outputs:
            out += txout.amount.to_bytes(8, "big")
            if txout.op_return_payload is None:
                out += b"\x00"
            else:
                out += b"\x01" + len(txout.op_return_payload).to_bytes(4, "big")
                out += txout.op_return_payload
            out += txout.lock.commitment
        if self.locktime is None:
            out += b"\x00"
        else:
            out += b"\x01" + self.locktime.to_bytes(4, "big")
        return bytes(out)

    @property
    def txid(self) -> bytes:
        return sha256(self.core_bytes())

    def full_bytes(self) -> bytes:
        """Core serialization plus full lock scripts; byte-identity for rebuilds."""
        from .script import script_bytes

        out = bytearray(self.core_bytes())
        for txout in self.outputs:
            out += txout.lock.kind.encode()
            for s in txout.lock.scripts:
                out += script_bytes(s)
        return bytes(out)

    def outpoint(self, index: int) -> Outpoint:
        return Outpoint(self.txid, index)


@dataclass
class UtxoEntry:
    amount: int
    lock: OutputLock
    confirmed_height: int
    op_return_payload: bytes | None = None


@dataclass
class Accepted:
    txid: bytes


@dataclass
class Rejected:
    reason: str
    detail: str = ""


@dataclass
class Chain:
    """Single logical state machine; all mutation through submit/mine/mint."""

    registry: SignerRegistry
    height: int = 0
    utxos: dict[Outpoint, UtxoEntry] = field(default_factory=dict)
    mempool: list[Transaction] = field(default_factory=list)
    mempool_spends: dict[Outpoint, bytes] = field(default_factory=dict)
    confirmed: dict[bytes, tuple[Transaction, int]] = field(default_factory=dict)
    confirmed_log: list[tuple[int, Transaction]] = field(default_factory=list)
    spent_index: dict[Outpoint, bytes] = field(default_factory=dict)
    event_log: list[str] = field(default_factory=list)
    total_minted: int = 0
    total_fees: int = 0

    # -- funding -----------------------------------------------------------

    def mint(self, amount: int, lock: OutputLock) -> Outpoint:
        """Create a confirmed funding output out of thin air (test setup only)."""
        tx = Transaction(
            inputs=[TxInput(Outpoint(sha256(b"mint" + len(self.confirmed).to_bytes(8, "big")), 0))],
            outputs=[TxOutput(amount, lock)],
        )
        self.confirmed[tx.txid] = (tx, self.height)
        self.confirmed_log.append((self.height, tx))
        op = tx.outpoint(0)
        self.utxos[op] = UtxoEntry(amount, lock, self.height)
        self.total_minted += amount
        return op

    # -- validation --------------------------------------------------------

    def _resolve_input(self, outpoint: Outpoint, block_view: dict[Outpoint, UtxoEntry] | None = None):
        view = block_view if block_view is not None else self.utxos
        if outpoint in view:
            return view[outpoint], True
        # unconfirmed parent in the mempool
        for tx in self.mempool:
            if tx.txid == outpoint.txid and outpoint.index < len(tx.outputs):
                out = tx.outputs[outpoint.index]
                return UtxoEntry(out.amount, out.lock, self.height + 1, out.op_return_payload), False
        return None, False

    def _validate(self, tx: Transaction, next_height: int,
                  block_view: dict[Outpoint, UtxoEntry] | None = None,
                  block_spent: set[Outpoint] | None = None) -> Rejected | None:
        if not tx.inputs or not tx.outputs:
            return Rejected("MalformedTx", "needs at least one input and one output")
        seen: set[Outpoint] = set()
        in_total = 0
        payloads = tuple(
            o.op_return_payload for o in tx.outputs if o.op_return_payload is not None
        )
        for idx, txin in enumerate(tx.inputs):
            if txin.outpoint in seen:
                return Rejected("Conflict", f"input {idx} repeats {txin.outpoint.short()}")
            seen.add(txin.outpoint)
            if block_spent is not None and txin.outpoint in block_spent:
                return Rejected("Conflict", f"{txin.outpoint.short()} spent in this block")
            if block_view is None:
                claimant = self.mempool_spends.get(txin.outpoint)
                if claimant is not None and claimant != tx.txid:
                    return Rejected("Conflict", f"{txin.outpoint.short()} already claimed")
            entry, confirmed_parent = self._resolve_input(txin.outpoint, block_view)
            if entry is None:
                return Rejected("MissingInput", txin.outpoint.short())
            if entry.op_return_payload is not None:
                return Rejected("ScriptFailure", "op_return outputs are unspendable")
            in_total += entry.amount
            if txin.witness is None:
                return Rejected("ScriptFailure", f"input {idx} has no witness")
            try:
                script = entry.lock.reveal(txin.witness.leaf_index)
            except Exception:
                return Rejected("ScriptFailure", f"input {idx} reveals unknown leaf")
            confirmations = (next_height - 1) - entry.confirmed_height if confirmed_parent else 0
            ctx = ExecContext(
                tx_digest=tx.txid,
                input_index=idx,
                chain_height=next_height,
                confirmations=max(confirmations, 0),
                leaf_index=txin.witness.leaf_index,
                registry=self.registry,
                op_return_payloads=payloads,
            )
            result = execute(script, txin.witness, ctx)
            if not result.ok:
                reason = "SeqNotMatured" if "SeqNotMatured" in (result.reason or "") else "ScriptFailure"
                return Rejected(reason, f"input {idx}: {result.reason}")
        out_total = sum(o.amount for o in tx.outputs)
        if out_total > in_total:
            return Rejected("AmountOverflow", f"outputs {out_total} exceed inputs {in_total}")
        if tx.locktime is not None and next_height < tx.locktime:
            return Rejected("SeqNotMatured", f"locktime {tx.locktime} not reached")
        return None

    # -- operations --------------------------------------------------------

    def submit(self, tx: Transaction) -> Accepted | Rejected:
        if tx.txid in self.confirmed or any(p.txid == tx.txid for p in self.mempool):
            return Rejected("Conflict", "duplicate transaction")
        problem = self._validate(tx, next_height=self.height + 1)
        if problem is not None:
            return problem
        self.mempool.append(tx)
        for txin in tx.inputs:
            self.mempool_spends[txin.outpoint] = tx.txid
        return Accepted(tx.txid)

    def mine_blocks(self, n: int = 1) -> int:
        if n < 1:
            raise ValueError("must mine at least one block")
        for _ in range(n):
            self.height += 1
            pending, self.mempool = self.mempool, []
            self.mempool_spends = {}
            block_view = dict(self.utxos)
            block_spent: set[Outpoint] = set()
            confirmed_ids: list[str] = []
            dropped: list[str] = []
            for tx in pending:
                problem = self._validate(tx, self.height, block_view, block_spent)
                if problem is not None and problem.reason == "SeqNotMatured":
                    # not yet mature: keep waiting in the mempool
                    self.mempool.append(tx)
                    for txin in tx.inputs:
                        self.mempool_spends[txin.outpoint] = tx.txid
                    continue
                if problem is not None:
                    dropped.append(tx.txid.hex())
                    continue
                in_total = 0
                for txin in tx.inputs:
                    block_view.pop(txin.outpoint, None)
                    block_spent.add(txin.outpoint)
                    entry = self.utxos.pop(txin.outpoint)
                    in_total += entry.amount
                    self.spent_index[txin.outpoint] = tx.txid
                for i, out in enumerate(tx.outputs):
                    op = tx.outpoint(i)
                    block_view[op] = UtxoEntry(out.amount, out.lock, self.height, out.op_return_payload)
                    self.utxos[op] = UtxoEntry(out.amount, out.lock, self.height, out.op_return_payload)
                self.total_fees += in_total - sum(o.amount for o in tx.outputs)
                self.confirmed[tx.txid] = (tx, self.height)
                self.confirmed_log.append((self.height, tx))
                confirmed_ids.append(tx.txid.hex())
            self.event_log.append(json.dumps(
                {"height": self.height, "confirmed": confirmed_ids, "dropped": dropped},
                separators=(",", ":"),
            ))
        return self.height

    def observe_witness(self, txid: bytes, input_index: int) -> Witness:
        """The exact witness as published, from the confirmed index or mempool."""
        tx = None
        if txid in self.confirmed:
            tx = self.confirmed[txid][0]
        else:
            for pending in self.mempool:
                if pending.txid == txid:
                    tx = pending
                    break
        if tx is None:
            raise ChainError(f"UnknownTx {txid.hex()[:12]}")
        if not 0 <= input_index < len(tx.inputs):
            raise ChainError("input index out of range")
        witness = tx.inputs[input_index].witness
        if witness is None:
            raise ChainError("input has no witness")
        return witness

    # -- inspection --------------------------------------------------------

    def confirmations(self, outpoint: Outpoint) -> int | None:
        entry = self.utxos.get(outpoint)
        if entry is None:
            return None
        return self.height - entry.confirmed_height

    def spender_of(self, outpoint: Outpoint) -> Transaction | None:
        """The confirmed transaction spending this outpoint, if any."""
        txid = self.spent_index.get(outpoint)
        return self.confirmed[txid][0] if txid is not None else None

    def balance_of(self, lock: OutputLock) -> int:
        commitment = lock.commitment
        return sum(
            e.amount for e in self.utxos.values()
            if e.lock.commitment == commitment and e.op_return_payload is None
        )

    def state_digest(self) -> bytes:
        """Digest of height plus the sorted UTXO set; replay determinism checks."""
        parts = [self.height.to_bytes(8, "big")]
        for op in sorted(self.utxos, key=lambda o: (o.txid, o.index)):
            e = self.utxos[op]
            parts.append(op.txid + op.index.to_bytes(4, "big")
                         + e.amount.to_bytes(8, "big") + e.lock.commitment)
        return sha256(b"".join(parts))

    def audit_conservation(self) -> None:
        """Total value never appears or vanishes outside mint and fees."""
        utxo_total = sum(e.amount for e in self.utxos.values())
        if utxo_total + self.total_fees != self.total_minted:
            raise ChainError(
                f"conservation violated: utxo {utxo_total} + fees {self.total_fees}"
                f" != minted {self.total_minted}"
            )

    def audit_replay(self) -> None:
        """No confirmed transaction spends a missing or doubly spent outpoint.

        Full replay over the confirmed log; mints are the pseudo-inputs with no
        witness whose outpoint was never created.
        """
        created: set[Outpoint] = set()
        for _, tx in self.confirmed_log:
            created.update(tx.outpoint(i) for i in range(len(tx.outputs)))
        spent: set[Outpoint] = set()
        for _, tx in self.confirmed_log:
            is_mint = all(t.witness is None for t in tx.inputs) and not any(
                t.outpoint in created for t in tx.inputs
            )
            if is_mint:
                continue
            for txin in tx.inputs:
                if txin.outpoint in spent:
                    raise ChainError(f"double spend of {txin.outpoint.short()}")
                if txin.outpoint not in created:
                    raise ChainError(f"spend of unknown {txin.outpoint.short()}")
                spent.add(txin.outpoint)
