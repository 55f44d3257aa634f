"""Hash-time-locked outputs carried on the payout transaction.

An HTLC output has two leaves: the receiver claims with the payment preimage
strictly before the absolute expiry height, the sender refunds at or after it.
While open, the locked amount sits outside both balances; a dispute sweep of
the channel funds carries it to the winner automatically because the HTLC
output only ever exists on a confirmed payout.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .crypto import hash160
from .script import OutputLock, cbeforev, chashv, cheightv, csigv

ALICE_TO_BOB = "alice_to_bob"
BOB_TO_ALICE = "bob_to_alice"

CLAIM_LEAF = 0
REFUND_LEAF = 1

CLAIM_SLOTS = ("htlc_preimage", "sig")
REFUND_SLOTS = ("sig",)


class HtlcError(Exception):
    pass


class InsufficientBalanceError(HtlcError):
    pass


class WrongPreimageError(HtlcError):
    pass


@dataclass(frozen=True)
class Htlc:
    direction: str
    amount: int
    payment_hash: bytes
    expiry: int

    def __post_init__(self) -> None:
        if self.direction not in (ALICE_TO_BOB, BOB_TO_ALICE):
            raise ValueError(f"unknown direction {self.direction}")
        if self.amount <= 0:
            raise ValueError("htlc amount must be positive")
        if len(self.payment_hash) != 20:
            raise ValueError("payment_hash must be 20 bytes")

    @property
    def sender_is_alice(self) -> bool:
        return self.direction == ALICE_TO_BOB


def htlc_lock(htlc: Htlc, alice_sig_pub: bytes, bob_sig_pub: bytes) -> OutputLock:
    """Two-leaf lock: preimage claim before expiry, refund at or after it."""
    receiver = bob_sig_pub if htlc.sender_is_alice else alice_sig_pub
    sender = alice_sig_pub if htlc.sender_is_alice else bob_sig_pub
    claim = (csigv(receiver), cbeforev(htlc.expiry), chashv(htlc.payment_hash))
    refund = (csigv(sender), cheightv(htlc.expiry))
    return OutputLock.tree([claim, refund])


def add_htlc(state, htlc: Htlc):
    """Deduct the locked amount from the sender; the receiver is not credited."""
    if htlc.sender_is_alice:
        if state.a_bal < htlc.amount:
            raise InsufficientBalanceError("sender balance below htlc amount")
        return dataclasses.replace(
            state, a_bal=state.a_bal - htlc.amount, htlcs=state.htlcs + (htlc,)
        )
    if state.b_bal < htlc.amount:
        raise InsufficientBalanceError("sender balance below htlc amount")
    return dataclasses.replace(
        state, b_bal=state.b_bal - htlc.amount, htlcs=state.htlcs + (htlc,)
    )


def settle_htlc(state, payment_hash: bytes, preimage: bytes):
    """Credit the receiver; requires the matching preimage."""
    htlc = _find(state, payment_hash)
    if hash160(preimage) != htlc.payment_hash:
        raise WrongPreimageError("preimage does not match payment hash")
    rest = tuple(h for h in state.htlcs if h.payment_hash != payment_hash)
    if htlc.sender_is_alice:
        return dataclasses.replace(state, b_bal=state.b_bal + htlc.amount, htlcs=rest)
    return dataclasses.replace(state, a_bal=state.a_bal + htlc.amount, htlcs=rest)


def fail_htlc(state, payment_hash: bytes):
    """Return the locked amount to the sender (mutual agreement)."""
    htlc = _find(state, payment_hash)
    rest = tuple(h for h in state.htlcs if h.payment_hash != payment_hash)
    if htlc.sender_is_alice:
        return dataclasses.replace(state, a_bal=state.a_bal + htlc.amount, htlcs=rest)
    return dataclasses.replace(state, b_bal=state.b_bal + htlc.amount, htlcs=rest)


def _find(state, payment_hash: bytes) -> Htlc:
    for h in state.htlcs:
        if h.payment_hash == payment_hash:
            return h
    raise HtlcError(f"no open htlc with hash {payment_hash.hex()[:12]}")
