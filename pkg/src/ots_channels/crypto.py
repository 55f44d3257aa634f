"""Hashing, one-time signatures, covenant signing, symmetric packets, hash chains.

Fixed algorithm choices for this build:

* primary hash: SHA-256 (32 bytes)
* script hash (``hash160``): sha256(sha256(x))[:20]
* covenant aggregate: two per-party HMAC-SHA256 partials concatenated,
  checked through a simulation-scoped :class:`SignerRegistry`
* authenticated encryption: AES-GCM, 12-byte IV, 16-byte tag
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

DIGEST_LEN = 32
DIGEST20_LEN = 20
IV_LEN = 12


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash160(data: bytes) -> bytes:
    """20-byte script hash: double SHA-256 truncated."""
    return sha256(sha256(data))[:DIGEST20_LEN]


class CryptoError(Exception):
    pass


class KeyReuseError(CryptoError):
    """A one-time key was asked to sign a second, different value.

    Callers must treat this as a protocol violation equivalent to cheating.
    """


class ValueOutOfRangeError(CryptoError):
    pass


class RecoveryError(CryptoError):
    """Signature digits are malformed; no value can be recovered."""


class IntegrityError(CryptoError):
    """Ciphertext failed authentication (wrong key or tampered packet)."""


class MissingPartialError(CryptoError):
    """An aggregate signature was requested without both parties' consent."""


# ---------------------------------------------------------------------------
# One-time signatures over fixed-width unsigned values
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OTParams:
    """Winternitz-style parameters for signing one ``value_bits``-wide integer."""

    value_bits: int = 32
    chunk_bits: int = 4

    def __post_init__(self) -> None:
        if self.chunk_bits not in (1, 2, 4, 8):
            raise ValueError(f"unsupported chunk_bits {self.chunk_bits}")
        if self.value_bits <= 0 or self.value_bits % self.chunk_bits != 0:
            raise ValueError("value_bits must be a positive multiple of chunk_bits")

    @property
    def base(self) -> int:
        return 1 << self.chunk_bits

    @property
    def message_digits(self) -> int:
        return self.value_bits // self.chunk_bits

    @property
    def checksum_digits(self) -> int:
        # enough base-(2^w) digits to encode message_digits * (base - 1)
        max_checksum = self.message_digits * (self.base - 1)
        digits = 1
        while self.base ** digits <= max_checksum:
            digits += 1
        return digits

    @property
    def total_digits(self) -> int:
        return self.message_digits + self.checksum_digits

    @property
    def max_value(self) -> int:
        return (1 << self.value_bits) - 1


def _int_digits(value: int, count: int, base: int) -> list[int]:
    out = [0] * count
    for i in range(count - 1, -1, -1):
        out[i] = value % base
        value //= base
    return out


def encode_digits(params: OTParams, value: int) -> tuple[int, ...]:
    """Message digits (big-endian) followed by checksum digits.

    The checksum is sum(base-1 - d) over message digits, so any increase of a
    message digit strictly lowers the checksum and forces a hash preimage.
    """
    if not 0 <= value <= params.max_value:
        raise ValueOutOfRangeError(f"value {value} outside {params.value_bits}-bit range")
    msg = _int_digits(value, params.message_digits, params.base)
    checksum = sum(params.base - 1 - d for d in msg)
    return tuple(msg + _int_digits(checksum, params.checksum_digits, params.base))


def decode_digits(params: OTParams, digits: tuple[int, ...]) -> int:
    """Recover the signed value from a digit vector, validating the checksum."""
    if len(digits) != params.total_digits:
        raise RecoveryError("wrong digit count")
    if any(not 0 <= d < params.base for d in digits):
        raise RecoveryError("digit out of range")
    msg = digits[: params.message_digits]
    value = 0
    for d in msg:
        value = value * params.base + d
    if encode_digits(params, value) != tuple(digits):
        raise RecoveryError("checksum digits inconsistent with message digits")
    return value


def _chain_hash(value: bytes, steps: int) -> bytes:
    for _ in range(steps):
        value = sha256(value)
    return value


@dataclass(frozen=True)
class OTPublicKey:
    params: OTParams
    digests: tuple[bytes, ...]

    @property
    def fingerprint(self) -> bytes:
        return sha256(b"".join(self.digests))


@dataclass
class OTKeyPair:
    params: OTParams
    seeds: tuple[bytes, ...] = field(repr=False)
    public: OTPublicKey = field(init=False)
    used_value: int | None = None

    def __post_init__(self) -> None:
        ends = tuple(_chain_hash(s, self.params.base - 1) for s in self.seeds)
        self.public = OTPublicKey(self.params, ends)


@dataclass(frozen=True)
class OTSignature:
    """Digit vector plus one intermediate chain value per digit.

    The digits travel with the signature so a verifier can recover the signed
    value with no out-of-band input.
    """

    digits: tuple[int, ...]
    chain_values: tuple[bytes, ...]

    def serialize(self) -> bytes:
        return bytes(self.digits) + b"".join(self.chain_values)


def ots_keygen(params: OTParams, seed: bytes) -> OTKeyPair:
    if len(seed) != DIGEST_LEN:
        raise ValueError("seed must be 32 bytes")
    seeds = tuple(
        sha256(seed + b"otsdigit" + d.to_bytes(2, "big"))
        for d in range(params.total_digits)
    )
    return OTKeyPair(params, seeds)


def ots_sign(key: OTKeyPair, value: int) -> OTSignature:
    if not 0 <= value <= key.params.max_value:
        raise ValueOutOfRangeError(f"value {value} outside range")
    if key.used_value is not None and key.used_value != value:
        raise KeyReuseError(
            f"one-time key already signed {key.used_value}, refusing {value}"
        )
    digits = encode_digits(key.params, value)
    chain = tuple(_chain_hash(s, d) for s, d in zip(key.seeds, digits))
    key.used_value = value
    return OTSignature(digits, chain)


def ots_recover_value(pub: OTPublicKey, sig: OTSignature) -> int:
    """Recover the unique value a valid signature encodes, or raise.

    Each chain value is hashed the complementary number of times and must land
    on the public digest; the checksum check in :func:`decode_digits` blocks
    digit-increase forgeries.
    """
    value = decode_digits(pub.params, sig.digits)
    if len(sig.chain_values) != pub.params.total_digits:
        raise RecoveryError("wrong chain value count")
    top = pub.params.base - 1
    for digit, chain_value, end in zip(sig.digits, sig.chain_values, pub.digests):
        if len(chain_value) != DIGEST_LEN:
            raise RecoveryError("malformed chain value")
        if _chain_hash(chain_value, top - digit) != end:
            raise RecoveryError("chain value does not reach public digest")
    return value


def ots_verify(pub: OTPublicKey, value: int, sig: OTSignature) -> bool:
    try:
        return ots_recover_value(pub, sig) == value
    except RecoveryError:
        return False


# ---------------------------------------------------------------------------
# Covenant (aggregate) and single-party signatures
# ---------------------------------------------------------------------------

class SignerRegistry:
    """Simulation-trusted mapping from public tokens to signing secrets.

    Verification recomputes MACs through the registry; parties only ever use
    their own secrets to sign. One registry per simulated world, so worlds can
    be deep-copied and forked deterministically.
    """

    def __init__(self) -> None:
        self._secrets: dict[bytes, bytes] = {}

    def register(self, secret: bytes) -> bytes:
        pub = sha256(b"signer" + secret)
        self._secrets[pub] = secret
        return pub

    def secret_for(self, pub: bytes) -> bytes | None:
        return self._secrets.get(pub)


def _party_mac(secret: bytes, tag: bytes, tx_digest: bytes, leaf: int) -> bytes:
    return hmac.new(secret, tag + tx_digest + leaf.to_bytes(4, "big"), hashlib.sha256).digest()


@dataclass(frozen=True)
class PartySignature:
    """Single-party authorization of (transaction digest, leaf index)."""

    pub: bytes
    mac: bytes

    def serialize(self) -> bytes:
        return self.pub + self.mac


def party_sign(secret: bytes, pub: bytes, tx_digest: bytes, leaf: int = 0) -> PartySignature:
    return PartySignature(pub, _party_mac(secret, b"single", tx_digest, leaf))


def party_verify(registry: SignerRegistry, sig: PartySignature, pub: bytes,
                 tx_digest: bytes, leaf: int = 0) -> bool:
    if sig.pub != pub:
        return False
    secret = registry.secret_for(pub)
    if secret is None:
        return False
    return hmac.compare_digest(sig.mac, _party_mac(secret, b"single", tx_digest, leaf))


@dataclass(frozen=True)
class CovenantKeySet:
    """The two owners' public tokens, in a fixed (a, b) order."""

    pub_a: bytes
    pub_b: bytes


@dataclass(frozen=True)
class CovenantSignature:
    """Opaque 64-byte aggregate bound to one (tx digest, leaf index)."""

    token: bytes

    def serialize(self) -> bytes:
        return self.token


def covenant_partial(secret: bytes, tx_digest: bytes, leaf: int = 0) -> bytes:
    return _party_mac(secret, b"covenant", tx_digest, leaf)


def covenant_combine(keyset: CovenantKeySet, partials: dict[bytes, bytes]) -> CovenantSignature:
    """Aggregate both parties' partials; raises if either consent is missing."""
    missing = [p.hex()[:8] for p in (keyset.pub_a, keyset.pub_b) if p not in partials]
    if missing:
        raise MissingPartialError(f"missing consent from {', '.join(missing)}")
    return CovenantSignature(partials[keyset.pub_a] + partials[keyset.pub_b])


def covenant_verify(registry: SignerRegistry, keyset: CovenantKeySet,
                    tx_digest: bytes, leaf: int, sig: CovenantSignature) -> bool:
    if len(sig.token) != 2 * DIGEST_LEN:
        return False
    expected = b""
    for pub in (keyset.pub_a, keyset.pub_b):
        secret = registry.secret_for(pub)
        if secret is None:
            return False
        expected += _party_mac(secret, b"covenant", tx_digest, leaf)
    return hmac.compare_digest(sig.token, expected)


def covenant_partial_verify(registry: SignerRegistry, pub: bytes, partial: bytes,
                            tx_digest: bytes, leaf: int = 0) -> bool:
    secret = registry.secret_for(pub)
    if secret is None:
        return False
    return hmac.compare_digest(partial, _party_mac(secret, b"covenant", tx_digest, leaf))


# ---------------------------------------------------------------------------
# Symmetric encryption
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CipherPacket:
    iv: bytes
    ciphertext: bytes
    tag: bytes

    def serialize(self) -> bytes:
        return self.iv + len(self.ciphertext).to_bytes(4, "big") + self.ciphertext + self.tag


def encrypt(key: bytes, payload: bytes, iv: bytes) -> CipherPacket:
    """AES-GCM under a 32-byte key; the caller supplies a fresh IV per call."""
    if len(key) != DIGEST_LEN:
        raise ValueError("key must be 32 bytes")
    if len(iv) != IV_LEN:
        raise ValueError(f"iv must be {IV_LEN} bytes")
    sealed = AESGCM(key).encrypt(iv, payload, None)
    return CipherPacket(iv, sealed[:-16], sealed[-16:])


def decrypt(key: bytes, packet: CipherPacket) -> bytes:
    if len(key) != DIGEST_LEN:
        raise ValueError("key must be 32 bytes")
    try:
        return AESGCM(key).decrypt(packet.iv, packet.ciphertext + packet.tag, None)
    except InvalidTag as exc:
        raise IntegrityError("packet failed authentication") from exc


def stream_xor(key: bytes, payload: bytes) -> bytes:
    """SHA-256 counter keystream XOR; output length equals input length.

    Only for single-use keys (each hash-chain value encrypts one packet);
    integrity comes from verifying the decrypted signatures, not a tag.
    """
    out = bytearray()
    counter = 0
    while len(out) < len(payload):
        out += sha256(key + b"stream" + counter.to_bytes(4, "big"))
        counter += 1
    return bytes(a ^ b for a, b in zip(payload, out))


# ---------------------------------------------------------------------------
# Hash chains
# ---------------------------------------------------------------------------

MAX_CHAIN_LENGTH = 1 << 20


@dataclass(frozen=True)
class HashChain:
    """A chain anchored at ``seed`` = derive(length); derive(i-1) = H(derive(i))."""

    seed: bytes
    length: int

    def __post_init__(self) -> None:
        if not 1 <= self.length <= MAX_CHAIN_LENGTH:
            raise ValueError(f"chain length must be in [1, {MAX_CHAIN_LENGTH}]")


def hashchain_derive(chain: HashChain, index: int) -> bytes:
    if not 0 <= index <= chain.length:
        raise ValueError(f"index {index} beyond chain length {chain.length}")
    return _chain_hash(chain.seed, chain.length - index)


def hashchain_walk(value: bytes, steps: int) -> bytes:
    """Walk ``steps`` links down the chain (towards index 0)."""
    if steps < 0:
        raise ValueError("cannot walk a hash chain upward")
    return _chain_hash(value, steps)


def hashchain_values(chain: HashChain) -> list[bytes]:
    """All values indexed 0..length; index length is the seed."""
    out = [b""] * (chain.length + 1)
    value = chain.seed
    for i in range(chain.length, -1, -1):
        out[i] = value
        value = sha256(value)
    return out
