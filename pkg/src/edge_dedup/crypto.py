"""Server-aided message-locked encryption and the cloud-enclave secure channel.

The key server mixes a global secret into every chunk key (HMAC-SHA256 over
the plaintext fingerprint) and throttles clients with a token bucket that
refills in virtual time. Chunks are encrypted with AES-256-GCM under a nonce
derived from the plaintext, so equal plaintexts converge to equal ciphertexts.

The secure channel is an attested X25519 exchange expanded with HKDF. Sealed
payloads carry a per-direction counter that doubles as the GCM nonce, which
rejects replays as well as tampering.
"""

import hashlib
import hmac
import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Self

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from pydantic import BaseModel, ConfigDict, Field

from edge_dedup.encoding import le64
from edge_dedup.types import (
    AE_NONCE_SIZE,
    NS_PER_S,
    AttestationError,
    ChannelAuthError,
    ChannelDownError,
    CipherChunk,
    ClientId,
    DecodingError,
    Fingerprint,
    PlainChunk,
    RateLimitedError,
)

logger = logging.getLogger(__name__)

KEY_SIZE = 32
CHANNEL_AAD = b"edge-dedup/channel/v1"
HANDSHAKE_SALT_SIZE = 16


@dataclass(frozen=True, slots=True)
class MleKey:
    """A 32-byte message-locked encryption key."""

    key: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.key) != KEY_SIZE:
            raise ValueError(f"MLE key must be {KEY_SIZE} bytes, got {len(self.key)}")


class KeyServerConfig(BaseModel):
    """Rate-limit settings of the key server.

    Attributes:
        bucket_capacity: Tokens a client may spend in a burst
        refill_per_second: Tokens regained per virtual second
    """

    model_config = ConfigDict(frozen=True)

    bucket_capacity: int = Field(default=1 << 16, ge=0, description="Token bucket size")
    refill_per_second: float = Field(
        default=float(1 << 16), ge=0, description="Tokens regained per virtual second"
    )


class TokenBucket:
    """Token bucket driven by virtual time.

    Example:
        >>> bucket = TokenBucket(capacity=2, refill_per_second=1.0)
        >>> bucket.try_take(now=0), bucket.try_take(now=0), bucket.try_take(now=0)
        (True, True, False)
    """

    def __init__(self, capacity: int, refill_per_second: float) -> None:
        self.capacity = capacity
        self.refill_per_second = refill_per_second
        self._tokens = float(capacity)
        self._last = 0

    def _refill(self, now: int) -> None:
        if now > self._last:
            gained = (now - self._last) * self.refill_per_second / NS_PER_S
            self._tokens = min(float(self.capacity), self._tokens + gained)
            self._last = now

    def try_take(self, now: int, n: int = 1) -> bool:
        """Spend ``n`` tokens at virtual time ``now``; all or nothing."""
        self._refill(now)
        if self._tokens + 1e-9 < n:
            return False
        self._tokens -= n
        return True

    @property
    def tokens(self) -> float:
        return self._tokens


class KeyServer:
    """Centralized key server deriving MLE keys from plaintext fingerprints.

    The global secret never leaves this object; callers only see PRF outputs.

    Example:
        >>> ks = KeyServer.from_seed(7)
        >>> k1 = ks.derive_key(ClientId("a"), fp, now=0)
        >>> k2 = ks.derive_key(ClientId("b"), fp, now=0)
        >>> k1 == k2
        True
    """

    def __init__(self, global_secret: bytes, config: KeyServerConfig | None = None) -> None:
        if len(global_secret) != KEY_SIZE:
            raise ValueError(f"Global secret must be {KEY_SIZE} bytes")
        self._global_secret = global_secret
        self.config = config or KeyServerConfig()
        self._buckets: dict[ClientId, TokenBucket] = {}
        self.served = 0
        self.throttled = 0

    @classmethod
    def from_seed(cls, seed: int, config: KeyServerConfig | None = None) -> Self:
        """Derive the global secret deterministically from ``seed``."""
        secret = hashlib.sha256(b"edge-dedup/key-server" + le64(seed)).digest()
        return cls(secret, config)

    def _bucket(self, client: ClientId) -> TokenBucket:
        bucket = self._buckets.get(client)
        if bucket is None:
            bucket = TokenBucket(self.config.bucket_capacity, self.config.refill_per_second)
            self._buckets[client] = bucket
        return bucket

    def _prf(self, plain_fp: Fingerprint) -> MleKey:
        return MleKey(hmac.new(self._global_secret, plain_fp, hashlib.sha256).digest())

    def derive_key(self, client: ClientId, plain_fp: Fingerprint, *, now: int) -> MleKey:
        """Derive the key of one plaintext chunk.

        Raises:
            RateLimitedError: If the client's token bucket is empty
        """
        return self.derive_keys(client, [plain_fp], now=now)[0]

    def derive_keys(
        self, client: ClientId, plain_fps: Sequence[Fingerprint], *, now: int
    ) -> list[MleKey]:
        """Derive keys for a batch; the whole batch is throttled or served.

        Raises:
            RateLimitedError: If the bucket holds fewer tokens than the batch size
        """
        if not self._bucket(client).try_take(now, len(plain_fps)):
            self.throttled += 1
            logger.warning(f"Key server throttled client {client} ({len(plain_fps)} keys)")
            raise RateLimitedError(f"Client {client} exceeded its key-derivation rate")
        self.served += len(plain_fps)
        return [self._prf(fp) for fp in plain_fps]


def _content_nonce(plaintext: bytes) -> bytes:
    return hashlib.sha256(plaintext).digest()[:AE_NONCE_SIZE]


def encrypt_chunk(chunk: PlainChunk, key: MleKey) -> CipherChunk:
    """Deterministically encrypt a chunk; the nonce is prepended to the output."""
    nonce = _content_nonce(chunk.data)
    return CipherChunk(nonce + AESGCM(key.key).encrypt(nonce, chunk.data, None))


def decrypt_chunk(chunk: CipherChunk, key: MleKey) -> PlainChunk:
    """Invert :func:`encrypt_chunk`.

    Raises:
        DecodingError: If the ciphertext fails authentication under ``key``
    """
    nonce, body = chunk.data[:AE_NONCE_SIZE], chunk.data[AE_NONCE_SIZE:]
    try:
        return PlainChunk(AESGCM(key.key).decrypt(nonce, body, None))
    except InvalidTag as exc:
        raise DecodingError("Chunk failed authentication under the supplied key") from exc


class Role(StrEnum):
    CLOUD = "cloud"
    ENCLAVE = "enclave"


@dataclass(frozen=True, slots=True)
class AttestationReport:
    """What an enclave presents to the cloud before key agreement."""

    enclave_id: str
    measurement: bytes
    public_key: bytes


def measurement_of(code_label: str) -> bytes:
    """Simulated measurement: the hash of the enclave's code identity."""
    return hashlib.sha256(f"edge-dedup/enclave/{code_label}".encode()).digest()


def _private_key(label: bytes, seed: int) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(hashlib.sha256(label + le64(seed)).digest())


def _raw_public(key: X25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


class EnclaveIdentity:
    """Identity of a simulated enclave: measurement plus a key-agreement key."""

    def __init__(self, enclave_id: str, *, code_label: str = "v1", seed: int = 0) -> None:
        self.enclave_id = enclave_id
        self.measurement = measurement_of(code_label)
        self._key = _private_key(f"enclave/{enclave_id}".encode(), seed)
        self._sealing_key = hashlib.sha256(
            b"edge-dedup/sealing" + self.measurement + self._key.private_bytes_raw()
        ).digest()

    def report(self) -> AttestationReport:
        return AttestationReport(self.enclave_id, self.measurement, _raw_public(self._key))

    def exchange(self, peer_public: bytes) -> bytes:
        return self._key.exchange(X25519PublicKey.from_public_bytes(peer_public))

    @property
    def sealing_key(self) -> bytes:
        return self._sealing_key


class CloudIdentity:
    """The cloud's key-agreement identity."""

    def __init__(self, cloud_id: str = "cloud", *, seed: int = 0) -> None:
        self.cloud_id = cloud_id
        self._key = _private_key(f"cloud/{cloud_id}".encode(), seed)

    @property
    def public_key(self) -> bytes:
        return _raw_public(self._key)

    def exchange(self, peer_public: bytes) -> bytes:
        return self._key.exchange(X25519PublicKey.from_public_bytes(peer_public))


class SecureChannel:
    """One endpoint of an authenticated, replay-protected channel.

    Sealed layout: ``counter (u64) | AES-GCM(ciphertext + tag)``. The nonce is
    the sender's direction byte followed by the counter, so the two directions
    never share a nonce.
    """

    def __init__(self, secret: bytes, role: Role) -> None:
        self._aead = AESGCM(secret)
        self.key_id = hashlib.sha256(b"key-id" + secret).hexdigest()[:16]
        self.role = role
        self._sent = 0
        self._received = 0
        self._closed = False

    @staticmethod
    def _nonce(sender: Role, counter: int) -> bytes:
        direction = b"\x00" if sender is Role.CLOUD else b"\x01"
        return direction + b"\x00" * 3 + le64(counter)

    def seal(self, payload: bytes) -> bytes:
        """Encrypt and authenticate ``payload`` for the peer.

        Raises:
            ChannelDownError: If the channel is closed
        """
        if self._closed:
            raise ChannelDownError(f"{self.role} endpoint is closed")
        self._sent += 1
        body = self._aead.encrypt(self._nonce(self.role, self._sent), payload, CHANNEL_AAD)
        return le64(self._sent) + body

    def open(self, sealed: bytes) -> bytes:
        """Authenticate and decrypt a payload from the peer.

        The receive counter only advances on success, so a rejected payload
        leaves the endpoint unchanged.

        Raises:
            ChannelAuthError: On tampering, truncation or replay
            ChannelDownError: If the channel is closed
        """
        if self._closed:
            raise ChannelDownError(f"{self.role} endpoint is closed")
        if len(sealed) < 8 + 16:
            raise ChannelAuthError("Sealed payload is truncated")
        counter = int.from_bytes(sealed[:8], "little")
        if counter <= self._received:
            raise ChannelAuthError(f"Replayed or reordered payload (counter {counter})")
        peer = Role.ENCLAVE if self.role is Role.CLOUD else Role.CLOUD
        try:
            payload = self._aead.decrypt(self._nonce(peer, counter), sealed[8:], CHANNEL_AAD)
        except InvalidTag as exc:
            raise ChannelAuthError("Sealed payload failed authentication") from exc
        self._received = counter
        return payload

    def close(self) -> None:
        self._closed = True

    @property
    def is_closed(self) -> bool:
        return self._closed


@dataclass(frozen=True, slots=True)
class ChannelPair:
    cloud: SecureChannel
    enclave: SecureChannel


def _derive_shared(raw: bytes, salt: bytes, cloud_id: str, enclave_id: str) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=KEY_SIZE,
        salt=salt,
        info=f"edge-dedup/shared/{cloud_id}/{enclave_id}".encode(),
    ).derive(raw)


def establish_secure_channel(
    enclave: EnclaveIdentity,
    cloud: CloudIdentity,
    *,
    expected_measurement: bytes,
    report: AttestationReport | None = None,
    salt: bytes | None = None,
) -> ChannelPair:
    """Attest the enclave and derive the shared secret on both ends.

    Every handshake mixes a fresh salt into the key derivation, so a
    re-attached enclave gets a new channel key.

    Args:
        enclave: The enclave's identity
        cloud: The cloud's identity
        expected_measurement: Measurement the cloud trusts
        report: Report to verify; defaults to the enclave's own (tests pass a
            tampered one)
        salt: Handshake salt sent in the clear; random when omitted

    Returns:
        Both endpoints, keyed with the same 32-byte secret

    Raises:
        AttestationError: If the reported measurement is not the expected one
    """
    report = report or enclave.report()
    if not hmac.compare_digest(report.measurement, expected_measurement):
        logger.warning(f"Attestation failed for enclave {report.enclave_id}")
        raise AttestationError(f"Enclave {report.enclave_id} reported an untrusted measurement")
    salt = salt if salt is not None else os.urandom(HANDSHAKE_SALT_SIZE)
    cloud_secret = _derive_shared(
        cloud.exchange(report.public_key), salt, cloud.cloud_id, report.enclave_id
    )
    enclave_secret = _derive_shared(
        enclave.exchange(cloud.public_key), salt, cloud.cloud_id, enclave.enclave_id
    )
    logger.info(f"Secure channel established between {cloud.cloud_id} and {enclave.enclave_id}")
    return ChannelPair(
        cloud=SecureChannel(cloud_secret, Role.CLOUD),
        enclave=SecureChannel(enclave_secret, Role.ENCLAVE),
    )
