"""The interface a client uploads through.

PM-Dedup's edge server and the baselines it is compared against all expose
the same four steps: open an upload session, prove ownership of the chunks
the server asks about, check which chunks are duplicates and store the rest.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

from edge_dedup.pow import Challenge, PowVerdict
from edge_dedup.simnet.network import CostMeter
from edge_dedup.types import BitString, CipherChunk, ClientId, FileRecipe, Fingerprint, Tier

BatchResponder = Callable[[Sequence[Challenge]], list[BitString]]
"""Answers one round of challenges, in order."""


@dataclass
class UploadSession:
    """Server-side state of one file upload.

    Attributes:
        client: Uploading client
        file_hash: Plaintext file hash
        fps: Ciphertext chunk fingerprints in file order
        meter: Where the upload's latency is charged
        cleared: Fingerprints the client has proven or that need no proof
        cloud_known: What the server already learned from the cloud
    """

    client: ClientId
    file_hash: Fingerprint
    fps: tuple[Fingerprint, ...]
    meter: CostMeter
    cleared: set[Fingerprint] = field(default_factory=set)
    cloud_known: dict[Fingerprint, bool] = field(default_factory=dict)

    @property
    def distinct(self) -> list[Fingerprint]:
        """Distinct fingerprints in first-occurrence order."""
        return list(dict.fromkeys(self.fps))


@runtime_checkable
class DedupGateway(Protocol):
    """Upload path shared by PM-Dedup and the baselines."""

    async def begin(
        self,
        client: ClientId,
        file_hash: Fingerprint,
        fps: Sequence[Fingerprint],
        meter: CostMeter,
    ) -> UploadSession:
        """Open an upload session."""
        ...

    async def prove_ownership(
        self, session: UploadSession, respond: BatchResponder
    ) -> dict[Fingerprint, PowVerdict]:
        """Challenge the client; verdicts are keyed by chunk fingerprint.

        Raises:
            SessionAbortedError: If the client is suspended
        """
        ...

    async def check(self, session: UploadSession, fps: Sequence[Fingerprint]) -> list[Tier]:
        """Classify fingerprints in order.

        Raises:
            OwnershipRequiredError: If a fingerprint has not been cleared
        """
        ...

    async def store(
        self, session: UploadSession, chunks: Sequence[CipherChunk], recipe: FileRecipe
    ) -> None:
        """Upload unique chunks and the file recipe."""
        ...
