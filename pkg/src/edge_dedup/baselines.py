"""Comparison upload paths that talk to the cloud directly.

* :class:`SourceBaselineGateway` generates every ownership challenge at the
  cloud in real time and checks duplicates there.
* :class:`EnclaveBaselineGateway` trusts a client-side enclave to prove
  ownership, paying one enclave call per chunk, then checks at the cloud.
* :class:`TargetBaselineGateway` skips proofs and checks and uploads
  everything; the cloud deduplicates on arrival.
"""

import logging
from collections.abc import Sequence

from edge_dedup.cloud import CloudServer, CloudVerdict
from edge_dedup.gateway import BatchResponder, UploadSession
from edge_dedup.messages import (
    Ack,
    CheckRequest,
    CheckResponse,
    PowChallengeBatch,
    PowResponseBatch,
    PowResult,
    StoreUpload,
    UploadFileBegin,
)
from edge_dedup.pow import Challenge, PoolKey, PowLevel, PowVerdict, SuspicionTracker
from edge_dedup.simnet.network import CostMeter, Link, Network, Phase
from edge_dedup.types import (
    BitString,
    CipherChunk,
    ClientId,
    FileRecipe,
    Fingerprint,
    OwnershipRequiredError,
    SessionAbortedError,
    Tier,
)

logger = logging.getLogger(__name__)


class _CloudGateway:
    def __init__(self, cloud: CloudServer, network: Network) -> None:
        self.cloud = cloud
        self.network = network
        self.suspicion = SuspicionTracker(cloud.config.pow.suspicion_threshold)

    async def begin(
        self,
        client: ClientId,
        file_hash: Fingerprint,
        fps: Sequence[Fingerprint],
        meter: CostMeter,
    ) -> UploadSession:
        if self.suspicion.is_suspended(client):
            raise SessionAbortedError(f"Client {client} is suspended at the cloud")
        return UploadSession(client, file_hash, tuple(fps), meter)

    def _opening(self, session: UploadSession) -> int:
        return UploadFileBegin(
            client_id=session.client, file_hash=session.file_hash, chunk_fps=session.fps
        ).wire_size()

    async def check(self, session: UploadSession, fps: Sequence[Fingerprint]) -> list[Tier]:
        uncleared = [fp for fp in fps if fp not in session.cleared]
        if uncleared:
            raise OwnershipRequiredError(f"{len(uncleared)} fingerprints lack an ownership proof")
        unresolved = [fp for fp in dict.fromkeys(fps) if fp not in session.cloud_known]
        if unresolved:
            verdicts = await self.cloud.cloud_check(unresolved)
            for fp, verdict in zip(unresolved, verdicts, strict=True):
                session.cloud_known[fp] = verdict is CloudVerdict.DUPLICATE
        tiers = [Tier.HIT_CLOUD if session.cloud_known[fp] else Tier.UNIQUE for fp in fps]
        self.network.exchange(
            Link.CLIENT_CLOUD,
            CheckRequest(fps=tuple(fps)).wire_size(),
            CheckResponse(tiers=tuple(tiers)).wire_size(),
            phase=Phase.CHECK,
            meter=session.meter,
        )
        return tiers

    async def store(
        self, session: UploadSession, chunks: Sequence[CipherChunk], recipe: FileRecipe
    ) -> None:
        upload = StoreUpload(chunks=tuple(chunks), recipe=recipe)
        self.network.exchange(
            Link.CLIENT_CLOUD,
            upload.wire_size(),
            Ack().wire_size(),
            phase=Phase.TRANSFER,
            meter=session.meter,
        )
        items = [(chunk.fingerprint(), chunk) for chunk in chunks]
        await self.cloud.store_chunks(items)
        await self.cloud.store_recipe(recipe, uploaded=[fp for fp, _ in items])


class SourceBaselineGateway(_CloudGateway):
    """Source-based deduplication with ownership challenges generated on demand."""

    async def prove_ownership(
        self, session: UploadSession, respond: BatchResponder
    ) -> dict[Fingerprint, PowVerdict]:
        """Challenge at file level if the file is stored, otherwise per chunk.

        Raises:
            SessionAbortedError: If the client is or becomes suspended
        """
        if self.suspicion.is_suspended(session.client):
            raise SessionAbortedError(f"Client {session.client} is suspended at the cloud")
        verdicts: dict[Fingerprint, PowVerdict] = {}
        distinct = session.distinct
        opening = self._opening(session)

        file_challenge = await self.cloud.realtime_challenge(
            PoolKey(PowLevel.FILE, session.file_hash)
        )
        if file_challenge is not None:
            self._generated(session, 1 + len(session.fps))
            (answer,) = self._round(session, [file_challenge], respond, opening)
            if self.cloud.realtime_judge(file_challenge, answer):
                for fp in distinct:
                    verdicts[fp] = PowVerdict.VERIFIED
                    session.cloud_known[fp] = True
                session.cleared.update(distinct)
                logger.debug(f"File {session.file_hash.short()} proven at the cloud")
                return verdicts
            narrowed = self.cloud.realtime_same_seed(file_challenge)
            answers = self._round(session, narrowed, respond, 0)
            for challenge, chunk_answer in zip(narrowed, answers, strict=True):
                ok = self.cloud.realtime_judge(challenge, chunk_answer)
                if verdicts.get(challenge.key) is not PowVerdict.FAILED:
                    verdicts[challenge.key] = PowVerdict.VERIFIED if ok else PowVerdict.FAILED
        else:
            challenges: list[Challenge] = []
            for fp in distinct:
                challenge = await self.cloud.realtime_challenge(PoolKey(PowLevel.CHUNK, fp))
                if challenge is None:
                    verdicts[fp] = PowVerdict.NO_PAIRS_AVAILABLE
                    session.cloud_known[fp] = False
                else:
                    challenges.append(challenge)
            self._generated(session, len(challenges))
            answers = self._round(session, challenges, respond, opening)
            for challenge, chunk_answer in zip(challenges, answers, strict=True):
                ok = self.cloud.realtime_judge(challenge, chunk_answer)
                verdicts[challenge.key] = PowVerdict.VERIFIED if ok else PowVerdict.FAILED

        for fp, verdict in verdicts.items():
            if verdict is PowVerdict.FAILED:
                continue
            session.cleared.add(fp)
            if verdict is PowVerdict.VERIFIED:
                session.cloud_known[fp] = True
        failures = sum(1 for v in verdicts.values() if v is PowVerdict.FAILED)
        if failures and self.suspicion.record_failure(session.client, failures):
            raise SessionAbortedError(
                f"Client {session.client} suspended after {failures} failed proofs"
            )
        return verdicts

    def _generated(self, session: UploadSession, count: int) -> None:
        self.network.compute(
            count * self.network.model.challenge_gen_ns, phase=Phase.POW, meter=session.meter
        )

    def _round(
        self,
        session: UploadSession,
        challenges: Sequence[Challenge],
        respond: BatchResponder,
        extra_bytes: int,
    ) -> list[BitString]:
        """One round trip carrying challenges out and responses back.

        An empty batch still costs the round trip that tells the client so.
        """
        answers = respond(challenges) if challenges else []
        if len(answers) != len(challenges):
            raise SessionAbortedError(
                f"Client {session.client} answered {len(answers)} of {len(challenges)} challenges"
            )
        self.network.exchange(
            Link.CLIENT_CLOUD,
            extra_bytes + PowChallengeBatch(challenges=tuple(challenges)).wire_size(),
            PowResponseBatch(responses=tuple(answers)).wire_size()
            + PowResult(verdicts=(PowVerdict.VERIFIED,) * len(answers)).wire_size(),
            phase=Phase.POW,
            meter=session.meter,
        )
        return answers


class EnclaveBaselineGateway(_CloudGateway):
    """Ownership vouched for by a client-side enclave in one cloud round trip."""

    async def prove_ownership(
        self, session: UploadSession, respond: BatchResponder
    ) -> dict[Fingerprint, PowVerdict]:
        distinct = session.distinct
        self.network.ecall(len(distinct), phase=Phase.POW, meter=session.meter)
        self.network.exchange(
            Link.CLIENT_CLOUD,
            self._opening(session),
            Ack().wire_size(),
            phase=Phase.POW,
            meter=session.meter,
        )
        session.cleared.update(distinct)
        return dict.fromkeys(distinct, PowVerdict.VERIFIED)


class TargetBaselineGateway(_CloudGateway):
    """No proofs, no checks: every chunk crosses the wire."""

    async def prove_ownership(
        self, session: UploadSession, respond: BatchResponder
    ) -> dict[Fingerprint, PowVerdict]:
        distinct = session.distinct
        session.cleared.update(distinct)
        return dict.fromkeys(distinct, PowVerdict.NO_PAIRS_AVAILABLE)

    async def check(self, session: UploadSession, fps: Sequence[Fingerprint]) -> list[Tier]:
        return [Tier.UNIQUE] * len(fps)
