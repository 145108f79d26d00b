"""Experiment configuration and its YAML loader.

Example configuration::

    name: lab-min
    mode: pm_dedup
    seed: 7
    dataset_profile: lab
    workload:
      base_size: 2097152
      snapshot_count: 12
    latency:
      cloud_ratio: 6.89
    topology:
      clients: 4
      edges: 2
"""

from enum import StrEnum
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from edge_dedup.cloud import CloudConfig
from edge_dedup.crypto import KeyServerConfig
from edge_dedup.simnet.network import LatencyModel
from edge_dedup.simnet.workload import PROFILES, SnapshotSpec
from edge_dedup.types import ConfigError


class Mode(StrEnum):
    """Upload path under test.

    Attributes:
        PM_DEDUP: Edge servers with local index, share-index and pools
        PM_NO_LOCAL: Edge servers without the local index
        SOURCE_BASELINE: Cloud-side checks with real-time challenges
        TARGET_BASELINE: Upload everything, deduplicate on arrival
        SGX_BASELINE: Client-side enclave proofs, cloud-side checks
    """

    PM_DEDUP = "pm_dedup"
    PM_NO_LOCAL = "pm_no_local"
    SOURCE_BASELINE = "source_baseline"
    TARGET_BASELINE = "target_baseline"
    SGX_BASELINE = "sgx_baseline"

    @property
    def uses_edges(self) -> bool:
        return self in (Mode.PM_DEDUP, Mode.PM_NO_LOCAL)


class Topology(BaseModel):
    """Clients, edge servers and the share of snapshots uploaded before measuring.

    Clients are assigned to edge servers round-robin.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    clients: int = Field(default=4, ge=1, description="Uploading clients")
    edges: int = Field(default=2, ge=1, description="Edge servers")
    preload_fraction: float = Field(
        default=0.5, ge=0.0, lt=1.0, description="Snapshots uploaded before measuring"
    )

    def preload_count(self, snapshot_count: int) -> int:
        if snapshot_count <= 1:
            return 0
        return min(snapshot_count - 1, int(self.preload_fraction * snapshot_count))


class EdgeSettings(BaseModel):
    """Edge sizing shared by every edge server of a run.

    Attributes:
        local_coverage: Local-index chunk entries as a fraction of the
            workload's distinct chunks
        local_file_capacity: File entries of the local index
        enclave_capacity_bytes: Enclave budget; scaled from the workload's
            unique bytes when omitted
        hit_window: Lookups in the hit-ratio window
        hit_threshold: Hit ratio below which an update is requested
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    local_coverage: float = Field(default=0.05, gt=0.0, le=1.0, description="Local coverage")
    local_file_capacity: int = Field(default=4096, ge=0, description="Local file entries")
    enclave_capacity_bytes: int | None = Field(default=None, gt=0, description="Enclave budget")
    hit_window: int = Field(default=10_000, gt=0, description="Hit-ratio window")
    hit_threshold: float = Field(default=0.3, ge=0.0, le=1.0, description="Hit-ratio alarm")


class ExperimentConfig(BaseModel):
    """One experiment: workload, topology, latency model and mode.

    A ``dataset_profile`` fills the workload's snapshot count, target ratio
    and hot-draw probability; keys given under ``workload`` win.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(default="experiment", min_length=1, description="Run name")
    mode: Mode = Field(default=Mode.PM_DEDUP, description="Upload path")
    seed: int = Field(default=0, ge=0, description="Seed of every random choice")
    dataset_profile: str | None = Field(default=None, description="Named dataset preset")
    workload: SnapshotSpec = Field(
        default_factory=lambda: SnapshotSpec(target_dedup_ratio=4.0),
        description="Snapshot series",
    )
    topology: Topology = Field(default_factory=Topology, description="Nodes")
    latency: LatencyModel = Field(default_factory=LatencyModel, description="Latency model")
    cloud: CloudConfig = Field(default_factory=CloudConfig, description="Cloud settings")
    edge: EdgeSettings = Field(default_factory=EdgeSettings, description="Edge settings")
    key_server: KeyServerConfig = Field(
        default_factory=KeyServerConfig, description="Key server rate limits"
    )
    storage_url: str | None = Field(
        default=None, description="SQLAlchemy async URL; in-memory store when omitted"
    )
    epoch_bytes: int | None = Field(
        default=None, gt=0, description="Bytes per epoch; one snapshot when omitted"
    )
    top_fractions: tuple[float, ...] = Field(
        default=(0.05, 0.1, 0.2), description="Edge-set sizes of the elimination analysis"
    )

    @model_validator(mode="before")
    @classmethod
    def apply_profile(cls, data: Any) -> Any:
        """Merge the named profile's presets under explicit workload keys."""
        if not isinstance(data, dict) or data.get("dataset_profile") is None:
            return data
        name = data["dataset_profile"]
        profile = PROFILES.get(name)
        if profile is None:
            raise ValueError(
                f"Unknown dataset profile {name!r}; expected one of {sorted(PROFILES)}"
            )
        workload = data.get("workload") or {}
        if isinstance(workload, SnapshotSpec):
            workload = workload.model_dump(exclude_unset=True)
        merged: dict[str, Any] = {
            "snapshot_count": profile.snapshot_count,
            "target_dedup_ratio": profile.dedup_ratio,
            "hot_probability": profile.hot_probability,
        }
        merged.update(workload)
        return {**data, "workload": merged}

    @field_validator("top_fractions")
    @classmethod
    def validate_fractions(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if not v:
            raise ValueError("At least one top fraction is required")
        for fraction in v:
            if not 0.0 < fraction <= 1.0:
                raise ValueError(f"Top fraction {fraction} is outside (0, 1]")
        return v

    @property
    def effective_epoch_bytes(self) -> int:
        return self.epoch_bytes or self.workload.base_size


def parse_config(data: Any) -> ExperimentConfig:
    """Validate a mapping as an :class:`ExperimentConfig`.

    Raises:
        ConfigError: If the mapping is not a valid configuration
    """
    if not isinstance(data, dict):
        raise ConfigError(f"Configuration must be a mapping, got {type(data).__name__}")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid configuration: {exc}") from exc


def load_config(path: Path | str) -> ExperimentConfig:
    """Read a YAML experiment configuration.

    Raises:
        ConfigError: If the file cannot be read, is not YAML or is invalid
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read configuration {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"Configuration {path} is not valid YAML: {exc}") from exc
    return parse_config(data)
