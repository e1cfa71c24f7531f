"""Node configuration (a canonical-JSON file on disk)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..fabric import CoordinatorSettings
from ..protocol import DEFAULT_DIM


class PromptPaths(BaseModel):
    decomposition: Optional[str] = None
    execution: Optional[str] = None
    background: Optional[str] = None


class NodeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "node"
    host: str = "127.0.0.1"
    port: int = Field(ge=1, le=65535)
    # extra "host:port" listeners, e.g. one public and one intranet address
    extra_listen: list[str] = Field(default_factory=list)
    gateway_port: Optional[int] = Field(default=None, ge=1, le=65535)
    seeds: list[str] = Field(default_factory=list)
    roles: list[str]
    capability_vector: list[float]
    engine: dict[str, Any] = Field(default_factory=lambda: {"kind": "scripted", "default": ""})
    model_path: str = ""
    gpu_allocation: str = ""
    key_seed_hex: Optional[str] = None
    dim: int = DEFAULT_DIM
    taxonomy_path: Optional[str] = None
    prompts: PromptPaths = Field(default_factory=PromptPaths)

    beacon_timeout_s: float = 2.0
    step_timeout_s: float = 30.0
    task_deadline_s: float = 120.0
    max_subtasks: int = 8
    retries: int = 1
    heartbeat_interval_s: float = 3.0
    sync_interval_s: float = 2.0
    ttl_ms: int = 10_000

    max_tokens: int = 512
    temperature: float = 0.5
    top_p: float = 0.9
    stage_overrides: dict[str, dict[str, Any]] = Field(default_factory=dict)

    ledger_log: Optional[str] = None
    event_log: Optional[str] = None
    probe_engine: bool = True

    @field_validator("roles")
    @classmethod
    def _roles(cls, v: list[str]) -> list[str]:
        if not v:
            raise ValueError("roles must be nonempty")
        bad = set(v) - {"planner", "executor"}
        if bad:
            raise ValueError(f"unknown roles {sorted(bad)}")
        return sorted(set(v))

    @field_validator("capability_vector")
    @classmethod
    def _capability(cls, v: list[float]) -> list[float]:
        if any(not 0.0 <= x <= 1.0 for x in v) or not any(x > 0 for x in v):
            raise ValueError("capability components must lie in [0, 1] with one positive")
        return v

    @model_validator(mode="after")
    def _dims(self) -> "NodeConfig":
        if len(self.capability_vector) != self.dim:
            raise ValueError(f"capability_vector has {len(self.capability_vector)} components, dim is {self.dim}")
        if "kind" not in self.engine:
            raise ValueError("engine config needs a 'kind'")
        return self

    @property
    def metadata(self) -> str:
        return json.dumps({"model_path": self.model_path, "gpu_allocation": self.gpu_allocation},
                          sort_keys=True, separators=(",", ":"))

    @property
    def gateway_url(self) -> str:
        return f"http://{self.host}:{self.gateway_port}" if self.gateway_port else ""

    def coordinator_settings(self) -> CoordinatorSettings:
        return CoordinatorSettings(
            beacon_timeout_s=self.beacon_timeout_s,
            step_timeout_s=self.step_timeout_s,
            task_deadline_s=self.task_deadline_s,
            max_subtasks=self.max_subtasks,
            retries=self.retries,
            max_tokens=self.max_tokens,
            temperature=self.temperature,
            top_p=self.top_p,
            stage_overrides=self.stage_overrides,
        )

    @classmethod
    def load(cls, path: str | Path) -> "NodeConfig":
        return cls.model_validate_json(Path(path).read_text("utf-8"))

    def dump(self, path: str | Path) -> None:
        doc = self.model_dump(mode="json")
        Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")), "utf-8")
