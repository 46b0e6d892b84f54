"""Experiment configuration: TOML in, validated dataclasses out.

Every field left out of the file takes the default declared here.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from dnr.errors import ContractViolation
from dnr.model import BACKBONE_KINDS
from dnr.objectives import ObjectiveConfig
from dnr.synth import SynthSpec, spec_to_dict

ARMS = ("baseline", "divide", "refine", "divide+refine")
MASKS = ("atv", "av", "at", "tv")


@dataclass
class ModelConfig:
    d: int = 32
    hidden: int = 64
    backbone: str = "concat-mlp"
    fused_width: int = 32
    backbone_hidden: int = 64

    def validate(self) -> None:
        for name in ("d", "hidden", "fused_width", "backbone_hidden"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"model.{name} must be a positive integer")
        if self.backbone not in BACKBONE_KINDS:
            raise ContractViolation(f"model.backbone must be one of {BACKBONE_KINDS}")


@dataclass
class ScheduleConfig:
    divide_epochs: int = 50
    refine_epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    patience: int = 10

    def validate(self) -> None:
        if self.divide_epochs < 0 or self.refine_epochs < 0:
            raise ContractViolation("schedule epochs must be non-negative")
        if self.batch_size < 2:
            raise ContractViolation("schedule.batch_size must be >= 2")
        if self.lr <= 0:
            raise ContractViolation("schedule.lr must be positive")
        if self.weight_decay < 0:
            raise ContractViolation("schedule.weight_decay must be non-negative")
        if self.patience < 1:
            raise ContractViolation("schedule.patience must be >= 1")


@dataclass
class ExperimentConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seeds: list = field(default_factory=lambda: [0])
    arms: list = field(default_factory=lambda: ["baseline", "divide+refine"])
    masks: list = field(default_factory=lambda: list(MASKS))
    pid_bins: int = 4

    def validate(self) -> None:
        self.synth.validate()
        self.objective.validate()
        self.model.validate()
        self.schedule.validate()
        if not self.seeds:
            raise ContractViolation("experiment.seeds must be non-empty")
        for s in self.seeds:
            if not isinstance(s, int) or not 0 <= s < 2**64:
                raise ContractViolation(f"experiment.seeds entries must be 64-bit unsigned integers, got {s!r}")
        for arm in self.arms:
            if arm not in ARMS:
                raise ContractViolation(f"experiment.arms entry {arm!r} is not one of {ARMS}")
        mods = set(self.synth.modalities)
        for mask in self.masks:
            if not mask or not set(mask) <= mods or len(set(mask)) != len(mask):
                raise ContractViolation(
                    f"experiment.masks entry {mask!r} must be a non-empty subset of {''.join(self.synth.modalities)}"
                )
        if self.pid_bins < 2 or self.pid_bins > 64:
            raise ContractViolation("experiment.pid_bins must lie in [2, 64]")

    def to_dict(self) -> dict:
        return {
            "synth": spec_to_dict(self.synth),
            "objective": asdict(self.objective),
            "model": asdict(self.model),
            "schedule": asdict(self.schedule),
            "experiment": {
                "seeds": list(self.seeds),
                "arms": list(self.arms),
                "masks": list(self.masks),
                "pid_bins": self.pid_bins,
            },
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _section(cls, raw: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ContractViolation(f"unknown field(s) in [{name}]: {', '.join(sorted(unknown))}")
    return cls(**raw)


def config_from_dict(doc: dict) -> ExperimentConfig:
    sections = {"synth", "objective", "model", "schedule", "experiment"}
    unknown = set(doc) - sections
    if unknown:
        raise ContractViolation(f"unknown config section(s): {', '.join(sorted(unknown))}")
    exp = dict(doc.get("experiment", {}))
    allowed = {"seeds", "arms", "masks", "pid_bins"}
    if set(exp) - allowed:
        raise ContractViolation(f"unknown field(s) in [experiment]: {', '.join(sorted(set(exp) - allowed))}")
    cfg = ExperimentConfig(
        synth=_section(SynthSpec, doc.get("synth", {}), "synth"),
        objective=_section(ObjectiveConfig, doc.get("objective", {}), "objective"),
        model=_section(ModelConfig, doc.get("model", {}), "model"),
        schedule=_section(ScheduleConfig, doc.get("schedule", {}), "schedule"),
        **exp,
    )
    cfg.validate()
    return cfg


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    """Read a TOML config.  ``DNR_SEED`` in the environment replaces the
    seed list, and an explicit ``seed_override`` wins over both."""
    path = Path(path)
    if not path.exists():
        raise ContractViolation(f"config file not found: {path}")
    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    cfg = config_from_dict(doc)
    env = os.environ.get("DNR_SEED")
    if seed_override is None and env is not None and env.strip():
        try:
            cfg.seeds = [int(env)]
        except ValueError:
            raise ContractViolation(f"DNR_SEED must be an integer, got {env!r}") from None
    if seed_override is not None:
        cfg.seeds = [int(seed_override)]
    cfg.validate()
    return cfg
