"""Ablation arms, per-mask evaluation and stream diagnostics."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import astuple, dataclass, fields

import numpy as np

from dnr.config import ExperimentConfig
from dnr.errors import ContractViolation
from dnr.model import Backbone, DivideModel
from dnr.objectives import pearson_corr
from dnr.pid import JointDist, kl_simplex, pid_decompose
from dnr.pipeline import (
    build_backbone,
    evaluate,
    freeze,
    frozen_streams,
    train_divide,
    train_refine,
)
from dnr.synth import Dataset, Split, discretize, generate

log = logging.getLogger(__name__)


@dataclass
class MetricsRow:
    """One (arm, mask, seed) cell.  Stream diagnostics are ``None`` for arms
    that never decompose their inputs."""

    arm: str
    modality_mask: str
    seed: int
    accuracy: float
    weighted_f1: float
    mean_abs_corr_u_r: float | None
    mean_cross_corr_r: float | None
    mean_kl_u_r: float | None
    pid_r: float
    pid_s: float
    pid_u: float


METRICS_COLUMNS = tuple(f.name for f in fields(MetricsRow))


@dataclass
class ArmResult:
    arm: str
    seed: int
    model: DivideModel | None
    backbone: Backbone
    divide_log: list
    refine_log: list


def uses_divide(arm: str) -> bool:
    return arm in ("divide", "divide+refine")


def uses_refine(arm: str) -> bool:
    return arm in ("refine", "divide+refine")


def run_arm(cfg: ExperimentConfig, arm: str, seed: int, data: Dataset,
            divide_cache: dict | None = None) -> ArmResult:
    """Train one ablation arm.

    ``baseline`` and ``refine`` feed raw features to the backbone; the
    latter perturbs the raw inputs.  ``divide`` and ``divide+refine`` feed
    frozen decomposed streams.  ``divide_cache`` lets arms sharing a seed
    reuse one Phase-I run.
    """
    model = None
    divide_log = []
    if uses_divide(arm):
        key = ("divide", seed)
        if divide_cache is not None and key in divide_cache:
            model, divide_log = divide_cache[key]
        else:
            result = train_divide(cfg, data, seed)
            model, divide_log = freeze(result.module), result.log
            if divide_cache is not None:
                divide_cache[key] = (model, divide_log)
        slot_width = 3 * cfg.model.d
    else:
        widths = set(data.spec.widths.values())
        if len(widths) != 1:
            raise ContractViolation("raw-feature arms need equal feature widths across modalities")
        slot_width = widths.pop()
    backbone = build_backbone(cfg, seed, slot_width, f"backbone.{arm}")
    refined = train_refine(cfg, model, backbone, data, seed, contrastive=uses_refine(arm))
    return ArmResult(arm, seed, model, refined.module, divide_log, refined.log)


def _slot_vectors(model: DivideModel | None, split: Split):
    if model is None:
        return {m: v for m, v in split.x.items()}, None
    streams = frozen_streams(model, split.x)
    return {m: np.concatenate(s, axis=1) for m, s in streams.items()}, streams


def stream_diagnostics(streams, mask: str) -> tuple[float, float, float]:
    """Mean |corr(u, r)|, mean cross-modal corr(r, r') and mean KL(u || r)."""
    mods = [m for m in streams if m in mask]
    abs_ur = np.mean([abs(pearson_corr(streams[m][0], streams[m][1]).item()) for m in mods])
    pairs = [(m, s) for m in mods for s in mods if m != s]
    cross = np.mean([pearson_corr(streams[m][1], streams[s][1]).item() for m, s in pairs]) if pairs else 0.0
    kl = np.mean([np.mean(kl_simplex(streams[m][0], streams[m][1])) for m in mods])
    return float(abs_ur), float(cross), float(kl)


def pid_diagnostics(slots, labels: np.ndarray, mask: str, bins: int) -> tuple[float, float, float]:
    """PID atoms of the label against the first two masked-in slots, after
    equal-frequency discretization.  Returns (r, s, u1 + u2)."""
    mods = [m for m in slots if m in mask]
    if len(mods) < 2:
        mods = mods * 2
    a = discretize(slots[mods[0]], bins)
    b = discretize(slots[mods[1]], bins)
    atoms = pid_decompose(JointDist.from_samples(labels, a, b))
    return atoms.r, atoms.s, atoms.u1 + atoms.u2


def evaluate_arm(cfg: ExperimentConfig, result: ArmResult, data: Dataset) -> list[MetricsRow]:
    split = data.test
    slots, streams = _slot_vectors(result.model, split)
    rows = []
    for mask in cfg.masks:
        acc, wf1 = evaluate(result.model, result.backbone, split, mask, data.spec.num_classes)
        if streams is not None:
            abs_ur, cross, kl = stream_diagnostics(streams, mask)
        else:
            abs_ur = cross = kl = None
        pid_r, pid_s, pid_u = pid_diagnostics(slots, split.labels, mask, cfg.pid_bins)
        rows.append(MetricsRow(result.arm, mask, result.seed, acc, wf1, abs_ur, cross, kl,
                               pid_r, pid_s, pid_u))
    return rows


def run_ablation(cfg: ExperimentConfig, on_result=None) -> list[MetricsRow]:
    """Every configured arm for every seed, evaluated under every mask.

    Rows come out ordered by arm, then seed, then mask.  ``on_result`` is
    called with each trained :class:`ArmResult`.
    """
    cfg.validate()
    results = {}
    for seed in cfg.seeds:
        data = generate(cfg.synth, seed)
        cache: dict = {}
        for arm in cfg.arms:
            log.info("training arm %s seed %d", arm, seed)
            result = run_arm(cfg, arm, seed, data, cache)
            if on_result is not None:
                on_result(result)
            results[(arm, seed)] = evaluate_arm(cfg, result, data)
    rows = []
    for arm in cfg.arms:
        for seed in cfg.seeds:
            rows.extend(results[(arm, seed)])
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(v) for v in astuple(row)])
    return buf.getvalue()


def mean_by(rows: list[MetricsRow], arm: str, mask: str, field_name: str = "weighted_f1") -> float:
    values = [getattr(r, field_name) for r in rows if r.arm == arm and r.modality_mask == mask]
    if not values:
        raise ContractViolation(f"no rows for arm {arm!r} and mask {mask!r}")
    return float(np.mean(values))
