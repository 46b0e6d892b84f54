"""Two-phase training: Divide (decomposition) then Refine (backbone
training on frozen streams with redundancy-only augmentation)."""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from dnr.config import ExperimentConfig
from dnr.errors import ContractViolation, NumericFault
from dnr.metrics import accuracy, weighted_f1
from dnr.model import Backbone, DivideModel, parameter_hash
from dnr.objectives import (
    cross_entropy,
    divide_objective,
    loss_aug_intra,
    loss_aug_mask,
    loss_corr,
    loss_uncor,
    refine_objective,
)
from dnr.optim import AdamW
from dnr.rng import RngStream
from dnr.synth import Dataset, Split
from dnr.tensor import Tensor, backward, no_tape

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "epoch", "task_loss", "uncor_loss", "corr_loss", "aug_intra", "aug_mask",
    "total", "train_acc", "val_acc", "val_wf1",
)


class FrozenParameterMutation(RuntimeError):
    """Phase-I parameters changed while they were supposed to be frozen."""


@dataclass
class PhaseState:
    phase: str
    frozen_manifest: frozenset = frozenset()
    epoch: int = 0
    best_metric: float = -np.inf


@dataclass
class BundleSet:
    """Full, per-modality masked, and redundancy-augmented bundles of a batch."""

    full: dict[str, np.ndarray]
    masked: dict[str, dict[str, np.ndarray]]
    augmented: list[dict[str, np.ndarray]]

    def __len__(self) -> int:
        return 1 + len(self.masked) + len(self.augmented)


@dataclass
class TrainResult:
    module: object
    log: list[dict] = field(default_factory=list)
    state: PhaseState | None = None
    step_losses: list[float] = field(default_factory=list)
    optimizer: AdamW | None = None


def _batches(n: int, batch_size: int, rng: RngStream):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def _check_finite(value: float) -> None:
    if not np.isfinite(value):
        raise NumericFault("non-finite loss")


@contextmanager
def _coordinates(phase: str, epoch: int, batch: int):
    """Re-raise numeric faults tagged with where training stopped."""
    try:
        yield
    except NumericFault as exc:
        raise NumericFault(f"{phase}: {exc} at epoch {epoch}, batch {batch}") from exc


class _EarlyStopper:
    """Tracks the best validation score; ties count as improvements so a
    saturated metric keeps the most recent parameters."""

    def __init__(self, patience: int, state: PhaseState):
        self.patience = patience
        self.state = state
        self.snapshot = None
        self.stale = 0

    def update(self, score: float, module) -> bool:
        if score >= self.state.best_metric:
            self.state.best_metric = score
            self.snapshot = module.state_dict()
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience

    def restore(self, module) -> None:
        if self.snapshot is not None:
            module.load_state_dict(self.snapshot)


# -- Divide -------------------------------------------------------------------


def build_divide_model(cfg: ExperimentConfig, seed: int) -> DivideModel:
    spec = cfg.synth
    return DivideModel(spec.modalities, spec.widths, cfg.model.d, cfg.model.hidden,
                       spec.num_classes, RngStream(seed).fork("divide").fork("init"))


def divide_predict(model: DivideModel, split: Split) -> tuple[np.ndarray, np.ndarray]:
    with no_tape():
        logits = model.logits(model.decompose(split.x)).data
    return np.argmax(logits, axis=1), logits


def train_divide(cfg: ExperimentConfig, data: Dataset, seed: int) -> TrainResult:
    """Phase I: fit encoders and the shared head under the Divide objective."""
    if len(data.train) == 0:
        raise ContractViolation("train_divide needs a non-empty training split")
    sched, obj = cfg.schedule, cfg.objective
    rng = RngStream(seed).fork("divide")
    model = build_divide_model(cfg, seed)
    params = model.parameters()
    opt = AdamW(params, lr=sched.lr, weight_decay=sched.weight_decay)
    state = PhaseState("divide")
    stopper = _EarlyStopper(sched.patience, state)
    multi = len(model.modalities) >= 2
    train = data.train
    rows = []
    for epoch in range(1, sched.divide_epochs + 1):
        state.epoch = epoch
        sums = np.zeros(4)
        seen = 0
        for b, idx in enumerate(_batches(len(train), sched.batch_size, rng.fork(f"shuffle.{epoch}"))):
            x = {m: train.x[m][idx] for m in model.modalities}
            reps = model.decompose(x)
            task = cross_entropy(model.logits(reps), train.labels[idx])
            uncor = loss_uncor(reps)
            corr = loss_corr(reps, obj.alpha) if multi else Tensor(0.0)
            with _coordinates("divide", epoch, b):
                total = divide_objective(task, uncor, corr, obj)
                _check_finite(total.item())
            opt.step(backward(total, params))
            n = len(idx)
            sums += n * np.array([task.item(), uncor.item(), corr.item(), total.item()])
            seen += n
        train_acc = accuracy(divide_predict(model, train)[0], train.labels)
        val_pred = divide_predict(model, data.val)[0]
        val_wf1 = weighted_f1(val_pred, data.val.labels, data.spec.num_classes)
        means = sums / seen
        rows.append({
            "epoch": epoch, "task_loss": means[0], "uncor_loss": means[1], "corr_loss": means[2],
            "aug_intra": None, "aug_mask": None, "total": means[3], "train_acc": train_acc,
            "val_acc": accuracy(val_pred, data.val.labels), "val_wf1": val_wf1,
        })
        log.debug("divide epoch %d total=%.4f val_wf1=%.4f", epoch, means[3], val_wf1)
        if stopper.update(val_wf1, model):
            break
    stopper.restore(model)
    return TrainResult(model, rows, state, optimizer=opt)


def freeze(model: DivideModel) -> DivideModel:
    """Mark every Phase-I parameter as non-trainable.  Idempotent."""
    for p in model.parameters():
        p.tracked = False
    model.frozen = True
    return model


# -- bundles ----------------------------------------------------------------


def augment_redundancy(r: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    """Add noise scaled by sigma times each dimension's batch standard deviation."""
    r = np.asarray(r, dtype=np.float64)
    if sigma < 0:
        raise ContractViolation("sigma must be non-negative")
    if sigma == 0:
        return r.copy()
    scale = sigma * r.std(axis=0)
    return r + rng.normal(r.shape) * scale


def _masked(full: dict[str, np.ndarray], keep) -> dict[str, np.ndarray]:
    return {m: (v if m in keep else np.zeros_like(v)) for m, v in full.items()}


def build_bundles(reps: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]], K: int,
                  sigma: float, rng: RngStream) -> BundleSet:
    """Full, masked and K augmented bundles from frozen (u, r, s) streams.

    Only the redundancy slice of the augmented bundles is perturbed; every
    view and modality draws fresh noise.
    """
    if K < 1:
        raise ContractViolation("build_bundles needs K >= 1")
    full = {m: np.concatenate(reps[m], axis=1) for m in reps}
    masked = {m: _masked(full, {m}) for m in reps}
    augmented = []
    for k in range(K):
        view_rng = rng.fork(f"view.{k}")
        view = {}
        for m, (u, r, s) in reps.items():
            view[m] = np.concatenate([u, augment_redundancy(r, sigma, view_rng.fork(m)), s], axis=1)
        augmented.append(view)
    return BundleSet(full, masked, augmented)


def build_raw_bundles(x: dict[str, np.ndarray], K: int, sigma: float, rng: RngStream) -> BundleSet:
    """Bundles over raw features, perturbing the whole input vector."""
    if K < 1:
        raise ContractViolation("build_raw_bundles needs K >= 1")
    full = {m: np.asarray(v, dtype=np.float64) for m, v in x.items()}
    masked = {m: _masked(full, {m}) for m in full}
    augmented = []
    for k in range(K):
        view_rng = rng.fork(f"view.{k}")
        augmented.append({m: augment_redundancy(v, sigma, view_rng.fork(m)) for m, v in full.items()})
    return BundleSet(full, masked, augmented)


# -- Refine -----------------------------------------------------------------


def frozen_streams(model: DivideModel, x: dict[str, np.ndarray]) -> dict[str, tuple]:
    with no_tape():
        reps = model.decompose(x)
    return {m: tuple(t.data for t in reps[m]) for m in reps}


def build_backbone(cfg: ExperimentConfig, seed: int, slot_width: int, label: str) -> Backbone:
    spec = cfg.synth
    return Backbone(cfg.model.backbone, spec.modalities, slot_width, cfg.model.fused_width,
                    cfg.model.backbone_hidden, spec.num_classes,
                    RngStream(seed).fork(label).fork("init"))


class _Features:
    """Per-sample inputs to the backbone: frozen streams or raw features."""

    def __init__(self, model: DivideModel | None, split: Split):
        self.model = model
        if model is None:
            self.raw = {m: v for m, v in split.x.items()}
            self.streams = None
        else:
            self.streams = frozen_streams(model, split.x)
            self.raw = None

    def full(self) -> dict[str, np.ndarray]:
        if self.streams is None:
            return self.raw
        return {m: np.concatenate(s, axis=1) for m, s in self.streams.items()}

    def bundles(self, idx, K: int, sigma: float, rng: RngStream) -> BundleSet:
        if self.streams is None:
            return build_raw_bundles({m: v[idx] for m, v in self.raw.items()}, K, sigma, rng)
        reps = {m: tuple(t[idx] for t in s) for m, s in self.streams.items()}
        return build_bundles(reps, K, sigma, rng)


def predict(model: DivideModel | None, backbone: Backbone, x: dict[str, np.ndarray],
            modality_mask) -> tuple[np.ndarray, np.ndarray]:
    """Labels and logits with masked-out modalities fed as zero slots."""
    keep = set(modality_mask)
    if not keep:
        raise ContractViolation("modality mask must be non-empty")
    if not keep <= set(backbone.modalities):
        raise ContractViolation(f"mask {''.join(sorted(keep))} names untrained modalities")
    if model is None:
        full = {m: np.asarray(x[m], dtype=np.float64) for m in backbone.modalities}
    else:
        full = {m: np.concatenate(s, axis=1) for m, s in frozen_streams(model, x).items()}
    with no_tape():
        _, logits = backbone(_masked(full, keep))
    return np.argmax(logits.data, axis=1), logits.data


def evaluate(model, backbone, split: Split, modality_mask, num_classes: int) -> tuple[float, float]:
    preds, _ = predict(model, backbone, split.x, modality_mask)
    return accuracy(preds, split.labels), weighted_f1(preds, split.labels, num_classes)


def train_refine(cfg: ExperimentConfig, model: DivideModel | None, backbone: Backbone,
                 data: Dataset, seed: int, contrastive: bool = True) -> TrainResult:
    """Phase II: train only the backbone on frozen streams.

    ``model=None`` trains on raw features instead, with the augmentation
    applied to the whole input vector.  ``contrastive=False`` drops the
    two InfoNCE terms and the augmentation, leaving plain supervised
    training on the same inputs.
    """
    sched, obj = cfg.schedule, cfg.objective
    if model is not None and not model.frozen:
        raise ContractViolation("train_refine needs a frozen Divide model")
    frozen_names = frozenset(p.name for p in model.parameters()) if model is not None else frozenset()
    frozen_hash = model.fingerprint() if model is not None else None
    params = backbone.parameters()
    if any(p.name in frozen_names for p in params):
        raise FrozenParameterMutation("backbone shares parameters with the frozen model")
    opt = AdamW(params, lr=sched.lr, weight_decay=sched.weight_decay)
    state = PhaseState("refine", frozen_names)
    stopper = _EarlyStopper(sched.patience, state)
    lam1, lam2 = (obj.lambda1, obj.lambda2) if contrastive else (0.0, 0.0)
    use_views = lam1 > 0 or lam2 > 0
    sigma = obj.sigma if contrastive else 0.0
    rng = RngStream(seed).fork("refine")
    train = data.train
    feats = _Features(model, train)
    full_inputs = feats.full()
    rows = []
    steps = []
    for epoch in range(1, sched.refine_epochs + 1):
        state.epoch = epoch
        sums = np.zeros(4)
        seen = 0
        noise_rng = rng.fork(f"noise.{epoch}")
        for b, idx in enumerate(_batches(len(train), sched.batch_size, rng.fork(f"shuffle.{epoch}"))):
            labels = train.labels[idx]
            if use_views:
                bundles = feats.bundles(idx, obj.K, sigma, noise_rng.fork(f"batch.{b}"))
                full = bundles.full
            else:
                full = {m: v[idx] for m, v in full_inputs.items()}
            _, logits = backbone(full)
            task = cross_entropy(logits, labels)
            intra = mask = Tensor(0.0)
            if use_views:
                z_aug = [backbone.fuse(view) for view in bundles.augmented]
                z_masked = {m: backbone.fuse(bm) for m, bm in bundles.masked.items()}
                if len(z_aug) >= 2:
                    intra = loss_aug_intra(z_aug, obj.tau)
                mask = loss_aug_mask(z_aug, z_masked, obj.tau)
            with _coordinates("refine", epoch, b):
                total = refine_objective(task, intra, mask, replace(obj, lambda1=lam1, lambda2=lam2))
                _check_finite(total.item())
            steps.append(total.item())
            opt.step(backward(total, params))
            n = len(idx)
            sums += n * np.array([task.item(), intra.item(), mask.item(), total.item()])
            seen += n
        if model is not None and model.fingerprint() != frozen_hash:
            raise FrozenParameterMutation(f"Phase-I parameters changed during refine epoch {epoch}")
        train_acc = evaluate(model, backbone, train, backbone.modalities, data.spec.num_classes)[0]
        val_acc, val_wf1 = evaluate(model, backbone, data.val, backbone.modalities, data.spec.num_classes)
        means = sums / seen
        rows.append({
            "epoch": epoch, "task_loss": means[0], "uncor_loss": None, "corr_loss": None,
            "aug_intra": means[1] if use_views else None, "aug_mask": means[2] if use_views else None,
            "total": means[3], "train_acc": train_acc, "val_acc": val_acc, "val_wf1": val_wf1,
        })
        if stopper.update(val_wf1, backbone):
            break
    stopper.restore(backbone)
    return TrainResult(backbone, rows, state, steps, opt)


def train_supervised(cfg: ExperimentConfig, model: DivideModel | None, backbone: Backbone,
                     data: Dataset, seed: int) -> list[float]:
    """Plain cross-entropy training of the backbone; returns per-step losses.

    Shares the shuffling stream with :func:`train_refine` so the two can be
    compared step for step.  No early stopping.
    """
    sched = cfg.schedule
    params = backbone.parameters()
    opt = AdamW(params, lr=sched.lr, weight_decay=sched.weight_decay)
    rng = RngStream(seed).fork("refine")
    train = data.train
    inputs = _Features(model, train).full()
    losses = []
    for epoch in range(1, sched.refine_epochs + 1):
        for idx in _batches(len(train), sched.batch_size, rng.fork(f"shuffle.{epoch}")):
            _, logits = backbone({m: v[idx] for m, v in inputs.items()})
            loss = cross_entropy(logits, train.labels[idx])
            losses.append(loss.item())
            opt.step(backward(loss, params))
    return losses
