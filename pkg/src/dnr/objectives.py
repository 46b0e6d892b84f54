"""Loss functions for both training phases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dnr.errors import ContractViolation, NumericFault
from dnr.tensor import Tensor, primitive

VAR_FLOOR = 1e-12


@dataclass
class ObjectiveConfig:
    """Loss weights and augmentation settings.

    ``lambda_uncor`` and ``lambda_corr`` weight the Divide regularizers;
    ``lambda1``/``lambda2`` weight the two Refine contrastive terms;
    ``sigma`` scales redundancy noise relative to each dimension's batch
    standard deviation and ``K`` is the number of augmented views.
    """

    lambda_uncor: float = 1.0
    lambda_corr: float = 0.5
    alpha: float = 0.5
    lambda1: float = 0.1
    lambda2: float = 0.1
    tau: float = 0.5
    sigma: float = 0.1
    K: int = 2

    def validate(self) -> None:
        checks = [
            ("lambda_uncor", 0.0 <= self.lambda_uncor <= 1.0, "must lie in [0, 1]"),
            ("lambda_corr", 0.0 <= self.lambda_corr <= 1.0, "must lie in [0, 1]"),
            ("alpha", self.alpha >= 0.0, "must be non-negative"),
            ("lambda1", self.lambda1 >= 0.0, "must be non-negative"),
            ("lambda2", self.lambda2 >= 0.0, "must be non-negative"),
            ("tau", self.tau > 0.0, "must be positive"),
            ("sigma", self.sigma >= 0.0, "must be non-negative"),
            ("K", isinstance(self.K, int) and self.K >= 2, "must be an integer >= 2"),
        ]
        for name, ok, constraint in checks:
            if not ok:
                raise ContractViolation(f"objective.{name} {constraint} (got {getattr(self, name)!r})")


def pearson_corr(a: Tensor, b: Tensor) -> Tensor:
    """Per-dimension Pearson correlation over the batch, averaged over dimensions.

    Dimensions where either input has variance below 1e-12 count as zero.
    Recorded as one tape node with a closed-form gradient.
    """
    a, b = Tensor.lift(a), Tensor.lift(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ContractViolation(f"pearson_corr needs equal [N, d] shapes, got {a.shape} and {b.shape}")
    n, d = a.shape
    if n < 2:
        raise ContractViolation("pearson_corr needs a batch of at least 2")
    ac = a.data - a.data.mean(axis=0)
    bc = b.data - b.data.mean(axis=0)
    var_a = (ac * ac).mean(axis=0)
    var_b = (bc * bc).mean(axis=0)
    live = (var_a >= VAR_FLOOR) & (var_b >= VAR_FLOOR)
    # dead dimensions get unit denominators and are masked out afterwards
    va = np.where(live, var_a, 1.0)
    vb = np.where(live, var_b, 1.0)
    denom = np.sqrt(va * vb)
    rho = np.where(live, (ac * bc).mean(axis=0) / denom, 0.0)

    def vjp(g):
        scale = float(g) / (n * d) * live
        # centering terms vanish because centered columns sum to zero
        grad_a = (bc / denom - rho * ac / va) * scale
        grad_b = (ac / denom - rho * bc / vb) * scale
        return grad_a, grad_b

    return primitive(rho.mean(), (a, b), vjp, "pearson")


def loss_uncor(reps) -> Tensor:
    """Sum over modalities of |corr(unique, redundant)|."""
    total = None
    for m in reps:
        u, r, _ = reps[m]
        term = pearson_corr(u, r).abs()
        total = term if total is None else total + term
    if total is None:
        raise ContractViolation("loss_uncor needs at least one modality")
    return total


def loss_corr(reps, alpha: float) -> Tensor:
    """Negative cross-modal redundancy/synergy alignment plus synergy-unique coupling.

    Pairs of distinct modalities are taken in both orders.
    """
    mods = list(reps)
    if len(mods) < 2:
        raise ContractViolation("loss_corr needs at least two modalities")
    total = Tensor(0.0)
    for m in mods:
        for s in mods:
            if m == s:
                continue
            total = total - pearson_corr(reps[m][1], reps[s][1])
            total = total - pearson_corr(reps[m][2], reps[s][2])
    for m in mods:
        u, _, syn = reps[m]
        total = total - alpha * pearson_corr(syn, u)
    return total


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood under the row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractViolation(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractViolation(f"labels must lie in [0, {c})")
    return -(logits.log_softmax(axis=1) * _one_hot(labels, c)).sum() * (1.0 / n)


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def infonce(a: Tensor, b: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE with cosine similarity over in-batch negatives.

    Row i of ``a`` and row i of ``b`` are the positive pair.  The similarity
    matrix is built elementwise so swapping the arguments yields its exact
    transpose, which makes the loss bitwise symmetric.  Recorded as one tape
    node with a closed-form gradient.
    """
    a, b = Tensor.lift(a), Tensor.lift(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ContractViolation(f"infonce needs equal [N, d] shapes, got {a.shape} and {b.shape}")
    n, d = a.shape
    if n < 2:
        raise ContractViolation("infonce needs a batch of at least 2")
    if tau <= 0:
        raise ContractViolation("tau must be positive")
    norm_a = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    norm_b = np.sqrt((b.data * b.data).sum(axis=1, keepdims=True))
    if np.any(norm_a == 0.0) or np.any(norm_b == 0.0):
        raise NumericFault("infonce: zero row has no cosine similarity")
    an, bn = a.data / norm_a, b.data / norm_b
    sim = (an[:, None, :] * bn[None, :, :]).sum(axis=2) * (1.0 / tau)
    rows, cols = _log_softmax_rows(sim), _log_softmax_rows(sim.T)
    idx = np.arange(n)
    value = (-rows[idx, idx].mean() + -cols[idx, idx].mean()) * 0.5

    def vjp(g):
        eye = np.eye(n)
        # d loss / d sim from both directions of the softmax
        g_sim = (np.exp(rows) - eye + (np.exp(cols) - eye).T) * (0.5 * float(g) / n)
        g_an = g_sim @ bn / tau
        g_bn = g_sim.T @ an / tau
        grad_a = (g_an - an * (an * g_an).sum(axis=1, keepdims=True)) / norm_a
        grad_b = (g_bn - bn * (bn * g_bn).sum(axis=1, keepdims=True)) / norm_b
        return grad_a, grad_b

    return primitive(value, (a, b), vjp, "infonce")


def loss_aug_intra(z_aug, tau: float) -> Tensor:
    """InfoNCE summed over ordered pairs of distinct augmented views."""
    z_aug = list(z_aug)
    if len(z_aug) < 2:
        raise ContractViolation("loss_aug_intra needs K >= 2 views")
    shapes = {z.shape for z in z_aug}
    if len(shapes) != 1:
        raise ContractViolation(f"augmented views disagree in shape: {shapes}")
    total = None
    for k in range(len(z_aug)):
        for j in range(k + 1, len(z_aug)):
            term = infonce(z_aug[k], z_aug[j], tau)
            total = term if total is None else total + term
    # infonce is symmetric, so (k, j) and (j, k) contribute equally
    return total * 2.0


def loss_aug_mask(z_aug, z_masked, tau: float) -> Tensor:
    """InfoNCE between every augmented view and every single-modality fusion."""
    z_aug = list(z_aug)
    z_masked = list(z_masked.values()) if isinstance(z_masked, dict) else list(z_masked)
    if not z_masked:
        raise ContractViolation("loss_aug_mask needs at least one masked fusion")
    if not z_aug:
        raise ContractViolation("loss_aug_mask needs at least one augmented view")
    total = None
    for zm in z_masked:
        for za in z_aug:
            if za.shape != zm.shape:
                raise ContractViolation(
                    f"augmented fusion {za.shape} and masked fusion {zm.shape} differ in shape"
                )
            term = infonce(za, zm, tau)
            total = term if total is None else total + term
    return total


def _finite(*values) -> None:
    for v in values:
        x = v.item() if isinstance(v, Tensor) else float(v)
        if not np.isfinite(x):
            raise NumericFault("objective component is not finite")


def divide_objective(task, uncor, corr, cfg: ObjectiveConfig):
    _finite(task, uncor, corr)
    return task + cfg.lambda_uncor * uncor + cfg.lambda_corr * corr


def refine_objective(task, aug_intra, aug_mask, cfg: ObjectiveConfig):
    _finite(task, aug_intra, aug_mask)
    return task + cfg.lambda1 * aug_intra + cfg.lambda2 * aug_mask
