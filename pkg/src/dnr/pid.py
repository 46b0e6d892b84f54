"""Exact two-source partial information decomposition for small discrete
systems, using the Williams-Beer minimum-specific-information redundancy.

All information quantities are in bits; the KL diagnostic is in nats.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from dnr.errors import ContractViolation

MAX_ALPHABET = 64
CLAMP_LIMIT = 1e-9


@dataclass
class JointDist:
    """Dense probability table ``p[y, a, b]``."""

    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.p.ndim != 3:
            raise ContractViolation("joint table must be 3-dimensional (y, a, b)")
        if any(s < 1 or s > MAX_ALPHABET for s in self.p.shape):
            raise ContractViolation(f"alphabet sizes must lie in [1, {MAX_ALPHABET}], got {self.p.shape}")
        if not np.all(np.isfinite(self.p)) or np.any(self.p < 0):
            raise ContractViolation("joint probabilities must be finite and non-negative")
        if abs(self.p.sum() - 1.0) > 1e-12:
            raise ContractViolation(f"joint probabilities sum to {self.p.sum():.15g}, not 1")

    @classmethod
    def from_samples(cls, y, a, b) -> JointDist:
        """Empirical joint of three integer-coded sample sequences."""
        y, a, b = (np.asarray(v, dtype=np.int64) for v in (y, a, b))
        if not (y.shape == a.shape == b.shape) or y.ndim != 1 or y.size == 0:
            raise ContractViolation("samples must be equal-length non-empty 1-d sequences")
        if min(y.min(), a.min(), b.min()) < 0:
            raise ContractViolation("sample codes must be non-negative")
        counts = np.zeros((y.max() + 1, a.max() + 1, b.max() + 1))
        np.add.at(counts, (y, a, b), 1.0)
        return cls(counts / y.size)

    @classmethod
    def from_rows(cls, rows) -> JointDist:
        """Build from ``(y, a, b, p)`` rows; symbols are coded in sorted order."""
        rows = [tuple(r) for r in rows]
        if not rows:
            raise ContractViolation("joint has no rows")
        codes = []
        for col in range(3):
            symbols = sorted({r[col] for r in rows}, key=_symbol_key)
            codes.append({s: i for i, s in enumerate(symbols)})
        p = np.zeros(tuple(len(c) for c in codes))
        for y, a, b, prob in rows:
            p[codes[0][y], codes[1][a], codes[2][b]] += float(prob)
        return cls(p)

    @property
    def p_y(self) -> np.ndarray:
        return self.p.sum(axis=(1, 2))

    def pair(self, source: str) -> np.ndarray:
        """Joint of Y with one source, ``p[y, s]``."""
        if source == "A":
            return self.p.sum(axis=2)
        if source == "B":
            return self.p.sum(axis=1)
        raise ContractViolation(f"unknown source {source!r}")


def _symbol_key(s):
    try:
        return (0, float(s), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(s))


def read_joint_csv(path) -> JointDist:
    """Rows of ``y,a,b,p``; a header line is skipped if present."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows and rows[0][-1].strip().lower() == "p":
        rows = rows[1:]
    parsed = []
    for r in rows:
        if len(r) != 4:
            raise ContractViolation(f"{path}: expected 4 columns y,a,b,p, got {r}")
        parsed.append((r[0].strip(), r[1].strip(), r[2].strip(), float(r[3])))
    return JointDist.from_rows(parsed)


def _mi(pxy: np.ndarray) -> float:
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    mask = pxy > 0
    return float(np.sum(pxy[mask] * np.log2(pxy[mask] / (px @ py)[mask])))


def mutual_info(joint: JointDist, sources) -> float:
    """I(Y; sources) in bits for ``sources`` a non-empty subset of {"A", "B"}."""
    sources = set(sources)
    if sources == {"A"}:
        return _mi(joint.pair("A"))
    if sources == {"B"}:
        return _mi(joint.pair("B"))
    if sources == {"A", "B"}:
        return _mi(joint.p.reshape(joint.p.shape[0], -1))
    raise ContractViolation(f"sources must be a non-empty subset of {{A, B}}, got {sources}")


def specific_info(joint: JointDist, y: int, source: str) -> float:
    """Specific information I(Y=y; S) = sum_s p(s|y) [log p(y|s) - log p(y)]."""
    pys = joint.pair(source)
    py = pys.sum(axis=1)
    if not 0 <= y < len(py) or py[y] <= 0:
        raise ContractViolation(f"outcome y={y} has zero probability")
    ps = pys.sum(axis=0)
    row = pys[y]
    mask = row > 0
    p_s_given_y = row[mask] / py[y]
    p_y_given_s = row[mask] / ps[mask]
    return float(np.sum(p_s_given_y * (np.log2(p_y_given_s) - np.log2(py[y]))))


def imin_redundancy(joint: JointDist) -> float:
    """Expected minimum specific information over the two sources."""
    total = 0.0
    for y, py in enumerate(joint.p_y):
        if py > 0:
            total += py * min(specific_info(joint, y, "A"), specific_info(joint, y, "B"))
    return max(total, 0.0)


@dataclass(frozen=True)
class PIDAtoms:
    u1: float
    u2: float
    r: float
    s: float

    @property
    def total(self) -> float:
        return self.u1 + self.u2 + self.r + self.s

    def as_row(self) -> str:
        return f"{self.u1:.6f},{self.u2:.6f},{self.r:.6f},{self.s:.6f}"


def _clamp(value: float, name: str) -> float:
    if value >= 0:
        return value
    if value < -CLAMP_LIMIT:
        raise ArithmeticError(f"PID atom {name} is {value:.3e}, beyond rounding error")
    return 0.0


def pid_decompose(joint: JointDist) -> PIDAtoms:
    r = imin_redundancy(joint)
    i_a = mutual_info(joint, {"A"})
    i_b = mutual_info(joint, {"B"})
    i_ab = mutual_info(joint, {"A", "B"})
    u1 = i_a - r
    u2 = i_b - r
    s = i_ab - u1 - u2 - r
    return PIDAtoms(_clamp(u1, "u1"), _clamp(u2, "u2"), _clamp(r, "r"), _clamp(s, "s"))


def kl_simplex(p_vec, q_vec) -> float | np.ndarray:
    """KL(softmax(p) || softmax(q)) in nats; row-wise for 2-d input."""
    p = np.asarray(p_vec, dtype=np.float64)
    q = np.asarray(q_vec, dtype=np.float64)
    if p.shape != q.shape or p.shape[-1] < 2:
        raise ContractViolation("kl_simplex needs equal widths of at least 2")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise ContractViolation("kl_simplex inputs must be finite")
    log_p = p - p.max(axis=-1, keepdims=True)
    log_p = log_p - np.log(np.exp(log_p).sum(axis=-1, keepdims=True))
    log_q = q - q.max(axis=-1, keepdims=True)
    log_q = log_q - np.log(np.exp(log_q).sum(axis=-1, keepdims=True))
    kl = np.sum(np.exp(log_p) * (log_p - log_q), axis=-1)
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl
