"""Synthetic multimodal classification data with planted unique, redundant
and synergistic label bits."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from dnr.errors import ContractViolation
from dnr.rng import RngStream

ALL_MODALITIES = ("a", "t", "v")
SPLITS = ("train", "val", "test")


@dataclass
class SynthSpec:
    """Generator settings.

    ``bits_unique`` and ``feature_width`` accept either one integer for
    every modality or a per-modality mapping.  Synergy pair ``k`` places
    its first bit in modality ``k mod M`` and its second in ``(k + 1) mod M``.
    """

    num_classes: int = 2
    modalities: tuple = ALL_MODALITIES
    bits_unique: int | dict = 1
    bits_redundant: int = 1
    bits_synergy: int = 1
    feature_width: int | dict = 16
    noise_std: float = 0.3
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400

    def __post_init__(self):
        self.modalities = tuple(self.modalities)

    def unique_count(self, m: str) -> int:
        if isinstance(self.bits_unique, dict):
            return int(self.bits_unique.get(m, 0))
        return int(self.bits_unique)

    def width(self, m: str) -> int:
        if isinstance(self.feature_width, dict):
            return int(self.feature_width[m])
        return int(self.feature_width)

    @property
    def widths(self) -> dict[str, int]:
        return {m: self.width(m) for m in self.modalities}

    def synergy_slots(self, k: int) -> tuple[str, str]:
        n = len(self.modalities)
        return self.modalities[k % n], self.modalities[(k + 1) % n]

    @property
    def n_latent(self) -> int:
        return sum(self.unique_count(m) for m in self.modalities) + self.bits_redundant + 2 * self.bits_synergy

    def carried_bits(self, m: str) -> list[int]:
        """Latent columns embedded into modality ``m``."""
        cols = []
        offset = 0
        for other in self.modalities:
            count = self.unique_count(other)
            if other == m:
                cols.extend(range(offset, offset + count))
            offset += count
        cols.extend(range(offset, offset + self.bits_redundant))
        offset += self.bits_redundant
        for k in range(self.bits_synergy):
            first, second = self.synergy_slots(k)
            if first == m:
                cols.append(offset + 2 * k)
            if second == m:
                cols.append(offset + 2 * k + 1)
        return cols

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ContractViolation("synth.num_classes must be >= 2")
        if not self.modalities or any(m not in ALL_MODALITIES for m in self.modalities):
            raise ContractViolation(f"synth.modalities must be a non-empty subset of {ALL_MODALITIES}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ContractViolation("synth.modalities has duplicates")
        if self.bits_synergy and len(self.modalities) < 2:
            raise ContractViolation("synth.bits_synergy needs at least two modalities")
        if min([self.bits_redundant, self.bits_synergy] + [self.unique_count(m) for m in self.modalities]) < 0:
            raise ContractViolation("synth bit counts must be non-negative")
        label_bits = sum(self.unique_count(m) for m in self.modalities) + self.bits_redundant + self.bits_synergy
        if label_bits < math.log2(self.num_classes):
            raise ContractViolation(
                f"synth: {label_bits} label bits cannot cover {self.num_classes} classes"
            )
        for m in self.modalities:
            if self.width(m) < len(self.carried_bits(m)):
                raise ContractViolation(
                    f"synth.feature_width for {m!r} ({self.width(m)}) is below its "
                    f"embedded bit count ({len(self.carried_bits(m))})"
                )
        if self.noise_std < 0:
            raise ContractViolation("synth.noise_std must be non-negative")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ContractViolation("synth split sizes must be positive")


@dataclass
class Split:
    ids: np.ndarray
    labels: np.ndarray
    x: dict[str, np.ndarray]
    latents: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index) -> Split:
        latents = None if self.latents is None else self.latents[index]
        return Split(self.ids[index], self.labels[index], {m: v[index] for m, v in self.x.items()}, latents)


@dataclass
class Dataset:
    spec: SynthSpec
    seed: int
    train: Split
    val: Split
    test: Split
    projections: dict[str, np.ndarray] = field(default_factory=dict)

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise ContractViolation(f"unknown split {name!r}")
        return getattr(self, name)


def bayes_label(latents, spec: SynthSpec) -> np.ndarray | int:
    """Class index from latent bits.

    The label bit string is (unique bits, redundant bits, XOR of each
    synergy pair); bit ``i`` of the string has weight ``2**i``, and the
    integer is reduced modulo the class count.
    """
    lat = np.asarray(latents, dtype=np.int64)
    single = lat.ndim == 1
    lat = np.atleast_2d(lat)
    n_direct = lat.shape[1] - 2 * spec.bits_synergy
    direct = lat[:, :n_direct]
    xors = lat[:, n_direct::2] ^ lat[:, n_direct + 1::2]
    label_bits = np.concatenate([direct, xors], axis=1)
    value = np.zeros(lat.shape[0], dtype=object)
    for i in range(label_bits.shape[1]):
        value = value + label_bits[:, i].astype(object) * (1 << i)
    labels = np.array([int(v) % spec.num_classes for v in value], dtype=np.int64)
    return int(labels[0]) if single else labels


def _orthonormal(rng: RngStream, width: int, cols: int) -> np.ndarray:
    if cols == 0:
        return np.zeros((width, 0))
    q, r = np.linalg.qr(rng.normal((width, cols)))
    return q * np.sign(np.diag(r))


def generate(spec: SynthSpec, seed: int) -> Dataset:
    """Draw a dataset; identical (spec, seed) gives identical arrays."""
    spec.validate()
    root = RngStream(seed).fork("synth")
    n = spec.n_train + spec.n_val + spec.n_test
    latents = root.fork("latents").bits((n, spec.n_latent))
    labels = bayes_label(latents, spec)
    signs = 2.0 * latents - 1.0
    x = {}
    projections = {}
    for m in spec.modalities:
        cols = spec.carried_bits(m)
        proj = _orthonormal(root.fork(f"proj.{m}"), spec.width(m), len(cols))
        projections[m] = proj
        clean = signs[:, cols] @ proj.T
        x[m] = clean + root.fork(f"noise.{m}").normal((n, spec.width(m)), 0.0, spec.noise_std)
    ids = np.arange(n, dtype=np.int64)
    everything = Split(ids, labels, x, latents)
    bounds = np.cumsum([0, spec.n_train, spec.n_val, spec.n_test])
    parts = [everything.take(slice(bounds[i], bounds[i + 1])) for i in range(3)]
    return Dataset(spec, seed, *parts, projections=projections)


def discretize(vectors, bins: int) -> np.ndarray:
    """Project onto the batch's first principal direction and cut into
    equal-frequency bins (occupancies differ by at most one)."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    n = v.shape[0]
    if bins < 2:
        raise ContractViolation("discretize needs bins >= 2")
    if n < bins:
        raise ContractViolation(f"discretize needs at least {bins} vectors, got {n}")
    if np.all(np.ptp(v, axis=0) == 0.0):
        raise ContractViolation("discretize: batch has zero variance")
    centered = v - v.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    if direction[np.argmax(np.abs(direction))] < 0:
        direction = -direction
    proj = centered @ direction
    order = np.argsort(proj, kind="stable")
    codes = np.empty(n, dtype=np.int64)
    codes[order] = (np.arange(n) * bins) // n
    return codes


# -- on-disk format -----------------------------------------------------------


def spec_to_dict(spec: SynthSpec) -> dict:
    d = asdict(spec)
    d["modalities"] = list(spec.modalities)
    return d


def save_dataset(dataset: Dataset, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "spec.toml", "wb") as fh:
        tomli_w.dump({"seed": dataset.seed, "synth": spec_to_dict(dataset.spec)}, fh)
    mods = dataset.spec.modalities
    header = ["sample_id", "label"]
    for m in mods:
        header += [f"{m}_{j}" for j in range(dataset.spec.width(m))]
    for name in SPLITS:
        split = dataset.split(name)
        with open(out / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for i in range(len(split)):
                row = [str(int(split.ids[i])), str(int(split.labels[i]))]
                for m in mods:
                    row += [f"{v:.17g}" for v in split.x[m][i]]
                writer.writerow(row)


def load_dataset(directory) -> Dataset:
    src = Path(directory)
    with open(src / "spec.toml", "rb") as fh:
        doc = tomli.load(fh)
    spec = SynthSpec(**doc["synth"])
    parts = []
    for name in SPLITS:
        with open(src / f"{name}.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        table = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))
        x = {}
        for m in spec.modalities:
            cols = [i for i, h in enumerate(header) if h.startswith(f"{m}_")]
            x[m] = table[:, cols]
        parts.append(Split(table[:, 0].astype(np.int64), table[:, 1].astype(np.int64), x))
    return Dataset(spec, int(doc.get("seed", 0)), *parts)
