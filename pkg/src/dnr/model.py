"""Modality encoders with decomposition heads, the shared predictor, and
the two fusion backbones, plus the flat binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from dnr.errors import ContractViolation
from dnr.rng import RngStream
from dnr.tensor import Tensor, concat, parameter

MODALITIES = ("a", "t", "v")
BACKBONE_KINDS = ("concat-mlp", "attention-lite")


class Module:
    """Anything owning named parameter tensors."""

    def parameters(self) -> list[Tensor]:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise ContractViolation(f"checkpoint is missing parameter {p.name}")
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.shape:
                raise ContractViolation(f"shape mismatch for {p.name}: {value.shape} vs {p.shape}")
            p.data[...] = value

    def fingerprint(self) -> str:
        return parameter_hash(self.parameters())


class Linear(Module):
    def __init__(self, name: str, n_in: int, n_out: int, rng: RngStream, zero: bool = False):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = np.zeros((n_in, n_out)) if zero else rng.uniform((n_in, n_out), -limit, limit)
        self.weight = parameter(w, f"{name}.weight")
        self.bias = parameter(np.zeros(n_out), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class ModalityEncoder(Module):
    """Two-layer tanh MLP whose output splits into (unique, redundant, synergy)."""

    def __init__(self, modality: str, d_in: int, hidden: int, d: int, rng: RngStream,
                 zero_output: bool = False):
        self.modality = modality
        self.d_in = d_in
        self.d = d
        self.hidden = Linear(f"enc.{modality}.hidden", d_in, hidden, rng.fork("hidden"))
        self.out = Linear(f"enc.{modality}.out", hidden, 3 * d, rng.fork("out"), zero=zero_output)

    def trunk(self, x: Tensor) -> Tensor:
        x = Tensor.lift(x)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ContractViolation(
                f"modality {self.modality}: expected input width {self.d_in}, got shape {x.shape}"
            )
        return self.out(self.hidden(x).tanh())

    def parameters(self) -> list[Tensor]:
        return self.hidden.parameters() + self.out.parameters()


def encode_decompose(encoder: ModalityEncoder, x) -> tuple[Tensor, Tensor, Tensor]:
    """Split the encoder output positionally into unique, redundant, synergy."""
    h = encoder.trunk(x)
    d = encoder.d
    return h[:, :d], h[:, d:2 * d], h[:, 2 * d:]


class PredictorHead(Module):
    """Affine map from one stream to class logits, shared by every stream."""

    def __init__(self, d: int, num_classes: int, rng: RngStream):
        self.linear = Linear("head", d, num_classes, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.linear(x)

    def parameters(self) -> list[Tensor]:
        return self.linear.parameters()


Streams = dict[str, tuple[Tensor, Tensor, Tensor]]


def aggregate_logits(reps: Streams, head: PredictorHead) -> Tensor:
    """Sum the head's logits over every stream of every modality."""
    if not reps:
        raise ContractViolation("aggregate_logits needs at least one modality")
    total = None
    for m in reps:
        for stream in reps[m]:
            if stream.shape[-1] != head.linear.weight.shape[0]:
                raise ContractViolation(
                    f"stream width {stream.shape[-1]} does not match head input "
                    f"{head.linear.weight.shape[0]}"
                )
            logits = head(stream)
            total = logits if total is None else total + logits
    return total


class DivideModel(Module):
    """Per-modality encoders plus the shared predictor head."""

    def __init__(self, modalities, widths: dict[str, int], d: int, hidden: int,
                 num_classes: int, rng: RngStream):
        self.modalities = tuple(modalities)
        self.widths = dict(widths)
        self.d = d
        self.hidden = hidden
        self.num_classes = num_classes
        self.encoders = {
            m: ModalityEncoder(m, widths[m], hidden, d, rng.fork(f"enc.{m}"))
            for m in self.modalities
        }
        self.head = PredictorHead(d, num_classes, rng.fork("head"))
        self.frozen = False

    def parameters(self) -> list[Tensor]:
        params = []
        for m in self.modalities:
            params.extend(self.encoders[m].parameters())
        return params + self.head.parameters()

    def decompose(self, x: dict[str, np.ndarray]) -> Streams:
        missing = [m for m in self.modalities if m not in x]
        if missing:
            raise ContractViolation(f"inputs missing modalities {missing}")
        return {m: encode_decompose(self.encoders[m], x[m]) for m in self.modalities}

    def logits(self, reps: Streams) -> Tensor:
        return aggregate_logits(reps, self.head)

    def meta(self) -> dict:
        return {
            "kind": "divide",
            "modalities": list(self.modalities),
            "widths": self.widths,
            "d": self.d,
            "hidden": self.hidden,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> DivideModel:
        return cls(meta["modalities"], meta["widths"], meta["d"], meta["hidden"],
                   meta["num_classes"], RngStream(0))


class Backbone(Module):
    """Fusion model mapping a bundle of per-modality slot vectors to (Z, logits).

    Parameters
    ----------
    kind : {"concat-mlp", "attention-lite"}
    modalities : sequence of str
        Slot order.  Every slot must be present in each bundle; masked
        slots carry zeros.
    slot_width : int
        Width of each modality's slot (``3 * d`` for decomposed streams,
        the raw feature width otherwise).
    fused_width : int
        Width of the fused vector Z.
    """

    def __init__(self, kind: str, modalities, slot_width: int, fused_width: int,
                 hidden: int, num_classes: int, rng: RngStream, zero_output: bool = False):
        if kind not in BACKBONE_KINDS:
            raise ContractViolation(f"unknown backbone kind {kind!r}; choose from {BACKBONE_KINDS}")
        self.kind = kind
        self.modalities = tuple(modalities)
        self.slot_width = slot_width
        self.fused_width = fused_width
        self.hidden_width = hidden
        self.num_classes = num_classes
        n = len(self.modalities)
        if kind == "concat-mlp":
            self.hidden = Linear("bb.hidden", n * slot_width, hidden, rng.fork("hidden"))
            self.out = Linear("bb.out", hidden, fused_width, rng.fork("out"), zero=zero_output)
            self._layers = [self.hidden, self.out]
        else:
            self.trunk = Linear("bb.trunk", slot_width, fused_width, rng.fork("trunk"))
            limit = np.sqrt(6.0 / (fused_width + 1))
            self.query = parameter(rng.fork("query").uniform((fused_width, 1), -limit, limit),
                                   "bb.query")
            self._layers = [self.trunk]
        self.classifier = Linear("bb.classifier", fused_width, num_classes, rng.fork("classifier"))

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self._layers:
            params.extend(layer.parameters())
        if self.kind == "attention-lite":
            params.append(self.query)
        return params + self.classifier.parameters()

    def _slots(self, bundle: dict[str, Tensor]) -> list[Tensor]:
        slots = []
        for m in self.modalities:
            if m not in bundle:
                raise ContractViolation(f"bundle has no slot for modality {m!r}")
            slot = Tensor.lift(bundle[m])
            if slot.ndim != 2 or slot.shape[1] != self.slot_width:
                raise ContractViolation(
                    f"slot {m!r} has shape {slot.shape}, expected (N, {self.slot_width})"
                )
            slots.append(slot)
        return slots

    def fuse(self, bundle: dict[str, Tensor]) -> Tensor:
        slots = self._slots(bundle)
        if self.kind == "concat-mlp":
            return self.out(self.hidden(concat(slots, axis=1)).tanh())
        transformed = [self.trunk(s).tanh() for s in slots]
        scores = concat([t @ self.query for t in transformed], axis=1)
        weights = scores.softmax(axis=1)
        pooled = None
        for i, t in enumerate(transformed):
            term = weights[:, i:i + 1] * t
            pooled = term if pooled is None else pooled + term
        return pooled

    def __call__(self, bundle: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
        z = self.fuse(bundle)
        return z, self.classifier(z)

    def meta(self) -> dict:
        return {
            "kind": "backbone",
            "backbone": self.kind,
            "modalities": list(self.modalities),
            "slot_width": self.slot_width,
            "fused_width": self.fused_width,
            "hidden": self.hidden_width,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> Backbone:
        return cls(meta["backbone"], meta["modalities"], meta["slot_width"], meta["fused_width"],
                   meta["hidden"], meta["num_classes"], RngStream(0))


def fuse_backbone(backbone: Backbone, bundle: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    return backbone(bundle)


def parameter_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update((p.name or "").encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


# -- checkpoint format ------------------------------------------------------
#
# b"DNR1" | u32 version | u64 header length | JSON header | float64 LE payload
# The header holds free-form metadata and a manifest of (name, shape, offset)
# where offset counts scalars from the start of the payload.

MAGIC = b"DNR1"
FORMAT_VERSION = 1


def save_checkpoint(path, module: Module, meta: dict | None = None) -> None:
    params = module.parameters()
    manifest = []
    offset = 0
    for p in params:
        manifest.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        offset += p.size
    header = json.dumps({"meta": meta or {}, "params": manifest}, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractViolation(f"{path}: not a DNR1 checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen])
    payload = np.frombuffer(raw[start + hlen:], dtype="<f8")
    state = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = payload[entry["offset"]:entry["offset"] + n]
        if chunk.size != n:
            raise ContractViolation(f"{path}: truncated payload for {entry['name']}")
        state[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    return header["meta"], state


def load_module(path) -> Module:
    meta, state = read_checkpoint(path)
    kind = meta.get("kind")
    if kind == "divide":
        module = DivideModel.from_meta(meta)
    elif kind == "backbone":
        module = Backbone.from_meta(meta)
    else:
        raise ContractViolation(f"{path}: unknown module kind {kind!r}")
    module.load_state_dict(state)
    return module
