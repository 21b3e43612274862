"""Per-modality feature extraction and sequence/dimension alignment.

Two encoder kinds are supported:

* ``mock`` — deterministic, dependency-free stand-ins for the pretrained
  encoders used on the real datasets. Text tokens map to fixed pseudo-random
  embedding rows (a hashed embedding table); video/audio frames pass through
  a fixed pseudo-random linear projection, so distances in the raw feature
  space survive encoding and downstream layers have real signal to learn
  from.
* ``external`` — adapter for precomputed features: the input is already an
  embedding matrix produced offline by a real encoder, and is validated,
  truncated, and wrapped unchanged.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import InvalidInputError, ValidationError


class Modality(str, Enum):
    TEXT = "text"
    VIDEO = "video"
    AUDIO = "audio"


@dataclass
class ModalityEmbedding:
    """A (length x dim) token sequence for one modality plus validity mask.

    For text produced by a text encoder, position 0 is the CLS summary token.
    ``truncated`` is set when the input exceeded the encoder's max length.
    """

    data: torch.Tensor
    mask: torch.Tensor
    modality: Modality
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise InvalidInputError(
                f"embedding must be a (L x D) matrix with L, D >= 1, got {tuple(self.data.shape)}"
            )
        if self.mask.ndim != 1 or self.mask.shape[0] != self.data.shape[0]:
            raise InvalidInputError(
                f"mask length {tuple(self.mask.shape)} does not match sequence length {self.data.shape[0]}"
            )

    @property
    def length(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


@dataclass
class EncoderSpec:
    """Configuration of one modality encoder."""

    kind: str = "mock"  # "mock" | "external"
    output_dim: int = 32
    max_length: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("mock", "external"):
            raise ValidationError(f"unknown encoder kind {self.kind!r}")
        if self.output_dim < 1 or self.max_length < 1:
            raise ValidationError("output_dim and max_length must be positive")


def _hash_rng(*key: object) -> np.random.Generator:
    """Generator seeded from a stable hash of the key parts."""
    digest = hashlib.sha256("\x1f".join(str(k) for k in key).encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


def _mock_token_row(namespace: str, seed: int, token: object, dim: int) -> np.ndarray:
    return _hash_rng("tok", namespace, seed, token, dim).standard_normal(dim)


def _mock_projection(namespace: str, seed: int, d_in: int, d_out: int) -> np.ndarray:
    w = _hash_rng("proj", namespace, seed, d_in, d_out).standard_normal((d_in, d_out))
    return w / np.sqrt(d_in)


def encode_text(token_ids: Sequence[int], spec: EncoderSpec) -> ModalityEmbedding:
    """Embed a token-id sequence; row 0 is a CLS token prepended by the encoder.

    Mock kind: each token id maps to a fixed pseudo-random row determined by
    (token id, seed), so identical calls are bitwise identical.
    """
    tokens = list(token_ids)
    if len(tokens) == 0:
        raise InvalidInputError("encode_text: empty token sequence")
    if spec.kind == "external":
        raise InvalidInputError(
            "encode_text: external text features must be wrapped with wrap_precomputed()"
        )
    truncated = False
    if len(tokens) + 1 > spec.max_length:
        tokens = tokens[: spec.max_length - 1]
        truncated = True
    rows = [_mock_token_row("text", spec.seed, "cls", spec.output_dim)]
    rows.extend(_mock_token_row("text", spec.seed, int(t), spec.output_dim) for t in tokens)
    data = torch.from_numpy(np.stack(rows).astype(np.float32))
    return ModalityEmbedding(
        data=data,
        mask=torch.ones(data.shape[0], dtype=torch.bool),
        modality=Modality.TEXT,
        truncated=truncated,
    )


def _encode_continuous(
    raw: np.ndarray | torch.Tensor, spec: EncoderSpec, modality: Modality
) -> ModalityEmbedding:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InvalidInputError(f"encode_{modality.value}: input must be a non-empty (L x D) sequence")
    truncated = False
    if arr.shape[0] > spec.max_length:
        arr = arr[: spec.max_length]
        truncated = True
    if spec.kind == "external":
        if arr.shape[1] != spec.output_dim:
            raise InvalidInputError(
                f"encode_{modality.value}: precomputed feature dim {arr.shape[1]} "
                f"!= expected {spec.output_dim}"
            )
        data = arr
    else:
        w = _mock_projection(modality.value, spec.seed, arr.shape[1], spec.output_dim)
        data = arr @ w
    tensor = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))
    return ModalityEmbedding(
        data=tensor,
        mask=torch.ones(tensor.shape[0], dtype=torch.bool),
        modality=modality,
        truncated=truncated,
    )


def encode_video(frames: np.ndarray | torch.Tensor, spec: EncoderSpec) -> ModalityEmbedding:
    """Embed a sequence of per-frame feature vectors."""
    return _encode_continuous(frames, spec, Modality.VIDEO)


def encode_audio(waveform: np.ndarray | torch.Tensor, spec: EncoderSpec) -> ModalityEmbedding:
    """Embed a sequence of audio feature frames."""
    return _encode_continuous(waveform, spec, Modality.AUDIO)


def wrap_precomputed(data: np.ndarray, modality: Modality, spec: EncoderSpec) -> ModalityEmbedding:
    """Wrap an offline-computed embedding matrix for the external encoder kind."""
    external = EncoderSpec(
        kind="external", output_dim=spec.output_dim, max_length=spec.max_length, seed=spec.seed
    )
    return _encode_continuous(data, external, modality)


def pad_to_length(emb: ModalityEmbedding, length: int) -> ModalityEmbedding:
    """Zero-pad (or truncate) to a fixed length for batching; mask tracks validity."""
    if emb.length == length:
        return emb
    if emb.length > length:
        return ModalityEmbedding(
            data=emb.data[:length], mask=emb.mask[:length], modality=emb.modality, truncated=True
        )
    pad = length - emb.length
    data = torch.cat([emb.data, torch.zeros(pad, emb.dim, dtype=emb.data.dtype)])
    mask = torch.cat([emb.mask, torch.zeros(pad, dtype=torch.bool)])
    return ModalityEmbedding(data=data, mask=mask, modality=emb.modality, truncated=emb.truncated)


def align(
    emb: ModalityEmbedding, target_len: int, proj: torch.nn.Linear
) -> ModalityEmbedding:
    """Project to the projection's output dim and resample to ``target_len`` rows.

    Valid rows are compacted in order; a shorter sequence is zero-padded, a
    longer one is subsampled at uniform stride (source row ``floor(i*v/target)``
    of the valid rows). Padding rows are exact zeros and masked out.
    """
    if target_len < 1:
        raise InvalidInputError("align: target_len must be positive")
    if proj.in_features != emb.dim:
        raise InvalidInputError(
            f"align: projection expects dim {proj.in_features}, embedding has {emb.dim}"
        )
    valid_idx = torch.nonzero(emb.mask, as_tuple=False).flatten()
    if valid_idx.numel() == 0:
        raise InvalidInputError("align: embedding has no valid rows")
    projected = proj(emb.data[valid_idx])
    v = valid_idx.numel()
    target_dim = proj.out_features
    if v >= target_len:
        pick = torch.arange(target_len) * v // target_len
        data = projected[pick]
        mask = torch.ones(target_len, dtype=torch.bool)
    else:
        pad = torch.zeros(target_len - v, target_dim, dtype=projected.dtype)
        data = torch.cat([projected, pad])
        mask = torch.cat([torch.ones(v, dtype=torch.bool), torch.zeros(target_len - v, dtype=torch.bool)])
    return ModalityEmbedding(data=data, mask=mask, modality=emb.modality, truncated=emb.truncated)


# --- precomputed-feature file format -------------------------------------
#
# JSON-lines, one record per sample id:
#   {"id": str, "modality": "text"|"video"|"audio",
#    "shape": [L, D], "data": [row-major float32 values]}


@dataclass
class FeatureRecord:
    id: str
    modality: Modality
    array: np.ndarray = field(repr=False)

    def to_json(self) -> str:
        arr = np.asarray(self.array, dtype=np.float32)
        return json.dumps(
            {
                "id": self.id,
                "modality": self.modality.value,
                "shape": list(arr.shape),
                "data": [float(x) for x in arr.reshape(-1)],
            },
            sort_keys=True,
        )


def write_feature_file(path: str | Path, records: Iterable[FeatureRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_feature_file(path: str | Path) -> dict[str, FeatureRecord]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"feature file not found: {path}")
    out: dict[str, FeatureRecord] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                arr = np.asarray(obj["data"], dtype=np.float32).reshape(obj["shape"])
                rec = FeatureRecord(id=obj["id"], modality=Modality(obj["modality"]), array=arr)
            except (KeyError, ValueError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed feature record: {exc}") from exc
            out[rec.id] = rec
    return out
