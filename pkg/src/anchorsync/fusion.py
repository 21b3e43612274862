"""Anchor-based fusion of auxiliary modalities into the text sequence.

Pipeline per sample: align video/audio to the text grid, cross-attend with
text queries to get per-modality fused sequences, pick the most reliable
fused tokens as anchors (first-to-second nearest-neighbour cosine ratio),
let the two anchor sets exchange information through residual cross
attention, re-expand over the full sequence with temporal cross attention,
and merge the two streams with LayerNorm + dropout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoders import Modality, ModalityEmbedding, align
from .errors import InvalidInputError

COSINE_EPS = 1e-12


@dataclass
class FusedEmbedding:
    """Auxiliary modality projected onto the text grid: shape (l_t x d_t)."""

    data: torch.Tensor
    source_modality: Modality

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise InvalidInputError(f"fused embedding must be 2-D, got {tuple(self.data.shape)}")


@dataclass
class AnchorSet:
    """Top-k fused tokens with their source positions and reliability scores.

    ``indices`` are distinct positions into the fused sequence; ``scores``
    are sorted non-increasing.
    """

    vectors: torch.Tensor
    indices: torch.Tensor
    scores: torch.Tensor

    def __post_init__(self) -> None:
        k = self.vectors.shape[0]
        if self.indices.shape[0] != k or self.scores.shape[0] != k:
            raise InvalidInputError("anchor vectors/indices/scores length mismatch")

    @property
    def k(self) -> int:
        return int(self.vectors.shape[0])


class FeedForward(nn.Module):
    """Two-layer position-wise map with ReLU."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


class CrossAttentionBlock(nn.Module):
    """Scaled dot-product cross attention with learnable q/k/v projections.

    ``attend`` computes softmax(Q K^T / sqrt(d_head)) V for a (L_q x d) query
    sequence against a (L_s x d) source; the optional feedforward is applied
    separately by callers that need it (anchor interaction).
    """

    def __init__(self, dim: int, head_count: int = 1, ff_hidden: int | None = None):
        super().__init__()
        if dim % head_count != 0:
            raise InvalidInputError(f"dim {dim} not divisible by head_count {head_count}")
        self.dim = dim
        self.head_count = head_count
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.ff = FeedForward(dim, ff_hidden) if ff_hidden is not None else None

    def attention_weights(
        self, query: torch.Tensor, source: torch.Tensor, source_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Per-head attention rows, shape (heads, L_q, L_s); each row sums to 1."""
        if query.shape[-1] != self.dim or source.shape[-1] != self.dim:
            raise InvalidInputError(
                f"attention expects dim {self.dim}, got query {query.shape[-1]}, source {source.shape[-1]}"
            )
        if source_mask is not None and not bool(source_mask.any()):
            raise InvalidInputError("no attendable keys: source mask is all false")
        h, dh = self.head_count, self.dim // self.head_count
        q = self.q_proj(query).view(-1, h, dh).permute(1, 0, 2)
        k = self.k_proj(source).view(-1, h, dh).permute(1, 0, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if source_mask is not None:
            logits = logits.masked_fill(~source_mask.view(1, 1, -1), float("-inf"))
        return torch.softmax(logits, dim=-1)

    def attend(
        self, query: torch.Tensor, source: torch.Tensor, source_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        h, dh = self.head_count, self.dim // self.head_count
        weights = self.attention_weights(query, source, source_mask)
        v = self.v_proj(source).view(-1, h, dh).permute(1, 0, 2)
        out = weights @ v
        return out.permute(1, 0, 2).reshape(-1, self.dim)


def fuse_with_text(
    aux: ModalityEmbedding, text: ModalityEmbedding, block: CrossAttentionBlock
) -> FusedEmbedding:
    """Cross-attend text queries over an aligned auxiliary modality.

    Text rows are queries; the auxiliary sequence provides keys and values.
    Masked auxiliary positions are unattendable.
    """
    if aux.data.shape != text.data.shape:
        raise InvalidInputError(
            f"fuse_with_text: aux shape {tuple(aux.data.shape)} != text shape {tuple(text.data.shape)}"
        )
    out = block.attend(text.data, aux.data, source_mask=aux.mask)
    return FusedEmbedding(data=out, source_modality=aux.modality)


def _reliability_scores(text: np.ndarray, fused: np.ndarray) -> np.ndarray:
    """Per-position first/second nearest cosine ratio, float64.

    Position i's score ranks text row i against all fused tokens; zero-norm
    rows count as similarity 0, and a 0/0 ratio (tied zero maxima) is 1.
    """
    tn = text / np.maximum(np.linalg.norm(text, axis=1, keepdims=True), COSINE_EPS)
    fn = fused / np.maximum(np.linalg.norm(fused, axis=1, keepdims=True), COSINE_EPS)
    sims = np.sort(tn @ fn.T, axis=1)[:, ::-1]
    first, second = sims[:, 0], sims[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = first / second
    return np.nan_to_num(scores, nan=1.0, posinf=np.inf, neginf=-np.inf)


def select_anchors(text: ModalityEmbedding, fused: FusedEmbedding, k: int) -> AnchorSet:
    """Pick the k fused tokens whose positions score highest on reliability.

    Scores are computed in float64; ties break toward the lower position.
    Padded text positions are excluded from candidacy; if fewer than k valid
    positions remain, all of them are selected.
    """
    l_t = text.length
    if fused.data.shape[0] != l_t or fused.data.shape[1] != text.dim:
        raise InvalidInputError("select_anchors: text and fused shapes differ")
    if l_t < 2:
        raise InvalidInputError("select_anchors: need at least 2 tokens for the second-nearest ratio")
    if not 1 <= k <= l_t:
        raise InvalidInputError(f"select_anchors: k={k} outside [1, {l_t}]")
    scores = _reliability_scores(
        text.data.detach().cpu().numpy().astype(np.float64),
        fused.data.detach().cpu().numpy().astype(np.float64),
    )
    candidates = text.mask.cpu().numpy()
    if not candidates.any():
        raise InvalidInputError("select_anchors: no valid candidate positions")
    masked_scores = np.where(candidates, scores, -np.inf)
    k_eff = min(k, int(candidates.sum()))
    # lexsort: primary key descending score, secondary ascending position
    order = np.lexsort((np.arange(l_t), -masked_scores))[:k_eff]
    idx = torch.as_tensor(order.copy(), dtype=torch.long)
    return AnchorSet(
        vectors=fused.data[idx],
        indices=idx,
        scores=torch.as_tensor(scores[order].copy(), dtype=torch.float64),
    )


def anchor_cross_attention(
    target: AnchorSet, source: AnchorSet, block: CrossAttentionBlock
) -> AnchorSet:
    """Enrich target anchors with source-anchor information (residual add)."""
    if target.k != source.k:
        raise InvalidInputError(f"anchor k mismatch: target {target.k} vs source {source.k}")
    if block.ff is None:
        raise InvalidInputError("anchor_cross_attention requires a block with a feedforward")
    update = block.ff(block.attend(target.vectors, source.vectors))
    return AnchorSet(vectors=target.vectors + update, indices=target.indices, scores=target.scores)


def temporal_cross_attention(
    fused: FusedEmbedding, anchors: AnchorSet, block: CrossAttentionBlock
) -> torch.Tensor:
    """Re-expand anchor information over the full sequence; fused rows query."""
    if anchors.k == 0:
        raise InvalidInputError("temporal_cross_attention: empty anchor set")
    return block.attend(fused.data, anchors.vectors)


def seeded_dropout(
    x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator stream."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise InvalidInputError(f"dropout rate must be in [0, 1), got {p}")
    keep = (torch.rand(x.shape, generator=generator) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def combine(
    e_vm: torch.Tensor,
    e_am: torch.Tensor,
    norm: nn.LayerNorm,
    dropout_rate: float,
    training: bool,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Merge the two temporal streams: Dropout(LayerNorm(e_vm + e_am))."""
    if e_vm.shape != e_am.shape:
        raise InvalidInputError(f"combine: shape mismatch {tuple(e_vm.shape)} vs {tuple(e_am.shape)}")
    return seeded_dropout(norm(e_vm + e_am), dropout_rate, training, generator)


class AnchorFusionModule(nn.Module):
    """Full fusion pipeline producing the mixed sequence from three modalities."""

    def __init__(
        self,
        d_t: int,
        d_v: int,
        d_a: int,
        k: int,
        head_count: int = 1,
        ff_hidden: int | None = None,
        dropout: float = 0.1,
        layer_norm_eps: float = 1e-5,
    ):
        super().__init__()
        if k < 1:
            raise InvalidInputError("anchor count k must be >= 1")
        self.k = k
        self.dropout_rate = dropout
        self.video_proj = nn.Linear(d_v, d_t)
        self.audio_proj = nn.Linear(d_a, d_t)
        ff = ff_hidden if ff_hidden is not None else d_t
        self.fuse_video = CrossAttentionBlock(d_t, head_count)
        self.fuse_audio = CrossAttentionBlock(d_t, head_count)
        self.anchor_audio_to_video = CrossAttentionBlock(d_t, head_count, ff_hidden=ff)
        self.anchor_video_to_audio = CrossAttentionBlock(d_t, head_count, ff_hidden=ff)
        self.temporal_video = CrossAttentionBlock(d_t, head_count)
        self.temporal_audio = CrossAttentionBlock(d_t, head_count)
        self.norm = nn.LayerNorm(d_t, eps=layer_norm_eps)

    def forward(
        self,
        text: ModalityEmbedding,
        video: ModalityEmbedding,
        audio: ModalityEmbedding,
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        video_aligned = align(video, text.length, self.video_proj)
        audio_aligned = align(audio, text.length, self.audio_proj)
        v_fused = fuse_with_text(video_aligned, text, self.fuse_video)
        a_fused = fuse_with_text(audio_aligned, text, self.fuse_audio)
        k = min(self.k, text.length)
        v_anchors = select_anchors(text, v_fused, k)
        a_anchors = select_anchors(text, a_fused, k)
        v_enhanced = anchor_cross_attention(v_anchors, a_anchors, self.anchor_audio_to_video)
        a_enhanced = anchor_cross_attention(a_anchors, v_anchors, self.anchor_video_to_audio)
        e_vm = temporal_cross_attention(v_fused, v_enhanced, self.temporal_video)
        e_am = temporal_cross_attention(a_fused, a_enhanced, self.temporal_audio)
        return combine(e_vm, e_am, self.norm, self.dropout_rate, training, generator)
