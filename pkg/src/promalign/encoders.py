"""Small transformer encoders for text, image patches and multimodal fusion.

All encoders are batched. Text sequences of different lengths are padded on
the right; the fusion encoder lays each sample out as
``[CLS, t_1..t_N, v_1..v_K]`` followed by padding, so the fused position of
patch ``k`` (1-based) is always ``N + k`` for that sample's own ``N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pad_sequence

from .errors import ConfigError, InputError

NUM_MARKER_TOKENS = 4


@dataclass
class EncoderConfig:
    vocab_size: int = 1000
    max_text_len: int = 80
    num_patches: int = 16
    patch_feature_dim: int = 48
    hidden_dim: int = 32
    visual_hidden_dim: int = 32
    patch_proj_dim: int = 16
    joint_dim: int = 16
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    temperature: float = 0.07
    seed: int = 0

    def __post_init__(self):
        counts = (
            "vocab_size", "max_text_len", "num_patches", "patch_feature_dim",
            "hidden_dim", "visual_hidden_dim", "patch_proj_dim", "joint_dim",
            "num_layers", "num_heads", "mlp_ratio",
        )
        for name in counts:
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"encoder.{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("encoder.hidden_dim must be divisible by encoder.num_heads")
        if self.visual_hidden_dim % self.num_heads:
            raise ConfigError("encoder.visual_hidden_dim must be divisible by encoder.num_heads")
        if not self.temperature > 0:
            raise ConfigError(f"encoder.temperature must be > 0, got {self.temperature!r}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        """(rows, cols) of the patch grid; rows is the largest divisor of K not above sqrt(K)."""
        k = self.num_patches
        rows = max(r for r in range(1, math.isqrt(k) + 1) if k % r == 0)
        return rows, k // rows


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Seeded symmetric-uniform init, bound 1/sqrt(fan_in); biases zero, norms identity."""
    for name, param in module.named_parameters():
        owner = name.split(".")[-2] if "." in name else ""
        with torch.no_grad():
            if owner.startswith("norm") and name.endswith("weight"):
                param.fill_(1.0)
            elif param.dim() == 1:
                param.zero_()
            else:
                bound = 1.0 / math.sqrt(param.shape[-1])
                param.copy_(torch.rand(param.shape, generator=generator) * 2 * bound - bound)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_qkv = nn.Linear(dim, 3 * dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.to_qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        dots = (q @ k.transpose(-1, -2)) * self.scale
        if mask is not None:
            dots = dots.masked_fill(~mask[:, None, None, :], float("-inf"))
        out = dots.softmax(dim=-1) @ v
        return self.to_out(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


class Transformer(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, mask=None):
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x)


@dataclass
class TextEmbeddings:
    embeddings: torch.Tensor  # (B, N_max + 1, d), position 0 is the summary
    mask: torch.Tensor  # (B, N_max + 1) bool
    lengths: list[int]  # token counts N per sample

    @property
    def summary(self) -> torch.Tensor:
        return self.embeddings[:, 0]


@dataclass
class VisualEmbeddings:
    embeddings: torch.Tensor  # (B, K + 1, d_v), position 0 is the summary
    patch_tokens: torch.Tensor  # (B, K, d_m), projected patches before the transformer

    @property
    def summary(self) -> torch.Tensor:
        return self.embeddings[:, 0]


@dataclass
class FusedEmbeddings:
    embeddings: torch.Tensor  # (B, N_max + K + 1, d)
    mask: torch.Tensor
    lengths: list[int]
    num_patches: int

    @property
    def summary(self) -> torch.Tensor:
        return self.embeddings[:, 0]

    def patch_position(self, sample: int, k: int) -> int:
        """Fused index of 1-based patch ``k`` in ``sample``."""
        if not 1 <= k <= self.num_patches:
            raise InputError(f"patch index {k} outside 1..{self.num_patches}")
        return self.lengths[sample] + k

    def token_position(self, sample: int, j: int) -> int:
        """Fused index of 0-based token ``j`` in ``sample``."""
        if not 0 <= j < self.lengths[sample]:
            raise IndexError(f"token index {j} outside 0..{self.lengths[sample] - 1}")
        return j + 1

    def sample(self, i: int) -> torch.Tensor:
        """Unpadded (N + K + 1, d) fused sequence of sample ``i``."""
        return self.embeddings[i, : self.lengths[i] + self.num_patches + 1]


def pad_token_batch(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = [len(s) for s in seqs]
    ids = torch.zeros(len(seqs), max(lengths), dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    mask = torch.arange(ids.shape[1])[None, :] < torch.tensor(lengths)[:, None]
    return ids, mask


class TextEncoder(nn.Module):
    """Token + learned position embeddings, a prepended summary token, transformer.

    Ids ``vocab_size .. vocab_size + 3`` address the entity-marker table, which
    is a separate parameter so pre-training never touches it.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.token_embed = nn.Embedding(config.vocab_size, d)
        self.marker_embed = nn.Embedding(NUM_MARKER_TOKENS, d)
        self.cls = nn.Parameter(torch.zeros(1, d))
        self.pos_embed = nn.Parameter(torch.zeros(config.max_text_len + 1, d))
        self.transformer = Transformer(d, config.num_layers, config.num_heads, config.mlp_ratio)

    def check_tokens(self, seqs: Sequence[Sequence[int]]) -> None:
        limit = self.config.vocab_size + NUM_MARKER_TOKENS
        for i, seq in enumerate(seqs):
            if len(seq) == 0:
                raise InputError(f"sample {i}: empty token sequence")
            if len(seq) > self.config.max_text_len:
                raise InputError(
                    f"sample {i}: {len(seq)} tokens exceeds max_text_len={self.config.max_text_len}; "
                    "truncate in the reader"
                )
            for j, t in enumerate(seq):
                if not 0 <= int(t) < limit:
                    raise InputError(f"sample {i}: token id {t} at position {j} outside [0, {limit})")

    def forward(self, seqs: Sequence[Sequence[int]]) -> TextEmbeddings:
        self.check_tokens(seqs)
        ids, mask = pad_token_batch(seqs)
        vocab = self.config.vocab_size
        is_marker = ids >= vocab
        x = torch.where(
            is_marker[..., None],
            self.marker_embed((ids - vocab).clamp(min=0, max=NUM_MARKER_TOKENS - 1)),
            self.token_embed(ids.clamp(max=vocab - 1)),
        )
        b, n = ids.shape
        x = torch.cat([self.cls.expand(b, 1, -1), x], dim=1) + self.pos_embed[: n + 1]
        mask = torch.cat([torch.ones(b, 1, dtype=torch.bool), mask], dim=1)
        return TextEmbeddings(self.transformer(x, mask), mask, [len(s) for s in seqs])


class ImageEncoder(nn.Module):
    """Patch projection to d_m, then a ViT-style encoder of width d_v."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        dv = config.visual_hidden_dim
        self.patch_proj = nn.Linear(config.patch_feature_dim, config.patch_proj_dim)
        self.embed = nn.Linear(config.patch_proj_dim, dv)
        self.cls = nn.Parameter(torch.zeros(1, dv))
        self.pos_embed = nn.Parameter(torch.zeros(config.num_patches + 1, dv))
        self.transformer = Transformer(dv, config.num_layers, config.num_heads, config.mlp_ratio)

    def forward(self, patches: torch.Tensor) -> VisualEmbeddings:
        if patches.dim() == 2:
            patches = patches[None]
        k, f = self.config.num_patches, self.config.patch_feature_dim
        if patches.shape[1:] != (k, f):
            raise InputError(f"expected patch grid of shape ({k}, {f}), got {tuple(patches.shape[1:])}")
        if not torch.isfinite(patches).all():
            raise InputError("patch features contain non-finite values")
        patches = patches.to(self.patch_proj.weight.dtype)
        m = self.patch_proj(patches)
        x = self.embed(m)
        x = torch.cat([self.cls.expand(x.shape[0], 1, -1), x], dim=1) + self.pos_embed
        return VisualEmbeddings(self.transformer(x), m)


class FusionEncoder(nn.Module):
    """Concatenates text (with its summary) and adapted visual patch embeddings.

    The visual summary is dropped at the input, so the output has N + K + 1
    positions and the text summary slot becomes the fused summary.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.adapter = nn.Linear(config.visual_hidden_dim, d)
        self.modality_embed = nn.Parameter(torch.zeros(2, d))
        self.transformer = Transformer(d, config.num_layers, config.num_heads, config.mlp_ratio)

    def forward(self, text: TextEmbeddings, visual: VisualEmbeddings) -> FusedEmbeddings:
        vis = self.adapter(visual.embeddings[:, 1:]) + self.modality_embed[1]
        if vis.shape[-1] != text.embeddings.shape[-1]:
            raise RuntimeError("visual adapter output width differs from text width")
        txt = text.embeddings + self.modality_embed[0]
        k = vis.shape[1]
        seqs = [torch.cat([txt[i, : n + 1], vis[i]]) for i, n in enumerate(text.lengths)]
        x = pad_sequence(seqs, batch_first=True)
        lens = torch.tensor([n + k + 1 for n in text.lengths])
        mask = torch.arange(x.shape[1])[None, :] < lens[:, None]
        return FusedEmbeddings(self.transformer(x, mask), mask, list(text.lengths), k)


class JointProjection(nn.Module):
    """The two learned affine heads mapping text and visual summaries into one joint space."""

    def __init__(self, text_dim: int, visual_dim: int, joint_dim: int):
        super().__init__()
        self.text_proj = nn.Linear(text_dim, joint_dim)
        self.visual_proj = nn.Linear(visual_dim, joint_dim)

    @classmethod
    def identity(cls, dim: int, dtype=torch.float64) -> "JointProjection":
        proj = cls(dim, dim, dim).to(dtype)
        with torch.no_grad():
            for lin in (proj.text_proj, proj.visual_proj):
                lin.weight.copy_(torch.eye(dim, dtype=dtype))
                lin.bias.zero_()
        return proj

    def similarity(self, v_summary: torch.Tensor, t_summary: torch.Tensor) -> torch.Tensor:
        """Row-wise S(V, X) for paired inputs (broadcasts over leading dims)."""
        return (self.visual_proj(v_summary) * self.text_proj(t_summary)).sum(-1)

    def similarity_matrix(self, v_summary: torch.Tensor, t_summary: torch.Tensor) -> torch.Tensor:
        """``out[i, j] = S(V_i, X_j)``."""
        return self.visual_proj(v_summary) @ self.text_proj(t_summary).T


def joint_similarity(v_summary, t_summary, proj: JointProjection) -> torch.Tensor:
    v = torch.as_tensor(v_summary, dtype=proj.visual_proj.weight.dtype)
    t = torch.as_tensor(t_summary, dtype=proj.text_proj.weight.dtype)
    if not (torch.isfinite(v).all() and torch.isfinite(t).all()):
        raise InputError("similarity inputs must be finite")
    return proj.similarity(v, t)


@dataclass
class Encoded:
    text: TextEmbeddings
    visual: VisualEmbeddings
    fused: FusedEmbeddings


class MultimodalEncoder(nn.Module):
    """Text, image and fusion encoders plus the joint projection pair."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.text_encoder = TextEncoder(config)
        self.image_encoder = ImageEncoder(config)
        self.fusion_encoder = FusionEncoder(config)
        self.projection = JointProjection(config.hidden_dim, config.visual_hidden_dim, config.joint_dim)
        init_weights(self, torch.Generator().manual_seed(config.seed))

    def encode_text(self, seqs: Sequence[Sequence[int]]) -> TextEmbeddings:
        return self.text_encoder(seqs)

    def encode_image(self, patches: torch.Tensor) -> VisualEmbeddings:
        return self.image_encoder(patches)

    def fuse(self, text: TextEmbeddings, visual: VisualEmbeddings) -> FusedEmbeddings:
        return self.fusion_encoder(text, visual)

    def forward(self, seqs: Sequence[Sequence[int]], patches: torch.Tensor) -> Encoded:
        text = self.encode_text(seqs)
        visual = self.encode_image(patches)
        if visual.embeddings.shape[0] != len(seqs):
            raise InputError(f"{len(seqs)} token sequences but {visual.embeddings.shape[0]} images")
        return Encoded(text, visual, self.fuse(text, visual))

    def non_marker_parameters(self):
        """Parameters trained during pre-training (everything except marker rows)."""
        return [p for n, p in self.named_parameters() if not n.startswith("text_encoder.marker_embed")]
