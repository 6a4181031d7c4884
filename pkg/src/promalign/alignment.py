"""Pre-training objectives: image-text matching, contrastive image-text,
object-entity and image-relation alignment, and their weighted sum."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import EncoderConfig, FusedEmbeddings
from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


def _as_tensor(x, dtype=None) -> torch.Tensor:
    """Tensors keep their dtype; Python numbers and lists become float64."""
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype or torch.float64)


@dataclass
class LossWeights:
    itm: float = 1.0
    cit: float = 1.0
    coe: float = 1.0
    cir: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("itm", "cit", "coe", "cir"):
            value = getattr(self, name)
            if not value >= 0:
                raise ConfigError(f"loss weight {name} must be nonnegative, got {value!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.itm, self.cit, self.coe, self.cir)


@dataclass(frozen=True)
class ObjectProposal:
    """A detector box in normalized image coordinates and the 1-based patches it covers."""

    bbox: tuple[float, float, float, float]
    patch_indices: tuple[int, ...]

    def __post_init__(self):
        if not self.patch_indices:
            raise InputError("object proposal must cover at least one patch")


def itm_loss(match_probs, labels) -> torch.Tensor:
    """Mean binary cross-entropy of match probabilities against 0/1 labels."""
    p = _as_tensor(match_probs)
    y = _as_tensor(labels, p.dtype)
    if p.shape != y.shape:
        raise InputError(f"{p.numel()} match probabilities but {y.numel()} labels")
    if p.numel() == 0:
        raise InputError("image-text matching loss needs a nonempty batch")
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(y * p.log() + (1 - y) * (1 - p).log()).mean()


def cit_loss(sim_matrix, tau: float) -> torch.Tensor:
    """Symmetric in-batch contrastive loss over matched pairs.

    ``sim_matrix[i, j]`` is the similarity of image i and caption j; the
    diagonal holds the positive pairs.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau!r}")
    s = _as_tensor(sim_matrix)
    if s.dim() != 2 or s.shape[0] != s.shape[1]:
        raise InputError(f"similarity matrix must be square, got shape {tuple(s.shape)}")
    n = s.shape[0]
    if n == 0:
        log.warning("no matched pairs in batch; contrastive image-text loss set to 0")
        return s.sum() * 0.0
    logits = s / tau
    diag = torch.arange(n)
    image_to_text = -F.log_softmax(logits, dim=1)[diag, diag].mean()
    text_to_image = -F.log_softmax(logits, dim=0)[diag, diag].mean()
    return 0.5 * (image_to_text + text_to_image)


def pool_object_region(fused: FusedEmbeddings, sample: int, patch_indices: Sequence[int]) -> torch.Tensor:
    """Mean of the fused embeddings at the object's patch positions."""
    if len(patch_indices) == 0:
        raise InputError("cannot pool an empty patch set")
    positions = [fused.patch_position(sample, k) for k in patch_indices]
    return fused.embeddings[sample, positions].mean(dim=0)


def soft_cross_entropy(logits, targets) -> torch.Tensor:
    """-(1/B) sum_i sum_j q_ij log softmax(logits)_ij."""
    z = _as_tensor(logits)
    q = _as_tensor(targets, z.dtype)
    if z.dim() == 1:
        z, q = z[None], q[None]
    if z.shape != q.shape:
        raise InputError(f"logits shape {tuple(z.shape)} does not match pseudo-label shape {tuple(q.shape)}")
    if z.shape[0] == 0:
        return z.sum() * 0.0
    return -(q * F.log_softmax(z, dim=-1)).sum(-1).mean()


def coe_loss(entity_logits, pseudo) -> torch.Tensor:
    """Object-entity alignment: cross-entropy of the entity classifier against soft entity labels."""
    return soft_cross_entropy(entity_logits, pseudo)


def cir_loss(relation_logits, pseudo) -> torch.Tensor:
    """Image-relation alignment: cross-entropy of the relation classifier against soft relation labels."""
    return soft_cross_entropy(relation_logits, pseudo)


def total_loss(parts, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of (itm, cit, coe, cir). Zero-weighted terms are dropped, not multiplied."""
    if len(parts) != 4:
        raise InputError("expected four loss components (itm, cit, coe, cir)")
    weights.validate()
    terms = [w * part for part, w in zip(parts, weights.as_tuple()) if w]
    return sum(terms, torch.zeros(()))


class PretrainHeads(nn.Module):
    """Matching classifier on the fused summary, entity classifier on pooled
    object regions, relation classifier on the fused summary."""

    def __init__(self, config: EncoderConfig, num_entities: int, num_relations: int):
        super().__init__()
        d = config.hidden_dim
        self.itm = nn.Linear(d, 2)
        self.entity = nn.Linear(d, max(num_entities, 1))
        self.relation = nn.Linear(d, max(num_relations, 1))
        self.num_entities = num_entities
        self.num_relations = num_relations

    def match_probs(self, fused: FusedEmbeddings) -> torch.Tensor:
        return F.softmax(self.itm(fused.summary), dim=-1)[:, 1]


@dataclass
class LossBreakdown:
    itm: torch.Tensor
    cit: torch.Tensor
    coe: torch.Tensor
    cir: torch.Tensor
    total: torch.Tensor
    itm_accuracy: float
    coe_terms: int
    coe_excluded: int

    def as_floats(self) -> dict[str, float]:
        names = ("itm", "cit", "coe", "cir", "total")
        return {n: getattr(self, n).detach().item() for n in names}


def pretrain_losses(
    fused: FusedEmbeddings,
    text_summary: torch.Tensor,
    visual_summary: torch.Tensor,
    heads: PretrainHeads,
    projection: nn.Module,
    labels: torch.Tensor,
    entity_targets: Sequence[Sequence[tuple[ObjectProposal, torch.Tensor]]],
    relation_targets: Sequence[torch.Tensor | None],
    weights: LossWeights,
    tau: float,
) -> LossBreakdown:
    """All four objectives for one batch.

    ``entity_targets[i]`` lists (proposal, soft label) pairs for sample i;
    every pair is one term of the object-entity loss. Samples with no
    proposal are excluded and counted.
    """
    zero = fused.embeddings.sum() * 0.0
    labels = labels.long()

    p = heads.match_probs(fused)
    l_itm = itm_loss(p, labels)
    acc = float(((p > 0.5).long() == labels).float().mean())

    matched = labels == 1
    sim = projection.similarity_matrix(visual_summary[matched], text_summary[matched])
    l_cit = cit_loss(sim, tau)

    pooled, q_ent, excluded = [], [], 0
    for i, pairs in enumerate(entity_targets):
        if not pairs:
            excluded += 1
        for proposal, q in pairs:
            pooled.append(pool_object_region(fused, i, proposal.patch_indices))
            q_ent.append(q)
    l_coe = zero
    if pooled:
        logits = heads.entity(torch.stack(pooled))
        l_coe = coe_loss(logits, torch.stack(q_ent).to(logits.dtype))

    l_cir = zero
    rel_rows = [i for i, q in enumerate(relation_targets) if q is not None]
    if rel_rows:
        logits = heads.relation(fused.summary[rel_rows])
        q_rel = torch.stack([relation_targets[i] for i in rel_rows]).to(logits.dtype)
        l_cir = cir_loss(logits, q_rel)

    total = total_loss((l_itm, l_cit, l_coe, l_cir), weights)
    return LossBreakdown(l_itm, l_cit, l_coe, l_cir, total, acc, len(pooled), excluded)

