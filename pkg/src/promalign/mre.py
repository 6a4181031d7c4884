"""Multimodal RE head: entity markers, marker-start relation representation,
classifier, cross-entropy loss and micro / per-label metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import NUM_MARKER_TOKENS, EncoderConfig, FusedEmbeddings
from .errors import InputError
from .mner import prf

MARKERS = ("[E1_start]", "[E1_end]", "[E2_start]", "[E2_end]")


def marker_ids(vocab_size: int) -> tuple[int, int, int, int]:
    """Reserved ids of the four markers, directly after the base vocabulary."""
    return tuple(vocab_size + i for i in range(NUM_MARKER_TOKENS))


@dataclass(frozen=True)
class MarkedSequence:
    token_ids: tuple[int, ...]
    marker_positions: tuple[int, int]  # indices of [E1_start], [E2_start]


def check_spans(n: int, head: tuple[int, int], tail: tuple[int, int]) -> None:
    for name, (s, e) in (("head", head), ("tail", tail)):
        if not 0 <= s < e <= n:
            raise InputError(f"{name} span ({s}, {e}) invalid for {n} tokens")
    if head[0] < tail[1] and tail[0] < head[1]:
        raise InputError(f"head span {head} overlaps tail span {tail}")


def inject_entity_markers(
    token_ids: Sequence[int],
    head: tuple[int, int],
    tail: tuple[int, int],
    vocab_size: int,
    max_len: int | None = None,
) -> MarkedSequence:
    """Wrap the head span in E1 markers and the tail span in E2 markers.

    Spans are half-open token ranges. At a shared boundary the closing
    marker precedes the opening one.
    """
    n = len(token_ids)
    check_spans(n, head, tail)
    e1s, e1e, e2s, e2e = marker_ids(vocab_size)
    opens = {head[0]: e1s, tail[0]: e2s}
    closes = {head[1]: e1e, tail[1]: e2e}
    out: list[int] = []
    positions = {}
    for j in range(n + 1):
        if j in closes:
            out.append(closes[j])
        if j in opens:
            positions[opens[j]] = len(out)
            out.append(opens[j])
        if j < n:
            out.append(int(token_ids[j]))
    if max_len is not None and len(out) > max_len:
        raise InputError(
            f"marked sequence has {len(out)} tokens, above max_text_len={max_len}; truncate upstream"
        )
    return MarkedSequence(tuple(out), (positions[e1s], positions[e2s]))


def strip_entity_markers(token_ids: Sequence[int], vocab_size: int) -> list[int]:
    return [t for t in token_ids if t < vocab_size]


def relation_representation(fused: FusedEmbeddings, sample: int, marker_positions: tuple[int, int]) -> torch.Tensor:
    """concat(fused[E1_start], fused[E2_start]); marker positions index the marked token list."""
    rows = []
    for p in marker_positions:
        if not 0 <= p < fused.lengths[sample]:
            raise IndexError(f"marker position {p} outside the text region of sample {sample}")
        rows.append(fused.embeddings[sample, fused.token_position(sample, p)])
    return torch.cat(rows)


def mre_loss(logits, gold) -> torch.Tensor:
    z = torch.as_tensor(logits)
    y = torch.as_tensor(gold, dtype=torch.long)
    if z.dim() == 1:
        z = z[None]
    if y.dim() == 0:
        y = y[None]
    if len(y) != len(z):
        raise InputError(f"{len(z)} logit rows but {len(y)} gold labels")
    bad = (y < 0) | (y >= z.shape[-1])
    if bad.any():
        raise InputError(f"gold relation index {int(y[bad][0])} outside [0, {z.shape[-1]})")
    return F.cross_entropy(z, y)


@dataclass
class LabelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def scores(self) -> tuple[float, float, float]:
        return prf(self.tp, self.tp + self.fp, self.tp + self.fn)


def relation_metrics(preds: Sequence[str], golds: Sequence[str], negative: str | None = None):
    """Micro P/R/F1 plus per-label counts and scores.

    When ``negative`` is given, that label is never a positive: predicting it
    costs recall only, and gold-negative instances cost precision only when
    something else is predicted. Without it every instance counts and
    P = R = F1 = accuracy.
    """
    if len(preds) != len(golds):
        raise InputError(f"{len(preds)} predictions but {len(golds)} gold labels")
    per_label: dict[str, LabelCounts] = {}
    for label in set(preds) | set(golds):
        per_label[label] = LabelCounts()
    for p, g in zip(preds, golds):
        if p == g:
            per_label[g].tp += 1
        else:
            per_label[p].fp += 1
            per_label[g].fn += 1
    positives = [c for label, c in per_label.items() if label != negative]
    tp = sum(c.tp for c in positives)
    micro = prf(tp, sum(c.tp + c.fp for c in positives), sum(c.tp + c.fn for c in positives))
    table = {label: per_label[label] for label in sorted(per_label)}
    return micro, table


class RelationClassifier(nn.Module):
    def __init__(self, config: EncoderConfig, num_relations: int):
        super().__init__()
        self.fc = nn.Linear(2 * config.hidden_dim, num_relations)

    def forward(self, fused: FusedEmbeddings, marker_positions: Sequence[tuple[int, int]]) -> torch.Tensor:
        reps = torch.stack([relation_representation(fused, i, mp) for i, mp in enumerate(marker_positions)])
        return self.fc(reps)
