"""Multimodal NER head: linear-chain CRF over fused token embeddings, Viterbi
decoding, BIO span extraction and span-level P/R/F1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .encoders import EncoderConfig, FusedEmbeddings
from .errors import InputError

OUTSIDE = "O"


class LabelSchema:
    """BIO label set over ordered entity types. ``O`` is always index 0,
    followed by ``B-c, I-c`` for each type in order."""

    def __init__(self, entity_types: Sequence[str]):
        if len(set(entity_types)) != len(entity_types) or not entity_types:
            raise InputError("entity types must be a nonempty list without duplicates")
        self.entity_types = list(entity_types)
        self.labels = [OUTSIDE]
        for c in self.entity_types:
            self.labels += [f"B-{c}", f"I-{c}"]
        self.index = {label: i for i, label in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return isinstance(other, LabelSchema) and other.labels == self.labels

    def encode(self, labels: Iterable[str]) -> list[int]:
        out = []
        for j, label in enumerate(labels):
            if label not in self.index:
                raise InputError(f"unknown label {label!r} at position {j}")
            out.append(self.index[label])
        return out

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.labels[i] for i in ids]

    def split(self, idx: int) -> tuple[str, str | None]:
        label = self.labels[idx]
        if label == OUTSIDE:
            return OUTSIDE, None
        prefix, _, c = label.partition("-")
        return prefix, c

    def allowed_transitions(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Boolean (from, to) transition mask and start mask: I-c only after B-c or I-c."""
        n = len(self)
        trans = torch.ones(n, n, dtype=torch.bool)
        start = torch.ones(n, dtype=torch.bool)
        for j in range(n):
            prefix, c = self.split(j)
            if prefix != "I":
                continue
            start[j] = False
            for i in range(n):
                trans[i, j] = self.split(i)[1] == c and self.split(i)[0] in ("B", "I")
        return trans, start


def is_valid_bio(labels: Sequence[str]) -> bool:
    prev = OUTSIDE
    for label in labels:
        if label.startswith("I-") and prev[2:] != label[2:]:
            return False
        prev = label
    return True


def repair_bio(labels: Sequence[str]) -> list[str]:
    """An I-c without a B-c/I-c predecessor starts a new span: rewrite it to B-c."""
    out, prev = [], OUTSIDE
    for label in labels:
        if label.startswith("I-") and prev[2:] != label[2:]:
            label = "B-" + label[2:]
        out.append(label)
        prev = label
    return out


class CRF(nn.Module):
    """Transition, start and end scores of a linear-chain CRF.

    With ``constraints`` (from :meth:`LabelSchema.allowed_transitions`),
    disallowed transitions and starts score -inf.
    """

    def __init__(self, num_labels: int, constraints: tuple[torch.Tensor, torch.Tensor] | None = None):
        super().__init__()
        self.num_labels = num_labels
        self.transitions = nn.Parameter(torch.zeros(num_labels, num_labels))
        self.start = nn.Parameter(torch.zeros(num_labels))
        self.end = nn.Parameter(torch.zeros(num_labels))
        if constraints is None:
            constraints = (torch.ones(num_labels, num_labels, dtype=torch.bool),
                           torch.ones(num_labels, dtype=torch.bool))
        self.register_buffer("allowed_trans", constraints[0].clone(), persistent=False)
        self.register_buffer("allowed_start", constraints[1].clone(), persistent=False)

    @classmethod
    def from_scores(cls, transitions, start, end, constraints=None) -> "CRF":
        transitions = torch.as_tensor(transitions)
        crf = cls(transitions.shape[0], constraints).to(transitions.dtype)
        with torch.no_grad():
            crf.transitions.copy_(transitions)
            crf.start.copy_(torch.as_tensor(start))
            crf.end.copy_(torch.as_tensor(end))
        return crf

    def potentials(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        neg_inf = float("-inf")
        trans = self.transitions.masked_fill(~self.allowed_trans, neg_inf)
        start = self.start.masked_fill(~self.allowed_start, neg_inf)
        return trans, start, self.end

    def sequence_score(self, emissions: torch.Tensor, labels: Sequence[int]) -> torch.Tensor:
        """Unnormalized log-potential of one label sequence; emissions is (N, |Y|)."""
        trans, start, end = self.potentials()
        y = torch.as_tensor(list(labels), dtype=torch.long)
        score = start[y[0]] + emissions[torch.arange(len(y)), y].sum() + end[y[-1]]
        if len(y) > 1:
            score = score + trans[y[:-1], y[1:]].sum()
        return score

    def log_partition(self, emissions: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Forward algorithm in log space. emissions (B, N, |Y|) -> logZ (B,)."""
        trans, start, end = self.potentials()
        if mask is None:
            mask = torch.ones(emissions.shape[:2], dtype=torch.bool)
        alpha = start + emissions[:, 0]
        for t in range(1, emissions.shape[1]):
            step = torch.logsumexp(alpha[:, :, None] + trans[None], dim=1) + emissions[:, t]
            alpha = torch.where(mask[:, t, None], step, alpha)
        return torch.logsumexp(alpha + end, dim=-1)

    def viterbi(self, emissions: torch.Tensor) -> list[int]:
        """Best label sequence for one (N, |Y|) emission matrix.

        Ties resolve to the lowest label index (numpy argmax returns the first maximum).
        """
        trans, start, end = (p.detach().double().numpy() for p in self.potentials())
        em = emissions.detach().double().numpy()
        n = em.shape[0]
        delta = start + em[0]
        back = np.zeros((n, self.num_labels), dtype=np.int64)
        for t in range(1, n):
            scores = delta[:, None] + trans
            back[t] = scores.argmax(axis=0)
            delta = scores[back[t], np.arange(self.num_labels)] + em[t]
        best = [int((delta + end).argmax())]
        for t in range(n - 1, 0, -1):
            best.append(int(back[t, best[-1]]))
        return best[::-1]


def _check_labels(gold: Sequence[int], num_labels: int) -> None:
    for j, y in enumerate(gold):
        if not 0 <= int(y) < num_labels:
            raise InputError(f"label index {y} at position {j} outside [0, {num_labels})")


def crf_log_prob(emissions, crf: CRF, gold: Sequence[int]) -> torch.Tensor:
    """log p(gold | emissions) for a single sequence."""
    emissions = torch.as_tensor(emissions)
    if emissions.shape[0] == 0:
        raise InputError("CRF needs at least one position")
    if len(gold) != emissions.shape[0]:
        raise InputError(f"{len(gold)} gold labels for {emissions.shape[0]} positions")
    _check_labels(gold, crf.num_labels)
    return crf.sequence_score(emissions, gold) - crf.log_partition(emissions[None])[0]


def viterbi_decode(emissions, crf: CRF) -> list[int]:
    emissions = torch.as_tensor(emissions)
    if emissions.shape[0] == 0:
        raise InputError("CRF needs at least one position")
    return crf.viterbi(emissions)


def mner_loss(batch: Sequence[tuple[torch.Tensor, Sequence[int]]], crf: CRF) -> torch.Tensor:
    """Mean negative sequence log-likelihood over (emissions, gold) pairs."""
    if not batch:
        raise InputError("empty batch")
    lengths = [len(g) for _, g in batch]
    for (em, g) in batch:
        if em.shape[0] != len(g):
            raise InputError(f"{len(g)} gold labels for {em.shape[0]} positions")
        _check_labels(g, crf.num_labels)
    em = torch.nn.utils.rnn.pad_sequence([torch.as_tensor(e) for e, _ in batch], batch_first=True)
    mask = torch.arange(em.shape[1])[None, :] < torch.tensor(lengths)[:, None]
    log_z = crf.log_partition(em, mask)
    gold_scores = torch.stack([crf.sequence_score(e, g) for e, g in batch])
    return (log_z - gold_scores).mean()


Span = tuple[int, int, str]


def extract_spans(labels: Sequence[int], schema: LabelSchema) -> set[Span]:
    """Maximal B-I runs as half-open (start, end, type) spans; an orphan I-c opens a span."""
    spans: set[Span] = set()
    start, current = None, None
    for j, idx in enumerate(labels):
        prefix, c = schema.split(int(idx))
        if prefix == "I" and current == c:
            continue
        if current is not None:
            spans.add((start, j, current))
            start, current = None, None
        if prefix in ("B", "I"):
            start, current = j, c
    if current is not None:
        spans.add((start, len(labels), current))
    return spans


def prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def span_f1(pred_spans, gold_spans) -> tuple[float, float, float]:
    pred, gold = set(pred_spans), set(gold_spans)
    return prf(len(pred & gold), len(pred), len(gold))


@dataclass
class SpanCounts:
    tp: int = 0
    n_pred: int = 0
    n_gold: int = 0

    def add(self, pred: set, gold: set) -> None:
        self.tp += len(pred & gold)
        self.n_pred += len(pred)
        self.n_gold += len(gold)

    def scores(self) -> tuple[float, float, float]:
        return prf(self.tp, self.n_pred, self.n_gold)


def corpus_span_scores(pred_seqs, gold_seqs, schema: LabelSchema):
    """Micro span P/R/F1 over a corpus plus a per-type breakdown.

    Spans are tagged with their sentence index so identical offsets in
    different sentences do not collide.
    """
    total = SpanCounts()
    per_type: dict[str, SpanCounts] = {}
    for s, (pred, gold) in enumerate(zip(pred_seqs, gold_seqs)):
        ps = {(s, *sp) for sp in extract_spans(pred, schema)}
        gs = {(s, *sp) for sp in extract_spans(gold, schema)}
        total.add(ps, gs)
        for c in {sp[3] for sp in ps | gs}:
            per_type.setdefault(c, SpanCounts()).add(
                {sp for sp in ps if sp[3] == c}, {sp for sp in gs if sp[3] == c}
            )
    return total.scores(), {c: per_type[c].scores() for c in sorted(per_type)}


class NERTagger(nn.Module):
    """Emission projection over fused token positions feeding a constrained CRF."""

    def __init__(self, config: EncoderConfig, schema: LabelSchema):
        super().__init__()
        self.schema = schema
        self.emission = nn.Linear(config.hidden_dim, len(schema))
        self.crf = CRF(len(schema), schema.allowed_transitions())

    def emissions(self, fused: FusedEmbeddings) -> list[torch.Tensor]:
        return [self.emission(fused.embeddings[i, 1 : n + 1]) for i, n in enumerate(fused.lengths)]

    def loss(self, fused: FusedEmbeddings, gold: Sequence[Sequence[int]]) -> torch.Tensor:
        return mner_loss(list(zip(self.emissions(fused), gold)), self.crf)

    def decode(self, fused: FusedEmbeddings) -> list[list[int]]:
        return [self.crf.viterbi(e) for e in self.emissions(fused)]
