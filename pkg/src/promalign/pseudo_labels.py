"""Self-supervision signals: candidate entities mined from captions, prompt
templates, object proposals mapped onto the patch grid, temperature-scaled
soft labels, and the on-disk pseudo-label cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol, Sequence

import torch
import torch.nn.functional as F

from .alignment import ObjectProposal
from .encoders import JointProjection, MultimodalEncoder
from .errors import ConfigError, ExternalError, InputError

log = logging.getLogger(__name__)

CACHE_SCHEMA_VERSION = 1
PLACEHOLDER = "{}"
NOUN_TAGS = frozenset({"NOUN", "PROPN", "NN", "NNS", "NNP", "NNPS"})


# -- candidate entities -------------------------------------------------------

class PosTagger(Protocol):
    def tag(self, tokens: Sequence[str]) -> list[tuple[str, str]]: ...


class LexiconTagger:
    """Dictionary lookup tagger; unknown words get ``X``."""

    def __init__(self, lexicon: dict[str, str]):
        self.lexicon = {w.lower(): t for w, t in lexicon.items()}

    @classmethod
    def from_file(cls, path) -> "LexiconTagger":
        lexicon = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise InputError(f"{path}:{lineno}: expected 'word<TAB>TAG'")
                lexicon[parts[0]] = parts[1]
        return cls(lexicon)

    def tag(self, tokens):
        return [(t, self.lexicon.get(t.lower(), "X")) for t in tokens]


@dataclass
class CandidateEntitySet:
    entities: list[str]
    source_counts: list[int]

    def __len__(self):
        return len(self.entities)


def extract_candidate_entities(captions: Sequence[Sequence[tuple[str, str]]], m: int) -> CandidateEntitySet:
    """Top-``m`` nouns by frequency, ties broken lexicographically; lowercased surface forms."""
    if m < 1:
        raise ConfigError(f"number of candidate entities must be >= 1, got {m}")
    if not captions or not any(captions):
        raise InputError("empty caption corpus")
    counts = Counter(tok.lower() for caption in captions for tok, pos in caption if pos in NOUN_TAGS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) < m:
        log.warning("only %d distinct nouns in corpus, fewer than the %d requested", len(ranked), m)
    ranked = ranked[:m]
    return CandidateEntitySet([w for w, _ in ranked], [c for _, c in ranked])


def load_relation_tags(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        tags = [line.strip() for line in fh if line.strip()]
    if not tags:
        raise InputError(f"{path}: no relation tags")
    if len(set(tags)) != len(tags):
        raise InputError(f"{path}: duplicate relation tags")
    return tags


# -- prompts ------------------------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    pattern: str

    def __post_init__(self):
        if self.pattern.count(PLACEHOLDER) != 1:
            raise ConfigError(f"template {self.template_id!r} must contain exactly one {PLACEHOLDER}")

    def render(self, item: str) -> str:
        return self.pattern.replace(PLACEHOLDER, item)


TEMPLATES = {
    t.template_id: t
    for t in (
        PromptTemplate("E1", "This is an image of {}"),
        PromptTemplate("E2", "An image of {} is shown here"),
        PromptTemplate("RA", "The image shows the relation of {}"),
        PromptTemplate("RB", "The relation of {} is shown in this image"),
        PromptTemplate("RC", "The relation between the objects in the image is {}"),
    )
}
ENTITY_TEMPLATES = ("E1", "E2")
RELATION_TEMPLATES = ("RA", "RB", "RC")


def get_template(template_id: str, kind: str) -> PromptTemplate:
    allowed = ENTITY_TEMPLATES if kind == "entity" else RELATION_TEMPLATES
    if template_id not in allowed:
        raise ConfigError(f"{kind} template must be one of {allowed}, got {template_id!r}")
    return TEMPLATES[template_id]


def render_prompts(items: Iterable[str], template: PromptTemplate) -> list[str]:
    return [template.render(item) for item in items]


# -- soft labels --------------------------------------------------------------

def soft_label_from_similarities(similarities, tau: float) -> torch.Tensor:
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau!r}")
    s = torch.as_tensor(similarities)
    if s.shape[-1] == 0:
        raise InputError("soft label needs at least one prompt")
    return F.softmax(s / tau, dim=-1)


def soft_label(target_embedding, prompt_embeddings, proj: JointProjection, tau: float) -> torch.Tensor:
    """Softmax over joint similarities of one visual summary against every prompt summary."""
    prompts = torch.as_tensor(prompt_embeddings)
    if prompts.dim() != 2 or prompts.shape[0] == 0:
        raise InputError("soft label needs a nonempty (M, d) matrix of prompt embeddings")
    target = torch.as_tensor(target_embedding)
    sims = proj.visual_proj(target) @ proj.text_proj(prompts).T
    return soft_label_from_similarities(sims.double(), tau)


# -- object proposals ---------------------------------------------------------

BBox = tuple[float, float, float, float]


class ObjectDetector(Protocol):
    def detect(self, sample_id: str) -> list[BBox]: ...


class FixtureDetector:
    """Reads boxes from a line-delimited ``{sample_id, bboxes}`` sidecar file."""

    def __init__(self, boxes: dict[str, list[BBox]]):
        self.boxes = boxes

    @classmethod
    def from_file(cls, path) -> "FixtureDetector":
        boxes: dict[str, list[BBox]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    sid = str(rec["sample_id"])
                    bbs = [tuple(float(v) for v in bb) for bb in rec["bboxes"]]
                except (ValueError, KeyError, TypeError) as exc:
                    raise InputError(f"{path}:{lineno}: malformed proposal record ({exc})") from exc
                for bb in bbs:
                    check_bbox(bb, f"{path}:{lineno}")
                boxes[sid] = bbs
        return cls(boxes)

    def detect(self, sample_id):
        return list(self.boxes.get(sample_id, []))


class RandomCropDetector:
    """One random box per image, deterministic in (seed, sample_id)."""

    def __init__(self, seed: int = 0, min_size: float = 0.25, max_size: float = 0.75):
        self.seed, self.min_size, self.max_size = seed, min_size, max_size

    def detect(self, sample_id):
        digest = hashlib.sha256(f"{self.seed}:{sample_id}".encode()).digest()
        rng = random.Random(digest)
        w = rng.uniform(self.min_size, self.max_size)
        h = rng.uniform(self.min_size, self.max_size)
        x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        return [(x0, y0, x0 + w, y0 + h)]


def check_bbox(bb: Sequence[float], where: str = "bbox") -> None:
    if len(bb) != 4:
        raise InputError(f"{where}: bbox needs 4 coordinates")
    x0, y0, x1, y1 = bb
    if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
        raise InputError(f"{where}: bbox {tuple(bb)} is not a normalized rectangle")


def bbox_to_patches(bbox: BBox, grid: tuple[int, int], min_overlap: float = 0.5) -> tuple[int, ...]:
    """1-based row-major patches whose area the box covers by at least ``min_overlap``."""
    rows, cols = grid
    x0, y0, x1, y1 = bbox
    out = []
    for r in range(rows):
        for c in range(cols):
            ox = max(0.0, min(x1, (c + 1) / cols) - max(x0, c / cols))
            oy = max(0.0, min(y1, (r + 1) / rows) - max(y0, r / rows))
            if ox * oy * rows * cols >= min_overlap - 1e-9:
                out.append(r * cols + c + 1)
    return tuple(out)


def propose_objects(sample_id: str, grid: tuple[int, int], detector: ObjectDetector, retries: int = 1) -> list[ObjectProposal]:
    """Detector boxes mapped to patch sets. Boxes that cover no patch are dropped."""
    for attempt in range(retries + 1):
        try:
            boxes = detector.detect(sample_id)
            break
        except ExternalError:
            if attempt == retries:
                raise
        except Exception as exc:
            if attempt == retries:
                raise ExternalError(f"detector failed on {sample_id}: {exc}") from exc
    proposals = []
    for bb in boxes:
        check_bbox(bb, sample_id)
        patches = bbox_to_patches(tuple(bb), grid)
        if patches:
            proposals.append(ObjectProposal(tuple(float(v) for v in bb), patches))
    return proposals


def crop_patch_grid(patches: torch.Tensor, bbox: BBox, grid: tuple[int, int]) -> torch.Tensor:
    """Resample the box region back onto a full K-patch grid (nearest neighbour)."""
    rows, cols = grid
    x0, y0, x1, y1 = bbox
    src = []
    for r in range(rows):
        y = y0 + (r + 0.5) / rows * (y1 - y0)
        sr = min(int(y * rows), rows - 1)
        for c in range(cols):
            x = x0 + (c + 0.5) / cols * (x1 - x0)
            src.append(sr * cols + min(int(x * cols), cols - 1))
    return patches[..., src, :]


# -- cache --------------------------------------------------------------------

@dataclass
class PseudoLabelEntry:
    sample_id: str
    kind: str  # "entity" | "relation"
    template_id: str
    tau: float
    probs: list[float]
    proposal: ObjectProposal | None = None

    def __post_init__(self):
        if self.kind not in ("entity", "relation"):
            raise InputError(f"unknown pseudo-label kind {self.kind!r}")
        if self.kind == "entity" and self.proposal is None:
            raise InputError(f"entity pseudo-label for {self.sample_id} lacks an object proposal")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-6:
            raise InputError(f"pseudo-label for {self.sample_id} is not a distribution")

    def to_record(self) -> dict:
        rec = {
            "schema_version": CACHE_SCHEMA_VERSION,
            "sample_id": self.sample_id,
            "kind": self.kind,
            "template_id": self.template_id,
            "tau": self.tau,
            "probs": [float(f"{p:.9g}") for p in self.probs],
        }
        if self.proposal is not None:
            rec["bbox"] = list(self.proposal.bbox)
            rec["patch_indices"] = list(self.proposal.patch_indices)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "PseudoLabelEntry":
        if rec.get("schema_version") != CACHE_SCHEMA_VERSION:
            raise InputError(f"unsupported pseudo-label schema version {rec.get('schema_version')!r}")
        proposal = None
        if "patch_indices" in rec:
            proposal = ObjectProposal(tuple(rec["bbox"]), tuple(rec["patch_indices"]))
        return cls(rec["sample_id"], rec["kind"], rec["template_id"], rec["tau"], list(rec["probs"]), proposal)


def write_cache(path, entries: Iterable[PseudoLabelEntry]) -> int:
    """Write-then-rename so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    n = 0
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for entry in entries:
                fh.write(json.dumps(entry.to_record()) + "\n")
                n += 1
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise
    return n


def read_cache(path) -> list[PseudoLabelEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(PseudoLabelEntry.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: malformed pseudo-label record ({exc})") from exc
    return entries


@dataclass
class CacheSample:
    sample_id: str
    patches: torch.Tensor  # (K, F)


@dataclass
class CacheStats:
    samples: int = 0
    entity_entries: int = 0
    relation_entries: int = 0
    no_proposal: int = 0
    detector_failures: list[str] = field(default_factory=list)


def build_cache(
    samples: Sequence[CacheSample],
    encoder: MultimodalEncoder,
    tokenize: Callable[[str], list[int]],
    entities: Sequence[str],
    relations: Sequence[str],
    entity_template: PromptTemplate,
    relation_template: PromptTemplate,
    tau: float,
    detector: ObjectDetector,
    stats: CacheStats | None = None,
    batch_size: int = 64,
) -> Iterator[PseudoLabelEntry]:
    """Entity entries per (sample, proposal) and one relation entry per sample.

    The encoder is used frozen (eval mode, no grad). Samples whose detector
    fails are skipped and listed in ``stats.detector_failures``.
    """
    if stats is None:
        stats = CacheStats()
    grid = encoder.config.grid_shape
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            proj = encoder.projection
            ent_prompts = encoder.encode_text([tokenize(p) for p in render_prompts(entities, entity_template)]).summary if entities else None
            rel_prompts = encoder.encode_text([tokenize(p) for p in render_prompts(relations, relation_template)]).summary

            for start in range(0, len(samples), batch_size):
                chunk = samples[start : start + batch_size]
                props: list[list[ObjectProposal] | None] = []
                for s in chunk:
                    try:
                        props.append(propose_objects(s.sample_id, grid, detector))
                    except ExternalError as exc:
                        log.warning("skipping %s: %s", s.sample_id, exc)
                        stats.detector_failures.append(s.sample_id)
                        props.append(None)
                patches = torch.stack([s.patches for s in chunk])
                whole = encoder.encode_image(patches).summary
                crops = [
                    crop_patch_grid(s.patches, p.bbox, grid)
                    for s, ps in zip(chunk, props) if ps for p in ps
                ]
                crop_summaries = encoder.encode_image(torch.stack(crops)).summary if crops and ent_prompts is not None else None
                c = 0
                for i, (s, ps) in enumerate(zip(chunk, props)):
                    if ps is None:
                        continue
                    stats.samples += 1
                    if not ps:
                        stats.no_proposal += 1
                    for p in ps:
                        if crop_summaries is None:
                            break
                        q = soft_label(crop_summaries[c], ent_prompts, proj, tau)
                        c += 1
                        stats.entity_entries += 1
                        yield PseudoLabelEntry(s.sample_id, "entity", entity_template.template_id, tau, q.tolist(), p)
                    q = soft_label(whole[i], rel_prompts, proj, tau)
                    stats.relation_entries += 1
                    yield PseudoLabelEntry(s.sample_id, "relation", relation_template.template_id, tau, q.tolist())
    finally:
        encoder.train(was_training)
