"""Tokenizer, patch-feature files and corpus readers."""

from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import InputError
from .mner import is_valid_bio, repair_bio

log = logging.getLogger(__name__)

PAD, UNK = "[PAD]", "[UNK]"
PATCH_MAGIC = b"PGRD"
PATCH_VERSION = 1
PATCH_SUFFIX = ".pgrd"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def segment(text: str) -> list[str]:
    """Whitespace-plus-punctuation segmentation, lowercased."""
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    """Word-level vocabulary lookup. Id 0 is padding, id 1 the unknown token."""

    def __init__(self, vocab: Sequence[str], max_len: int = 80):
        if list(vocab[:2]) != [PAD, UNK]:
            raise InputError(f"vocabulary must start with {PAD} and {UNK}")
        if len(set(vocab)) != len(vocab):
            raise InputError("vocabulary contains duplicates")
        self.vocab = list(vocab)
        self.ids = {w: i for i, w in enumerate(self.vocab)}
        self.max_len = max_len
        self.truncated = 0

    def __len__(self):
        return len(self.vocab)

    @property
    def unk_id(self) -> int:
        return 1

    @classmethod
    def from_file(cls, path, max_len: int = 80) -> "Tokenizer":
        with open(path, encoding="utf-8") as fh:
            vocab = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(vocab, max_len)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.vocab) + "\n", encoding="utf-8")

    @classmethod
    def build(cls, texts: Iterable[str], max_len: int = 80, extra: Iterable[str] = ()) -> "Tokenizer":
        words = set(extra)
        for text in texts:
            words.update(segment(text))
        return cls([PAD, UNK] + sorted(words - {PAD, UNK}), max_len)

    def convert(self, words: Sequence[str]) -> list[int]:
        return [self.ids.get(w.lower(), 1) for w in words]

    def __call__(self, text: str) -> list[int]:
        ids = self.convert(segment(text))
        if not ids:
            raise InputError("empty token sequence")
        if len(ids) > self.max_len:
            self.truncated += 1
            ids = ids[: self.max_len]
        return ids


# -- patch-feature files ------------------------------------------------------

def write_patch_file(path, patches: np.ndarray) -> None:
    arr = np.ascontiguousarray(patches, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PATCH_MAGIC + struct.pack("<I", PATCH_VERSION))
        fh.write(arr.tobytes())


def read_patch_file(path, num_patches: int, feature_dim: int) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise InputError(f"patch file {path} does not exist")
    raw = path.read_bytes()
    if raw[:4] != PATCH_MAGIC:
        raise InputError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != PATCH_VERSION:
        raise InputError(f"{path}: unsupported patch file version {version}")
    expected = num_patches * feature_dim * 4
    if len(raw) - 8 != expected:
        raise InputError(
            f"{path}: {len(raw) - 8} payload bytes, expected {expected} for {num_patches}x{feature_dim} float32"
        )
    arr = np.frombuffer(raw, dtype="<f4", offset=8).reshape(num_patches, feature_dim)
    return torch.from_numpy(arr.astype(np.float32))


class ImageStore:
    """Resolves image ids to patch tensors under one directory, with a small in-memory cache."""

    def __init__(self, root, num_patches: int, feature_dim: int):
        self.root = Path(root) if root is not None else None
        self.k, self.f = num_patches, feature_dim
        self._cache: dict[str, torch.Tensor] = {}

    def path(self, ref: str) -> Path:
        p = Path(ref)
        if not p.suffix:
            p = p.with_suffix(PATCH_SUFFIX)
        if not p.is_absolute():
            if self.root is None:
                raise InputError(f"image reference {ref!r} is relative but no image directory is configured")
            p = self.root / p
        return p

    def load(self, ref: str) -> torch.Tensor:
        if ref not in self._cache:
            self._cache[ref] = read_patch_file(self.path(ref), self.k, self.f)
        return self._cache[ref]


# -- corpora ------------------------------------------------------------------

@dataclass
class PretrainRecord:
    id: str
    caption: str
    patch_file: str
    match: int


@dataclass
class NERSentence:
    tokens: list[str]
    tags: list[str]
    image_id: str


@dataclass
class RERecord:
    id: str
    tokens: list[str]
    head: tuple[int, int]
    tail: tuple[int, int]
    relation: str
    image_id: str


def _jsonl(path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise InputError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def read_pretrain_corpus(path) -> list[PretrainRecord]:
    base = Path(path).parent
    out = []
    for lineno, rec in _jsonl(path):
        try:
            match = rec["match"]
            if match not in (0, 1):
                raise ValueError(f"match must be 0 or 1, got {match!r}")
            caption = str(rec["caption"])
            if not caption.strip():
                raise ValueError("empty caption")
            patch_file = Path(rec["patch_file"])
            if not patch_file.is_absolute():
                patch_file = base / patch_file
            out.append(PretrainRecord(str(rec["id"]), caption, str(patch_file), int(match)))
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: malformed pretrain record ({exc})") from exc
    if not out:
        raise InputError(f"{path}: no valid records")
    return out


def read_ner_corpus(path) -> list[NERSentence]:
    """Token<TAB>tag lines, blank-line separated, ``#image <id>`` before each sentence.

    Ill-formed BIO sequences are repaired (orphan I-c becomes B-c) with a warning.
    """
    sentences: list[NERSentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    image: str | None = None
    start = 0

    def flush():
        nonlocal tokens, tags, image
        if tokens:
            if image is None:
                raise InputError(f"{path}:{start}: sentence has no '#image <id>' line")
            fixed = tags if is_valid_bio(tags) else repair_bio(tags)
            if fixed is not tags:
                log.warning("%s:%d: repaired ill-formed BIO tags", path, start)
            sentences.append(NERSentence(tokens, fixed, image))
        tokens, tags, image = [], [], None

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush()
                continue
            if line.startswith("#"):
                if tokens:
                    raise InputError(f"{path}:{lineno}: comment inside a sentence")
                parts = line[1:].split()
                if len(parts) != 2 or parts[0] != "image":
                    raise InputError(f"{path}:{lineno}: expected '#image <id>'")
                image = parts[1]
                start = lineno
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise InputError(f"{path}:{lineno}: expected 'token<TAB>tag'")
            tag = parts[1]
            if tag != "O" and not re.fullmatch(r"[BI]-\S+", tag):
                raise InputError(f"{path}:{lineno}: invalid BIO tag {tag!r}")
            if not tokens and image is None:
                raise InputError(f"{path}:{lineno}: sentence has no '#image <id>' line")
            tokens.append(parts[0])
            tags.append(tag)
    flush()
    if not sentences:
        raise InputError(f"{path}: no valid sentences")
    return sentences


def read_re_corpus(path) -> list[RERecord]:
    out = []
    for lineno, rec in _jsonl(path):
        try:
            tokens = [str(t) for t in rec["tokens"]]
            head = tuple(int(v) for v in rec["h"]["span"])
            tail = tuple(int(v) for v in rec["t"]["span"])
            if len(head) != 2 or len(tail) != 2:
                raise ValueError("spans need [start, end]")
            for s, e in (head, tail):
                if not 0 <= s < e <= len(tokens):
                    raise ValueError(f"span ({s}, {e}) out of bounds for {len(tokens)} tokens")
            if head[0] < tail[1] and tail[0] < head[1]:
                raise ValueError("head and tail spans overlap")
            out.append(RERecord(str(rec["id"]), tokens, head, tail, str(rec["relation"]), str(rec["image_id"])))
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: malformed relation record ({exc})") from exc
    if not out:
        raise InputError(f"{path}: no valid records")
    return out


def write_ner_corpus(path, sentences: Iterable[NERSentence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(f"#image {s.image_id}\n")
            for tok, tag in zip(s.tokens, s.tags):
                fh.write(f"{tok}\t{tag}\n")
            fh.write("\n")


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
