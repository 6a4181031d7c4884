"""Synthetic toy corpora with planted object patterns.

Every named entity owns a visual prototype (its type prototype plus an
individual offset). An image is a background-noise patch grid with one
patch-aligned rectangle per mentioned entity filled with that entity's
prototype; the rectangle's box goes to the proposal sidecar. Pre-training
captions, NER sentences and RE instances all draw from the same world, so
what pre-training learns about names and objects can transfer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, save_config
from .data import NERSentence, Tokenizer, write_jsonl, write_ner_corpus, write_patch_file
from .encoders import EncoderConfig
from .pseudo_labels import TEMPLATES

NAMES = {
    "PER": ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi",
            "ivan", "judy", "mallory", "oscar", "peggy", "trent", "victor", "wendy"],
    "LOC": ["paris", "london", "tokyo", "berlin", "madrid", "rome", "cairo", "lima",
            "oslo", "delhi", "seoul", "dublin"],
    "ORG": ["acme", "globex", "initech", "umbrella", "hooli", "stark", "wayne",
            "wonka", "cyberdyne", "tyrell"],
}

CAPTION_TEMPLATES = [
    ("{0} smiles in {1}", ("PER", "LOC")),
    ("{0} works at {1}", ("PER", "ORG")),
    ("{0} opens an office in {1}", ("ORG", "LOC")),
    ("a photo of {0} and {1}", (None, None)),
    ("{0} meets {1} at the station", ("PER", "PER")),
    ("the team of {0} visits {1}", ("ORG", "LOC")),
]

NER_TEMPLATES = [
    ["{0}", "visited", "{1}", "last", "week"],
    ["{0}", "signed", "with", "{1}"],
    ["news", "about", "{0}", "today"],
    ["we", "saw", "{0}", "and", "{1}"],
    ["{0}", "is", "great"],
]
NER_SLOTS = [("PER", "LOC"), ("PER", "ORG"), (None,), (None, None), (None,)]

RE_TEMPLATES = {
    "works_for": [("PER", "ORG", "{h} works for {t}", False), ("PER", "ORG", "{t} employs {h}", True)],
    "lives_in": [("PER", "LOC", "{h} lives in {t}", False), ("PER", "LOC", "{t} is home to {h}", True)],
    "based_in": [("ORG", "LOC", "{h} is based in {t}", False)],
    "friend_of": [("PER", "PER", "{h} is a friend of {t}", False)],
}

RELATION_TAGS = [
    "spouse", "employer", "member of", "located in",
    "award received", "place of birth", "participant", "owned by",
]

LEXICON_EXTRA = {
    "photo": "NOUN", "office": "NOUN", "team": "NOUN", "station": "NOUN", "news": "NOUN",
    "week": "NOUN", "image": "NOUN", "relation": "NOUN",
}


@dataclass
class World:
    rng: np.random.Generator
    config: EncoderConfig
    protos: dict[str, np.ndarray]

    @classmethod
    def create(cls, config: EncoderConfig, seed: int = 0) -> "World":
        rng = np.random.default_rng(seed)
        f = config.patch_feature_dim
        protos = {}
        for etype, names in NAMES.items():
            type_proto = rng.normal(0, 1.0, f)
            for name in names:
                protos[name] = type_proto + 0.6 * rng.normal(0, 1.0, f)
        return cls(rng, config, protos)

    def entity_type(self, name: str) -> str:
        return next(t for t, names in NAMES.items() if name in names)

    def pick(self, etype: str | None, exclude=(), pool=None) -> str:
        if etype is None:
            etype = str(self.rng.choice(list(NAMES)))
        names = [n for n in (pool or NAMES)[etype] if n not in exclude]
        return str(self.rng.choice(names))

    def image(self, entities: list[str]) -> tuple[np.ndarray, list[list[float]]]:
        """Patch grid with one rectangle per entity; returns (patches, normalized boxes)."""
        rows, cols = self.config.grid_shape
        f = self.config.patch_feature_dim
        grid = self.rng.normal(0, 0.3, (rows, cols, f))
        taken = np.zeros((rows, cols), dtype=bool)
        boxes = []
        for name in entities:
            for _ in range(100):
                h = int(self.rng.integers(1, min(2, rows) + 1))
                w = int(self.rng.integers(1, min(2, cols) + 1))
                r = int(self.rng.integers(0, rows - h + 1))
                c = int(self.rng.integers(0, cols - w + 1))
                if not taken[r : r + h, c : c + w].any():
                    break
            taken[r : r + h, c : c + w] = True
            grid[r : r + h, c : c + w] = self.protos[name] + self.rng.normal(0, 0.1, (h, w, f))
            boxes.append([c / cols, r / rows, (c + w) / cols, (r + h) / rows])
        return grid.reshape(rows * cols, f).astype(np.float32), boxes


def _save_image(world: World, directory: Path, image_id: str, entities: list[str]) -> list[list[float]]:
    patches, boxes = world.image(entities)
    write_patch_file(directory / f"{image_id}.pgrd", patches)
    return boxes


def write_pretrain_toy(root: Path, world: World, n_pairs: int = 64) -> list[str]:
    """Half matched pairs, half mismatched by a derangement of captions whose entities differ."""
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    captions, mentions = [], []
    for _ in range(n_pairs):
        template, slots = CAPTION_TEMPLATES[int(world.rng.integers(len(CAPTION_TEMPLATES)))]
        a = world.pick(slots[0])
        b = world.pick(slots[1], exclude=(a,))
        captions.append(template.format(a, b))
        mentions.append([a, b])

    n_mis = n_pairs // 2
    mis = list(range(n_pairs - n_mis, n_pairs))
    while True:
        perm = world.rng.permutation(mis)
        if all(set(mentions[i]) != set(mentions[j]) for i, j in zip(mis, perm)):
            break
    caption_of = {i: i for i in range(n_pairs)}
    caption_of.update({i: int(j) for i, j in zip(mis, perm)})

    records, proposals = [], []
    for i in range(n_pairs):
        sid = f"pt{i:04d}"
        boxes = _save_image(world, img_dir, sid, mentions[i])
        records.append({
            "id": sid,
            "caption": captions[caption_of[i]],
            "patch_file": f"images/{sid}.pgrd",
            "match": int(caption_of[i] == i),
        })
        proposals.append({"sample_id": sid, "bboxes": boxes})
    write_jsonl(root / "pretrain.jsonl", records)
    write_jsonl(root / "proposals.jsonl", proposals)
    return captions


def _ner_sentence(world: World, sid: str, img_dir: Path, pool: dict) -> NERSentence:
    k = int(world.rng.integers(len(NER_TEMPLATES)))
    template, slots = NER_TEMPLATES[k], NER_SLOTS[k]
    names = []
    for slot in slots:
        names.append(world.pick(slot, exclude=names, pool=pool))
    tokens, tags = [], []
    for piece in template:
        if piece.startswith("{"):
            name = names[int(piece[1])]
            tokens.append(name)
            tags.append("B-" + world.entity_type(name))
        else:
            tokens.append(piece)
            tags.append("O")
    _save_image(world, img_dir, sid, names)
    return NERSentence(tokens, tags, sid)


def write_ner_toy(root: Path, world: World, n_train: int = 20, n_dev: int = 60) -> None:
    """Train and dev draw from disjoint halves of each name list."""
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    train_pool = {t: names[::2] for t, names in NAMES.items()}
    dev_pool = {t: names[1::2] for t, names in NAMES.items()}
    train = [_ner_sentence(world, f"ner_tr{i:03d}", img_dir, train_pool) for i in range(n_train)]
    dev = [_ner_sentence(world, f"ner_dv{i:03d}", img_dir, dev_pool) for i in range(n_dev)]
    write_ner_corpus(root / "ner_train.txt", train)
    write_ner_corpus(root / "ner_dev.txt", dev)


def write_re_toy(root: Path, world: World, n: int = 30) -> list[str]:
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    relations = list(RE_TEMPLATES)
    records = []
    for i in range(n):
        rel = relations[i % len(relations)]
        options = RE_TEMPLATES[rel]
        htype, ttype, template, _ = options[int(world.rng.integers(len(options)))]
        h = world.pick(htype)
        t = world.pick(ttype, exclude=(h,))
        words = template.format(h=h, t=t).split()
        sid = f"re{i:03d}"
        _save_image(world, img_dir, sid, [h, t])
        records.append({
            "id": sid, "tokens": words,
            "h": {"span": [words.index(h), words.index(h) + 1]},
            "t": {"span": [words.index(t), words.index(t) + 1]},
            "relation": rel, "image_id": sid,
        })
    write_jsonl(root / "re_train.jsonl", records)
    return relations


def write_toy_suite(root, seed: int = 0, n_pairs: int = 64, encoder: EncoderConfig | None = None) -> RunConfig:
    """Write every toy corpus plus vocab, lexicon, relation tags and config.yaml; return the config."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    encoder = encoder or EncoderConfig(seed=seed)
    world = World.create(encoder, seed)
    captions = write_pretrain_toy(root, world, n_pairs)
    write_ner_toy(root, world)
    relations = write_re_toy(root, world)

    (root / "relation_tags.txt").write_text("\n".join(RELATION_TAGS) + "\n")
    lexicon = {name: "PROPN" for names in NAMES.values() for name in names}
    lexicon.update(LEXICON_EXTRA)
    (root / "pos_lexicon.tsv").write_text("".join(f"{w}\t{t}\n" for w, t in sorted(lexicon.items())))

    texts = list(captions) + [t.pattern.replace("{}", "") for t in TEMPLATES.values()] + RELATION_TAGS
    for names in NAMES.values():
        texts += names
    for templates in RE_TEMPLATES.values():
        texts += [t[2].replace("{h}", "").replace("{t}", "") for t in templates]
    texts += [" ".join(p for p in t if not p.startswith("{")) for t in NER_TEMPLATES]
    tok = Tokenizer.build(texts)
    tok.save(root / "vocab.txt")

    config = RunConfig(seed=seed)
    config.encoder = EncoderConfig(**{**encoder.__dict__, "vocab_size": max(len(tok), 8)})
    config.ner.entity_types = list(NAMES)
    config.re.relations = relations
    config.batch.finetune = 16
    # From-scratch encoders at this scale need a larger step than the library default.
    config.optimizer.learning_rate = 1e-3
    p = config.paths
    p.vocab = str(root / "vocab.txt")
    p.image_dir = str(root / "images")
    p.pretrain_corpus = str(root / "pretrain.jsonl")
    p.proposals = str(root / "proposals.jsonl")
    p.pos_lexicon = str(root / "pos_lexicon.tsv")
    p.relation_tags = str(root / "relation_tags.txt")
    p.ner_train = str(root / "ner_train.txt")
    p.ner_dev = str(root / "ner_dev.txt")
    p.re_train = str(root / "re_train.jsonl")
    p.re_dev = str(root / "re_train.jsonl")
    p.out_dir = str(root / "runs")
    save_config(config, root / "config.yaml")
    (root / "world.json").write_text(json.dumps({"seed": seed, "n_pairs": n_pairs}))
    return config
