"""Training loops (pre-training, NER and RE fine-tuning), pseudo-label
generation and evaluation over file-based corpora."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .alignment import ObjectProposal, pretrain_losses
from .config import RunConfig
from .data import (
    ImageStore,
    Tokenizer,
    read_ner_corpus,
    read_pretrain_corpus,
    read_re_corpus,
    segment,
)
from .encoders import MultimodalEncoder
from .errors import ConfigError, InputError
from .mner import LabelSchema, corpus_span_scores
from .models import (
    NERModel,
    PretrainModel,
    REModel,
    load_checkpoint,
    load_encoder_weights,
    model_from_checkpoint,
    save_checkpoint,
)
from .mre import inject_entity_markers, mre_loss, relation_metrics
from .pseudo_labels import (
    CacheSample,
    CacheStats,
    FixtureDetector,
    LexiconTagger,
    PseudoLabelEntry,
    RandomCropDetector,
    build_cache,
    extract_candidate_entities,
    get_template,
    load_relation_tags,
    read_cache,
    write_cache,
)

log = logging.getLogger(__name__)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic shuffle keyed by (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(n: int, batch_size: int, seed: int, max_steps: int):
    """Yield (step, epoch, indices) for ``max_steps`` steps, reshuffling every epoch."""
    per_epoch = math.ceil(n / batch_size)
    for step in range(max_steps):
        epoch, b = divmod(step, per_epoch)
        order = epoch_order(n, seed, epoch)
        yield step, epoch, order[b * batch_size : (b + 1) * batch_size].tolist()


def make_optimizer(params, config: RunConfig) -> torch.optim.Optimizer:
    o = config.optimizer
    return torch.optim.AdamW(
        params, lr=o.learning_rate, weight_decay=o.weight_decay, betas=(o.beta1, o.beta2), eps=o.eps
    )


def require(path: str | None, key: str) -> str:
    if not path:
        raise ConfigError(f"paths.{key} is required for this stage")
    return path


def load_tokenizer(config: RunConfig) -> Tokenizer:
    tok = Tokenizer.from_file(require(config.paths.vocab, "vocab"), config.encoder.max_text_len)
    if len(tok) > config.encoder.vocab_size:
        raise ConfigError(f"vocabulary has {len(tok)} entries but encoder.vocab_size is {config.encoder.vocab_size}")
    return tok


def image_store(config: RunConfig) -> ImageStore:
    return ImageStore(config.paths.image_dir, config.encoder.num_patches, config.encoder.patch_feature_dim)


def _write_log(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def write_run_summary(path: Path, **values) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(values, indent=2) + "\n")


# -- pre-training ---------------------------------------------------------------

@dataclass
class PretrainData:
    ids: list[str]
    tokens: list[list[int]]
    patches: torch.Tensor
    labels: torch.Tensor
    entities: list[str]
    relations: list[str]
    truncated: int = 0


def load_pretrain_data(config: RunConfig, tok: Tokenizer) -> PretrainData:
    records = read_pretrain_corpus(require(config.paths.pretrain_corpus, "pretrain_corpus"))
    store = ImageStore(None, config.encoder.num_patches, config.encoder.patch_feature_dim)
    tokens = [tok(r.caption) for r in records]
    patches = torch.stack([store.load(r.patch_file) for r in records])
    labels = torch.tensor([r.match for r in records])

    entities: list[str] = []
    if config.paths.pos_lexicon:
        tagger = LexiconTagger.from_file(config.paths.pos_lexicon)
        tagged = [tagger.tag(segment(r.caption)) for r in records]
        entities = extract_candidate_entities(tagged, config.pseudo.num_entities).entities
        if not entities:
            log.warning("no candidate entities found; object-entity loss disabled")
    elif config.loss_weights.coe:
        raise ConfigError("paths.pos_lexicon is required when loss_weights.coe > 0")
    relations = load_relation_tags(config.paths.relation_tags) if config.paths.relation_tags else []
    if not relations and config.loss_weights.cir:
        raise ConfigError("paths.relation_tags is required when loss_weights.cir > 0")
    return PretrainData([r.id for r in records], tokens, patches, labels, entities, relations, tok.truncated)


def make_detector(config: RunConfig):
    if config.pseudo.detector == "random_crop":
        return RandomCropDetector(config.seed)
    return FixtureDetector.from_file(require(config.paths.proposals, "proposals"))


def pseudo_label_encoder(config: RunConfig, model: PretrainModel) -> MultimodalEncoder:
    if config.pseudo.encoder == "shared":
        return model.encoder
    teacher = MultimodalEncoder(replace(config.encoder, seed=config.encoder.seed + 1))
    if config.paths.pseudo_label_checkpoint:
        load_encoder_weights(teacher, load_checkpoint(config.paths.pseudo_label_checkpoint))
    return teacher.requires_grad_(False)


def generate_pseudo_labels(config, data: PretrainData, encoder: MultimodalEncoder, tok, detector, stats=None):
    samples = [CacheSample(sid, p) for sid, p in zip(data.ids, data.patches)]
    return list(build_cache(
        samples, encoder, tok, data.entities, data.relations,
        get_template(config.pseudo.entity_template, "entity"),
        get_template(config.pseudo.relation_template, "relation"),
        config.encoder.temperature, detector, stats,
    ))


def index_pseudo_labels(entries: Sequence[PseudoLabelEntry], ids: Sequence[str]):
    """Per-sample entity targets [(proposal, q)] and relation target q (or None)."""
    ent: dict[str, list[tuple[ObjectProposal, torch.Tensor]]] = {sid: [] for sid in ids}
    rel: dict[str, torch.Tensor | None] = {sid: None for sid in ids}
    for e in entries:
        if e.sample_id not in ent:
            continue
        q = torch.tensor(e.probs, dtype=torch.float32)
        if e.kind == "entity":
            ent[e.sample_id].append((e.proposal, q))
        else:
            rel[e.sample_id] = q
    return [ent[s] for s in ids], [rel[s] for s in ids]


@dataclass
class PretrainResult:
    model: PretrainModel
    log: list[dict]
    checkpoint: Path
    data: PretrainData
    cache_stats: CacheStats = field(default_factory=CacheStats)


def build_pretrain_model(config: RunConfig, data: PretrainData) -> PretrainModel:
    model = PretrainModel(config.encoder, len(data.entities), len(data.relations))
    if config.paths.init_checkpoint:
        load_encoder_weights(model.encoder, load_checkpoint(config.paths.init_checkpoint))
    return model


def run_gen_pseudo_labels(config: RunConfig) -> Path:
    seed_everything(config.seed)
    tok = load_tokenizer(config)
    data = load_pretrain_data(config, tok)
    model = build_pretrain_model(config, data)
    stats = CacheStats()
    entries = generate_pseudo_labels(config, data, pseudo_label_encoder(config, model), tok, make_detector(config), stats)
    out = Path(config.paths.pseudo_label_cache or Path(config.paths.out_dir) / "pseudo_labels.jsonl")
    write_cache(out, entries)
    (out.parent / "entities.txt").write_text("".join(e + "\n" for e in data.entities))
    log.info("wrote %d pseudo-labels to %s (%d samples without proposals, %d detector failures)",
             len(entries), out, stats.no_proposal, len(stats.detector_failures))
    return out


def run_pretrain(config: RunConfig) -> PretrainResult:
    seed_everything(config.seed)
    out_dir = Path(config.paths.out_dir)
    tok = load_tokenizer(config)
    data = load_pretrain_data(config, tok)
    model = build_pretrain_model(config, data)
    tau = config.encoder.temperature

    stats = CacheStats()
    if config.pseudo.on_the_fly:
        detector = make_detector(config)
        teacher = pseudo_label_encoder(config, model)
        refresh = not config.pseudo.freeze
        targets = index_pseudo_labels(generate_pseudo_labels(config, data, teacher, tok, detector, stats), data.ids)
    else:
        cache = config.paths.pseudo_label_cache
        if not cache or not Path(cache).exists():
            raise ConfigError("pseudo-label cache missing and pseudo.on_the_fly is disabled")
        entries = read_cache(cache)
        for e in entries:
            expected = len(data.entities) if e.kind == "entity" else len(data.relations)
            if len(e.probs) != expected:
                raise ConfigError(f"cache entry for {e.sample_id} has {len(e.probs)} {e.kind} classes, expected {expected}")
        targets = index_pseudo_labels(entries, data.ids)
        refresh = False

    optimizer = make_optimizer(model.trainable_parameters(), config)
    meta = {"num_entities": len(data.entities), "num_relations": len(data.relations),
            "entities": data.entities, "relations": data.relations}
    rows: list[dict] = []
    current_epoch = 0
    model.train()
    for step, epoch, idx in batches(len(data.ids), config.batch.pretrain, config.seed, config.max_steps):
        if epoch != current_epoch:
            current_epoch = epoch
            if refresh:
                targets = index_pseudo_labels(
                    generate_pseudo_labels(config, data, teacher, tok, detector, CacheStats()), data.ids
                )
        enc = model.encoder([data.tokens[i] for i in idx], data.patches[idx])
        parts = pretrain_losses(
            enc.fused, enc.text.summary, enc.visual.summary, model.heads, model.encoder.projection,
            data.labels[idx], [targets[0][i] for i in idx], [targets[1][i] for i in idx],
            config.loss_weights, tau,
        )
        optimizer.zero_grad(set_to_none=True)
        if parts.total.requires_grad:
            parts.total.backward()
            optimizer.step()
        row = {"step": step + 1, "epoch": epoch, **parts.as_floats(), "itm_accuracy": parts.itm_accuracy,
               "coe_terms": parts.coe_terms, "coe_excluded": parts.coe_excluded}
        rows.append(row)
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"pretrain_step{step + 1}.pt", model, config, step + 1, meta)

    meta["truncated"] = data.truncated
    ckpt = save_checkpoint(out_dir / "pretrain.pt", model, config, config.max_steps, meta)
    _write_log(out_dir / "pretrain_log.jsonl", rows)
    write_run_summary(out_dir / "pretrain_summary.json", steps=len(rows), truncated=data.truncated,
                      samples_without_proposals=stats.no_proposal, detector_failures=len(stats.detector_failures))
    return PretrainResult(model, rows, ckpt, data, stats)


@torch.no_grad()
def itm_accuracy(model: PretrainModel, data: PretrainData, batch_size: int = 64) -> float:
    was = model.training
    model.eval()
    correct = 0
    for s in range(0, len(data.ids), batch_size):
        idx = list(range(s, min(s + batch_size, len(data.ids))))
        enc = model.encoder([data.tokens[i] for i in idx], data.patches[idx])
        pred = (model.heads.match_probs(enc.fused) > 0.5).long()
        correct += int((pred == data.labels[idx]).sum())
    model.train(was)
    return correct / len(data.ids)


# -- fine-tuning ------------------------------------------------------------------

@dataclass
class TaskData:
    ids: list[str]
    tokens: list[list[int]]
    patches: torch.Tensor
    targets: list  # label-id sequences (NER) or relation ids (RE)
    markers: list | None = None  # RE marker positions


def load_ner_split(path: str, config: RunConfig, tok: Tokenizer, schema: LabelSchema) -> TaskData:
    sents = read_ner_corpus(path)
    store = image_store(config)
    limit = config.encoder.max_text_len
    tokens, targets = [], []
    for s in sents:
        if len(s.tokens) > limit:
            tok.truncated += 1
        tokens.append(tok.convert(s.tokens[:limit]))
        targets.append(schema.encode(s.tags[:limit]))
    patches = torch.stack([store.load(s.image_id) for s in sents])
    return TaskData([f"{i}" for i in range(len(sents))], tokens, patches, targets)


def relation_labels(config: RunConfig) -> list[str]:
    if config.re.relations:
        return list(config.re.relations)
    recs = read_re_corpus(require(config.paths.re_train, "re_train"))
    return sorted({r.relation for r in recs})


def load_re_split(path: str, config: RunConfig, tok: Tokenizer, relations: Sequence[str]) -> TaskData:
    recs = read_re_corpus(path)
    store = image_store(config)
    index = {r: i for i, r in enumerate(relations)}
    tokens, targets, markers = [], [], []
    for r in recs:
        if r.relation not in index:
            raise InputError(f"{path}: record {r.id} has unknown relation {r.relation!r}")
        marked = inject_entity_markers(tok.convert(r.tokens), r.head, r.tail,
                                       config.encoder.vocab_size, config.encoder.max_text_len)
        tokens.append(list(marked.token_ids))
        markers.append(marked.marker_positions)
        targets.append(index[r.relation])
    patches = torch.stack([store.load(r.image_id) for r in recs])
    return TaskData([r.id for r in recs], tokens, patches, targets, markers)


def _chunks(n: int, size: int):
    for s in range(0, n, size):
        yield list(range(s, min(n, s + size)))


@torch.no_grad()
def predict_ner(model: NERModel, data: TaskData, batch_size: int = 32) -> list[list[int]]:
    was = model.training
    model.eval()
    preds = []
    for idx in _chunks(len(data.tokens), batch_size):
        enc = model.encoder([data.tokens[i] for i in idx], data.patches[idx])
        preds += model.tagger.decode(enc.fused)
    model.train(was)
    return preds


@torch.no_grad()
def predict_re(model: REModel, data: TaskData, batch_size: int = 32) -> torch.Tensor:
    was = model.training
    model.eval()
    out = []
    for idx in _chunks(len(data.tokens), batch_size):
        enc = model.encoder([data.tokens[i] for i in idx], data.patches[idx])
        out.append(model.classifier(enc.fused, [data.markers[i] for i in idx]))
    model.train(was)
    return torch.cat(out)


def score_ner(model: NERModel, data: TaskData):
    preds = predict_ner(model, data)
    return corpus_span_scores(preds, data.targets, model.tagger.schema), preds


def score_re(model: REModel, data: TaskData, relations: Sequence[str], negative: str | None):
    logits = predict_re(model, data)
    pred = [relations[i] for i in logits.argmax(-1).tolist()]
    gold = [relations[i] for i in data.targets]
    micro, table = relation_metrics(pred, gold, negative)
    return (micro, {k: v.scores() for k, v in table.items()}), logits


@dataclass
class FinetuneResult:
    model: torch.nn.Module
    log: list[dict]
    best_checkpoint: Path | None
    final_checkpoint: Path


def run_finetune(config: RunConfig, task: str) -> FinetuneResult:
    if task not in ("ner", "re"):
        raise ConfigError(f"unknown fine-tuning task {task!r}")
    seed_everything(config.seed)
    out_dir = Path(config.paths.out_dir)
    tok = load_tokenizer(config)

    if task == "ner":
        schema = LabelSchema(config.ner.entity_types)
        train = load_ner_split(require(config.paths.ner_train, "ner_train"), config, tok, schema)
        dev = load_ner_split(config.paths.ner_dev, config, tok, schema) if config.paths.ner_dev else None
        model = NERModel(config.encoder, schema)
        meta = {"entity_types": schema.entity_types}

        def step_loss(idx, enc):
            return model.tagger.loss(enc.fused, [train.targets[i] for i in idx])

        def evaluate(data):
            (micro, _), _ = score_ner(model, data)
            return micro
    else:
        relations = relation_labels(config)
        negative = config.re.negative_label
        train = load_re_split(require(config.paths.re_train, "re_train"), config, tok, relations)
        dev = load_re_split(config.paths.re_dev, config, tok, relations) if config.paths.re_dev else None
        model = REModel(config.encoder, len(relations))
        meta = {"relations": relations, "negative_label": negative}

        def step_loss(idx, enc):
            logits = model.classifier(enc.fused, [train.markers[i] for i in idx])
            return mre_loss(logits, [train.targets[i] for i in idx])

        def evaluate(data):
            (micro, _), _ = score_re(model, data, relations, negative)
            return micro

    if config.paths.init_checkpoint:
        load_encoder_weights(model.encoder, load_checkpoint(config.paths.init_checkpoint))
    optimizer = make_optimizer(model.trainable_parameters(), config)

    rows: list[dict] = []
    best_f1, best_path = -1.0, None
    per_epoch = math.ceil(len(train.tokens) / config.batch.finetune)
    model.train()
    for step, epoch, idx in batches(len(train.tokens), config.batch.finetune, config.seed, config.max_steps):
        enc = model.encoder([train.tokens[i] for i in idx], train.patches[idx])
        loss = step_loss(idx, enc)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        row = {"step": step + 1, "epoch": epoch, "loss": loss.item()}
        if (step + 1) % per_epoch == 0 or step + 1 == config.max_steps:
            if config.eval_train:
                row["train_p"], row["train_r"], row["train_f1"] = evaluate(train)
            if dev is not None:
                row["dev_p"], row["dev_r"], row["dev_f1"] = evaluate(dev)
                if row["dev_f1"] > best_f1:
                    best_f1 = row["dev_f1"]
                    best_path = save_checkpoint(out_dir / f"{task}_best.pt", model, config, step + 1, meta)
        rows.append(row)

    final = save_checkpoint(out_dir / f"{task}_final.pt", model, config, config.max_steps, meta)
    _write_log(out_dir / f"finetune_{task}_log.jsonl", rows)
    write_run_summary(out_dir / f"finetune_{task}_summary.json", steps=len(rows), truncated=tok.truncated,
                      best_dev_f1=best_f1 if best_path else None)
    return FinetuneResult(model, rows, best_path, final)


# -- evaluation ---------------------------------------------------------------------

def write_metrics_report(out_dir, task: str, split: str, micro, per_label: dict) -> Path:
    """``metrics_<task>_<split>.jsonl`` ({metric, split, value}) plus a text summary table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [{"metric": m, "split": split, "value": v} for m, v in zip(("precision", "recall", "f1"), micro)]
    for label, (p, r, f) in per_label.items():
        rows += [{"metric": f"{m}/{label}", "split": split, "value": v}
                 for m, v in zip(("precision", "recall", "f1"), (p, r, f))]
    path = out_dir / f"metrics_{task}_{split}.jsonl"
    _write_log(path, rows)
    lines = [f"{task} / {split}", f"{'label':<24}{'P':>8}{'R':>8}{'F1':>8}"]
    lines.append(f"{'(micro)':<24}" + "".join(f"{v:8.4f}" for v in micro))
    for label, scores in per_label.items():
        lines.append(f"{label:<24}" + "".join(f"{v:8.4f}" for v in scores))
    (out_dir / f"metrics_{task}_{split}.txt").write_text("\n".join(lines) + "\n")
    return path


def run_eval(config: RunConfig) -> dict:
    ckpt_path = config.eval.checkpoint or config.paths.init_checkpoint
    if not ckpt_path:
        out = Path(config.paths.out_dir)
        found = [p for p in (out / f"{config.eval.task}_best.pt", out / f"{config.eval.task}_final.pt") if p.exists()]
        if not found:
            raise ConfigError(f"no eval.checkpoint given and no {config.eval.task} checkpoint in {out}")
        ckpt_path = found[0]
    payload = load_checkpoint(ckpt_path)
    task = payload["task"]
    if task not in ("ner", "re"):
        raise ConfigError(f"cannot evaluate a {task!r} checkpoint")
    split = config.eval.split
    split_path = getattr(config.paths, f"{task}_{split}", None)
    if not split_path or not Path(split_path).exists():
        raise InputError(f"split {split!r} for task {task!r} not found (paths.{task}_{split}={split_path!r})")
    model = model_from_checkpoint(payload)
    tok = load_tokenizer(config)
    out_dir = Path(config.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if task == "ner":
        schema = model.tagger.schema
        data = load_ner_split(split_path, config, tok, schema)
        (micro, per_type), preds = score_ner(model, data)
        with open(out_dir / f"predictions_ner_{split}.txt", "w", encoding="utf-8") as fh:
            for p in preds:
                fh.write(" ".join(schema.decode(p)) + "\n")
        report = write_metrics_report(out_dir, task, split, micro, per_type)
        per_label = per_type
    else:
        relations = payload["meta"]["relations"]
        negative = payload["meta"].get("negative_label")
        data = load_re_split(split_path, config, tok, relations)
        (micro, per_label), logits = score_re(model, data, relations, negative)
        top2 = logits.topk(min(2, logits.shape[-1]), dim=-1).values
        with open(out_dir / f"predictions_re_{split}.jsonl", "w", encoding="utf-8") as fh:
            for i, row in enumerate(logits):
                margin = float(top2[i, 0] - top2[i, 1]) if top2.shape[-1] > 1 else 0.0
                fh.write(json.dumps({
                    "instance_id": data.ids[i],
                    "predicted_relation": relations[int(row.argmax())],
                    "gold_relation": relations[data.targets[i]],
                    "logit_margin": margin,
                }) + "\n")
        report = write_metrics_report(out_dir, task, split, micro, per_label)
    return {"task": task, "split": split, "precision": micro[0], "recall": micro[1], "f1": micro[2],
            "per_label": per_label, "report": str(report)}
