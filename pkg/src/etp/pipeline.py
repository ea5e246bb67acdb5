"""Two-phase training orchestration.

Phase one trains the explainer's task and explanation heads jointly on
the shared encoder, minimizing task loss plus lambda times the
explanation loss, with early stopping on the validation sum of task
macro F1 and token F1. Phase two freezes the best explainer, keeps only
training instances whose auxiliary prediction matches the gold label,
rebuilds every document as a wildcard-masked rationale, and trains an
independently parameterized predictor on those masked inputs (early
stopping on validation macro F1 alone; validation is never filtered).

Inference composes the frozen pieces: explain, mask, predict. The
auxiliary head plays no part in it.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses, metrics
from .autodiff import Tape, Tensor
from .data import Batch, Dataset, Instance, Vocabulary, batchify, subtokenize
from .models import (
    ExplainerModel,
    ModelConfig,
    PredictorModel,
    decode_spans,
    load_model,
    mask_input,
    pool_subtokens,
    subtoken_spans_to_words,
    word_spans_to_subtokens,
)
from .optim import Adam, OptimizerError

__all__ = [
    "TrainConfig",
    "EpochStats",
    "TrainHistory",
    "PipelineState",
    "PipelineError",
    "InferResult",
    "train_explainer",
    "filter_training_instances",
    "build_masked_dataset",
    "train_predictor",
    "run_pipeline",
    "infer",
    "infer_many",
    "faithfulness",
    "evaluate",
    "save_run",
    "load_run",
    "dump_flat_config",
    "parse_flat_config",
    "coerce_config",
]

logger = logging.getLogger("etp.pipeline")

# Offset separating the predictor's init stream from the explainer's.
_PREDICTOR_SEED_OFFSET = 7919


class PipelineError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Knobs for both training phases and the model family."""

    lam: float = 5.0
    epochs: int = 10
    patience: int = 3
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    wildcard: str = "."
    head: str = "token"
    threshold: float = 0.5
    exp_weighting: str = "inverse_prior"
    max_len: int = 512
    subtoken_mode: str = "word"
    embed_dim: int = 64
    enc_hidden: int = 64
    enc_layers: int = 2
    task_hidden: int = 256
    token_gru_hidden: int = 128
    span_hidden: int = 64
    dropout: float = 0.1

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.patience < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 1, patience >= 0, batch_size >= 1 required")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.head not in ("token", "span"):
            raise ValueError(f"unknown explanation head {self.head!r}")
        if self.exp_weighting not in losses.WEIGHTING_MODES:
            raise ValueError(f"unknown exp_weighting {self.exp_weighting!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        return self

    def model_config(self, vocab_size: int, num_classes: int, span_len: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            num_classes=num_classes,
            embed_dim=self.embed_dim,
            enc_hidden=self.enc_hidden,
            enc_layers=self.enc_layers,
            task_hidden=self.task_hidden,
            token_gru_hidden=self.token_gru_hidden,
            span_hidden=self.span_hidden,
            span_len=span_len,
            dropout=self.dropout,
            head=self.head,
        )


@dataclass
class EpochStats:
    epoch: int
    l_task: float
    l_exp: float
    l_loss: float
    val_macro_f1: float
    val_token_f1: float | None


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    diverged: bool = False


@dataclass
class PipelineState:
    explainer: ExplainerModel
    predictor: PredictorModel
    stage1: TrainHistory
    stage2: TrainHistory
    cfg: TrainConfig
    vocab: Vocabulary
    label_map: dict[str, int]

    def label_name(self, index: int):
        for raw, idx in self.label_map.items():
            if idx == index:
                return raw
        raise KeyError(index)


@dataclass
class InferResult:
    uid: str
    label: int
    probs: np.ndarray
    rationale_mask: np.ndarray
    spans: list[tuple[int, int]]
    scores: np.ndarray


# ---------------------------------------------------------------------------
# vocabulary under the configured sub-token mode


def build_vocab(train_instances, cfg: TrainConfig) -> Vocabulary:
    corpus = []
    for inst in train_instances:
        for word in inst.document + (inst.query or []):
            corpus.extend(subtokenize(word, cfg.subtoken_mode))
    return Vocabulary.build(corpus, wildcard=cfg.wildcard)


def _ensure_vocab(dataset_vocab: Vocabulary | None, train, cfg: TrainConfig) -> Vocabulary:
    if (
        dataset_vocab is not None
        and cfg.subtoken_mode == "word"
        and dataset_vocab.wildcard == cfg.wildcard
    ):
        return dataset_vocab
    return build_vocab(train, cfg)


def _span_len(instances_groups, cfg: TrainConfig) -> int:
    longest = 1
    for insts in instances_groups:
        for inst in insts:
            n = sum(len(subtokenize(w, cfg.subtoken_mode)) for w in inst.document)
            longest = max(longest, n)
    return min(longest, cfg.max_len)


# ---------------------------------------------------------------------------
# forward helpers


def _exp_loss(model: ExplainerModel, enc, batch: Batch, cfg: TrainConfig) -> Tensor:
    if cfg.head == "token":
        scores = model.explain_tokens(enc, batch.doc_mask)
        return losses.token_explanation_loss(
            scores, batch.doc_row_index, batch.doc_targets, cfg.exp_weighting
        )
    sf = model.explain_spans(enc, batch.doc_start, batch.doc_sublen)
    B = batch.size
    per_instance = []
    for b in range(B):
        n = int(batch.doc_sublen[b])
        sub_spans = word_spans_to_subtokens(batch.gold_spans[b], batch.word_groups[b])
        targets = np.zeros(n)
        for s, _ in sub_spans:
            targets[s] = 1.0
        p_b = ad.take_rows(sf.p_start, np.arange(n) * B + b)
        start = losses.span_start_loss(p_b, targets)
        end = losses.span_end_loss(sf.p_end[b], sub_spans)
        per_instance.append(losses.span_total_loss(start, end))
    total = per_instance[0]
    for term in per_instance[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / B)


def _predict_labels(model, batches: list[Batch]) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode class predictions over pre-built batches."""
    all_probs = []
    for batch in batches:
        enc = model.encode(batch.ids, batch.pad_mask)
        all_probs.append(model.predict_task(enc).data)
    probs = np.concatenate(all_probs, axis=0)
    return probs.argmax(axis=1), probs


def _explain_batch(model: ExplainerModel, batch: Batch, cfg: TrainConfig):
    """Eval-mode rationale extraction; per instance word-level
    (scores, hard mask, spans) over the kept words."""
    out = []
    if cfg.head == "token":
        scores = model.explain_tokens(
            model.encode(batch.ids, batch.pad_mask), batch.doc_mask
        ).data
        for b in range(batch.size):
            sub = scores[batch.doc_row_index[b], 0]
            word_scores = pool_subtokens(sub, batch.word_groups[b])
            hard = (word_scores >= cfg.threshold).astype(np.int8)
            out.append((word_scores, hard, metrics.mask_to_spans(hard)))
        return out
    sf = model.explain_spans(
        model.encode(batch.ids, batch.pad_mask), batch.doc_start, batch.doc_sublen
    )
    for b in range(batch.size):
        n = int(batch.doc_sublen[b])
        spans_sub = decode_spans(
            sf.start_numpy(b), sf.p_end[b].data, threshold=cfg.threshold, length=n
        )
        spans_w = subtoken_spans_to_words(spans_sub, batch.word_groups[b])
        hard = metrics.spans_to_mask(spans_w, batch.word_counts[b])
        out.append((hard.astype(np.float64), hard, spans_w))
    return out


def _explain_instances(model, instances, vocab, cfg):
    results = []
    for batch in batchify(instances, cfg.batch_size, vocab, cfg.max_len, cfg.subtoken_mode):
        results.extend(_explain_batch(model, batch, cfg))
    return results


def _gold_word_masks(batches: list[Batch]) -> list[np.ndarray]:
    out = []
    for batch in batches:
        for inst, count in zip(batch.instances, batch.word_counts):
            out.append(np.asarray(inst.rationale_mask[:count]))
    return out


def _validation_scores(model, batches, cfg, num_classes, with_exp: bool):
    gold = np.concatenate([b.labels for b in batches])
    pred, _ = _predict_labels(model, batches)
    macro = metrics.macro_f1(pred, gold, num_classes)
    if not with_exp:
        return macro, None
    pred_masks = []
    for batch in batches:
        pred_masks.extend(hard for _, hard, _ in _explain_batch(model, batch, cfg))
    token = metrics.token_prf_dataset(pred_masks, _gold_word_masks(batches))["f1"]
    return macro, token


# ---------------------------------------------------------------------------
# training loops


def _train_loop(model, train, val, cfg: TrainConfig, vocab, num_classes, stage: int):
    """Shared epoch loop; stage 1 optimizes the combined loss and stops
    on macro F1 + token F1, stage 2 optimizes the task loss alone and
    stops on macro F1."""
    if not val:
        raise PipelineError("validation set must be nonempty")
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    shuffle_rng = np.random.default_rng(cfg.seed + 11 + stage)
    dropout_rng = np.random.default_rng(cfg.seed + 23 + stage)
    val_batches = batchify(val, cfg.batch_size, vocab, cfg.max_len, cfg.subtoken_mode)
    history = TrainHistory()
    best_criterion = -np.inf
    best_state = model.state_arrays()
    bad_epochs = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        shuffled = [train[i] for i in order]
        sums = np.zeros(3)
        count = 0
        diverged = False
        for batch in batchify(shuffled, cfg.batch_size, vocab, cfg.max_len, cfg.subtoken_mode):
            with Tape() as tape:
                enc = model.encode(batch.ids, batch.pad_mask)
                probs = model.predict_task(enc, train=True, dropout_rng=dropout_rng)
                l_task = losses.task_loss(probs, batch.labels)
                if stage == 1:
                    l_exp = _exp_loss(model, enc, batch, cfg)
                    bd = losses.combined_loss(l_task, l_exp, cfg.lam)
                else:
                    bd = losses.combined_loss(l_task, Tensor(0.0), 0.0)
                values = bd.values()
                if not np.isfinite(values).all():
                    diverged = True
                    break
                tape.backward(bd.total)
            try:
                opt.step()
            except OptimizerError:
                diverged = True
                break
            opt.zero_grad()
            sums += np.array(values) * batch.size
            count += batch.size
        if diverged:
            logger.warning("stage %d: non-finite loss at epoch %d; restoring best weights", stage, epoch)
            history.diverged = True
            break
        l_task_m, l_exp_m, l_loss_m = (sums / max(count, 1)).tolist()
        macro, token = _validation_scores(model, val_batches, cfg, num_classes, stage == 1)
        criterion = macro + token if stage == 1 else macro
        history.epochs.append(
            EpochStats(epoch, l_task_m, l_exp_m, l_loss_m, macro, token)
        )
        logger.info(
            "stage %d epoch %d: loss %.4f (task %.4f, exp %.4f) val macro F1 %.4f%s",
            stage,
            epoch,
            l_loss_m,
            l_task_m,
            l_exp_m,
            macro,
            "" if token is None else f" token F1 {token:.4f}",
        )
        if criterion > best_criterion:
            best_criterion = criterion
            best_state = model.state_arrays()
            history.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience > 0:
                history.stopped_early = True
                break
    model.load_state(best_state)
    return model, history


def train_explainer(train, val, cfg: TrainConfig, vocab: Vocabulary, num_classes: int):
    """Phase-one multi-task training; returns the best-epoch explainer."""
    cfg.validate()
    span_len = _span_len((train, val), cfg) if cfg.head == "span" else 512
    model = ExplainerModel(cfg.model_config(len(vocab), num_classes, span_len), seed=cfg.seed)
    return _train_loop(model, train, val, cfg, vocab, num_classes, stage=1)


def filter_training_instances(model, instances, vocab: Vocabulary, cfg: TrainConfig):
    """Keep exactly the instances whose auxiliary prediction matches the
    gold label. Applies to training data only; callers must never filter
    validation or test sets."""
    batches = batchify(instances, cfg.batch_size, vocab, cfg.max_len, cfg.subtoken_mode)
    pred, _ = _predict_labels(model, batches)
    gold = np.concatenate([b.labels for b in batches])
    kept = [inst for inst, p, g in zip(instances, pred, gold) if p == g]
    if not kept:
        logger.warning("auxiliary filter removed every training instance")
    return kept


def build_masked_dataset(model, instances, vocab: Vocabulary, cfg: TrainConfig):
    """Replace each document with its wildcard-masked hard rationale."""
    explained = _explain_instances(model, instances, vocab, cfg)
    masked = []
    for inst, (_, hard, _) in zip(instances, explained):
        full_mask = np.zeros(len(inst.document), dtype=np.int8)
        full_mask[: len(hard)] = hard
        masked_doc = mask_input(inst.document, full_mask, cfg.wildcard)
        masked.append(replace(inst, document=masked_doc))
    return masked


def train_predictor(masked_train, masked_val, cfg: TrainConfig, vocab: Vocabulary, num_classes: int):
    """Phase-two training on masked inputs, task loss only."""
    cfg.validate()
    if not masked_train:
        raise PipelineError("stage 2 cannot proceed on an empty training set")
    model = PredictorModel(
        cfg.model_config(len(vocab), num_classes, 512), seed=cfg.seed + _PREDICTOR_SEED_OFFSET
    )
    return _train_loop(model, masked_train, masked_val, cfg, vocab, num_classes, stage=2)


def run_pipeline(dataset: Dataset, cfg: TrainConfig) -> PipelineState:
    cfg.validate()
    train = dataset.splits["train"]
    val = dataset.splits.get("val")
    if not val:
        raise PipelineError("pipeline needs a validation split")
    vocab = _ensure_vocab(dataset.vocab, train, cfg)
    num_classes = dataset.num_classes
    explainer, hist1 = train_explainer(train, val, cfg, vocab, num_classes)
    kept = filter_training_instances(explainer, train, vocab, cfg)
    logger.info("auxiliary filter kept %d / %d training instances", len(kept), len(train))
    masked_train = build_masked_dataset(explainer, kept, vocab, cfg)
    masked_val = build_masked_dataset(explainer, val, vocab, cfg)
    predictor, hist2 = train_predictor(masked_train, masked_val, cfg, vocab, num_classes)
    return PipelineState(
        explainer=explainer,
        predictor=predictor,
        stage1=hist1,
        stage2=hist2,
        cfg=cfg,
        vocab=vocab,
        label_map=dataset.label_map,
    )


# ---------------------------------------------------------------------------
# inference and evaluation


def infer_many(state: PipelineState, instances) -> list[InferResult]:
    """Explain, mask, and predict for a list of instances.

    The label comes from the predictor run on the wildcard-masked
    document; the auxiliary head's output is ignored. Returned masks and
    score vectors cover the full document (words dropped by truncation
    score 0).
    """
    cfg, vocab = state.cfg, state.vocab
    explained = _explain_instances(state.explainer, instances, vocab, cfg)
    full_masks = []
    full_scores = []
    spans = []
    for inst, (word_scores, hard, word_spans) in zip(instances, explained):
        mask = np.zeros(len(inst.document), dtype=np.int8)
        mask[: len(hard)] = hard
        scores = np.zeros(len(inst.document))
        scores[: len(word_scores)] = word_scores
        full_masks.append(mask)
        full_scores.append(scores)
        spans.append(word_spans)
    masked = [
        replace(inst, document=mask_input(inst.document, m, cfg.wildcard))
        for inst, m in zip(instances, full_masks)
    ]
    batches = batchify(masked, cfg.batch_size, vocab, cfg.max_len, cfg.subtoken_mode)
    labels, probs = _predict_labels(state.predictor, batches)
    return [
        InferResult(
            uid=inst.uid,
            label=int(labels[i]),
            probs=probs[i],
            rationale_mask=full_masks[i],
            spans=spans[i],
            scores=full_scores[i],
        )
        for i, inst in enumerate(instances)
    ]


def infer(state: PipelineState, instance: Instance) -> InferResult:
    return infer_many(state, [instance])[0]


def faithfulness(state: PipelineState, instances, rationale_masks):
    """Batched comprehensiveness and sufficiency of given rationales.

    Equivalent to calling the two metric functions instance by instance
    with a keep-mask closure over the predictor; batching just amortizes
    the three forward passes (full, rationale-stripped, rationale-only).
    """
    cfg, vocab = state.cfg, state.vocab

    def probs_for(variant):
        batches = batchify(variant, cfg.batch_size, vocab, cfg.max_len, cfg.subtoken_mode)
        return _predict_labels(state.predictor, batches)[1]

    stripped = [
        replace(inst, document=mask_input(inst.document, 1 - np.asarray(m), cfg.wildcard))
        for inst, m in zip(instances, rationale_masks)
    ]
    only = [
        replace(inst, document=mask_input(inst.document, np.asarray(m), cfg.wildcard))
        for inst, m in zip(instances, rationale_masks)
    ]
    p_full = probs_for(list(instances))
    p_stripped = probs_for(stripped)
    p_only = probs_for(only)
    cls = p_full.argmax(axis=1)
    idx = np.arange(len(instances))
    comp = p_full[idx, cls] - p_stripped[idx, cls]
    suff = p_full[idx, cls] - p_only[idx, cls]
    return comp, suff


def keep_mask_closure(state: PipelineState, instance: Instance):
    """predict_proba(keep) closure for the per-instance metric functions."""
    cfg, vocab = state.cfg, state.vocab

    def predict_proba(keep):
        doc = (
            instance.document
            if keep is None
            else mask_input(instance.document, keep, cfg.wildcard)
        )
        batch = batchify(
            [replace(instance, document=doc)], 1, vocab, cfg.max_len, cfg.subtoken_mode
        )[0]
        enc = state.predictor.encode(batch.ids, batch.pad_mask)
        return state.predictor.predict_task(enc).data[0]

    return predict_proba


def evaluate(state: PipelineState, instances, with_faithfulness: bool = True) -> metrics.MetricsReport:
    """Full metric battery for end-to-end predictions on ``instances``."""
    if not instances:
        raise PipelineError("cannot evaluate an empty instance list")
    results = infer_many(state, instances)
    gold_labels = np.array([inst.label for inst in instances])
    pred_labels = np.array([r.label for r in results])
    gold_masks = [np.asarray(inst.rationale_mask) for inst in instances]
    gold_spans = [inst.rationale_spans for inst in instances]
    pred_masks = [r.rationale_mask for r in results]
    pred_spans = [r.spans for r in results]
    prf = metrics.token_prf_dataset(pred_masks, gold_masks)
    comp_mean = suff_mean = None
    if with_faithfulness:
        comp, suff = faithfulness(state, instances, pred_masks)
        comp_mean = float(comp.mean())
        suff_mean = float(suff.mean())
    return metrics.MetricsReport(
        macro_f1=metrics.macro_f1(pred_labels, gold_labels, len(state.label_map)),
        token_precision=prf["precision"],
        token_recall=prf["recall"],
        token_f1=prf["f1"],
        token_f1_micro=prf["micro_f1"],
        iou_f1=metrics.iou_f1_dataset(pred_spans, gold_spans),
        auprc=metrics.auprc_dataset([r.scores for r in results], gold_masks),
        comprehensiveness=comp_mean,
        sufficiency=suff_mean,
        statistics=metrics.explanation_statistics(pred_spans, gold_spans),
        n_instances=len(instances),
    )


# ---------------------------------------------------------------------------
# flat key=value config files


def dump_flat_config(obj) -> str:
    lines = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def parse_flat_config(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce_config(cls, mapping: dict[str, str], **overrides):
    """Build a dataclass from string key=value pairs plus typed overrides."""
    kwargs = {}
    by_name = {f.name: f for f in fields(cls)}
    for key, raw in mapping.items():
        if key not in by_name:
            raise ValueError(f"unknown config key {key!r} for {cls.__name__}")
        kwargs[key] = _coerce_value(by_name[key].type, raw)
    kwargs.update(overrides)
    return cls(**kwargs)


def _coerce_value(annotation: str, raw: str):
    ann = str(annotation)
    if "tuple" in ann:
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(int(p) for p in parts)
    if "bool" in ann:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    if "int" in ann:
        return int(raw)
    if "float" in ann:
        return float(raw)
    return raw


# ---------------------------------------------------------------------------
# run directories


def _write_history_csv(path, history: TrainHistory) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_task", "l_exp", "l_loss", "val_macro_f1", "val_token_f1"])
        for row in history.epochs:
            writer.writerow(
                [
                    row.epoch,
                    repr(row.l_task),
                    repr(row.l_exp),
                    repr(row.l_loss),
                    repr(row.val_macro_f1),
                    "" if row.val_token_f1 is None else repr(row.val_token_f1),
                ]
            )


def write_predictions(path, state: PipelineState, instances, results) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst, res in zip(instances, results):
            obj = {
                "id": inst.uid,
                "label": state.label_name(res.label),
                "rationale": [int(v) for v in res.rationale_mask],
                "spans": [[int(s), int(e)] for s, e in res.spans],
                "scores": [float(v) for v in res.scores],
            }
            fh.write(json.dumps(obj) + "\n")


def save_run(run_dir, state: PipelineState, report: metrics.MetricsReport | None = None) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "train_config.txt").write_text(dump_flat_config(state.cfg), encoding="utf-8")
    state.explainer.save(run_dir / "explainer.npz")
    state.predictor.save(run_dir / "predictor.npz")
    state.vocab.save(run_dir / "vocab.txt")
    (run_dir / "labels.json").write_text(
        json.dumps(state.label_map, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_history_csv(run_dir / "stage1_metrics.csv", state.stage1)
    _write_history_csv(run_dir / "stage2_metrics.csv", state.stage2)
    if report is not None:
        (run_dir / "metrics.json").write_text(report.to_json(), encoding="utf-8")
        (run_dir / "metrics.txt").write_text(report.to_text(), encoding="utf-8")


def load_run(run_dir) -> PipelineState:
    run_dir = Path(run_dir)
    for name in ("explainer.npz", "predictor.npz", "train_config.txt"):
        if not (run_dir / name).exists():
            raise PipelineError(f"run directory {run_dir} is missing {name}")
    cfg = coerce_config(TrainConfig, parse_flat_config((run_dir / "train_config.txt").read_text()))
    explainer = load_model(run_dir / "explainer.npz")
    predictor = load_model(run_dir / "predictor.npz")
    vocab = Vocabulary.load(run_dir / "vocab.txt")
    label_map = {
        str(k): int(v) for k, v in json.loads((run_dir / "labels.json").read_text()).items()
    }
    return PipelineState(
        explainer=explainer,
        predictor=predictor,
        stage1=TrainHistory(),
        stage2=TrainHistory(),
        cfg=cfg,
        vocab=vocab,
        label_map=label_map,
    )
