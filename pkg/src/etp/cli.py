"""Command-line interface.

Subcommands: ``gen-data`` (synthetic dataset), ``train`` (both phases +
test metrics), ``predict`` (write predictions JSONL), ``eval`` (metric
battery for a run or an external predictions file), and ``sweep``
(train/evaluate across a lambda grid and select the best point).

Every command accepts ``--config FILE`` with flat ``key = value`` lines;
explicit command-line flags override file values. Training commands
persist their resolved configuration into the run directory before any
work starts, so a run is reproducible from its artifacts alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics, pipeline
from .data import (
    DataError,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_jsonl,
    write_dataset,
)
from .pipeline import (
    PipelineError,
    TrainConfig,
    coerce_config,
    dump_flat_config,
    parse_flat_config,
)

logger = logging.getLogger("etp.cli")

SWEEP_COLUMNS = [
    "lambda",
    "macro_f1",
    "token_f1",
    "iou_f1",
    "auprc",
    "comprehensiveness",
    "sufficiency",
    "criterion",
]


def _config_mapping(args) -> dict[str, str]:
    if not args.config:
        return {}
    return parse_flat_config(Path(args.config).read_text(encoding="utf-8"))


def _train_config(args) -> TrainConfig:
    """Resolve TrainConfig from defaults, then config file, then flags."""
    mapping = _config_mapping(args)
    known = {f for f in TrainConfig.__dataclass_fields__}
    mapping = {k: v for k, v in mapping.items() if k in known}
    overrides = {}
    for name in known:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return coerce_config(TrainConfig, mapping, **overrides).validate()


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="explanation loss weight")
    p.add_argument("--head", choices=["token", "span"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None, help="hard-rationale score threshold")
    p.add_argument(
        "--exp-weighting",
        dest="exp_weighting",
        choices=["inverse_prior", "literal_count", "none"],
        default=None,
    )
    p.add_argument("--wildcard", default=None)
    p.add_argument("--max-len", dest="max_len", type=int, default=None)
    p.add_argument("--subtokens", dest="subtoken_mode", choices=["word", "char_bigram"], default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--enc-hidden", dest="enc_hidden", type=int, default=None)
    p.add_argument("--enc-layers", dest="enc_layers", type=int, default=None)
    p.add_argument("--token-gru-hidden", dest="token_gru_hidden", type=int, default=None)
    p.add_argument("--span-hidden", dest="span_hidden", type=int, default=None)
    p.add_argument("--task-hidden", dest="task_hidden", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        logger.error("output directory %s is not empty (use --force to overwrite)", out)
        return 1
    spec = SyntheticSpec(
        vocab_size=args.vocab,
        num_classes=args.classes,
        doc_len=(args.doc_len[0], args.doc_len[1]),
        phrase_len=(args.phrase_len[0], args.phrase_len[1]),
        distractor_rate=args.distractor_rate,
        pair_task=args.pair_task,
        seed=args.seed if args.seed is not None else 0,
    )
    splits, label_map = generate_synthetic(spec, args.n, args.n_val, args.n_test)
    write_dataset(out, splits, label_map)
    (out / "synthetic_spec.txt").write_text(dump_flat_config(spec), encoding="utf-8")
    logger.info(
        "wrote %s (%d/%d/%d instances)",
        out,
        len(splits["train"]),
        len(splits["val"]),
        len(splits["test"]),
    )
    return 0


# ---------------------------------------------------------------------------
# train


def _run_one(data_dir, run_dir, cfg: TrainConfig):
    dataset = load_dataset(data_dir)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = dump_flat_config(cfg) + f"data = {data_dir}\n"
    (run_dir / "config.txt").write_text(snapshot, encoding="utf-8")
    state = pipeline.run_pipeline(dataset, cfg)
    val_report = pipeline.evaluate(state, dataset.splits["val"])
    test_report = None
    if dataset.splits.get("test"):
        test_instances = dataset.splits["test"]
        test_report = pipeline.evaluate(state, test_instances)
        results = pipeline.infer_many(state, test_instances)
        pipeline.write_predictions(run_dir / "predictions.jsonl", state, test_instances, results)
    pipeline.save_run(run_dir, state, test_report)
    (run_dir / "val_metrics.json").write_text(val_report.to_json(), encoding="utf-8")
    return state, val_report, test_report


def cmd_train(args) -> int:
    cfg = _train_config(args)
    _, val_report, test_report = _run_one(args.data, args.out, cfg)
    shown = test_report if test_report is not None else val_report
    split = "test" if test_report is not None else "val"
    logger.info(
        "%s macro F1 %.4f, token F1 %.4f, IOU F1 %.4f, AUPRC %.4f",
        split,
        shown.macro_f1,
        shown.token_f1,
        shown.iou_f1,
        shown.auprc,
    )
    return 0


# ---------------------------------------------------------------------------
# predict / eval


def _load_eval_instances(data_path, label_map):
    data_path = Path(data_path)
    if data_path.is_dir():
        raise DataError(f"--data must point at a JSONL split file, got directory {data_path}")
    instances, _ = load_jsonl(data_path, label_map)
    return instances


def cmd_predict(args) -> int:
    state = pipeline.load_run(args.run)
    instances = _load_eval_instances(args.data, state.label_map)
    results = pipeline.infer_many(state, instances)
    pipeline.write_predictions(args.out, state, instances, results)
    logger.info("wrote %d predictions to %s", len(results), args.out)
    return 0


def read_predictions(path) -> dict[str, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            for key in ("id", "rationale"):
                if key not in obj:
                    raise DataError(f"{path}:{lineno}: missing field {key!r}")
            out[obj["id"]] = obj
    return out


def _score_predictions(instances, preds: dict, label_map, state=None) -> metrics.MetricsReport:
    """Rationale-scorer mode: metric battery over an external predictions
    file. Faithfulness metrics are included only when a trained run is
    supplied alongside."""
    missing = [inst.uid for inst in instances if inst.uid not in preds]
    if missing:
        raise DataError(f"predictions file lacks ids: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    gold_labels = np.array([inst.label for inst in instances])
    gold_masks = [np.asarray(inst.rationale_mask) for inst in instances]
    gold_spans = [inst.rationale_spans for inst in instances]
    pred_masks = []
    pred_spans = []
    pred_scores = []
    pred_labels = []
    for inst in instances:
        obj = preds[inst.uid]
        mask = np.asarray(obj["rationale"], dtype=np.int8)
        if mask.shape != (len(inst.document),):
            raise DataError(f"prediction {inst.uid}: rationale length mismatch")
        pred_masks.append(mask)
        pred_spans.append(
            [tuple(s) for s in obj.get("spans", metrics.mask_to_spans(mask))]
        )
        scores = obj.get("scores")
        pred_scores.append(
            np.asarray(scores, dtype=np.float64) if scores is not None else mask.astype(np.float64)
        )
        raw = obj.get("label")
        pred_labels.append(label_map[str(raw)] if raw is not None else 0)
    prf = metrics.token_prf_dataset(pred_masks, gold_masks)
    comp_mean = suff_mean = None
    if state is not None:
        comp, suff = pipeline.faithfulness(state, instances, pred_masks)
        comp_mean, suff_mean = float(comp.mean()), float(suff.mean())
    return metrics.MetricsReport(
        macro_f1=metrics.macro_f1(np.array(pred_labels), gold_labels, len(label_map)),
        token_precision=prf["precision"],
        token_recall=prf["recall"],
        token_f1=prf["f1"],
        token_f1_micro=prf["micro_f1"],
        iou_f1=metrics.iou_f1_dataset(pred_spans, gold_spans),
        auprc=metrics.auprc_dataset(pred_scores, gold_masks),
        comprehensiveness=comp_mean,
        sufficiency=suff_mean,
        statistics=metrics.explanation_statistics(pred_spans, gold_spans),
        n_instances=len(instances),
    )


def cmd_eval(args) -> int:
    if args.run is None and args.predictions is None:
        logger.error("eval needs --run and/or --predictions")
        return 1
    state = pipeline.load_run(args.run) if args.run else None
    label_map = state.label_map if state else None
    if label_map is None:
        instances, label_map = load_jsonl(args.data)
    else:
        instances = _load_eval_instances(args.data, label_map)
    if args.predictions:
        report = _score_predictions(instances, read_predictions(args.predictions), label_map, state)
    else:
        report = pipeline.evaluate(state, instances)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    logger.info("macro F1 %.4f, token F1 %.4f", report.macro_f1, report.token_f1)
    return 0


# ---------------------------------------------------------------------------
# sweep


def _sweep_point(payload: dict) -> dict:
    cfg = coerce_config(TrainConfig, payload["cfg"])
    lam = payload["lam"]
    cfg = replace(cfg, lam=lam, seed=cfg.seed + payload["index"]).validate()
    run_dir = Path(payload["out"]) / f"lambda_{lam:g}"
    try:
        _, val_report, _ = _run_one(payload["data"], run_dir, cfg)
    except Exception as exc:  # failure of one point must not kill the sweep
        logger.error("lambda=%g failed: %s", lam, exc)
        return {"lambda": lam, "error": str(exc)}
    exp_metric = val_report.auprc if payload["criterion"] == "auprc" else val_report.token_f1
    return {
        "lambda": lam,
        "macro_f1": val_report.macro_f1,
        "token_f1": val_report.token_f1,
        "iou_f1": val_report.iou_f1,
        "auprc": val_report.auprc,
        "comprehensiveness": val_report.comprehensiveness,
        "sufficiency": val_report.sufficiency,
        "criterion": metrics.lambda_criterion(val_report.macro_f1, exp_metric),
    }


def cmd_sweep(args) -> int:
    cfg = _train_config(args)
    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    if not grid:
        logger.error("empty lambda grid")
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_map = parse_flat_config(dump_flat_config(cfg))
    payloads = [
        {
            "cfg": cfg_map,
            "lam": lam,
            "index": i,
            "data": str(args.data),
            "out": str(out),
            "criterion": args.criterion,
        }
        for i, lam in enumerate(grid)
    ]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_point, payloads))
    else:
        rows = [_sweep_point(p) for p in payloads]

    csv_path = out / "sweep.csv"
    with csv_path.open("w", encoding="utf-8") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            if "error" in row:
                cells = [repr(row["lambda"])] + [""] * (len(SWEEP_COLUMNS) - 1)
            else:
                cells = [repr(row[c]) for c in SWEEP_COLUMNS]
            fh.write(",".join(cells) + "\n")
    scored = [r for r in rows if "error" not in r]
    if not scored:
        logger.error("every sweep point failed")
        return 1
    best = max(scored, key=lambda r: r["criterion"])
    (out / "selected.json").write_text(
        json.dumps({"lambda": best["lambda"], "criterion": best["criterion"]}, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )
    logger.info("selected lambda=%g (criterion %.4f)", best["lambda"], best["criterion"])
    if args.plot:
        _plot_sweep(scored, out / "sweep.svg")
    return 0


def _plot_sweep(rows: list[dict], path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.error("--plot needs matplotlib (pip install etp[plot])")
        raise SystemExit(1)
    lams = [r["lambda"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("macro_f1", "token_f1", "criterion"):
        ax.plot(lams, [r[key] for r in rows], marker="o", label=key)
    ax.set_xscale("log")
    ax.set_xlabel("lambda")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info("wrote %s", path)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic planted-rationale dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--n", type=int, default=2000, help="training instances")
    p.add_argument("--n-val", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--vocab", type=int, default=200)
    p.add_argument("--doc-len", nargs=2, type=int, default=[20, 40], metavar=("LO", "HI"))
    p.add_argument("--phrase-len", nargs=2, type=int, default=[3, 5], metavar=("LO", "HI"))
    p.add_argument("--distractor-rate", type=float, default=0.3)
    p.add_argument("--pair-task", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run both training phases and evaluate")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write predictions for a JSONL split")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metric battery for a run and/or predictions file")
    p.add_argument("--run", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train across a lambda grid and select the best")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="0.1,1,10,100", help="comma-separated lambda values")
    p.add_argument("--criterion", choices=["token_f1", "auprc"], default="token_f1")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (DataError, PipelineError, ValueError, OSError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
