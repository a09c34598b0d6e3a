"""Command-line entry point: ``memfuse <subcommand>`` (or ``python -m memfuse``).

Exit codes: 0 ok, 2 usage or validation error, 3 runtime or numeric failure.
stdout carries one JSON summary line per run; logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, insight, train as training
from .data import MODALITIES, load_dataset, read_manifest
from .errors import ConfigError, DataError, DivergenceError, FormatError, MemfuseError, VariantError
from .model import ModelConfig, build, load_checkpoint, predict, save_checkpoint
from .synthetic import SyntheticSpec, generate_synthetic, summarize

log = logging.getLogger("memfuse")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(MemfuseError):
    pass


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    sys.stdout.flush()


def _write_run(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "resolved": resolved,
        "versions": {"memfuse": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    (out / "run.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    unknown = set(doc) - {"model", "train", "ablation"}
    if unknown:
        raise ConfigError(f"config file {p}: unknown sections {sorted(unknown)}")
    return doc


def _parse_ints(text: str, name: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated integers, got {text!r}") from None


# ------------------------------------------------------------ subcommands

def cmd_gen_synthetic(args) -> dict:
    dims = _parse_ints(args.dims, "--dims")
    if len(dims) != 3:
        raise UsageError(f"--dims needs three values (video,audio,text), got {args.dims!r}")
    n_val = args.n_val if args.n_val is not None else max(1, args.n // 8)
    n_test = args.n_test if args.n_test is not None else max(1, args.n // 8)
    spec = SyntheticSpec(n_train=args.n, n_val=n_val, n_test=n_test, dims=dict(zip(MODALITIES, dims)),
                         min_len=args.min_len, max_len=args.max_len, noise_level=args.noise, seed=args.seed,
                         n_candidates=args.candidates)
    spec.validate()
    out = Path(args.out)
    splits = generate_synthetic(spec, out)
    summary = summarize(splits)
    _write_run(out, "gen-synthetic", {"synthetic": spec.to_dict()})
    log.info("wrote %s", ", ".join(f"{k}: {v['n']}" for k, v in summary.items()))
    manifests = {k: str(out / f"{k}.jsonl") for k in splits}
    if spec.n_candidates:
        manifests["rerank"] = str(out / "rerank.jsonl")
    return {"command": "gen-synthetic", "out": str(out), "splits": summary, "manifests": manifests}


def _model_config(doc: dict, args, samples) -> ModelConfig:
    model = dict(doc.get("model", {}))
    for flag, key in (("latent_dim", "latent_dim"), ("heads", "num_heads"), ("attention_mode", "attention_mode"),
                      ("fusion_hidden", "fusion_hidden_dim"), ("dropout", "dropout_rate"),
                      ("fusion_head", "fusion_head")):
        value = getattr(args, flag, None)
        if value is not None:
            model[key] = value
    if getattr(args, "modalities", None):
        model["modalities"] = args.modalities.split(",")
    mods = model.get("modalities", list(MODALITIES))
    if "input_dims" not in model and samples:
        first = samples[0]
        model["input_dims"] = {m: first.sequences[m].dim for m in mods if m in first.sequences}
    return ModelConfig.from_dict(model).validate()


def _train_config(doc: dict, args) -> training.TrainConfig:
    tc = dict(doc.get("train", {}))
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size"),
                      ("patience", "early_stop_patience"), ("selection_metric", "selection_metric")):
        value = getattr(args, flag, None)
        if value is not None:
            tc[key] = value
    return training.TrainConfig.from_dict(tc).validate()


def _load(path: str, modalities=None):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"manifest not found: {p}")
    return load_dataset(read_manifest(p), modalities)


def _check_modalities(config: ModelConfig, samples, where: str) -> None:
    for s in samples:
        missing = [m for m in config.modalities if m not in s.sequences]
        if missing:
            raise DataError(f"{where}: sample {s.id!r} lacks modalities {missing} required by the model")
        for m in config.modalities:
            if s.sequences[m].dim != config.input_dims[m]:
                raise DataError(f"{where}: sample {s.id!r} {m} width {s.sequences[m].dim}, "
                                f"model expects {config.input_dims[m]}")


def cmd_train(args) -> dict:
    doc = _load_config_file(args.config)
    train_set = _load(args.train_manifest)
    val_set = _load(args.val_manifest)
    config = _model_config(doc, args, train_set)
    tcfg = _train_config(doc, args)
    _check_modalities(config, train_set, "train manifest")
    _check_modalities(config, val_set, "validation manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    note = None
    if tcfg.learning_rate == 0:
        note = "learning_rate is 0: parameters stay at their initial values"
        log.warning(note)
    params = build(config, tcfg.seed)
    init_checksum = params.checksum()
    best, tlog = training.train(config, params, train_set, val_set, tcfg,
                                on_epoch=lambda r: log.info("epoch %d loss %.5f val_mse %.5f val_rho %s", r.epoch,
                                                            r.train_loss, r.val_mse, r.val_spearman))
    ev = training.evaluate(best, config, val_set)
    save_checkpoint(out / "checkpoint.mmem", best, config)
    (out / "train_log.jsonl").write_text(tlog.to_jsonl(with_time=False))
    metrics = {"spearman": ev["spearman"], "mse": ev["mse"], "n": ev["n"], "best_epoch": tlog.best_epoch,
               "epochs_run": tlog.epochs_run, "checksum": best.checksum()}
    if note:
        metrics["note"] = note
        metrics["parameters_unchanged"] = best.checksum() == init_checksum
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    _write_run(out, "train", {"model": config.to_dict(), "train": tcfg.to_dict(),
                              "train_manifest": args.train_manifest, "val_manifest": args.val_manifest})
    return {"command": "train", "checkpoint": str(out / "checkpoint.mmem"), **metrics}


def _checkpoint(path: str):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def cmd_evaluate(args) -> dict:
    params, config = _checkpoint(args.checkpoint)
    samples = _load(args.manifest, config.modalities)
    _check_modalities(config, samples, "manifest")
    if any(s.label is None for s in samples):
        raise DataError("evaluate needs labels for every sample")
    ev = training.evaluate(params, config, samples)
    summary = {"command": "evaluate", "spearman": ev["spearman"], "mse": ev["mse"], "n": ev["n"]}
    if args.out:
        _write_run(Path(args.out), "evaluate", {"checkpoint": args.checkpoint, "manifest": args.manifest})
    return summary


def cmd_predict(args) -> dict:
    params, config = _checkpoint(args.checkpoint)
    samples = _load(args.manifest, config.modalities)
    _check_modalities(config, samples, "manifest")
    preds = predict(params, config, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["id,score"] + [f"{s.id},{p!r}" for s, p in zip(samples, preds.tolist())]
    (out / "predictions.csv").write_text("\n".join(lines) + "\n")
    _write_run(out, "predict", {"checkpoint": args.checkpoint, "manifest": args.manifest})
    return {"command": "predict", "n": len(samples), "output": str(out / "predictions.csv")}


def ablation_markdown(rows) -> str:
    """Two tables: modality subsets, then attention/pooling variants with feature checkmarks."""
    med = training.median_by_variant(rows)
    mse: dict[str, list[float]] = {}
    for r in rows:
        mse.setdefault(r.variant, []).append(r.mse)
    names = {"video": "Video only", "text": "Text only", "audio": "Audio only"}
    out = ["| Modality | Spearman's rho | MSE |", "|---|---|---|"]
    for v in med:
        if v.startswith("modality:"):
            mods = v.split(":", 1)[1]
            label = names.get(mods, " + ".join(m.capitalize() for m in mods.split("+")))
            out.append(f"| {label} | {med[v]:.3f} | {np.median(mse[v]):.3f} |")
    flags = {
        "average_only": (0, 0, 1, 0), "self_only": (1, 0, 0, 0), "cross_with_average": (0, 1, 1, 0),
        "max_only": (0, 0, 0, 1), "self_and_cross": (1, 1, 0, 0),
    }
    out += ["", "| Self-Attention | Cross-Attention | Average Pooling | Max Pooling | rho | MSE |",
            "|---|---|---|---|---|---|"]
    for mode, f in flags.items():
        v = f"attention:{mode}"
        if v in med:
            marks = " | ".join("✓" if x else "×" for x in f)
            out.append(f"| {marks} | {med[v]:.3f} | {np.median(mse[v]):.3f} |")
    return "\n".join(out) + "\n"


def cmd_ablate(args) -> dict:
    doc = _load_config_file(args.config)
    if len(args.manifests) != 2:
        raise UsageError("--manifests needs exactly two paths: TRAIN VAL")
    train_set = _load(args.manifests[0])
    val_set = _load(args.manifests[1])
    config = _model_config(doc, args, train_set)
    tcfg = _train_config(doc, args)
    seeds = _parse_ints(args.seeds, "--seeds") if args.seeds else doc.get("ablation", {}).get("seeds", [tcfg.seed])
    _check_modalities(config, train_set, "train manifest")
    _check_modalities(config, val_set, "validation manifest")
    rows = training.ablation_suite(config, train_set, val_set, tcfg, seeds=seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(training.ablation_csv(rows))
    (out / "ablation.md").write_text(ablation_markdown(rows))
    _write_run(out, "ablate", {"model": config.to_dict(), "train": tcfg.to_dict(), "seeds": list(seeds),
                               "manifests": list(args.manifests)})
    return {"command": "ablate", "rows": len(rows), "median_spearman": training.median_by_variant(rows),
            "output": str(out / "ablation.csv")}


def cmd_analyze(args) -> dict:
    params, config = _checkpoint(args.checkpoint)
    samples = _load(args.manifest, config.modalities)
    _check_modalities(config, samples, "manifest")
    if not any(s.metadata is not None for s in samples):
        raise UsageError(f"no metadata in manifest {args.manifest}")
    preds = predict(params, config, samples)
    report = insight.factor_analysis(samples, preds, n_permutations=args.permutations, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fmt, ext in (("markdown", "md"), ("csv", "csv"), ("json", "json")):
        (out / f"factors.{ext}").write_text(insight.report_render(report, fmt))
    _write_run(out, "analyze", {"checkpoint": args.checkpoint, "manifest": args.manifest,
                                "permutations": args.permutations, "seed": args.seed})
    return {"command": "analyze", "n": report.n_samples,
            "p_values": {f.factor: f.p_value for f in report.factors}, "output": str(out / "factors.md")}


def cmd_rank(args) -> dict:
    params, config = _checkpoint(args.checkpoint)
    samples = _load(args.manifest, config.modalities)
    items = insight.rerank_items_from_samples(samples)
    if not items:
        raise UsageError(f"no entry in {args.manifest} has a candidates field")
    report = insight.rerank(items, params, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fmt, ext in (("markdown", "md"), ("csv", "csv"), ("json", "json")):
        (out / f"rerank.{ext}").write_text(insight.report_render(report, fmt))
    _write_run(out, "rank", {"checkpoint": args.checkpoint, "manifest": args.manifest})
    overall = report.categories[-1]
    return {"command": "rank", "items": len(report.items), "improvement_pct": overall.improvement_pct,
            "output": str(out / "rerank.md")}


# ------------------------------------------------------------------ parser

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--latent-dim", type=int, dest="latent_dim")
    p.add_argument("--heads", type=int)
    p.add_argument("--attention-mode", dest="attention_mode")
    p.add_argument("--fusion-hidden", type=int, dest="fusion_hidden")
    p.add_argument("--fusion-head", dest="fusion_head", choices=["mlp", "literal"])
    p.add_argument("--dropout", type=float)
    p.add_argument("--modalities", help="comma-separated subset of video,audio,text")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--patience", type=int)
    p.add_argument("--selection-metric", dest="selection_metric", choices=["val_mse", "val_spearman"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a planted synthetic dataset")
    g.add_argument("--n", type=int, default=2000, help="training samples (validation/test default to n/8)")
    g.add_argument("--n-val", type=int, dest="n_val")
    g.add_argument("--n-test", type=int, dest="n_test")
    g.add_argument("--dims", default="16,12,20", help="video,audio,text embedding widths")
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--min-len", type=int, default=2, dest="min_len")
    g.add_argument("--max-len", type=int, default=8, dest="max_len")
    g.add_argument("--candidates", type=int, default=0, help="rerank candidates per test sample")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--train-manifest", required=True, dest="train_manifest")
    t.add_argument("--val-manifest", required=True, dest="val_manifest")
    t.add_argument("--out", required=True)
    _add_model_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="Spearman rho and MSE of a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="per-sample scores as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="modality-subset and attention-mode ablations")
    a.add_argument("--config")
    a.add_argument("--manifests", nargs="+", required=True, metavar="MANIFEST", help="TRAIN VAL")
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", help="comma-separated training seeds")
    _add_model_flags(a)
    a.set_defaults(func=cmd_ablate)

    z = sub.add_parser("analyze", help="content-factor statistics of predicted scores")
    z.add_argument("--checkpoint", required=True)
    z.add_argument("--manifest", required=True)
    z.add_argument("--out", default="analysis")
    z.add_argument("--permutations", type=int, default=10_000)
    z.add_argument("--seed", type=int, default=0)
    z.set_defaults(func=cmd_analyze)

    r = sub.add_parser("rank", help="pick the best-scoring candidate per item")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", default="rerank")
    r.set_defaults(func=cmd_rank)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        summary = args.func(args)
    except (UsageError, ConfigError, DataError, FormatError, FileNotFoundError) as e:
        print(f"memfuse {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, VariantError, ArithmeticError, MemfuseError) as e:
        print(f"memfuse {args.command}: runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    _emit(summary)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
