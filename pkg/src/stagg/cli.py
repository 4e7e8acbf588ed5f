"""Command-line entry point: ``stagg <command> [options]``.

Commands write into ``--out`` (default: ``$STAGG_OUTPUT_DIR`` or
``./stagg-output``) and leave a ``config_<command>.json`` snapshot there.
Exit status is 0 on success, 1 for usage errors, 2 for bad or missing data
and 3 for numerical failures, including a failed gradient check.
"""
from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._fs import atomic_write_bytes, atomic_write_text
from .classify import load_svm, save_svm
from .dataio import SPLITS, SynthSpec, generate_synthetic, read_manifest
from .errors import FormatError, NumericalError, StaggError
from .experiment import EmotionModel, embed, fit_emotion, score
from .optim import TrainOptions, write_records
from .pipeline import EMOTIONS, PRESETS, PipelineConfig, load_model, preset, save_model

log = logging.getLogger("stagg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ENV = "STAGG_OUTPUT_DIR"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------

def _output_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "stagg-output")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _coerce(field: dataclasses.Field, text: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{field.name} expects a boolean, got {text!r}")
    try:
        return {"int": int, "float": float}.get(kind, str)(text)
    except ValueError:
        raise UsageError(f"{field.name} expects {kind}, got {text!r}") from None


def _pipeline_config(name: str, overrides) -> PipelineConfig:
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    changes = {}
    for item in overrides or ():
        key, sep, value = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in fields:
            raise UsageError(f"--set expects KEY=VALUE with KEY in {sorted(fields)}, got {item!r}")
        changes[key] = _coerce(fields[key], value.strip())
    try:
        return preset(name, **changes)
    except ValueError as exc:
        raise UsageError(f"invalid pipeline settings: {exc}") from None


def _train_options(args) -> TrainOptions:
    return TrainOptions(max_iters=args.max_iters, batch_size=args.batch_size, eval_every=args.eval_every,
                        patience=args.patience, netvlad_iters=args.netvlad_iters, seed=args.seed)


def _snapshot(out: Path, command: str, args, **extra) -> None:
    params = {k: v for k, v in vars(args).items() if k not in ("func", "corrupt", "out") and v is not None}
    doc = {"command": command, "version": __version__, "arguments": params, **extra}
    atomic_write_text(out / f"config_{command}.json", json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _load_split(manifest, split: str):
    seqs = manifest.load_split(split)
    if not seqs:
        raise DataError(f"manifest has no videos in split {split!r}")
    return seqs


def _model_paths(models_dir: Path, emotion: str) -> tuple[Path, Path]:
    return models_dir / f"aggregator_{emotion}.stag", models_dir / f"svm_{emotion}.stag"


def _load_models(models_dir: Path) -> dict[str, EmotionModel]:
    missing = [str(p) for e in EMOTIONS for p in _model_paths(models_dir, e) if not p.is_file()]
    if missing:
        raise DataError(f"missing model file(s): {', '.join(missing)}")
    out = {}
    for e in EMOTIONS:
        agg_path, svm_path = _model_paths(models_dir, e)
        out[e] = EmotionModel(load_model(agg_path), load_svm(svm_path))
    return out


def _add_pipeline_args(p, default="cbp+rnn+cbp"):
    p.add_argument("--pipeline", default=default, choices=list(PRESETS), metavar="NAME",
                   help=f"aggregation pipeline; one of {', '.join(PRESETS)} (default {default})")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a pipeline setting, e.g. --set grid_dim=128 (repeatable)")


def _add_training_args(p):
    p.add_argument("--max-iters", type=int, default=3000, help="Adam iterations per emotion (default 3000)")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--eval-every", type=int, default=250, help="iterations between validation checks")
    p.add_argument("--patience", type=int, default=4, help="validation checks without improvement before stopping")
    p.add_argument("--netvlad-iters", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--C", type=float, default=1.0, help="SVM penalty")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(task=args.task, seed=args.seed, videos_per_class=args.videos_per_class,
                     frames=args.frames, positions=args.positions, dim=args.dim, noise=args.noise,
                     mean_signal=args.mean_signal, subjects=args.subjects)
    out = _output_dir(args)
    manifest = generate_synthetic(spec, out)
    _snapshot(out, "synth", args, spec=spec.to_dict())
    counts = manifest.counts()
    print(f"wrote {len(manifest)} videos to {out}: " + ", ".join(f"{s} {counts[s]}" for s in SPLITS))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _pipeline_config(args.pipeline, args.set)
    options = _train_options(args)
    manifest = read_manifest(args.manifest)
    train, val = _load_split(manifest, "train"), manifest.load_split("val")
    out = _output_dir(args)
    _snapshot(out, "train", args, pipeline=config.to_dict(), options=dataclasses.asdict(options))
    records = {}
    for emotion in EMOTIONS:
        t0 = time.perf_counter()
        model = fit_emotion(train, val, config, options, emotion, C=args.C)
        agg_path, svm_path = _model_paths(out, emotion)
        save_model(model.aggregator, agg_path)
        save_svm(model.svm, svm_path)
        write_records(model.records, out / f"train_{emotion}.csv")
        records[emotion] = model.records
        last = f", final train loss {model.records[-1].train_loss:.4f}" if model.records else ""
        print(f"{emotion}: {len(model.records)} records{last} ({time.perf_counter() - t0:.1f}s)")
    if any(records.values()):
        from .plotting import training_curves
        training_curves(records, out / "training.png")
    return EXIT_OK


def cmd_embed(args) -> int:
    manifest = read_manifest(args.manifest)
    models = _load_models(Path(args.models))
    out = _output_dir(args)
    _snapshot(out, "embed", args)
    splits = SPLITS if args.split == "all" else (args.split,)
    for split in splits:
        seqs = manifest.load_split(split)
        if not seqs:
            continue
        values = np.concatenate([embed([s], models[s.emotion].aggregator) for s in seqs])
        buf = io.BytesIO()
        np.savez(buf, video_id=np.array([s.video_id for s in seqs]),
                 emotion=np.array([s.emotion for s in seqs]), label=np.array([s.label for s in seqs]),
                 values=values)
        atomic_write_bytes(out / f"embeddings_{split}.npz", buf.getvalue())
        print(f"{split}: {len(seqs)} videos, dim {values.shape[1]}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = read_manifest(args.manifest)
    models = _load_models(Path(args.models))
    report = score(models, _load_split(manifest, args.split))
    out = _output_dir(args)
    _snapshot(out, "evaluate", args)
    atomic_write_text(out / f"evaluation_{args.split}.csv", report.to_csv())
    from .plotting import emotion_accuracy
    emotion_accuracy(report, out / f"evaluation_{args.split}.png", title=f"{args.split} accuracy")
    print(report.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import COMPONENTS, TOLERANCE, run_suite

    corrupt = [c.strip() for c in (args.corrupt or "").split(",") if c.strip()]
    if set(corrupt) - set(COMPONENTS):
        raise UsageError(f"unknown component(s) to corrupt: {corrupt}")
    t0 = time.perf_counter()
    results = run_suite(trials=args.trials, seed=args.seed, corrupt=corrupt)
    width = max(len(r.name) for r in results)
    lines = ["component,instances,max_relative_error,passed"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        note = f"  ({r.error})" if r.error else ""
        print(f"{r.name:<{width}}  {r.instances:>4} checks  max rel err {r.max_error:.3e}  {status}{note}")
        lines.append(f"{r.name},{r.instances},{r.max_error!r},{r.passed}")
    out = _output_dir(args)
    _snapshot(out, "gradcheck", args, tolerance=TOLERANCE)
    atomic_write_text(out / "gradcheck.csv", "\n".join(lines) + "\n")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} components within {TOLERANCE:g} "
          f"({time.perf_counter() - t0:.1f}s)")
    if failed:
        names = ", ".join(f"{r.name} ({r.error or f'{r.max_error:.3e}'})" for r in failed)
        print(f"gradient check failed: {names}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def ablation_csv(rows: dict) -> str:
    lines = ["pipeline," + ",".join(EMOTIONS) + ",average"]
    for name, rep in rows.items():
        lines.append(",".join([name, *(repr(rep.per_emotion[e]) for e in EMOTIONS), repr(rep.overall)]))
    return "\n".join(lines) + "\n"


def ablation_table(rows: dict, seconds: dict) -> str:
    width = max(len("Pipeline"), *(len(n) for n in rows))
    head = f"{'Pipeline':<{width}}  " + "  ".join(f"{e[:5].capitalize():>6}" for e in EMOTIONS) + "   Average    Time"
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        accs = "  ".join(f"{100 * rep.per_emotion[e]:>6.1f}" for e in EMOTIONS)
        lines.append(f"{name.upper():<{width}}  {accs}   {100 * rep.overall:>6.2f}%  {seconds[name]:>5.0f}s")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    names = [n.strip().lower() for n in args.pipelines.split(",")] if args.pipelines else list(PRESETS)
    unknown = [n for n in names if n not in PRESETS]
    if unknown:
        raise UsageError(f"unknown pipeline(s) {unknown}; choose from {list(PRESETS)}")
    configs = {n: _pipeline_config(n, args.set) for n in names}
    options = _train_options(args)
    manifest = read_manifest(args.manifest)
    train, val = _load_split(manifest, "train"), manifest.load_split("val")
    held = _load_split(manifest, args.split)
    out = _output_dir(args)
    _snapshot(out, "ablate", args, pipelines={n: c.to_dict() for n, c in configs.items()},
              options=dataclasses.asdict(options))
    rows, seconds = {}, {}
    for name, config in configs.items():
        t0 = time.perf_counter()
        models = {e: fit_emotion(train, val, config, options, e, C=args.C) for e in EMOTIONS}
        rows[name] = score(models, held)
        seconds[name] = time.perf_counter() - t0
        log.info("%s: %.2f%% in %.1fs", name, 100 * rows[name].overall, seconds[name])
    atomic_write_text(out / "ablation.csv", ablation_csv(rows))
    from .plotting import ablation_bars
    ablation_bars({n: r.overall for n, r in rows.items()}, out / "ablation.png")
    print(ablation_table(rows, seconds))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stagg", description="Spatio-temporal feature aggregation for real/fake expression "
                                               "classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./stagg-output)")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic real/fake corpus with a manifest")
    p.add_argument("--task", default="order", choices=["order", "cooccurrence"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos-per-class", type=int, default=25)
    p.add_argument("--frames", type=int, default=90)
    p.add_argument("--positions", type=int, default=9)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--mean-signal", type=float, default=0.05)
    p.add_argument("--subjects", type=int, default=50)

    p = add("train", cmd_train, "fit one aggregator and one SVM per emotion")
    p.add_argument("--manifest", required=True)
    _add_pipeline_args(p)
    _add_training_args(p)

    p = add("embed", cmd_embed, "write video-level representations for a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True, help="directory holding the trained model files")
    p.add_argument("--split", default="all", choices=[*SPLITS, "all"])

    p = add("evaluate", cmd_evaluate, "per-emotion accuracy of trained models on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True, help="directory holding the trained model files")
    p.add_argument("--split", default="test", choices=SPLITS)

    p = add("gradcheck", cmd_gradcheck, "compare every analytic gradient with finite differences")
    p.add_argument("--trials", type=int, default=20, help="random instances per component (default 20)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)

    p = add("ablate", cmd_ablate, "train and score every pipeline preset on one corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pipelines", help="comma-separated subset of presets (default: all)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override applied to every pipeline")
    p.add_argument("--split", default="test", choices=SPLITS, help="held-out split to score (default test)")
    _add_training_args(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stagg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"stagg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, StaggError, OSError) as exc:
        kind = type(exc).__name__
        print(f"stagg {args.command}: {kind}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
