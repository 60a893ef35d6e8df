"""Command-line entry point.

One JSON config file drives every run; flags only override (`--set a.b=v`).
Each subcommand writes the fully resolved config to `config_resolved.json`
and a run log into its output directory, so a run can be reproduced from its
artifacts alone.

Exit codes: 0 success, 2 config schema violation, 3 dataset error,
4 numeric divergence, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_arrays
from .dataset import DatasetError, load_manifest
from .experiments import build_split_datasets, desk_synth_config
from .synth import SynthConfig, generate
from .trainer import (ConfigError, FinetuneModel, NumericDivergenceError, RunConfig,
                      apply_overrides, config_from_dict, config_to_dict, evaluate, finetune,
                      loso_cv, pretrain, tenfold_cv, write_csv)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_NUMERIC = 4

log = logging.getLogger("physiocl")


def _setup_logging(out_dir: Path | None) -> None:
    handlers = [logging.StreamHandler(sys.stderr)]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out_dir / "run.log", mode="w"))
    logging.basicConfig(level=logging.INFO, handlers=handlers, force=True,
                        format="%(asctime)s %(levelname)s %(message)s")


def _load_config(args) -> RunConfig:
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    doc = apply_overrides(doc, args.set or [])
    if args.seed is not None:
        doc["seed"] = args.seed
    return config_from_dict(doc)


def _resolve(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.json").write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
    cfg.apply_dtype()


def _synth_config(args, seed: int) -> SynthConfig:
    doc = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        doc = raw.get("synth", {})
    doc = apply_overrides(doc, [s.removeprefix("synth.") for s in (args.set or [])
                                if s.startswith("synth.")])
    doc.setdefault("seed", seed)
    try:
        return desk_synth_config(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"synth config: {e}") from None


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    _setup_logging(out_dir)
    seed = args.seed if args.seed is not None else 0
    scfg = _synth_config(args, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.json").write_text(
        json.dumps(scfg.__dict__, indent=2, sort_keys=True) + "\n")
    manifest_path = generate(scfg, out_dir / "dataset")
    log.info("wrote synthetic dataset: %s", manifest_path)
    print(manifest_path)
    return EXIT_OK


def cmd_inspect(args) -> int:
    _setup_logging(None)
    manifest = load_manifest(args.data)
    print(f"name: {manifest.name}")
    print(f"sample_rate_hz: {manifest.sample_rate_hz}")
    print(f"subjects: {len(manifest.subjects)}")
    print(f"stimuli: {len(manifest.stimuli)}")
    print(f"trials: {len(manifest.trials)}")
    for m in manifest.modalities:
        print(f"modality {m.id}: {m.channels} channels")
    rs = manifest.rating_scale
    print(f"rating_scale: [{rs.minimum}, {rs.maximum}] threshold {rs.threshold} ({rs.kind})")
    print("validation: ok")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    _setup_logging(out_dir)
    _resolve(cfg, out_dir)
    manifest = load_manifest(args.data)
    parts = build_split_datasets(cfg, manifest)
    checkpoints = pretrain(cfg, parts["pretrain"], out_dir)
    for t, path in checkpoints.items():
        log.info("checkpoint for t=%gs: %s", t, path)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    _setup_logging(out_dir)
    _resolve(cfg, out_dir)
    manifest = load_manifest(args.data)
    parts = build_split_datasets(cfg, manifest)
    checkpoints = None
    if args.checkpoints:
        ckpt_dir = Path(args.checkpoints)
        checkpoints = {t: ckpt_dir / f"pretrain_{t:g}s.ckpt" for t in cfg.resolutions()}
        for t, p in checkpoints.items():
            if not p.exists():
                raise FileNotFoundError(f"missing checkpoint for t={t:g}s: {p}")
    model = finetune(cfg, *parts["finetune"], checkpoints, out_dir)
    metrics = evaluate(model, parts["test"], cfg.task, cfg.finetune.batch_size)
    write_csv(out_dir / f"metrics_{cfg.task}.csv", ["fold", "accuracy", "f1"],
              [("test", metrics.accuracy, metrics.f1)])
    log.info("test accuracy %.4f f1 %.4f", metrics.accuracy, metrics.f1)
    print(f"accuracy={metrics.accuracy!r} f1={metrics.f1!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    _setup_logging(out_dir)
    _resolve(cfg, out_dir)
    manifest = load_manifest(args.data)
    if args.split == "all":
        from .dataset import build_clip_dataset
        eval_ds = build_clip_dataset(manifest, cfg.resolution.t_long,
                                     baseline_seconds=cfg.data.baseline_seconds,
                                     truncate_last_seconds=cfg.data.truncate_last_seconds)
    else:
        eval_ds = build_split_datasets(cfg, manifest)["test"]
    from .trainer import _input_dims
    dims_long = _input_dims(eval_ds)
    dims_short = None
    if cfg.resolution.use_short:
        dims_short = {m: d // cfg.resolution.n_short for m, d in dims_long.items()}
    model = FinetuneModel(cfg, dims_long, dims_short)
    model.load_state(load_arrays(args.model, dtype=ad.default_dtype()))
    metrics = evaluate(model, eval_ds, cfg.task, cfg.finetune.batch_size)
    write_csv(out_dir / f"metrics_{cfg.task}.csv", ["fold", "accuracy", "f1"],
              [(args.split, metrics.accuracy, metrics.f1)])
    print(f"accuracy={metrics.accuracy!r} f1={metrics.f1!r}")
    return EXIT_OK


def cmd_cv10(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    _setup_logging(out_dir)
    _resolve(cfg, out_dir)
    manifest = load_manifest(args.data)
    summary = tenfold_cv(cfg, manifest, out_dir, jobs=args.jobs)
    log.info("cv10 accuracy %.4f ± %.4f", summary["accuracy_mean"], summary["accuracy_std"])
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_loso(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    _setup_logging(out_dir)
    _resolve(cfg, out_dir)
    manifest = load_manifest(args.data)
    summary = loso_cv(cfg, manifest, out_dir, jobs=args.jobs)
    log.info("loso accuracy %.4f ± %.4f", summary["accuracy_mean"], summary["accuracy_std"])
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _setup_logging(None)
    ad.set_default_dtype(np.float64)
    worst = ad.gradcheck_all(n_seeds=args.seeds)
    failed = {k: v for k, v in worst.items() if v >= args.tolerance}
    for name in sorted(worst):
        status = "FAIL" if name in failed else "ok"
        print(f"{name:<20s} max_rel_err={worst[name]:.3e}  {status}")
    if failed:
        print(json.dumps({"error": "gradcheck_failed", "ops": sorted(failed)}), file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="physiocl",
                                     description="Contrastive pretraining + fusion for physiological signals")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True, config=True):
        if data:
            p.add_argument("--data", required=True, help="dataset directory (contains manifest.json)")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        if config:
            p.add_argument("--config", help="JSON config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config entry (dotted key, JSON value)")
            p.add_argument("--seed", type=int, help="override the run seed")

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    common(p, data=False)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("inspect", help="validate and summarize a dataset container")
    p.add_argument("data", help="dataset directory or manifest path")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning over pre-trained encoders")
    common(p)
    p.add_argument("--checkpoints", help="directory with pretrain_<t>s.ckpt files "
                                         "(omit to fine-tune from random initialization)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned model checkpoint")
    common(p)
    p.add_argument("--model", required=True, help="model.ckpt path")
    p.add_argument("--split", choices=["test", "all"], default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cv10", help="ten-fold stimulus-partitioned cross-validation")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel folds")
    p.set_defaults(fn=cmd_cv10)

    p = sub.add_parser("loso", help="leave-one-subject-out cross-validation")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel rounds")
    p.set_defaults(fn=cmd_loso)

    p = sub.add_parser("gradcheck", help="finite-difference check of every graph primitive")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(json.dumps({"error": "config", "detail": str(e)}), file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as e:
        print(json.dumps({"error": "dataset", "detail": str(e)}), file=sys.stderr)
        return EXIT_DATASET
    except NumericDivergenceError as e:
        print(json.dumps({"error": "numeric_divergence", "detail": str(e)}), file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports everything
        print(json.dumps({"error": "internal", "detail": f"{type(e).__name__}: {e}"}), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
