"""Command-line entry point: ``stmae {train,eval,infer,ablate,synth-bench}``.

Exit codes: 0 success, 1 runtime failure, 2 user or configuration error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path


from . import __version__
from . import config as cfgmod
from .data import (SynthSpec, few_shot_subset, load_folder_dataset, load_frames_dataset,
                   load_mvtec_layout, synth_generate)
from .errors import CheckpointError, ConfigError, InvalidInputError, STMAEError
from .evaluation import (ablation_run, evaluate_category, score_images,
                         write_heatmaps, write_metrics_csv, write_score_curve, write_scores_csv)
from .training import load_checkpoint, restore, save_checkpoint, train

log = logging.getLogger("stmae")

OUT_ENV = "STMAE_OUT"

# Desk-scale synthetic benchmark settings (CPU friendly); see README.
SYNTH_BENCH_OVERRIDES = [
    ("image.size", 64), ("fptd.patch_size", 2), ("model.variant", "nano"),
    ("training.epochs", 150), ("training.lr", 2e-3), ("data.layout", "synthetic"),
]


class UsageError(STMAEError):
    pass


def _out_dir(args, command) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(OUT_ENV, "runs"))
        out = root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_record(out: Path, cfg: dict, command: str, seed) -> None:
    cfgmod.dump(cfg, out / "config.json")
    record = {"command": command, "version": __version__, "seed": seed,
              "python": platform.python_version(), "argv": sys.argv[1:],
              "fingerprint": cfgmod.fingerprint(cfg)}
    (out / "run.json").write_text(json.dumps(record, indent=2))


def load_dataset(cfg: dict):
    cfgmod.check_data(cfg)
    d = cfg["data"]
    if d["layout"] == "synthetic":
        s = cfg["synth"]
        ds = synth_generate(SynthSpec(resolution=s["resolution"], n_train=s["n_train"],
                                      n_test_normal=s["n_test_normal"],
                                      n_test_anomalous=s["n_test_anomalous"],
                                      anomaly_types=tuple(s["anomaly_types"]), seed=s["seed"],
                                      frequency=float(s["frequency"]), noise_level=float(s["noise_level"])))
    elif d["layout"] == "mvtec":
        ds = load_mvtec_layout(d["root"], d["category"])
    elif d["layout"] == "folder":
        ds = load_folder_dataset(d["root"], d["normal_class"])
    else:
        ds = load_frames_dataset(d["root"], d["labels"] or None)
    shots = cfg["training"]["shots"]
    if shots:
        ds = few_shot_subset(ds, shots, cfg["training"]["shots_seed"])
    return ds


def _config_from_args(args, extra=()):
    overrides = list(extra) + list(args.set or [])
    cfg = cfgmod.load_config(args.config, overrides)
    if getattr(args, "seed", None) is not None:
        cfg["eval"]["seed"] = args.seed
    if getattr(args, "tta_rounds", None) is not None:
        cfg["eval"]["tta_rounds"] = args.tta_rounds
    cfgmod.validate(cfg)
    return cfg


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if args.seed is not None:
        cfg["training"]["seed"] = args.seed
    dataset = load_dataset(cfg)
    out = _out_dir(args, "train")
    _write_run_record(out, cfg, "train", cfg["training"]["seed"])
    from .lpsr import FeatureExtractor

    extractor = FeatureExtractor(cfgmod.extractor_config(cfg))
    mc = cfgmod.model_config(cfg, extractor.out_channels)
    ckpt = train(dataset, mc, cfgmod.train_config(cfg), extractor, log_path=out / "loss.csv",
                 progress=lambda e, l: log.info("epoch %d loss %.4f", e, l))
    ckpt.extra["run_config"] = cfg
    save_checkpoint(ckpt, out / "checkpoint.pt")
    print(f"checkpoint written to {out / 'checkpoint.pt'}")
    return 0


def _evaluate_to(out, cfg, ckpt_or_pair, dataset, heatmaps=True):
    s = cfg["score"]
    report, maps = evaluate_category(ckpt_or_pair, dataset, cfg["eval"]["seed"], cfg["eval"]["tta_rounds"],
                                     s["sigma"], s["fusion"], s["image_stat"], cfgmod.fingerprint(cfg))
    write_metrics_csv(report, out / "metrics.csv", {"category": dataset.category})
    write_scores_csv(dataset, maps, out / "scores.csv")
    if dataset.layout == "frames":
        write_score_curve(dataset, maps, out / "score_curve.csv")
    if heatmaps:
        write_heatmaps(dataset, maps, out / "heatmaps")
    (out / "summary.txt").write_text(report.summary() + "\n")
    print(report.summary())
    return report


def cmd_eval(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from exc
    base = ckpt.extra.get("run_config")
    cfg = _config_from_args(args) if args.config or not base else copy.deepcopy(base)
    for item in args.set or []:
        cfgmod.set_key(cfg, *cfgmod.parse_override(item))
    if args.seed is not None:
        cfg["eval"]["seed"] = args.seed
    if args.tta_rounds is not None:
        cfg["eval"]["tta_rounds"] = args.tta_rounds
    cfgmod.validate(cfg)
    if cfgmod.extractor_config(cfg).to_dict() != ckpt.extractor_config:
        raise ConfigError("feature extractor settings differ from the checkpoint's")
    try:
        extractor, model = restore(ckpt)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint does not match its model config: {exc}") from exc
    dataset = load_dataset(cfg)
    out = _out_dir(args, "eval")
    _write_run_record(out, cfg, "eval", cfg["eval"]["seed"])
    _evaluate_to(out, cfg, (extractor, model), dataset, heatmaps=not args.no_heatmaps)
    return 0


def cmd_infer(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from exc
    cfg = copy.deepcopy(ckpt.extra.get("run_config") or cfgmod.load_config())
    for item in args.set or []:
        cfgmod.set_key(cfg, *cfgmod.parse_override(item))
    if args.seed is not None:
        cfg["eval"]["seed"] = args.seed
    if args.tta_rounds is not None:
        cfg["eval"]["tta_rounds"] = args.tta_rounds
    cfgmod.validate(cfg)
    for p in args.images:
        if not Path(p).exists():
            raise UsageError(f"image not found: {p}")
    extractor, model = restore(ckpt)
    s = cfg["score"]
    maps = score_images(extractor, model, args.images, cfg["eval"]["seed"], cfg["eval"]["tta_rounds"],
                        s["sigma"], s["fusion"], s["image_stat"])
    out = _out_dir(args, "infer")
    _write_run_record(out, cfg, "infer", cfg["eval"]["seed"])
    from .data import Dataset, TestItem

    ds = Dataset([], [TestItem(p, 0, None, Path(p).name) for p in args.images])
    with open(out / "scores.csv", "w") as fh:
        fh.write("image,score\n")
        for p, m in zip(args.images, maps):
            fh.write(f"{p},{m.image_score!r}\n")
            print(f"{p}\t{m.image_score:.6g}")
    if not args.no_heatmaps:
        write_heatmaps(ds, maps, out / "heatmaps")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    dataset = load_dataset(cfg)
    axes = {}
    for a in args.axis:
        name, _, values = a.partition("=")
        axes[name] = [cfgmod.parse_value(v) for v in values.split(",")] if values else None
    out = _out_dir(args, "ablate")
    _write_run_record(out, cfg, "ablate", cfg["training"]["seed"])
    rows = ablation_run(dataset, cfg, axes, out_csv=out / "ablation.csv")
    for r in rows:
        print(r)
    return 0


def cmd_synth_bench(args) -> int:
    cfg = _config_from_args(args, extra=[f"{k}={json.dumps(v)}" for k, v in SYNTH_BENCH_OVERRIDES])
    if args.seed is not None:
        cfg["synth"]["seed"] = args.seed
        cfg["training"]["seed"] = args.seed
        cfg["eval"]["seed"] = args.seed
    dataset = load_dataset(cfg)
    out = _out_dir(args, "synth-bench")
    _write_run_record(out, cfg, "synth-bench", cfg["synth"]["seed"])
    t0 = time.time()
    from .lpsr import FeatureExtractor

    extractor = FeatureExtractor(cfgmod.extractor_config(cfg))
    ckpt = train(dataset, cfgmod.model_config(cfg, extractor.out_channels), cfgmod.train_config(cfg),
                 extractor, log_path=out / "loss.csv")
    ckpt.extra["run_config"] = cfg
    save_checkpoint(ckpt, out / "checkpoint.pt")
    _, model = restore(ckpt, with_extractor=False)
    _evaluate_to(out, cfg, (extractor, model), dataset, heatmaps=not args.no_heatmaps)
    log.info("synth-bench finished in %.0f s", time.time() - t0)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stmae", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="config override (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    for name, func in (("eval", cmd_eval), ("infer", cmd_infer)):
        sp = sub.add_parser(name, help=f"{name} with a trained checkpoint")
        common(sp, config=name == "eval")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--tta-rounds", type=int, dest="tta_rounds")
        sp.add_argument("--no-heatmaps", action="store_true")
        if name == "infer":
            sp.add_argument("images", nargs="+")
        sp.set_defaults(func=func)

    sp = sub.add_parser("ablate", help="train and evaluate over ablation axes")
    common(sp)
    sp.add_argument("--axis", action="append", required=True,
                    help="axis name, optionally with values: K=2,4")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("synth-bench", help="desk-scale synthetic benchmark")
    common(sp)
    sp.add_argument("--tta-rounds", type=int, dest="tta_rounds")
    sp.add_argument("--no-heatmaps", action="store_true")
    sp.set_defaults(func=cmd_synth_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, InvalidInputError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
