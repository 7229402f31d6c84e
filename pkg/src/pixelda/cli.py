"""Command-line entry points.

    pixelda <command> --config run.ini [--profile name] [--set sec.key=v ...] --out DIR

Commands: synth (composite a target-styled set from a source set), train
(adversarial training), adapt (push a split through a trained generator),
eval (metrics over a labeled split), audit (nearest-neighbor comparison of
adapted images against real target images), stability (repeat training
across seeds and report the spread).

Exit codes: 0 success, 2 configuration problems, 3 data/file problems,
4 training divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as data_mod
from . import evaluation, trainer as trainer_mod
from .config import ConfigError, load_config
from .formats import DataFormatError, write_pnm
from .models import build_models
from .trainer import DivergenceError, Trainer

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _load_split(cfg, key, domain, class_count=None):
    value = cfg.get("data", key)
    if not value:
        raise ConfigError(f"[data] {key} must point at a dataset for this command")
    count = class_count if class_count is not None else cfg.get("model", "class_count")
    if value.startswith("idx:"):
        parts = value.split(":")
        if len(parts) != 3:
            raise ConfigError(f"[data] {key}: idx form is idx:<images>:<labels>")
        ds = data_mod.load_idx_dataset(
            cfg.resolve_path(parts[1]), cfg.resolve_path(parts[2]),
            split=key, domain=domain, class_count=count,
        )
    else:
        ds = data_mod.load_image_directory(
            cfg.resolve_path(value), split=key, domain=domain, class_count=count
        )
    if cfg.get("data", "expand_grayscale") and cfg.get("model", "channels") == 3:
        ds = data_mod.expand_grayscale(ds)
    return ds


def _echo_config(cfg, out_dir):
    text = cfg.dump()
    sys.stdout.write(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.ini").write_text(text)


def _restore_trainer(cfg, checkpoint):
    if not checkpoint:
        raise ConfigError("a checkpoint path is required (e.g. --set eval.checkpoint=...)")
    models = build_models(cfg.generator_config(), cfg.discriminator_config(),
                          cfg.task_config(), seed=cfg.get("train", "seed"))
    trainer = Trainer(cfg.train_config(), models)
    trainer.load_checkpoint(cfg.resolve_path(checkpoint))
    return trainer


# ---- commands ---------------------------------------------------------------


def cmd_synth(cfg, out_dir):
    source_value = cfg.get("synthesis", "source")
    if not source_value:
        raise ConfigError("[synthesis] source must point at a grayscale dataset")
    if source_value.startswith("idx:"):
        parts = source_value.split(":")
        if len(parts) != 3:
            raise ConfigError("[synthesis] source: idx form is idx:<images>:<labels>")
        source = data_mod.load_idx_dataset(
            cfg.resolve_path(parts[1]), cfg.resolve_path(parts[2]),
            split="synthesis-source", domain=data_mod.SOURCE,
            class_count=cfg.get("model", "class_count"),
        )
    else:
        source = data_mod.load_image_directory(
            cfg.resolve_path(source_value), split="synthesis-source",
            domain=data_mod.SOURCE, class_count=cfg.get("model", "class_count"),
        )
    backgrounds = cfg.get("synthesis", "backgrounds")
    if not backgrounds:
        raise ConfigError("[synthesis] backgrounds must name a directory of images")
    synth_cfg = data_mod.SynthesisConfig(
        background_dir=cfg.resolve_path(backgrounds),
        threshold=cfg.get("synthesis", "threshold"),
        seed=cfg.get("synthesis", "seed"),
    )
    composites = data_mod.build_synthetic_target_set(source, synth_cfg)
    data_mod.write_image_directory(composites, out_dir / "composites")
    preview = min(12, len(composites))
    from .grids import assemble_grid, write_grid
    grid = assemble_grid([source.images[:preview], composites.images[:preview]])
    write_grid(out_dir / "synth_preview.ppm", grid)
    print(f"wrote {len(composites)} composites to {out_dir / 'composites'}")
    return 0


def cmd_train(cfg, out_dir):
    source = _load_split(cfg, "source_train", data_mod.SOURCE)
    target = _load_split(cfg, "target_train", data_mod.TARGET).as_unlabeled()
    labeled_target = None
    if cfg.get("data", "labeled_target"):
        labeled_target = _load_split(cfg, "labeled_target", data_mod.TARGET)
    models = build_models(cfg.generator_config(), cfg.discriminator_config(),
                          cfg.task_config(), seed=cfg.get("train", "seed"))
    result = trainer_mod.run_training(
        cfg.train_config(), models,
        trainer_mod.TrainingData(source, target, labeled_target),
        out_dir=out_dir,
    )
    print(f"finished {result.step} steps; checkpoint: {result.checkpoint_path}")
    if cfg.get("data", "target_test"):
        test = _load_split(cfg, "target_test", data_mod.TARGET)
        report = evaluation.evaluate(models.classifier, test,
                                     stream=cfg.get("eval", "stream"),
                                     batch_size=cfg.get("eval", "batch_size"))
        evaluation.write_report(out_dir / "eval_target_test.txt", report)
        print("\n".join(report.lines()))
    return 0


def cmd_adapt(cfg, out_dir):
    checkpoint = cfg.get("adapt", "checkpoint") or cfg.get("eval", "checkpoint")
    trainer = _restore_trainer(cfg, checkpoint)
    split = cfg.get("adapt", "split")
    dataset = _load_split(cfg, split, data_mod.SOURCE)
    adapted = trainer_mod.adapt_dataset(
        trainer.models.generator, dataset, noise_seed=cfg.get("adapt", "noise_seed")
    )
    data_mod.write_image_directory(adapted, out_dir / "adapted")
    print(f"wrote {len(adapted)} adapted images to {out_dir / 'adapted'}")
    return 0


def cmd_eval(cfg, out_dir):
    trainer = _restore_trainer(cfg, cfg.get("eval", "checkpoint"))
    split = cfg.get("eval", "split")
    dataset = _load_split(cfg, split, data_mod.TARGET)
    report = evaluation.evaluate(
        trainer.models.classifier, dataset,
        stream=cfg.get("eval", "stream"), batch_size=cfg.get("eval", "batch_size"),
    )
    evaluation.write_report(out_dir / f"eval_{split}.txt", report)
    with open(out_dir / f"eval_{split}.csv", "w") as f:
        f.write("metric,value\n")
        f.write(f"accuracy,{report.accuracy:.6f}\n")
        for cls in sorted(report.per_class_accuracy):
            f.write(f"class_{cls}_accuracy,{report.per_class_accuracy[cls]:.6f}\n")
        if report.mean_angle_error is not None:
            f.write(f"mean_angle_error,{report.mean_angle_error:.6f}\n")
            f.write(f"median_angle_error,{report.median_angle_error:.6f}\n")
    print("\n".join(report.lines()))
    return 0


def cmd_audit(cfg, out_dir):
    checkpoint = cfg.get("audit", "checkpoint") or cfg.get("eval", "checkpoint")
    trainer = _restore_trainer(cfg, checkpoint)
    adapt_split = cfg.get("audit", "adapt")
    against_split = cfg.get("audit", "against")
    source = _load_split(cfg, adapt_split, data_mod.SOURCE)
    against = _load_split(cfg, against_split, data_mod.TARGET)
    adapted = trainer_mod.adapt_dataset(trainer.models.generator, source)
    matches, grid = evaluation.nn_audit(
        adapted.images, against.images,
        sample_count=cfg.get("audit", "sample_count"),
        sources=source.images, seed=cfg.get("audit", "seed"),
    )
    write_pnm(out_dir / "audit_grid.ppm", grid)
    with open(out_dir / "audit.csv", "w") as f:
        f.write("generated_index,target_index,squared_distance\n")
        for gi, ti, dist in matches:
            f.write(f"{gi},{ti},{dist:.9g}\n")
    print(f"audited {len(matches)} adapted images against {len(against)} target images")
    return 0


def cmd_stability(cfg, out_dir):
    seeds_raw = cfg.get("stability", "seeds")
    try:
        seeds = [int(s) for s in seeds_raw.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"[stability] seeds must be comma-separated ints, got {seeds_raw!r}")
    source = _load_split(cfg, "source_train", data_mod.SOURCE)
    target = _load_split(cfg, "target_train", data_mod.TARGET).as_unlabeled()
    eval_set = _load_split(cfg, cfg.get("stability", "eval_split"), data_mod.TARGET)
    base_train = cfg.train_config()

    def run_one(seed):
        from dataclasses import replace
        tcfg = replace(base_train, seed=seed)
        models = build_models(cfg.generator_config(), cfg.discriminator_config(),
                              cfg.task_config(), seed=seed)
        trainer_mod.run_training(tcfg, models, trainer_mod.TrainingData(source, target),
                                 out_dir=out_dir / f"seed_{seed}")
        report = evaluation.evaluate(models.classifier, eval_set, seed=seed)
        evaluation.write_report(out_dir / f"seed_{seed}" / "eval.txt", report)
        return report

    flags = {
        "train_t_on_source": cfg.get("losses", "train_t_on_source"),
        "train_t_on_adapted": cfg.get("losses", "train_t_on_adapted"),
        "content_weight": cfg.get("losses", "content_weight"),
        "task_weight_in_g_step": cfg.get("losses", "task_weight_in_g_step"),
    }
    report = evaluation.stability_study(seeds, run_one, flags=flags)
    evaluation.write_report(out_dir / "stability.txt", report)
    print("\n".join(report.lines()))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "stability": cmd_stability,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pixelda",
        description="Pixel-level domain adaptation: train, adapt, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", help="INI-style run configuration file")
        p.add_argument("--profile", help="named preset (mnistm, usps, linemod, ...)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config value")
        p.add_argument("--out", required=True, help="directory for artifacts")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(path=args.config, profile=args.profile,
                          overrides=args.overrides)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _echo_config(cfg, out_dir)
        return COMMANDS[args.command](cfg, out_dir)
    except (ConfigError, ValueError) as e:
        if isinstance(e, DataFormatError):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_DATA
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        if e.checkpoint_path is not None:
            print(f"last checkpoint: {e.checkpoint_path}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, data_mod.UnlabeledDataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
