"""``pafs`` command line: synth, prepare, train, eval and gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from ._io import atomic_write
from .config import ConfigError, load_config, parse_overrides
from .errors import PafsError

logger = logging.getLogger("pafs")

CONFIG_SNAPSHOT = "config.txt"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or missing inputs detected after parsing."""


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out-dir", type=Path, required=out_required, help="run output directory")
    p.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pafs", description="Few-shot audio classification with "
                                     "prototype, contrastive and angular losses.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic harmonic-tone corpus")
    _add_common(p)

    p = sub.add_parser("prepare", help="featurize a manifest into a spectrogram cache")
    _add_common(p)
    p.add_argument("--data-dir", type=Path, help="directory holding manifest.csv (default: data.manifest)")
    p.add_argument("--workers", type=int, default=1, help="featurization threads")

    p = sub.add_parser("train", help="episodic training with validation-based selection")
    _add_common(p)
    p.add_argument("--data-dir", type=Path, required=True, help="prepared cache directory")
    p.add_argument("--epochs", type=int, help="shorthand for --set train.epochs=N")

    p = sub.add_parser("eval", help="evaluate a checkpoint on sampled tasks and sweep shots")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data-dir", type=Path, required=True, help="prepared cache directory")
    p.add_argument("--seeds", help="comma-separated evaluation seeds (eval.seeds)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _add_common(p, out_required=False)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--composition-instances", type=int)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args, extra: dict | None = None, base: dict | None = None):
    overrides = parse_overrides(args.overrides)
    overrides.update(extra or {})
    return load_config(args.config, overrides, base=base)


def _snapshot(out_dir: Path, cfg) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with atomic_write(out_dir / CONFIG_SNAPSHOT, "w") as fh:
        fh.write(cfg.to_text())


def _write_rows(path: Path, header, rows) -> None:
    with atomic_write(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise UsageError(f"{what} {path} does not exist")
    return path


def _check_prepared(cfg, meta: dict) -> None:
    """The run config must describe the same features the cache was built with."""
    mel = cfg.mel()
    for key, field in (("audio.sample_rate", "sample_rate"), ("audio.n_fft", "n_fft"),
                       ("audio.win_length", "win_length"), ("audio.hop_length", "hop_length"),
                       ("audio.n_mels", "n_mels")):
        if meta["mel"][field] != getattr(mel, field):
            raise ConfigError(f"{key}={getattr(mel, field)} but the cache was prepared with "
                              f"{meta['mel'][field]}")
    if abs(meta["segment_seconds"] - cfg["audio.segment_seconds"]) > 1e-12:
        raise ConfigError(f"audio.segment_seconds={cfg['audio.segment_seconds']} but the cache was "
                          f"prepared with {meta['segment_seconds']}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .episodes import generate_synthetic

    cfg = _config(args)
    _snapshot(args.out_dir, cfg)
    rows = generate_synthetic(cfg.synth(), args.out_dir)
    print(f"wrote {len(rows)} clips and manifest.csv to {args.out_dir}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    from .dataset import prepare_dataset

    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    cfg = _config(args)
    if args.data_dir is not None:
        manifest = _require_dir(args.data_dir, "data directory") / "manifest.csv"
    elif cfg["data.manifest"]:
        manifest = Path(cfg["data.manifest"])
    else:
        raise UsageError("prepare needs --data-dir or data.manifest")
    if not manifest.is_file():
        raise UsageError(f"manifest {manifest} not found")
    _snapshot(args.out_dir, cfg)
    meta = prepare_dataset(manifest, args.out_dir, cfg.mel(), cfg["audio.segment_seconds"],
                           data_root=cfg["data.root"] or None, k_shot=cfg["episode.k_shot"],
                           q_queries=cfg["episode.q_queries"],
                           min_samples_per_class=cfg["audio.min_samples_per_class"],
                           max_duration=cfg["audio.max_duration"], workers=args.workers)
    print(f"prepared {len(meta['rows'])} clips into {args.out_dir} "
          f"(mean {meta['stats']['mean']:.4f}, std {meta['stats']['std']:.4f})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataset import load_prepared
    from .training import train

    extra = {"train.epochs": args.epochs} if args.epochs is not None else {}
    cfg = _config(args, extra)
    data = load_prepared(_require_dir(args.data_dir, "data directory"), cfg["episode.k_shot"],
                         cfg["episode.q_queries"])
    _check_prepared(cfg, data.meta)
    _snapshot(args.out_dir, cfg)
    result = train(cfg, data.index, data.store, args.out_dir, stats=data.meta["stats"])
    print(f"best epoch {result.best_epoch}: val accuracy {result.best_val:.4f}; "
          f"checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import load_prepared
    from .model import load_checkpoint
    from .training import ci95, evaluate, kshot_sweep, model_from_checkpoint

    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    ckpt = load_checkpoint(args.checkpoint)
    extra = parse_overrides([f"eval.seeds={args.seeds}"]) if args.seeds else {}
    cfg = _config(args, extra, base=ckpt.config)
    model, _ = model_from_checkpoint(ckpt)
    data = load_prepared(_require_dir(args.data_dir, "data directory"), cfg["episode.k_shot"],
                         cfg["episode.q_queries"])
    _check_prepared(cfg, data.meta)
    if ckpt.stats and ckpt.stats != data.meta["stats"]:
        logger.warning("checkpoint statistics %s differ from the cache's %s", ckpt.stats,
                       data.meta["stats"])
    _snapshot(args.out_dir, cfg)

    split, n_tasks = cfg["eval.split"], cfg["eval.n_tasks"]
    n, k, q = cfg["episode.n_way"], cfg["episode.k_shot"], cfg["episode.q_queries"]
    aug, squared, seeds = cfg.augment(), cfg["fs.squared"], cfg["eval.seeds"]
    cache = {}
    summary_rows = []
    for s in seeds:
        res = evaluate(model, data.index, data.store, split, n_tasks, n, k, q, s, aug, squared)
        cache[(k, s)] = res
        _write_rows(args.out_dir / f"eval_tasks_seed{s}.csv", ["task_id", "accuracy"],
                    [[i, repr(float(a))] for i, a in enumerate(res.accuracies)]
                    + [["mean", repr(res.mean)], ["ci95", repr(res.ci95)]])
        summary_rows.append([split, n, k, q, n_tasks, s, repr(res.mean), repr(res.ci95)])
        print(f"seed {s}: {split} accuracy {res.mean:.4f} +- {res.ci95:.4f} over {n_tasks} tasks")
    means = [cache[(k, s)].mean for s in seeds]
    agg = sum(means) / len(means)
    summary_rows.append([split, n, k, q, n_tasks, "all", repr(agg),
                         repr(ci95(means) if len(means) > 1 else cache[(k, seeds[0])].ci95)])
    _write_rows(args.out_dir / "eval_summary.csv",
                ["split", "n_way", "k_shot", "q_queries", "n_tasks", "seed", "mean", "ci95"],
                summary_rows)

    per_seed, summary = kshot_sweep(model, data.index, data.store, cfg["eval.shots"], seeds,
                                    n_tasks, n, q, aug, split, squared, cache=cache)
    _write_rows(args.out_dir / "kshot.csv", ["shots", "mean", "ci95"],
                [[r.shots, repr(r.mean), repr(r.ci95)] for r in summary])
    _write_rows(args.out_dir / "kshot_per_seed.csv", ["shots", "seed", "mean", "ci95"],
                [[r.shots, r.seed, repr(r.mean), repr(r.ci95)] for r in per_seed])
    for r in summary:
        print(f"{r.shots}-shot: {r.mean:.4f} +- {r.ci95:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all
    from .oracles import REPORT_HEADER

    if args.instances < 1:
        raise UsageError("--instances must be at least 1")
    reports = run_all(args.instances, args.seed, args.composition_instances,
                      progress=lambda msg: logger.info(msg))
    print(REPORT_HEADER)
    for r in reports:
        print(r.row())
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        _write_rows(args.out_dir / "gradcheck.csv",
                    ["check", "max_rel_error", "step", "checked", "skipped", "passed"],
                    [[r.name, repr(r.max_rel_error), r.step, r.checked, r.skipped, int(r.passed)]
                     for r in reports])
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"pafs {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PafsError, OSError, RuntimeError, ValueError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
