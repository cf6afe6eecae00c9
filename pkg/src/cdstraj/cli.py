"""Command-line entry point: ``cdstraj <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad flags, missing files), 2 data or
contract error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data
from .config import ABLATIONS, Config, ModelConfig, TrainConfig, load_config
from .errors import CdsTrajError, ConfigError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cdstraj", description="Vehicle trajectory prediction with diffused neighbor futures.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="cmd", metavar="<command>", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-synthetic", help="write seeded synthetic scenes")
    p.add_argument("--kind", required=True, choices=data.SYNTHETIC_KINDS)
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05, help="position noise std in meters")
    p.add_argument("--n-max", type=int, default=8)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="convert an NGSIM-style CSV into scenes")
    p.add_argument("--csv", required=True)
    p.add_argument("--units", choices=("feet", "meters"), default="feet")
    p.add_argument("--radius", type=float, default=30.0, help="neighbor radius in meters")
    p.add_argument("--n-max", type=int, default=8)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--config", help="JSON config (defaults used if omitted)")
    p.add_argument("--data", required=True, help="scene file; split 80/10/10 unless --val is given")
    p.add_argument("--val", help="separate validation scene file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="continue from a last.json checkpoint")

    p = sub.add_parser("eval", help="RMSE report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report-out", required=True, help="CSV path; the plot goes next to it as .svg")
    p.add_argument("--plot-out")
    p.add_argument("--K", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("predict", help="sampled trajectories as NDJSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    p.add_argument("--config", help="JSON config (default: the tiny config)")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("ablate", help="train and evaluate with one component disabled")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True, choices=ABLATIONS + ("none",))
    p.add_argument("--out", required=True, help="output directory")
    return ap


# ----------------------------------------------------------------------------
# subcommands


def _split(args, cfg: Config) -> data.DatasetSplit:
    scenes = data.load_scenes(_existing(args.data))
    if getattr(args, "val", None):
        return data.DatasetSplit(scenes, data.load_scenes(_existing(args.val)), [], cfg.train.seed)
    return data.split_dataset(scenes, seed=cfg.train.seed)


def _config(path) -> Config:
    return load_config(_existing(path) if path else None)


def cmd_gen_synthetic(args) -> int:
    scenes = data.gen_synthetic(args.kind, args.count, args.seed, noise_std=args.noise, n_max=args.n_max)
    data.save_scenes(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    trajs = data.resample_all(data.ingest_csv(_existing(args.csv), units=args.units))
    report = data.SkipReport()
    scenes = data.build_scenes(trajs, args.radius, args.n_max, args.stride, Path(args.csv).stem, report)
    data.save_scenes(scenes, args.out)
    print(
        f"wrote {len(scenes)} scenes to {args.out} "
        f"(skipped {report.short_agents} short agents, {report.neighbors_without_coverage} partial neighbors)"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train

    cfg = _config(args.config)
    res = train(_split(args, cfg), cfg, out_dir=args.out, resume_from=_existing(args.resume) if args.resume else None)
    last = res.rows[-1] if res.rows else None
    if last:
        print(f"epoch {last['epoch']}: val RMSE@5s {last['val_rmse_5s']:.4f} m; outputs in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate, write_report
    from .training import load_model

    cfg, params = load_model(_existing(args.checkpoint))
    scenes = data.load_scenes(_existing(args.data))
    report = evaluate(scenes, params, cfg, K=args.K, seed=args.seed, tag=Path(args.checkpoint).stem)
    plot = write_report(report, args.report_out, args.plot_out)
    sys.stdout.write(report.to_csv())
    print(f"report: {args.report_out}, plot: {plot}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .model import predict_batch
    from .training import load_model

    cfg, params = load_model(_existing(args.checkpoint))
    scenes = data.load_scenes(_existing(args.scenes))
    if args.K < 1:
        raise UsageError("--K must be >= 1")
    preds = predict_batch(scenes, params, cfg.model, args.K, args.seed)
    with open(args.out, "w") as fh:
        for s in scenes:
            for p in preds[s.scene_id]:
                fh.write(json.dumps(p.to_record()) + "\n")
    print(f"wrote {len(scenes) * args.K} trajectories to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .training import pipeline_gradcheck

    cfg = _config(args.config) if args.config else Config(gradcheck_model(), TrainConfig())
    details: dict = {}
    worst = pipeline_gradcheck(cfg, details=details)
    name = max(details, key=details.get)
    print(f"worst relative error {worst:.3e} ({name}); tolerance {args.tol:g}")
    return EXIT_OK if worst < args.tol else EXIT_DATA


def cmd_ablate(args) -> int:
    from .evaluation import run_ablation

    cfg = _config(args.config)
    spec = None if args.spec == "none" else args.spec
    out = Path(args.out)
    report = run_ablation(_split(args, cfg), cfg, spec, out_dir=out)
    report.write_csv(out / "report.csv")
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def gradcheck_model() -> ModelConfig:
    """Small enough for a per-weight central-difference sweep in well under a minute."""
    return ModelConfig.tiny(d=8, n_heads=2, d_c=4, n_max=2, gamma=4)


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.cmd](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cdstraj: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"cdstraj: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CdsTrajError as exc:
        print(f"cdstraj: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"cdstraj: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
