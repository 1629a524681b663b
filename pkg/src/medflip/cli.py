"""Command-line entry point.

Results go to stdout as JSON; logs go to stderr (level from MEDFLIP_LOG).
Exit codes: 0 success, 1 domain or config error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, parse_value
from .data import DatasetFormatError

log = logging.getLogger("medflip")

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    sys.stdout.flush()


def _split_overrides(rest: list[str]) -> dict[str, object]:
    """``--a.b value`` or ``--a.b=value`` pairs; anything else is a usage error."""
    out = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument: {tok}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise UsageError(f"override {tok} needs a value")
            key, value = tok[2:], rest[i + 1]
            i += 2
        out[key] = parse_value(value)
    return out


def _resolve(args, overrides: dict) -> RunConfig:
    overrides = dict(overrides)
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("train.seed", args.seed)
        overrides.setdefault("data.seed", args.seed)
    if getattr(args, "data", None) is not None:
        overrides["data.path"] = args.data
    cfg = load_config(args.config, overrides)
    log.info("resolved config %s", cfg.to_json())
    return cfg


def _load_data(cfg: RunConfig):
    from .data import load_dataset

    return load_dataset(cfg.data.path)


def cmd_generate_data(args, cfg: RunConfig) -> None:
    from .data import save_dataset, synthesize

    out = Path(args.out or cfg.data.path)
    ds = synthesize(cfg.data.n_samples, cfg.data.multi_label_prob, cfg.data.noise_sigma, cfg.data.seed)
    save_dataset(ds, out)
    _emit({"path": str(out), "n_samples": len(ds), "splits": {k: len(v) for k, v in ds.manifest.splits.items()}})


def cmd_pretrain(args, cfg: RunConfig) -> None:
    from .train import train

    if args.out:
        cfg.train.out_dir = args.out
    result = train(cfg, _load_data(cfg), cfg.train.out_dir)
    last = result.metrics[-1] if result.metrics else {}
    _emit({"checkpoint": str(result.checkpoint_path), "metrics_log": str(result.log_path), "steps": result.steps,
           "final_loss": last.get("total"), "seconds": result.seconds})


def cmd_eval(args, cfg: RunConfig) -> None:
    from .evaluate import linear_probe, retrieval_precision_at_k, zero_shot_classify
    from .train import load_model

    model, vocab, _ = load_model(args.checkpoint)
    ds = _load_data(cfg)
    test = ds.split("test")
    seed = cfg.train.seed
    if args.protocol == "zero-shot":
        report = zero_shot_classify(model, vocab, test, seed=seed)
    elif args.protocol == "probe":
        report = linear_probe(model, ds.split("finetune"), test, cfg.eval.probe_epochs, cfg.eval.probe_lr, seed=seed)
    else:
        report = retrieval_precision_at_k(model, vocab, test, cfg.eval.ks, seed=seed)
    sys.stdout.write(report.to_json() + "\n")


def cmd_ablate(args, cfg: RunConfig) -> None:
    from .ablation import AXES, ablate, default_factory, summarize

    if args.axis not in AXES:
        raise ConfigError(f"unknown ablation axis {args.axis!r}; choose from {sorted(AXES)}")
    values = [parse_value(v) for v in args.values.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    ds = _load_data(cfg)
    out = Path(args.out or Path(cfg.train.out_dir) / "ablation")
    cells = ablate(default_factory(cfg, ds, args.axis, out / "runs"), args.axis, values, ds, seeds,
                   cfg.eval.ks, out)
    summary = summarize(cells)
    _emit({"axis": args.axis, "csv": str(out / f"ablation_{args.axis}.csv"),
           "svg": str(out / f"ablation_{args.axis}.svg"),
           "failed": [{"value": c.axis_value, "seed": c.seed, "error": c.error} for c in cells if c.error],
           "summary": {m: {str(v): {"mean": ms[0], "std": ms[1]} for v, ms in per.items()}
                       for m, per in summary.items()}})


def cmd_throughput(args, cfg: RunConfig) -> None:
    from .ablation import measure_throughput

    ratios = [float(r) for r in args.ratios.split(",")]
    _emit({"rows": measure_throughput(cfg, _load_data(cfg), ratios, args.steps, args.warmup)})


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import run_suite

    seed = 0 if args.seed is None else args.seed
    results = run_suite(range(args.n_seeds), base_seed=seed)
    _emit({name: {"max_rel_error": r.max_rel_error, "tolerance": r.tolerance, "ok": r.ok}
           for name, r in results.items()})
    return EXIT_OK if all(r.ok for r in results.values()) else EXIT_DOMAIN


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="seed for every random source (train.seed and data.seed)")

    p = _Parser(prog="medflip", description="Masked vision-language pretraining on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--out", help="output directory (default data.path)")

    t = sub.add_parser("pretrain", parents=[common], help="pretrain a model")
    t.add_argument("--data", help="dataset directory (default data.path)")
    t.add_argument("--out", help="run directory (default train.out_dir)")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("protocol", choices=["zero-shot", "probe", "retrieval"])
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default data.path)")

    a = sub.add_parser("ablate", parents=[common], help="sweep one config axis")
    a.add_argument("--axis", required=True, help="mask_ratio, pretrain_fraction, beta or loss_mode")
    a.add_argument("--values", required=True, help="comma-separated values")
    a.add_argument("--seeds", help="comma-separated seeds (default --seed)")
    a.add_argument("--data", help="dataset directory (default data.path)")
    a.add_argument("--out", help="output directory for CSV, SVG and runs")

    th = sub.add_parser("throughput", parents=[common], help="training images/sec per mask ratio")
    th.add_argument("--ratios", required=True, help="comma-separated mask ratios")
    th.add_argument("--steps", type=int, default=30)
    th.add_argument("--warmup", type=int, default=3)
    th.add_argument("--data", help="dataset directory (default data.path)")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--n-seeds", type=int, default=50)

    sub.add_parser("version", help="print the package version")
    return p


COMMANDS = {
    "generate-data": cmd_generate_data,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "throughput": cmd_throughput,
    "gradcheck": cmd_gradcheck,
}


def _setup_logging() -> None:
    level = os.environ.get("MEDFLIP_LOG", "WARNING").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv: list[str] | None = None) -> int:
    from .ablation import AXES  # noqa: F401  (import errors surface before parsing)
    from .evaluate import ProtocolError
    from .losses import LossConfigError
    from .tensor import DomainError, ShapeError

    _setup_logging()
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command == "version":
            if rest:
                raise UsageError(f"unrecognized arguments: {' '.join(rest)}")
            _emit({"version": __version__})
            return EXIT_OK
        overrides = _split_overrides(rest)
        cfg = _resolve(args, overrides)
        code = COMMANDS[args.command](args, cfg)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_DOMAIN
    except (OSError, DatasetFormatError, CheckpointError) as exc:
        print(f"medflip: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DomainError, ShapeError, LossConfigError, ProtocolError, ValueError) as exc:
        print(f"medflip: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
