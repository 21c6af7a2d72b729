"""``hopattn`` command line: run, sweep, diagnose, grad-check.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
The output directory is ``--out`` if given, else ``$HOPATTN_OUT``, else the
config's ``out_dir``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from hopattn.errors import ConfigError
from hopattn.expt.config import ExperimentConfig, load_config
from hopattn.expt.experiments import (
    diagnose, grad_check_suite, model_config, run_experiment, summarize_collapse,
)
from hopattn.expt.sinks import MetricsSink, RunManifest
from hopattn.models import build_model, load_checkpoint, save_checkpoint

GRAD_TOL = 1e-5
ENV_OUT = "HOPATTN_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _unit(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hopattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{run,sweep,diagnose,grad-check}")
    sub.required = True
    helps = {
        "run": "run one experiment (first seed unless --seed)",
        "sweep": "run every seed and grid cell of a config",
        "diagnose": "cosine-similarity, entropy and collapse reports for a checkpoint",
        "grad-check": "validate reverse-mode gradients against finite differences",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", metavar="PATH", required=name != "grad-check")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--kind", choices=("baseline", "mha"))
        p.add_argument("--alpha", type=_unit)
        p.add_argument("--alpha-prime", dest="alpha_prime", type=_unit)
        if name == "diagnose":
            p.add_argument("--checkpoint", metavar="PATH")
    return parser


def resolve_out(flag: str | None, config_out: str) -> str:
    if flag:
        return flag
    return os.environ.get(ENV_OUT) or config_out


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig(kind="grad_check")
    out = resolve_out(args.out, cfg.out_dir)
    return cfg.with_overrides(seed=args.seed, kind=args.kind, alpha=args.alpha,
                              alpha_prime=args.alpha_prime, out_dir=out)


def _summary(cfg: ExperimentConfig, pairs) -> dict:
    results = [r for _, r in pairs]
    if cfg.kind == "collapse_sweep":
        s = summarize_collapse(results, cfg.sweep.depths)
        return {label: {str(d): {"mean_ratio": s.mean_ratio(label, d),
                                 "median_ratio": s.median_ratio(label, d),
                                 "mean_cos_fraction": s.mean_cos_fraction(label, d)}
                        for d in sorted(cfg.sweep.depths)}
                for label in s.ratios}
    if cfg.kind == "grad_check":
        return {"max_rel_error": results[0]["max_rel_error"]}
    keep = ("train_accuracy", "test_accuracy", "val_perplexity", "chance", "checkpoint")
    return {c["name"]: {k: r[k] for k in keep if k in r} for c, r in pairs}


def cmd_run(args, all_seeds: bool) -> int:
    cfg = _config(args)
    if not all_seeds and args.seed is None:
        cfg = cfg.replace(seeds=cfg.seeds[:1])
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    with RunManifest(out, cfg.to_dict(), cfg.seeds, cfg.experiment_id) as manifest:
        pairs = run_experiment(cfg, out, workers=cfg.workers if all_seeds else 1)
        for name in ("metrics.csv", "metrics.jsonl"):
            manifest.add_output(os.path.join(out, name))
        summary = _summary(cfg, pairs)
        manifest.data["summary"] = summary
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    if cfg.kind == "grad_check" and summary["max_rel_error"] > GRAD_TOL:
        return 2
    return 0


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    out = cfg.out_dir
    seed = cfg.seeds[0]
    os.makedirs(out, exist_ok=True)
    with RunManifest(out, cfg.to_dict(), seed, cfg.experiment_id) as manifest:
        path = args.checkpoint or cfg.checkpoint
        if path:
            model, _ = load_checkpoint(path)
            if args.kind or args.alpha is not None or args.alpha_prime is not None:
                model = model.with_attention(args.kind or model.config.attention, args.alpha,
                                             args.alpha_prime)
        else:
            model = build_model(model_config(cfg), seed)
            path = save_checkpoint(os.path.join(out, "checkpoint.npz"), model)
        manifest.data["checkpoint"] = path
        with MetricsSink(out, cfg.experiment_id, manifest) as sink:
            result = diagnose(cfg, model, out, sink)
        for f in result["histograms"]:
            manifest.add_output(f)
    brief = {str(i): {k: round(v, 6) for k, v in r.items()} for i, r in result["layers"].items()}
    print(json.dumps(brief, indent=2))
    return 0


def cmd_grad_check(args) -> int:
    cfg = _config(args)
    errs = grad_check_suite(cfg.sweep.grad_check_stacks)
    worst = float(np.max(errs))
    print(f"max relative error {worst:.3e} over {len(errs)} stacks (tolerance {GRAD_TOL:g})")
    return 0 if worst <= GRAD_TOL else 2


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        if args.command == "run":
            return cmd_run(args, all_seeds=False)
        if args.command == "sweep":
            return cmd_run(args, all_seeds=True)
        if args.command == "diagnose":
            return cmd_diagnose(args)
        return cmd_grad_check(args)
    except ConfigError as exc:
        print(f"hopattn: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"hopattn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
