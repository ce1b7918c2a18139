"""Command-line front end.

Subcommands cover the whole workflow: synthetic data generation, training,
the measurement server and collector, fine-tuning, evaluation, and the two
canned experiment recipes. Options come from an optional TOML or JSON config
file with flag overrides; every artifact-producing run writes a
``run.manifest.json`` next to its outputs recording resolved configuration
and content hashes (no timestamps, so reruns are byte-comparable).

Exit codes: 0 success, 2 configuration or validation error, 3 runtime
failure (divergence, unsettled hardware, non-convergent cases).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

try:
    import tomllib
except ImportError:                    # Python 3.10
    import tomli as tomllib

from . import __version__
from .dataset import (GenerationError, MutationConfig, dataset_hash,
                      generate, load_dataset, save_dataset)
from .grid import (CaseError, CaseValidationError, load_bundled_case,
                   load_case, validate)
from .hil import (FileStore, HilError, HilServer, NoiseConfig, collect)
from .ioutil import sha256_file, write_json, write_text
from .losses import LossConfig
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, init_params, load_params, param_count, \
    save_params
from .powerflow import PowerFlowError, solve_pf
from .scenarios import (ScenarioError, compare_reports, run_scenario_1,
                        run_scenario_2)
from .training import (FINETUNE_DEFAULTS, TrainConfig, TrainingDivergedError,
                       finetune, save_history_csv, train)

_CONFIG_ERRORS = (CaseError, ScenarioError, ValueError, KeyError, TypeError,
                  FileNotFoundError)
_RUNTIME_ERRORS = (PowerFlowError, GenerationError, TrainingDivergedError,
                   HilError, FloatingPointError)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if p.suffix == ".toml":
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    if p.suffix == ".json":
        with open(p, "r", encoding="utf-8") as fh:
            return json.load(fh)
    raise ValueError(f"config file must be .toml or .json, got '{p.name}'")


def _merge(section: dict, overrides: dict) -> dict:
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _model_config(cfg: dict, args) -> ModelConfig:
    section = _merge(cfg.get("model", {}), {
        "hidden": getattr(args, "hidden", None),
        "layers": getattr(args, "layers", None),
        "init_seed": getattr(args, "init_seed", None),
    })
    return ModelConfig(**section)


def _train_config(cfg: dict, args, defaults: TrainConfig) -> TrainConfig:
    milestones = getattr(args, "milestones", None)
    if milestones is not None:
        milestones = tuple(int(x) for x in milestones.split(",") if x)
    section = _merge(cfg.get("train", {}), {
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr_start": getattr(args, "lr", None),
        "lr_milestones": milestones,
        "shuffle_seed": getattr(args, "train_seed", None),
    })
    base = asdict(defaults)
    base.update(section)
    base["lr_milestones"] = tuple(base["lr_milestones"])
    return TrainConfig(**base)


def _loss_config(cfg: dict) -> LossConfig:
    section = dict(cfg.get("loss", {}))
    return LossConfig(
        lambda_bus=float(section.get("lambda_bus", 1.0)),
        lambda_slack=float(section.get("lambda_slack", 1.0)),
        constraint_weights=dict(section.get("constraint_weights", {})),
    )


def _mutation_config(cfg: dict, args) -> MutationConfig:
    section = _merge(cfg.get("mutation", {}), {
        "rate": getattr(args, "rate", None),
        "width": getattr(args, "width", None),
        "rng_seed": getattr(args, "seed", None),
    })
    return MutationConfig(**section)


def _noise_config(cfg: dict, args) -> NoiseConfig:
    section = _merge(cfg.get("noise", {}), {
        "sigma_v": getattr(args, "sigma_v", None),
        "sigma_theta": getattr(args, "sigma_theta", None),
        "sigma_s": getattr(args, "sigma_s", None),
        "seed": getattr(args, "noise_seed", None),
    })
    if section.get("bias_v") is not None:
        section["bias_v"] = tuple(section["bias_v"])
    return NoiseConfig(**section)


def _load_case_arg(path: str):
    if path == "wscc9":
        return load_bundled_case("wscc9")
    return load_case(path)


def _write_manifest(out_dir: Path, command: str, config: dict,
                    inputs: dict, outputs: dict) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: sha256_file(v) for k, v in inputs.items()},
        "outputs": {k: sha256_file(v) for k, v in outputs.items()},
        "version": __version__,
    }
    write_json(out_dir / "run.manifest.json", manifest, indent=2)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_solve(args) -> int:
    case = _load_case_arg(args.case)
    problems = validate(case)
    if problems:
        raise CaseValidationError(problems)
    sol = solve_pf(case, tol=args.tol, max_iter=args.max_iter)
    base = case.base_mva
    print(f"converged in {sol.iterations} iterations "
          f"(max mismatch {sol.max_mismatch:.3e})")
    for bus, v, a in zip(case.buses, sol.v_mag, sol.v_ang):
        print(f"  bus {bus.id:3d}  V = {v:.5f} pu  "
              f"angle = {math.degrees(float(a)):8.3f} deg")
    print(f"  slack P = {sol.slack_p * base:9.3f} MW   "
          f"Q = {sol.slack_q * base:9.3f} MVAr")
    return 0


def _cmd_generate(args) -> int:
    cfg = _load_config_file(args.config)
    case = _load_case_arg(args.case)
    mutation = _mutation_config(cfg, args)
    result = generate(case, args.n, mutation)
    out = Path(args.out)
    save_dataset(out, result.samples)
    print(f"wrote {len(result.samples)} samples to {out} "
          f"({result.redraws} redraws)")
    _write_manifest(out.parent, "generate",
                    {"mutation": asdict(mutation), "n": args.n,
                     "case": args.case},
                    inputs={}, outputs={out.name: out})
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config_file(args.config)
    samples = load_dataset(args.dataset)
    model_cfg = _model_config(cfg, args)
    train_cfg = _train_config(cfg, args, TrainConfig())
    loss_cfg = _loss_config(cfg)
    log = None if args.quiet else print
    result = train(samples, model_cfg, train_cfg, loss_cfg, log=log)
    out = Path(args.out)
    save_params(out, result.params, model_cfg)
    if args.history:
        save_history_csv(args.history, result.history)
    print(f"trained {param_count(result.params)} parameters; "
          f"final loss {result.final_loss:.6e}; saved to {out}")
    _write_manifest(out.parent, "train",
                    {"model": asdict(model_cfg),
                     "train": {**asdict(train_cfg),
                               "lr_milestones": list(train_cfg.lr_milestones)},
                     "loss": {"lambda_bus": loss_cfg.lambda_bus,
                              "lambda_slack": loss_cfg.lambda_slack,
                              "constraint_weights":
                                  dict(loss_cfg.constraint_weights)}},
                    inputs={"dataset": args.dataset},
                    outputs={out.name: out})
    return 0


def _cmd_hil_serve(args) -> int:
    cfg = _load_config_file(args.config)
    case = _load_case_arg(args.case)
    noise = _noise_config(cfg, args)
    server = HilServer(FileStore(args.store), case, noise=noise,
                       perturb_pct=args.perturb_pct,
                       perturb_seed=args.perturb_seed)
    emitted = server.run(poll_s=args.poll, stop_after=args.count,
                         idle_exit_s=args.idle_exit)
    print(f"served {emitted} measurements")
    return 0


def _cmd_hil_collect(args) -> int:
    cfg = _load_config_file(args.config)
    case = _load_case_arg(args.case)
    mutation = _mutation_config(cfg, args)
    result = collect(FileStore(args.store), case, args.n, mutation,
                     timeout_s=args.timeout)
    out = Path(args.out)
    save_dataset(out, result.samples)
    print(f"collected {len(result.samples)} measured samples to {out} "
          f"({result.redraws} redraws)")
    _write_manifest(out.parent, "hil-collect",
                    {"mutation": asdict(mutation), "n": args.n,
                     "case": args.case},
                    inputs={}, outputs={out.name: out})
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load_config_file(args.config)
    params, model_cfg = load_params(args.checkpoint)
    samples = load_dataset(args.dataset)
    train_cfg = _train_config(cfg, args, FINETUNE_DEFAULTS)
    loss_cfg = _loss_config(cfg)
    log = None if args.quiet else print
    result = finetune(params, samples, model_cfg, loss_cfg,
                      train_cfg=train_cfg, log=log)
    out = Path(args.out)
    save_params(out, result.params, model_cfg)
    if args.history:
        save_history_csv(args.history, result.history)
    print(f"fine-tuned for {len(result.history)} epochs; saved to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    params, model_cfg = load_params(args.checkpoint)
    samples = load_dataset(args.dataset)
    report = evaluate(params, model_cfg, samples)
    for q in ("v_mag", "v_ang", "slack_p", "slack_q"):
        print(f"  NSE[{q}] = {report.mean_nse[q]:.6e}")
    print(f"  total NSE = {report.total_nse:.6e} "
          f"over {report.n_samples} samples")
    if args.out:
        write_json(args.out, report.to_dict())
        print(f"wrote report to {args.out}")
    if args.svg:
        write_text(args.svg, render_error_svg(report.to_dict()))
        print(f"wrote chart to {args.svg}")
    return 0


def _cmd_scenario1(args) -> int:
    cfg = _load_config_file(args.config)
    train_samples = load_dataset(args.train_dataset)
    test_samples = load_dataset(args.test_dataset)
    model_cfg = _model_config(cfg, args)
    train_cfg = _train_config(cfg, args, TrainConfig())
    loss_cfg = _loss_config(cfg)
    log = None if args.quiet else print
    outcome = run_scenario_1(train_samples, test_samples, model_cfg,
                             train_cfg, loss_cfg, log=log)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(out_dir / "model.ckpt", outcome.params, model_cfg)
    write_json(out_dir / "report.json", outcome.report)
    save_history_csv(out_dir / "history.csv", outcome.train_result.history)
    print(f"scenario 1 total NSE: {outcome.metrics.total_nse:.6e}")
    _write_manifest(out_dir, "scenario1", outcome.report["configs"],
                    inputs={"train": args.train_dataset,
                            "test": args.test_dataset},
                    outputs={"model.ckpt": out_dir / "model.ckpt",
                             "report.json": out_dir / "report.json"})
    return 0


def _cmd_scenario2(args) -> int:
    cfg = _load_config_file(args.config)
    pretrain_samples = load_dataset(args.pretrain_dataset)
    ft_samples = load_dataset(args.finetune_dataset)
    test_samples = load_dataset(args.test_dataset)
    model_cfg = _model_config(cfg, args)
    train_cfg = _train_config(cfg, args, TrainConfig())
    loss_cfg = _loss_config(cfg)
    finetune_cfg = _train_config({"train": cfg.get("finetune", {})},
                                 argparse.Namespace(), FINETUNE_DEFAULTS)
    expected = None
    baseline = None
    if args.baseline_report:
        with open(args.baseline_report, "r", encoding="utf-8") as fh:
            baseline = json.load(fh)
        expected = baseline["test_sha256"]
    pretrained = None
    if args.pretrained:
        pretrained, ckpt_cfg = load_params(args.pretrained)
        if ckpt_cfg != model_cfg:
            raise ScenarioError("pretrained checkpoint config does not "
                                "match the requested model config")
    log = None if args.quiet else print
    outcome = run_scenario_2(pretrain_samples, ft_samples, test_samples,
                             model_cfg, train_cfg, loss_cfg,
                             finetune_cfg=finetune_cfg,
                             pretrained=pretrained,
                             expected_test_sha256=expected, log=log)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(out_dir / "model.ckpt", outcome.params, model_cfg)
    write_json(out_dir / "report.json", outcome.report)
    print(f"scenario 2 total NSE: {outcome.metrics.total_nse:.6e}")
    if baseline is not None:
        summary = compare_reports(baseline, outcome.report)
        write_json(out_dir / "comparison.json", summary)
        verdict = ("improves on" if summary["finetune_improves"]
                   else "does not improve on")
        print(f"fine-tuning {verdict} the synthetic-only baseline "
              f"({summary['scenario2_total_nse']:.6e} vs "
              f"{summary['scenario1_total_nse']:.6e})")
    _write_manifest(out_dir, "scenario2", outcome.report["configs"],
                    inputs={"pretrain": args.pretrain_dataset,
                            "finetune": args.finetune_dataset,
                            "test": args.test_dataset},
                    outputs={"model.ckpt": out_dir / "model.ckpt",
                             "report.json": out_dir / "report.json"})
    return 0


def _cmd_report(args) -> int:
    with open(args.metrics, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    write_text(args.svg, render_error_svg(report))
    print(f"wrote chart to {args.svg}")
    return 0


# ---------------------------------------------------------------------------
# SVG rendering (no plotting dependency; output is deterministic)
# ---------------------------------------------------------------------------


def render_error_svg(report: dict) -> str:
    """Two bar panels: per-bus mean absolute voltage and angle errors."""
    abs_v = [float(x) for x in report["abs_err_v"]]
    abs_a = [float(x) for x in report["abs_err_ang"]]
    n = len(abs_v)
    width, panel_h, margin, gap = 640, 130, 46, 40
    height = 2 * panel_h + 3 * gap
    plot_w = width - 2 * margin

    def panel(values: list[float], top: int, title: str,
              color: str) -> list[str]:
        peak = max(max(values), 1e-12)
        slot = plot_w / max(n, 1)
        bar_w = max(slot * 0.7, 1.0)
        parts = [
            f'<text x="{margin}" y="{top - 8}" font-size="13" '
            f'font-family="sans-serif">{title} '
            f'(max {peak:.3e})</text>',
            f'<line x1="{margin}" y1="{top + panel_h}" '
            f'x2="{margin + plot_w}" y2="{top + panel_h}" '
            f'stroke="#444" stroke-width="1"/>',
        ]
        for i, v in enumerate(values):
            h = panel_h * (v / peak)
            x = margin + i * slot + (slot - bar_w) / 2
            y = top + panel_h - h
            parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" '
                         f'width="{bar_w:.2f}" height="{h:.2f}" '
                         f'fill="{color}"/>')
            parts.append(f'<text x="{x + bar_w / 2:.2f}" '
                         f'y="{top + panel_h + 14}" font-size="10" '
                         f'text-anchor="middle" '
                         f'font-family="sans-serif">{i + 1}</text>')
        return parts

    body = ['<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>']
    body += panel(abs_v, gap, "mean |voltage error| per bus (pu)", "#3572b0")
    body += panel(abs_a, panel_h + 2 * gap,
                  "mean |angle error| per bus (rad)", "#b05435")
    body.append("</svg>")
    return "\n".join(body) + "\n"


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--quiet", action="store_true",
                   help="suppress per-epoch logging")


def _add_mutation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="dataset RNG seed")
    p.add_argument("--rate", type=float, help="per-load mutation probability")
    p.add_argument("--width", type=float,
                   help="half-width of the load multiplier band")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--milestones", help="comma-separated decay epochs")
    p.add_argument("--train-seed", type=int, dest="train_seed",
                   help="shuffling seed")
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--init-seed", type=int, dest="init_seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridhil",
        description="Power-flow surrogate training with hardware-in-the-"
                    "loop data collection.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one case and print the state")
    p.add_argument("--case", default="wscc9",
                   help="case file path, or 'wscc9' for the bundled case")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=20, dest="max_iter")
    p.set_defaults(fn=_cmd_solve)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--case", default="wscc9")
    p.add_argument("--n", type=int, required=True)
    _add_mutation_flags(p)
    p.add_argument("--out", required=True, help="output dataset (.jsonl)")
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--history", help="optional per-epoch CSV")
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("hil-serve", help="run the measurement server")
    _add_common(p)
    p.add_argument("--store", required=True, help="store directory")
    p.add_argument("--case", default="wscc9")
    p.add_argument("--sigma-v", type=float, dest="sigma_v")
    p.add_argument("--sigma-theta", type=float, dest="sigma_theta")
    p.add_argument("--sigma-s", type=float, dest="sigma_s")
    p.add_argument("--noise-seed", type=int, dest="noise_seed")
    p.add_argument("--perturb-pct", type=float, default=0.0,
                   dest="perturb_pct",
                   help="one-time relative line r/x perturbation")
    p.add_argument("--perturb-seed", type=int, default=0, dest="perturb_seed")
    p.add_argument("--poll", type=float, default=0.01,
                   help="poll interval, seconds")
    p.add_argument("--count", type=int,
                   help="exit after this many measurements")
    p.add_argument("--idle-exit", type=float, dest="idle_exit",
                   help="exit after this many idle seconds")
    p.set_defaults(fn=_cmd_hil_serve)

    p = sub.add_parser("hil-collect",
                       help="collect measured samples through the store")
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--case", default="wscc9")
    p.add_argument("--n", type=int, required=True)
    _add_mutation_flags(p)
    p.add_argument("--timeout", type=float, default=60.0,
                   help="seconds without progress before giving up")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_hil_collect)

    p = sub.add_parser("finetune", help="continue training a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="write the metrics report (JSON)")
    p.add_argument("--svg", help="write a per-bus error chart")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("scenario1",
                       help="train on synthetic data, test on measurements")
    _add_common(p)
    p.add_argument("--train-dataset", required=True, dest="train_dataset")
    p.add_argument("--test-dataset", required=True, dest="test_dataset")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_scenario1)

    p = sub.add_parser("scenario2",
                       help="pretrain, fine-tune on measurements, test")
    _add_common(p)
    p.add_argument("--pretrain-dataset", required=True,
                   dest="pretrain_dataset")
    p.add_argument("--finetune-dataset", required=True,
                   dest="finetune_dataset")
    p.add_argument("--test-dataset", required=True, dest="test_dataset")
    p.add_argument("--baseline-report", dest="baseline_report",
                   help="scenario-1 report.json; pins the test set and "
                        "enables the comparison summary")
    p.add_argument("--pretrained",
                   help="reuse an existing checkpoint instead of pretraining")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_scenario2)

    p = sub.add_parser("report", help="render charts from a saved report")
    p.add_argument("--metrics", required=True, help="report.json path")
    p.add_argument("--svg", required=True)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CaseValidationError as exc:
        print("error: invalid case:", file=sys.stderr)
        for violation in exc.violations:
            print(f"  - {violation}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
