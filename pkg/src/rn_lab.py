"""
Command-line entry point.

    PYTHONPATH=. python src/rn_lab.py gradcheck --layer rn --channels 4 --batch 8
    PYTHONPATH=. python src/rn_lab.py train --config src/configs/default.cfg
    PYTHONPATH=. python src/rn_lab.py eval --checkpoint output/rn-s0/checkpoints/epoch_010.json --data data.csv
    PYTHONPATH=. python src/rn_lab.py analyze --run output/rn-s0
    PYTHONPATH=. python src/rn_lab.py sweep --config src/configs/default.cfg --vary normalizer --num-seeds 5

Exit codes: 0 success, 1 verification failure or divergence, 2 usage or config error.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from src import config as settings
from src.analyze import export_reports
from src.config import ConfigError, ExperimentConfig, load_config
from src.data import load_csv
from src.norms import GATE_NAMES, NORMALIZERS, TransNorm, make_normalizer, transfer_attention
from src.norms.norm import DomainStats
from src.numerics import GradCheckResult, InvalidInputError, Tensor, grad_check
from src.train import TrainingDiverged, evaluate, load_model, train_run, write_table

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

SWEEPS: Dict[str, List[Tuple[str, Dict[str, object]]]] = {
    "normalizer": [(kind, {"normalizer": kind}) for kind in ("bn", "autodial", "dsbn", "tn", "rn")],
    "gate": [
        ("gate_0.5", {"normalizer": "rn", "fixed_gate": 0.5}),
        ("gate_0.75", {"normalizer": "rn", "fixed_gate": 0.75}),
        ("gate_1.0", {"normalizer": "rn", "fixed_gate": 1.0}),
        ("learnable", {"normalizer": "rn", "fixed_gate": None}),
    ],
    "measure": [(m, {"normalizer": "rn", "measure": m}) for m in ("neg_l2", "neg_l1", "neg_cosine")],
    "ablation": [
        ("bn", {"normalizer": "bn"}),
        ("rn_ra_only", {"normalizer": "rn", "use_rc": False}),
        ("rn", {"normalizer": "rn", "use_rc": True}),
    ],
}


# ============================================================================
# GRADCHECK
# ============================================================================


def _interior(rng: np.random.Generator, channels: int) -> np.ndarray:
    """Values strictly inside (0.5, 1) so the projection bounds are never touched."""
    return rng.uniform(0.55, 0.95, size=channels)


def check_layer(
    kind: str, channels: int, batch: int, tol: float = 1e-4, seed: int = 0, spatial: int = 1, **options
) -> GradCheckResult:
    """
    Finite-difference check of one normalizer's train-mode forward.

    Inputs are both batches plus every learnable parameter of the layer (at
    random interior values); the loss is a fixed random projection of both
    outputs. TransNorm's attention is computed once and held fixed, since it
    is detached from the tape.
    """
    if channels < 1 or batch < 1 or spatial < 1:
        raise InvalidInputError(f"channels, batch and spatial must be >= 1, got {channels}, {batch}, {spatial}")
    rng = np.random.default_rng(seed)
    shape = (batch, channels, spatial, spatial)
    template = make_normalizer(kind, channels, **options)

    inputs: Dict[str, np.ndarray] = {
        "x_s": rng.normal(0.0, 1.0, size=shape),
        "x_t": rng.normal(0.5, 1.5, size=shape),
    }
    for p in template.parameters():
        if p.bounds is not None:
            inputs[p.name] = _interior(rng, channels)
        elif p.name.startswith("gamma"):
            inputs[p.name] = rng.uniform(0.5, 1.5, size=channels)
        else:
            inputs[p.name] = rng.normal(0.0, 0.5, size=channels)
    weights_s = rng.normal(size=shape)
    weights_t = rng.normal(size=shape)

    attention = None
    if isinstance(template, TransNorm):
        attention = transfer_attention(
            DomainStats.of(Tensor(inputs["x_s"])), DomainStats.of(Tensor(inputs["x_t"])), template.epsilon
        )

    def loss_fn(t: Dict[str, Tensor]) -> Tensor:
        layer = make_normalizer(kind, channels, **options)
        for p in template.parameters():
            if p.name in GATE_NAMES:
                setattr(layer.gates, p.name, t[p.name])
            else:
                setattr(layer, p.name, t[p.name])
        if attention is not None:
            out_s, out_t = layer.forward_train(t["x_s"], t["x_t"], attention=attention)
        else:
            out_s, out_t = layer.forward_train(t["x_s"], t["x_t"])
        return (out_s * weights_s).sum() + (out_t * weights_t).sum()

    return grad_check(loss_fn, inputs, tol=tol)


def cmd_gradcheck(args: argparse.Namespace) -> int:
    result = check_layer(args.layer, args.channels, args.batch, args.tol, args.seed, args.spatial)
    print(f"=== gradcheck {args.layer} C={args.channels} N={args.batch} HW={args.spatial}x{args.spatial} ===")
    for name, error in result.errors.items():
        print(f"  {name:8s} max relative error {error:.3e}")
    print(result.describe())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(result.describe() + "\n", encoding="utf-8")
    return EXIT_OK if result.passed else EXIT_FAILED


# ============================================================================
# TRAIN / EVAL / ANALYZE
# ============================================================================


def parse_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError("--set", None, pair, "expected KEY=VALUE")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    return load_config(args.config, **overrides)


def cmd_train(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    print(f"\n=== train {config.normalizer} (seed {config.seed}) ===")
    result = train_run(config)
    final = result.metrics[result.metrics["epoch"] == config.epochs].set_index("split")
    print(f"eval_s accuracy: {final.loc['eval_s', 'accuracy']:.4f}")
    print(f"eval_t accuracy: {final.loc['eval_t', 'accuracy']:.4f}")
    print(f"Artifacts in {result.run_dir}")
    return EXIT_OK


class EvalRow(BaseModel):
    domain: str
    accuracy: float
    loss: float
    samples: int


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_model(args.checkpoint)
    source, target = load_csv(args.data)
    rows = []
    for dataset in (source, target):
        if dataset is None:
            continue
        accuracy, loss = evaluate(model, dataset)
        rows.append(EvalRow(domain=dataset.domain, accuracy=accuracy, loss=loss, samples=len(dataset)))
        print(f"{dataset.domain}: accuracy {accuracy:.4f}, loss {loss:.4f} ({len(dataset)} samples)")
    out = Path(args.out or settings.OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    write_table(rows, out / "eval.csv", list(EvalRow.model_fields))
    print(f"Exported {len(rows)} rows to {out / 'eval.csv'}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    analysis = export_reports(args.run, seed=args.seed or 0, theory=not args.no_theory, out_dir=args.out)
    print(f"\n=== analysis of {args.run} ({len(analysis.checkpoints)} checkpoints) ===")
    for report in analysis.channel_distances:
        print(f"  layer {report.layer}: nearest-distance sum {report.distance_sum:.4f}, "
              f"corresponding {report.corresponding_ratio:.1f}%")
    if analysis.theory is not None:
        t = analysis.theory
        print(f"  A-distance {t.a_distance:.3f}, lambda {t.lambda_risk:.3f}, "
              f"source error {t.source_error:.3f}, bound {t.bound:.3f}")
    return EXIT_OK


# ============================================================================
# SWEEP
# ============================================================================


def _run_variant(job: Tuple[str, int, dict]) -> dict:
    variant, seed, values = job
    config = ExperimentConfig(**values)
    result = train_run(config)
    final = result.metrics[result.metrics["epoch"] == config.epochs].set_index("split")
    return {
        "variant": variant,
        "seed": str(seed),
        "eval_s": float(final.loc["eval_s", "accuracy"]),
        "eval_t": float(final.loc["eval_t", "accuracy"]),
        "train_loss": float(final.loc["train_s", "class_loss"]),
    }


def sweep_jobs(base: ExperimentConfig, axis: str, seeds: Sequence[int], out: Path) -> List[Tuple[str, int, dict]]:
    if axis not in SWEEPS:
        raise InvalidInputError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEPS)}")
    jobs = []
    for variant, overrides in SWEEPS[axis]:
        for seed in seeds:
            values = {**base.model_dump(), **overrides, "seed": seed, "out": str(out / variant / f"s{seed}")}
            ExperimentConfig(**values)
            jobs.append((variant, seed, values))
    return jobs


def summarize(rows: List[dict]) -> pd.DataFrame:
    """Per-seed rows followed by one median and one mean row per variant."""
    frame = pd.DataFrame(rows, columns=["variant", "seed", "eval_s", "eval_t", "train_loss"])
    order = list(dict.fromkeys(frame["variant"]))
    parts = []
    for variant in order:
        runs = frame[frame["variant"] == variant]
        numeric = runs[["eval_s", "eval_t", "train_loss"]]
        parts.append(runs)
        for label, values in (("median", numeric.median()), ("mean", numeric.mean())):
            parts.append(pd.DataFrame([{"variant": variant, "seed": label, **values.to_dict()}]))
    return pd.concat(parts, ignore_index=True)


def run_sweep(base: ExperimentConfig, axis: str, seeds: Sequence[int], out: Path, threads: int = 1) -> pd.DataFrame:
    jobs = sweep_jobs(base, axis, seeds, out)
    print(f"\nRunning {len(jobs)} runs over {axis} ({threads} worker{'s' if threads > 1 else ''})...")
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_run_variant, jobs))
    else:
        rows = []
        for i, job in enumerate(jobs):
            rows.append(_run_variant(job))
            print(f"  Completed run {i + 1}/{len(jobs)}: {job[0]} seed {job[1]}")
    summary = summarize(rows)
    out.mkdir(parents=True, exist_ok=True)
    summary.to_csv(out / "summary.csv", index=False, encoding="utf-8", lineterminator="\n")
    return summary


def cmd_sweep(args: argparse.Namespace) -> int:
    base = load_config(args.config, **parse_overrides(args.set))
    first = args.seed if args.seed is not None else base.seed
    seeds = list(range(first, first + args.num_seeds))
    out = Path(args.out or os.path.join(settings.OUTPUT_DIR, f"sweep-{args.vary}"))
    summary = run_sweep(base, args.vary, seeds, out, threads=settings.THREADS)
    medians = summary[summary["seed"] == "median"]
    print("\nMedian target accuracy:")
    for _, row in medians.iterrows():
        print(f"  {row['variant']:12s} {row['eval_t']:.4f}")
    print(f"\nExported summary to {out / 'summary.csv'}")
    return EXIT_OK


# ============================================================================
# ENTRY POINT
# ============================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rn_lab", description="Reciprocal Normalization lab")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--seed", type=int, default=None, help="Random seed")
        sub.add_argument("--out", default=None, help="Output directory")

    gc = commands.add_parser("gradcheck", help="Compare a layer's backward pass with finite differences")
    gc.add_argument("--layer", choices=sorted(NORMALIZERS), default="rn")
    gc.add_argument("--channels", type=int, default=4)
    gc.add_argument("--batch", type=int, default=8)
    gc.add_argument("--spatial", type=int, default=1, help="H = W of the input maps")
    gc.add_argument("--tol", type=float, default=1e-4)
    common(gc)
    gc.set_defaults(handler=cmd_gradcheck)

    tr = commands.add_parser("train", help="Train one run")
    tr.add_argument("--config", default=settings.DEFAULT_CONFIG)
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key")
    common(tr)
    tr.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", help="Evaluate a checkpoint on a data CSV")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    common(ev)
    ev.set_defaults(handler=cmd_eval)

    an = commands.add_parser("analyze", help="Export analysis.json for a run")
    an.add_argument("--run", required=True)
    an.add_argument("--no-theory", action="store_true", help="Skip A-distance and lambda estimation")
    common(an)
    an.set_defaults(handler=cmd_analyze)

    sw = commands.add_parser("sweep", help="Run variants across seeds and summarize")
    sw.add_argument("--config", default=settings.DEFAULT_CONFIG)
    sw.add_argument("--vary", choices=sorted(SWEEPS), required=True)
    sw.add_argument("--num-seeds", type=int, default=1)
    sw.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key")
    common(sw)
    sw.set_defaults(handler=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            args.seed = args.seed if args.seed is not None else 0
        return args.handler(args)
    except (ConfigError, InvalidInputError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"Training diverged: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
