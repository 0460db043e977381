"""Command-line entry point: quantize, train, eval, bench, verify, report.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 assertion failure
(a verification suite that does not hold). Every run writes a manifest
recording the command, a hash of its resolved configuration, the seed, the
git revision, and a timestamp.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import envs, kernels, ppo, theory
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .quantization import (QuantConfig, TernaryTensor, dequantize,
                           measure_perturbation, quantize)
from .tensor_core import RngStream

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_ASSERTION = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default calls sys.exit(2)
        raise UsageError(message)


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(path, command: str, config_repr: str, seed) -> dict:
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(config_repr.encode()).hexdigest(),
        "seed": seed,
        "git_describe": _git_describe(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def _manifest_path(args) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
        return out / "manifest.json" if out.suffix == "" and out.is_dir() \
            else Path(str(out) + ".manifest.json")
    return Path("manifest.json")


def cmd_quantize(args) -> int:
    cfg = QuantConfig(threshold_fraction=args.tau_frac, scale_mode=args.scale)
    tensors, vocab = load_checkpoint(args.in_path)
    if not tensors:
        print("error: checkpoint has no tensors", file=sys.stderr)
        return EXIT_RUNTIME
    in_size = Path(args.in_path).stat().st_size
    out_tensors = {}
    rows = []
    for name, t in tensors.items():
        if isinstance(t, TernaryTensor):
            out_tensors[name] = t
            rows.append((name, f"{t.rows}x{t.cols}", 0.0, t.scale))
        elif isinstance(t, np.ndarray) and t.ndim == 2 and not name.startswith("meta."):
            q = quantize(t, cfg)
            rep = measure_perturbation(t, cfg)
            out_tensors[name] = q
            rows.append((name, f"{t.shape[0]}x{t.shape[1]}", rep.epsilon_q, q.scale))
        else:
            out_tensors[name] = t
    save_checkpoint(args.out, out_tensors, vocab)
    out_size = Path(args.out).stat().st_size
    print(f"{'tensor':<24} {'shape':>12} {'eps_q':>10} {'scale':>10}")
    for name, shape, eps, scale in rows:
        print(f"{name:<24} {shape:>12} {eps:>10.6f} {scale:>10.6f}")
    print(f"size: {in_size} -> {out_size} bytes (ratio {in_size / out_size:.2f}x)")
    write_manifest(_manifest_path(args), "quantize",
                   f"in={args.in_path} tau_frac={args.tau_frac} scale={args.scale}",
                   None)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, notes = ppo.parse_config(args.config,
                                  {"seed": args.seed, "critic_mode": args.critic})
    for note in notes:
        print(note)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = json.dumps({f: getattr(cfg, f) for f in sorted(vars(cfg))},
                          sort_keys=True)
    write_manifest(out / "manifest.json", "train",
                   f"env={args.env} {resolved}", cfg.seed)
    result = ppo.train(args.env, cfg, out)
    print(f"status: {result.status}")
    if result.final_eval is not None:
        print(f"final eval mean return: {result.final_eval:.2f}")
    if result.status == "diverged":
        print("error: training diverged (20 consecutive failed updates)",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(args) -> int:
    mean, std, returns = ppo.evaluate(args.ckpt, args.env, args.episodes,
                                      RngStream(args.seed, 400))
    print(json.dumps({"env": args.env, "episodes": args.episodes,
                      "mean_return": mean, "std_return": std,
                      "returns": returns}))
    print(f"mean return {mean:.2f} +/- {std:.2f} over {args.episodes} episodes")
    write_manifest(_manifest_path(args), "eval",
                   f"ckpt={args.ckpt} env={args.env} episodes={args.episodes}",
                   args.seed)
    return EXIT_OK


def cmd_bench(args) -> int:
    sizes = [int(d) for d in args.dims.split(",") if d]
    if not sizes:
        raise UsageError("--dims must list at least one dimension")
    reports = kernels.bench_matvec([(d, d) for d in sizes],
                                   iters=args.iters, seed=args.seed)
    print(f"{'dims':>12} {'ternary med us':>15} {'dense med us':>14} {'speedup':>8}")
    for r in reports:
        print(f"{r.dims[0]}x{r.dims[1]:<7} {r.median_ns / 1e3:>15.1f} "
              f"{r.dense_median_ns / 1e3:>14.1f} {r.speedup_vs_dense:>8.2f}")
    if args.out:
        Path(args.out).write_text(
            json.dumps([json.loads(r.to_json()) for r in reports], indent=2) + "\n")
    write_manifest(_manifest_path(args), "bench",
                   f"dims={args.dims} iters={args.iters}", args.seed)
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(theory.SUITES) if args.suite == "all" else [args.suite]
    all_passed = True
    results = {}
    for name in names:
        report = theory.SUITES[name]()
        results[name] = report
        all_passed = all_passed and report["passed"]
        print(f"suite {name}: {'PASS' if report['passed'] else 'FAIL'}")
    payload = json.dumps(results, indent=2, default=float)
    if args.out:
        Path(args.out).write_text(payload + "\n")
    else:
        print(payload)
    write_manifest(_manifest_path(args), "verify", f"suite={args.suite}", None)
    return EXIT_OK if all_passed else EXIT_ASSERTION


_PHASES = (("0-20%", 0.0, 0.2), ("40-60%", 0.4, 0.6), ("80-100%", 0.8, 1.0))
_REPORT_KEYS = ("entropy", "value_loss", "grad_norm")


def _phase_stats(run_dir: Path) -> dict:
    lines = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]
    if not lines:
        raise ValueError(f"{run_dir}: empty metrics file")
    max_step = max(l["step"] for l in lines)
    stats = {}
    for label, lo, hi in _PHASES:
        window = [l for l in lines if lo * max_step <= l["step"] <= hi * max_step]
        stats[label] = {k: float(np.mean([l[k] for l in window])) if window
                        else float("nan") for k in _REPORT_KEYS}
    evals_path = run_dir / "evals.jsonl"
    final = None
    if evals_path.exists():
        evals = [json.loads(l) for l in evals_path.read_text().splitlines()]
        if evals:
            final = evals[-1]["mean_return"]
    stats["final_return"] = final
    return stats


def cmd_report(args) -> int:
    per_run = [_phase_stats(Path(d)) for d in args.runs]
    print(f"{'phase':<10} {'metric':<12} {'mean':>12} {'std':>12}")
    aggregate = {}
    for label, _, _ in _PHASES:
        aggregate[label] = {}
        for key in _REPORT_KEYS:
            vals = np.array([r[label][key] for r in per_run])
            mean, std = float(np.nanmean(vals)), float(np.nanstd(vals))
            aggregate[label][key] = {"mean": mean, "std": std}
            print(f"{label:<10} {key:<12} {mean:>12.4f} {std:>12.4f}")
    finals = [r["final_return"] for r in per_run if r["final_return"] is not None]
    if finals:
        mean, std = float(np.mean(finals)), float(np.std(finals))
        aggregate["final_return"] = {"mean": mean, "std": std}
        print(f"{'final':<10} {'return':<12} {mean:>12.4f} {std:>12.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(aggregate, indent=2) + "\n")
    write_manifest(_manifest_path(args), "report",
                   "runs=" + ",".join(args.runs), None)
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="bitrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="ternarize an FP32 checkpoint")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau-frac", type=float, default=0.5)
    p.add_argument("--scale", choices=["absmean", "none"], default="absmean")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("train", help="train heads on a frozen ternary backbone")
    p.add_argument("--env", required=True, choices=list(envs.ENV_IDS))
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--critic", choices=list(ppo.CRITIC_MODES), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="deterministic checkpoint evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--env", required=True, choices=list(envs.ENV_IDS))
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="kernel micro-benchmark")
    p.add_argument("--dims", required=True, help="comma-separated square dims")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run the bound-verification suites")
    p.add_argument("--suite", required=True,
                   choices=list(theory.SUITES) + ["all"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="aggregate training runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FileNotFoundError, KeyError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
