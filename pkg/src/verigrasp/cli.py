"""Command-line entry points.

    verigrasp gen-bench --seed 0 --out runs/bench
    verigrasp train --config configs/full.json --dataset runs/bench --out runs/full
    verigrasp eval --checkpoint runs/full/checkpoint.json --dataset runs/bench \
        --split test --out runs/full-eval
    verigrasp verify-theory --checkpoint runs/full/checkpoint.json \
        --dataset runs/bench --out runs/theory
    verigrasp report runs/full-eval/metrics.json runs/nocon-eval/metrics.json

Every command writes a manifest.json into its output directory: a run id
derived from the command's configuration (not from timestamps, so reruns
of the same configuration share the id), the creation time as separate
fields, and sha256 digests of every file the command produced.

Exit codes: 0 on success, 2 on validation/configuration errors, 3 on
numerical verification failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import benchmark, metrics, runner, selective, training, verify
from .errors import NumericalError, ValidationError


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict,
                   files: list[str]) -> dict:
    run_id = hashlib.sha256(
        _canonical({"command": command, "config": config}).encode()).hexdigest()[:16]
    now = time.time()
    manifest = {
        "run_id": run_id,
        "command": command,
        "config": config,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(now)),
        "created_at_unix": now,
        "files": {name: _file_sha256(out_dir / name) for name in files},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def _out_dir(raw: str) -> Path:
    out = Path(raw)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------- commands ----------

def cmd_gen_bench(args) -> int:
    out = _out_dir(args.out)
    ds = benchmark.build_dataset(args.seed)
    benchmark.export_dataset(ds, out)
    stats = benchmark.dataset_stats(ds)
    digest = benchmark.dataset_digest(ds)
    (out / "stats.json").write_text(json.dumps(
        {**stats, "digest": digest, "seed": args.seed}, indent=2) + "\n")
    write_manifest(out, "gen-bench", {"seed": args.seed},
                   ["scenes.jsonl", "instructions.jsonl", "split.json", "stats.json"])
    print(f"scenes: {stats['n_scenes']} {stats['scenes_per_split']}")
    print(f"instructions: {stats['n_instructions']} "
          f"({stats['n_ambiguous']} ambiguous / {stats['n_unambiguous']} unambiguous)")
    print(f"objects per scene: {stats['min_objects']}-{stats['max_objects']} "
          f"mean {stats['mean_objects']:.4f}")
    print(f"digest: {digest}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args.out)
    try:
        raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {args.config}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {args.config} is not valid JSON: {exc}")
    config = training.TrainConfig.from_dict(raw)
    ds = benchmark.import_dataset(args.dataset)

    ckpt, curves = training.train(ds, config)
    training.save_checkpoint(ckpt, out / "checkpoint.json")
    training.write_curves(curves, out / "curves.csv")
    write_manifest(out, "train",
                   {"train": config.to_dict(), "dataset_digest": benchmark.dataset_digest(ds)},
                   ["checkpoint.json", "curves.csv"])
    first, last = curves[0], curves[-1]
    print(f"ablation: {config.ablation}  steps: {config.steps}")
    print(f"action loss: {first.action:.4f} -> {last.action:.4f}")
    print(f"contrastive loss: {first.contrastive:.4f} -> {last.contrastive:.4f}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args.out)
    ckpt = training.load_checkpoint(args.checkpoint)
    ds = benchmark.import_dataset(args.dataset)
    tag = ckpt.config.ablation

    raw_records = runner.evaluate_split(ckpt.params, tag, ds, args.split, tag)
    if args.threshold is not None:
        gate = selective.SelectivePolicy(threshold=args.threshold)
    else:
        val_records = runner.evaluate_split(ckpt.params, tag, ds, "val", tag)
        gate = selective.calibrate_threshold(val_records, target=args.calibrate)
    gated_records = runner.apply_gate(raw_records, gate)

    detection = metrics.detection_report(raw_records)
    gated = metrics.gated_report(gated_records)
    curve = selective.risk_coverage_curve(raw_records)
    retrieval = {
        str(n): metrics.recall_at_k(
            verify.retrieval_episodes(ds, ckpt, n, splits=(args.split,)), 1)
        for n in (8, 16, 32)
    }
    payload = {
        "split": args.split,
        "config_tag": tag,
        "n_episodes": len(raw_records),
        "threshold": gate.threshold,
        "threshold_degenerate": gate.degenerate,
        "calibration_target": None if args.threshold is not None else args.calibrate,
        "detection": detection,
        "gated": gated,
        "recall_at_1": retrieval,
        "macro_total": metrics.macro_total(detection, gated),
        "risk_coverage": [
            {"threshold": p.threshold, "coverage": p.coverage,
             "risk": p.risk, "n_acted": p.n_acted}
            for p in curve
        ],
    }
    from .logs import write_episodes
    write_episodes(raw_records, out / "episodes_raw.jsonl")
    write_episodes(gated_records, out / "episodes.jsonl")
    (out / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n")
    with (out / "risk_coverage.csv").open("w") as fh:
        fh.write("threshold,coverage,risk,n_acted\n")
        for p in curve:
            fh.write(f"{p.threshold!r},{p.coverage!r},{p.risk!r},{p.n_acted}\n")
    write_manifest(out, "eval",
                   {"checkpoint": str(args.checkpoint), "split": args.split,
                    "threshold": args.threshold, "calibrate": args.calibrate,
                    "dataset_digest": benchmark.dataset_digest(ds)},
                   ["episodes_raw.jsonl", "episodes.jsonl", "metrics.json",
                    "risk_coverage.csv"])
    print(f"threshold: {gate.threshold:.4f}"
          + (" (degenerate)" if gate.degenerate else ""))
    print(f"auroc: {detection['auroc']:.4f}  aupr: {detection['aupr']:.4f}  "
          f"ece: {detection['ece']:.4f}")
    print(f"clar@ambig: {gated['clar_at_ambig']:.4f}  "
          f"unambig success: {gated['unambig_success']:.4f}  "
          f"total: {gated['total_success']:.4f}")
    print("recall@1: " + "  ".join(f"n={n}: {v:.4f}" for n, v in retrieval.items()))
    return 0


def cmd_verify_theory(args) -> int:
    out = _out_dir(args.out)
    ckpt = training.load_checkpoint(args.checkpoint)
    ds = benchmark.import_dataset(args.dataset)

    grad_instances = 10 if args.quick else args.grad_instances
    report = verify.theory_battery(
        ds, ckpt, grad_instances=grad_instances, seed=args.seed,
        include_robustness=not args.quick)
    (out / "theory.json").write_text(json.dumps(report, indent=2) + "\n")
    write_manifest(out, "verify-theory",
                   {"checkpoint": str(args.checkpoint), "seed": args.seed,
                    "grad_instances": grad_instances, "quick": args.quick,
                    "dataset_digest": benchmark.dataset_digest(ds)},
                   ["theory.json"])

    for name in ("gradients", "entropy", "bound", "decomposition",
                 "bottleneck", "robustness"):
        if name in report:
            status = "pass" if report[name]["passed"] else "FAIL"
            print(f"{name:14s} {status}")
    print(f"influence      goal={report['influence']['goal']:.4f} "
          f"bow={report['influence']['bow']:.4f} "
          f"template={report['influence']['template']:.4f} "
          f"({'pass' if report['influence']['goal_lowest'] else 'FAIL'})")
    if not report["passed"]:
        raise NumericalError("theory verification battery failed; see theory.json")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.metrics:
        try:
            payload = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ValidationError(f"metrics file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} is not valid JSON: {exc}")
        rows.append(payload)

    columns = ("auroc", "aupr", "ece", "fpr_at_95", "cov_at_95")
    header = f"{'config':18s} " + " ".join(f"{c:>9s}" for c in columns) \
        + f" {'clar@amb':>9s} {'unamb_sr':>9s} {'r@1_n8':>9s} {'macro':>9s}"
    print(header)
    print("-" * len(header))
    csv_rows = []
    for payload in rows:
        det = payload["detection"]
        gated = payload["gated"]
        line = f"{payload['config_tag']:18s} " \
            + " ".join(f"{det[c]:9.4f}" for c in columns) \
            + f" {gated['clar_at_ambig']:9.4f} {gated['unambig_success']:9.4f}" \
            + f" {payload['recall_at_1']['8']:9.4f}" \
            + f" {payload['macro_total']:9.4f}"
        print(line)
        csv_rows.append([payload["config_tag"], *(det[c] for c in columns),
                         gated["clar_at_ambig"], gated["unambig_success"],
                         payload["recall_at_1"]["8"], payload["macro_total"]])
    if args.csv:
        with Path(args.csv).open("w") as fh:
            fh.write("config," + ",".join(columns)
                     + ",clar_at_ambig,unambig_success,recall_at_1_n8,macro_total\n")
            for row in csv_rows:
                fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                                  for v in row) + "\n")
    return 0


# ---------- parser ----------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="verigrasp",
        description="verified grounding pipeline for tabletop pick instructions")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-bench", help="generate the benchmark corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_bench)

    p = sub.add_parser("train", help="train one pipeline configuration")
    p.add_argument("--config", required=True, help="JSON file of training options")
    p.add_argument("--dataset", required=True, help="directory from gen-bench")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with the entropy gate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, default=None,
                   help="fixed entropy threshold; default calibrates on val")
    p.add_argument("--calibrate", default="max_total",
                   choices=("max_total", "cov_at_95"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-theory", help="run the numerical verification battery")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grad-instances", type=int, default=100)
    p.add_argument("--quick", action="store_true",
                   help="fewer gradient instances, skip the robustness sweep")
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("report", help="tabulate metrics.json files side by side")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--csv", default=None, help="also write the table to this CSV file")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
