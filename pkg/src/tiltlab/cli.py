"""Command-line interface.

Subcommands: run, train, sample, eval, sweep, audit.  Validation
failures exit nonzero with a machine-readable error JSON on stdout.
Set TILTLAB_THREADS to cap the linear-algebra thread pool (read before
numpy is first imported).
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _apply_thread_env() -> None:
    threads = os.environ.get("TILTLAB_THREADS")
    if threads:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, threads)


_apply_thread_env()


def _parse_values(raw: list[str], axis: str):
    if axis == "eta_beta":
        return [tuple(float(x) for x in v.split(",")) for v in raw]
    if axis == "method":
        return raw
    if axis in ("K", "steps"):
        return [int(v) for v in raw]
    return [float(v) for v in raw]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tiltlab",
        description="Reward-tilted sampling with guided diffusion and flow matching.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="sample, evaluate, and render figures for one config")
    p_run.add_argument("config", help="experiment config JSON")

    p_train = sub.add_parser("train", help="train and persist a guidance network")
    p_train.add_argument("config")

    p_sample = sub.add_parser("sample", help="sampling only: samples.csv + stats.json")
    p_sample.add_argument("config")

    p_eval = sub.add_parser("eval", help="evaluate an existing samples.csv against the target")
    p_eval.add_argument("config")
    p_eval.add_argument("samples", help="path to samples.csv")

    p_sweep = sub.add_parser("sweep", help="repeat a run across one axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True)
    p_sweep.add_argument(
        "--values",
        required=True,
        nargs="+",
        help="axis values; for eta_beta give eta,beta pairs",
    )
    p_sweep.add_argument("--out", default=None, help="sweep CSV path (default: <output_dir>/sweep.csv)")

    p_audit = sub.add_parser("audit", help="run the gradient/oracle audit suite")
    p_audit.add_argument("--seed", type=int, default=0)
    p_audit.add_argument("--out", default=None, help="optional audit.json path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    from . import harness

    try:
        if args.command == "run":
            out = harness.run_experiment(harness.load_config(args.config))
            print(json.dumps(out, indent=2))
        elif args.command == "train":
            out = harness.train_experiment(harness.load_config(args.config))
            print(json.dumps(out, indent=2))
        elif args.command == "sample":
            exp, samples, stats = harness.sample_experiment(harness.load_config(args.config))
            print(
                json.dumps(
                    {
                        "samples": str(exp.output_dir / "samples.csv"),
                        "stats": stats.to_json(),
                        "config_hash": exp.hash,
                    },
                    indent=2,
                )
            )
        elif args.command == "eval":
            out = harness.eval_samples(harness.load_config(args.config), args.samples)
            print(json.dumps(out, indent=2))
        elif args.command == "sweep":
            doc = harness.load_config(args.config)
            values = _parse_values(args.values, args.axis)
            from pathlib import Path

            out_path = args.out
            if out_path is None:
                base = Path(doc.get("_base_dir", ".")) / doc.get("output_dir", "out")
                out_path = base / "sweep.csv"
            rows = harness.run_sweep(doc, args.axis, values, out_path)
            print(json.dumps({"sweep_csv": str(out_path), "rows": rows}, indent=2))
            if any(r["status"] != "ok" for r in rows):
                return 3
        elif args.command == "audit":
            results = harness.run_audit(seed=args.seed)
            for rec in results:
                status = "PASS" if rec["pass"] else "FAIL"
                print(f"AUDIT {rec['check']:<24} {status}  value={rec['value']:.3e} tol={rec['tolerance']:.0e}")
            if args.out:
                with open(args.out, "w") as fh:
                    json.dump(results, fh, indent=2)
            if not all(r["pass"] for r in results):
                return 1
    except harness.ConfigError as exc:
        print(json.dumps({"error": {"type": "ConfigError", "message": str(exc)}}))
        return 2
    except Exception as exc:  # runtime failures also reported as JSON
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
