#!/usr/bin/env python3
"""End-to-end experiment pipeline.

Generates the dataset, trains both model variants, exports uncertainty
records, runs the occlusion / noise / OOD experiments against the
best-validation checkpoints, and renders the summary plots. Everything goes
through the CLI so the whole run is reproducible from the config + seed.

Usage:
    python scripts/run_pipeline.py --out runs/full [--config my.json]
"""

import argparse
import sys
from pathlib import Path

from landuq.cli import main as landuq


def run(args: list[str]) -> None:
    code = landuq([str(a) for a in args])
    if code != 0:
        sys.exit(f"step failed ({code}): landuq {' '.join(str(a) for a in args)}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, required=True, help="run directory")
    parser.add_argument("--config", type=Path, default=None, help="experiment config JSON")
    parser.add_argument("--skip-existing-data", action="store_true")
    args = parser.parse_args()

    out = args.out
    cfg = ["--config", args.config] if args.config else []
    data = out / "data"

    if not (args.skip_existing_data and (data / "train" / "manifest.json").is_file()):
        run(["gen-data", *cfg, "--out", data, "--force"])

    for variant in ("plain", "skip"):
        run(["train", *cfg, "--data", data, "--out", out / variant, "--variant", variant])

    for variant in ("plain", "skip"):
        ckpt = out / variant / "best"
        run([
            "predict", *cfg, "--ckpt", ckpt, "--data", data / "test",
            "--out", out / variant / "uncertainty.jsonl",
        ])
        for mode in ("occlusion", "noise"):
            run([
                "eval-corruption", *cfg, "--ckpt", ckpt, "--data", data / "test",
                "--mode", mode, "--out", out / variant / mode,
            ])
        run([
            "eval-ood", *cfg, "--ckpt", ckpt, "--id", data, "--ood", data / "ood",
            "--out", out / variant / "ood",
        ])

        plots = out / variant / "plots"
        plots.mkdir(parents=True, exist_ok=True)
        run([
            "plot", "--kind", "scatter", "--in", out / variant / "uncertainty.jsonl",
            "--truth", data / "test" / "landmarks.csv", "--out", plots / "error_vs_uncertainty.svg",
        ])
        run([
            "plot", "--kind", "box", "--in", out / variant / "occlusion" / "occlusion_report.csv",
            "--out", plots / "occlusion_groups.svg",
        ])
        run([
            "plot", "--kind", "sweep", "--in", out / variant / "noise" / "noise_sweep.csv",
            "--out", plots / "noise_sweep.svg",
        ])
        for detector in ("predictive", "iforest"):
            run([
                "plot", "--kind", "kde", "--in", out / variant / "ood" / f"kde_{detector}.csv",
                "--out", plots / f"ood_kde_{detector}.svg",
            ])
    print(f"pipeline complete: {out}")


if __name__ == "__main__":
    main()
