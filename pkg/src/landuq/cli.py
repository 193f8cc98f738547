"""Command line entry point.

Subcommands: gen-data, train, predict, eval-corruption, eval-ood, plot.
Every command is a pure function of (config, inputs, seed); reruns produce
byte-identical outputs. Seed precedence: --seed flag, then the LUQ_SEED
environment variable, then the config file.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .anomaly import ood_experiment
from .config import ExperimentConfig, dump_config, load_config
from .corrupt import NoiseSpec, noise_sweep, occlusion_experiment
from .dataio import atomic_write_text, read_split, write_split
from .errors import ConfigError, ContractError, DataError, NumericError
from .graph import normalize_adjacency
from .model import load_checkpoint, sample_predictions
from .seeding import stable_seed, rng_from
from .synth import make_dataset, make_ood_set
from .train import train_loop
from .uncertainty import make_record, read_records, write_records


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _effective_seed(args, cfg: ExperimentConfig) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("LUQ_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"LUQ_SEED must be an integer, got {env!r}") from exc
    return cfg.seed


def _load_ctx(args) -> tuple[ExperimentConfig, int]:
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None and not Path(cfg_path).is_file():
        raise DataError(f"config file not found: {cfg_path}")
    cfg = load_config(cfg_path)
    seed = _effective_seed(args, cfg)
    if args.print_config:
        effective = dump_config(cfg)
        doc = json.loads(effective)
        doc["seed"] = seed
        print(json.dumps(doc, indent=2, sort_keys=True))
        raise SystemExit(0)
    return cfg, seed


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def _read_csv(path: Path) -> tuple[list[str], list[dict]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"report not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise UsageError(f"{path}: empty input")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise DataError(f"{path}:{lineno}: malformed row")
            rows.append(row)
    if not rows:
        raise UsageError(f"{path}: no data rows")
    return list(reader.fieldnames), rows


def _float_field(path, lineno, row, key):
    try:
        return float(row[key])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}:{lineno}: bad value for {key!r}") from exc


def cmd_gen_data(args) -> int:
    cfg, seed = _load_ctx(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output directory {out} is not empty (use --force to overwrite)")
    h, w = cfg.data.image_hw
    train, val, test = make_dataset(
        cfg.structures, h, w, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, seed,
        degrade=cfg.data.degrade,
    )
    ood = make_ood_set(cfg.structures, h, w, cfg.data.n_ood_per_category, seed)
    for name, samples in (("train", train), ("val", val), ("test", test), ("ood", ood)):
        write_split(out / name, samples, cfg.structures, seed, name)
    atomic_write_text(out / "config.json", dump_config(cfg) + "\n")
    print(f"wrote {len(train)}/{len(val)}/{len(test)} train/val/test and {len(ood)} OOD samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, seed = _load_ctx(args)
    data_dir = Path(args.data)
    train_samples, _ = read_split(data_dir / "train")
    val_samples, _ = read_split(data_dir / "val")
    model_cfg = cfg.model_for(args.variant)
    train_cfg = cfg.train.__class__(**{**cfg.train.__dict__, "seed": seed})
    result = train_loop(train_samples, val_samples, model_cfg, train_cfg, Path(args.out))
    print(
        f"trained {args.variant} for {result.steps} steps; "
        f"best val {result.best_val_error_px:.3f}px; checkpoints in {args.out}"
    )
    return 0


def cmd_predict(args) -> int:
    cfg, seed = _load_ctx(args)
    if args.n < 2:
        raise UsageError(f"--n must be >= 2, got {args.n}")
    weights, model_cfg, _ = load_checkpoint(Path(args.ckpt))
    samples, manifest = read_split(Path(args.data))
    adj = normalize_adjacency(model_cfg.build_topology())
    records = []
    for sample in samples:
        rng = rng_from(seed, "predict", sample.id)
        dist, ens = sample_predictions(sample.image, weights, model_cfg, adj, args.n, rng)
        records.append(make_record(sample.id, dist, ens))
    write_records(Path(args.out), records)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_eval_corruption(args) -> int:
    cfg, seed = _load_ctx(args)
    weights, model_cfg, _ = load_checkpoint(Path(args.ckpt))
    samples, _ = read_split(Path(args.data))
    subset = samples[: cfg.corruption.n_images]
    adj = normalize_adjacency(model_cfg.build_topology())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "occlusion":
        report = occlusion_experiment(
            weights,
            model_cfg,
            adj,
            subset,
            n_samples=cfg.corruption.n_samples,
            side=cfg.corruption.occlusion_side,
            seed=seed,
        )
        _write_csv(
            out / "occlusion_report.csv",
            ["image_id", "placement", "group", "node_index", "node_std"],
            [[r[0], r[1], r[2], r[3], repr(r[4])] for r in report.rows],
        )
        atomic_write_text(out / "summary.json", json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    else:
        report = noise_sweep(
            weights,
            model_cfg,
            adj,
            subset,
            NoiseSpec(levels=cfg.corruption.noise_levels),
            n_samples=cfg.corruption.n_samples,
            seed=seed,
        )
        _write_csv(
            out / "noise_sweep.csv",
            ["level", "sigma_noise", "latent_unc_mean", "pred_score_mean"],
            [
                [i, repr(float(s)), repr(report.latent_means[i]), repr(report.predictive_means[i])]
                for i, s in enumerate(report.levels)
            ],
        )
        atomic_write_text(out / "summary.json", json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.mode} report to {out}")
    return 0


def cmd_eval_ood(args) -> int:
    cfg, seed = _load_ctx(args)
    weights, model_cfg, _ = load_checkpoint(Path(args.ckpt))
    id_root = Path(args.id)
    for sub in ("train", "val", "test"):
        if not (id_root / sub / "manifest.json").is_file():
            raise DataError(f"--id must point at a dataset root with train/val/test; missing {id_root / sub}")
    id_train, _ = read_split(id_root / "train")
    id_val, _ = read_split(id_root / "val")
    id_test, _ = read_split(id_root / "test")
    ood_samples, _ = read_split(Path(args.ood))
    adj = normalize_adjacency(model_cfg.build_topology())
    report = ood_experiment(
        weights,
        model_cfg,
        adj,
        id_train[: cfg.ood.forest_train_cap],
        id_val,
        id_test,
        ood_samples,
        n_samples=cfg.ood.n_samples,
        seed=seed,
        n_trees_grid=cfg.ood.n_trees_grid,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"auc": report.auc, "chosen_n_trees": report.chosen_n_trees}
    atomic_write_text(out / "ood_report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for detector, curves in report.kde_curves.items():
        _write_csv(
            out / f"kde_{detector}.csv",
            ["grid", "density_id", "density_ood"],
            [
                [repr(float(g)), repr(float(di)), repr(float(do))]
                for g, di, do in zip(curves["grid"], curves["density_id"], curves["density_ood"])
            ],
        )
    print(f"wrote OOD report to {out} (pooled predictive AUC {report.auc['predictive']['pooled']:.3f})")
    return 0


def cmd_plot(args) -> int:
    from .svgplot import SvgChart
    from .uncertainty import node_error

    src = Path(args.in_path)
    if not src.is_file():
        raise DataError(f"report not found: {src}")
    if args.kind == "scatter":
        if args.truth is None:
            raise UsageError("--kind scatter needs --truth landmarks.csv")
        records = read_records(src)
        if not records:
            raise UsageError(f"{src}: no records")
        truth: dict[str, dict[int, tuple[float, float]]] = {}
        with open(args.truth, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                truth.setdefault(row["id"], {})[int(row["node_index"])] = (
                    _float_field(args.truth, lineno, row, "x"),
                    _float_field(args.truth, lineno, row, "y"),
                )
        xs, ys = [], []
        for rec in records:
            if rec.id not in truth:
                continue
            target = np.array([truth[rec.id][k] for k in range(len(rec.node_std))])
            errors = node_error(rec.node_mean, target)
            xs.extend(float(v) for v in rec.node_std)
            ys.extend(float(v) for v in errors)
        if not xs:
            raise DataError(f"{args.truth}: no ids overlap {src}")
        chart = SvgChart("Node error vs predictive uncertainty", "node std", "node error")
        chart.set_limits(xs, ys)
        chart.points(xs, ys, "nodes")
    elif args.kind == "kde":
        _, rows = _read_csv(src)
        grid = [_float_field(src, i + 2, r, "grid") for i, r in enumerate(rows)]
        d_id = [_float_field(src, i + 2, r, "density_id") for i, r in enumerate(rows)]
        d_ood = [_float_field(src, i + 2, r, "density_ood") for i, r in enumerate(rows)]
        chart = SvgChart("Score densities", "score", "density")
        chart.set_limits(grid, d_id + d_ood)
        chart.polyline(grid, d_id, "in-distribution")
        chart.polyline(grid, d_ood, "out-of-distribution")
    elif args.kind == "box":
        _, rows = _read_csv(src)
        groups: dict[str, list[float]] = {"inside": [], "outside": []}
        for i, r in enumerate(rows):
            if r.get("group") not in groups:
                raise DataError(f"{src}:{i + 2}: unknown group {r.get('group')!r}")
            groups[r["group"]].append(_float_field(src, i + 2, r, "node_std"))
        chart = SvgChart("Node uncertainty by occlusion group", "group", "node std")
        all_vals = groups["inside"] + groups["outside"]
        chart.set_limits([0.5, 2.5], all_vals)
        for pos, name in ((1.0, "inside"), (2.0, "outside")):
            vals = np.array(groups[name])
            if vals.size == 0:
                raise DataError(f"{src}: group {name!r} has no rows")
            q1, q2, q3 = np.percentile(vals, [25, 50, 75])
            chart.box(pos, float(q1), float(q2), float(q3), float(vals.min()), float(vals.max()), name)
    elif args.kind == "sweep":
        _, rows = _read_csv(src)
        sig = [_float_field(src, i + 2, r, "sigma_noise") for i, r in enumerate(rows)]
        lat = [_float_field(src, i + 2, r, "latent_unc_mean") for i, r in enumerate(rows)]
        pred = [_float_field(src, i + 2, r, "pred_score_mean") for i, r in enumerate(rows)]
        chart = SvgChart("Uncertainty vs noise level", "noise sigma", "mean uncertainty")
        chart.set_limits(sig, lat + pred)
        chart.polyline(sig, lat, "latent")
        chart.polyline(sig, pred, "predictive")
    else:  # unreachable behind argparse choices
        raise UsageError(f"unknown plot kind {args.kind}")
    chart.write(Path(args.out))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="landuq", description=__doc__)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, default=None, help="experiment config JSON")
    shared.add_argument("--seed", type=int, default=None, help="override config/env seed")
    shared.add_argument("--print-config", action="store_true", help="print effective config and exit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[shared], help="generate dataset + OOD sets")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[shared], help="train a model variant")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", choices=("plain", "skip"), default="plain")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[shared], help="export per-image uncertainty records")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval-corruption", parents=[shared], help="occlusion or noise experiment")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mode", choices=("occlusion", "noise"), required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval_corruption)

    p = sub.add_parser("eval-ood", parents=[shared], help="OOD detection experiment")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--id", type=Path, required=True, help="dataset root with train/val/test")
    p.add_argument("--ood", type=Path, required=True, help="OOD split directory")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval_ood)

    p = sub.add_parser("plot", parents=[shared], help="render a report as SVG")
    p.add_argument("--in", type=Path, required=True, dest="in_path")
    p.add_argument("--kind", choices=("scatter", "kde", "box", "sweep"), required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--truth", type=Path, default=None, help="landmarks.csv (scatter only)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
