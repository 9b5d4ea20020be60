"""Command-line entry point: gen, train, eval, cluster-inspect, sweep.

Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, RunConfig, from_dict, load_config, save_config
from .evalkit import cmc_map, dump_embeddings, evaluate, write_per_query, write_report
from .featnet import CheckpointError, Backbone, extract, load_checkpoint
from .ffm import cluster_dump
from .synthdata import benchmark_from_config, load_benchmark, save_benchmark
from .trainer import Trainer, TrainingAborted

log = logging.getLogger("ccreid")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3

# sweep axis -> dotted config key
SWEEP_AXES = {
    "epsilon": "ffm.epsilon",
    "inv_tau": "ffm.inv_tau",
    "lambda4": "losses.lambda4",
    "P_parts": "far.P_parts",
    "K_times": "far.K_times",
    "radius": "ffm.radius",
    "fixed_k": "ffm.fixed_k",
}
INT_AXES = {"P_parts", "K_times", "fixed_k"}


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_json(out: Path, cfg: RunConfig, command: str, started: float, **extra) -> None:
    doc = {"command": command, "config_hash": cfg.hash(), "code_version": code_version(),
           "seed": cfg.seed, "wall_time_s": round(time.time() - started, 3), "argv": sys.argv[1:], **extra}
    (out / "run.json").write_text(json.dumps(doc, indent=2))


def parse_value(text: str):
    """Interpret ``--set`` values as YAML scalars/lists (``0.1``, ``true``, ``[3, 3]``)."""
    return yaml.safe_load(text)


def config_from_args(args, out_is_run_dir: bool = True) -> RunConfig:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(v)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "deterministic", None) is not None:
        overrides["deterministic"] = args.deterministic
    if getattr(args, "eval_every", None) is not None:
        overrides["eval_every"] = args.eval_every
    if getattr(args, "data", None):
        overrides["data.root"] = str(args.data)
    if out_is_run_dir and getattr(args, "out", None):
        overrides["out_dir"] = str(args.out)
    return load_config(args.config, args.preset, overrides)


def prepare_out(out: Path, force: bool, marker: str) -> None:
    if (out / marker).exists() and not force:
        raise FileExistsError(f"{out} already contains {marker}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def print_table(report: dict) -> None:
    print(f"{'protocol':16s} {'Rank-1':>8s} {'Rank-5':>8s} {'mAP':>8s}")
    for proto, r in report.items():
        print(f"{proto:16s} {100 * r['Rank-1']:8.2f} {100 * r.get('Rank-5', float('nan')):8.2f} "
              f"{100 * r['mAP']:8.2f}")


# -- commands ------------------------------------------------------------------------


def cmd_gen(args) -> int:
    started = time.time()
    cfg = config_from_args(args, out_is_run_dir=False)
    out = Path(args.out or "data/synthetic")
    prepare_out(out, args.force, "manifest.json")
    bench = benchmark_from_config(cfg.data)
    save_benchmark(bench, out, fmt=args.format, force=args.force)
    write_run_json(out, cfg, "gen", started, counts={s: bench.split(s).N for s in ("train", "query", "gallery")})
    print(f"wrote {bench.train.N} train / {bench.query.N} query / {bench.gallery.N} gallery images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    cfg = config_from_args(args)
    out = Path(cfg.out_dir)
    if not args.resume:
        prepare_out(out, args.force, "run.json")
    save_config(cfg, out / "config.yaml")
    trainer = Trainer(cfg, out_dir=out)
    if args.resume:
        trainer.load(args.resume)
    res = trainer.run()
    write_report(out / "report.json", res.final)
    if args.dump_embeddings:
        for split in ("train", "query", "gallery"):
            man = trainer.bench.split(split)
            pseudo = trainer.pseudo if split == "train" else None
            dump_embeddings(out / f"embeddings_{split}.csv", man.records, trainer.embed(man), pseudo)
    write_run_json(out, cfg, "train", started, epochs=trainer.epoch)
    print_table(res.final)
    return EXIT_OK


def load_model(ckpt: Path, cfg_check: RunConfig | None):
    payload = load_checkpoint(ckpt)
    cfg = from_dict(payload["config"])
    if cfg_check is not None:
        # where the data and outputs live does not change the model
        cfg_check = cfg_check.replace(**{"data.root": cfg.data.root, "out_dir": cfg.out_dir})
    if cfg_check is not None and cfg_check.hash() != cfg.hash():
        raise ConfigError(f"config hash {cfg_check.hash()} does not match checkpoint config {cfg.hash()}")
    model = Backbone(cfg.backbone)
    model.load_state_dict(payload["backbone"])
    return model, cfg, payload


def cmd_eval(args) -> int:
    started = time.time()
    check = config_from_args(args, out_is_run_dir=False) if (args.config or args.preset) else None
    model, cfg, _ = load_model(Path(args.checkpoint), check)
    bench = load_benchmark(args.data) if args.data else benchmark_from_config(cfg.data)
    protocols = ("standard", "cloth_changing") if args.protocol == "both" else (args.protocol,)
    _, qe = extract(model, bench.query.images())
    _, ge = extract(model, bench.gallery.images())
    qe, ge = qe.numpy(), ge.numpy()
    report = evaluate(qe, ge, bench.query.records, bench.gallery.records, protocols, cfg.eval.ranks)
    out = Path(args.out or Path(args.checkpoint).parent.parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    for proto in protocols:
        res = cmc_map(qe, ge, bench.query.records, bench.gallery.records, proto)
        write_report(out / f"report_{proto}.json", {proto: report[proto]})
        write_per_query(out / f"per_query_{proto}.csv", res, bench.query.records)
    if args.dump_embeddings:
        dump_embeddings(out / "embeddings_query.csv", bench.query.records, qe)
        dump_embeddings(out / "embeddings_gallery.csv", bench.gallery.records, ge)
    write_run_json(out, cfg, "eval", started, checkpoint=str(args.checkpoint))
    print_table(report)
    return EXIT_OK


def cmd_cluster_inspect(args) -> int:
    started = time.time()
    model, cfg, payload = load_model(Path(args.checkpoint), None)
    trainer = Trainer(cfg, load_benchmark(args.data) if args.data else None)
    trainer.model.load_state_dict(payload["backbone"])
    _, emb = extract(trainer.model, trainer.images)
    table = trainer.recluster(emb)
    dump = cluster_dump(table, trainer.bench.train.records)
    out = Path(args.out or Path(args.checkpoint).parent.parent / "clusters")
    out.mkdir(parents=True, exist_ok=True)
    (out / "clusters.json").write_text(json.dumps(dump, indent=1))
    write_run_json(out, cfg, "cluster-inspect", started, N_s=table.N_s)
    print(f"N_s = {table.N_s} clusters over {len(dump)} identities")
    for ident, clusters in dump.items():
        sizes = [len(c) for c in clusters]
        purity = [max(np.bincount([m[1] for m in c])) / len(c) for c in clusters]
        print(f"  identity {ident}: sizes {sizes} clothing purity {[round(p, 2) for p in purity]}")
    return EXIT_OK


def _sweep_one(job):
    cfg_dict, value = job
    cfg = from_dict(cfg_dict)
    try:
        res = Trainer(cfg).run()
    except (TrainingAborted, ValueError, RuntimeError) as exc:
        return value, None, f"{type(exc).__name__}: {exc}"
    return value, res.final, None


def cmd_sweep(args) -> int:
    started = time.time()
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis '{args.axis}' (choose from {', '.join(SWEEP_AXES)})")
    cast = int if args.axis in INT_AXES else float
    try:
        values = [cast(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse sweep values '{args.values}'") from None
    if not values:
        raise ConfigError("sweep needs at least one value")
    base = config_from_args(args)
    if args.axis == "fixed_k":
        base = base.replace(**{"ffm.label_source": "kmeans"})
    jobs = []
    for v in values:
        cfg = base.replace(**{SWEEP_AXES[args.axis]: v})
        jobs.append((cfg.to_dict(), v))
    out = Path(base.out_dir)
    prepare_out(out, args.force, "sweep.csv")
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]

    fields = ["value", "status"]
    for proto in base.eval.protocols:
        fields += [f"{proto}_Rank-1", f"{proto}_mAP"]
    rows = []
    for value, final, err in results:
        row = {"value": value, "status": "ok" if err is None else f"failed: {err}"}
        for proto in base.eval.protocols:
            if final:
                row[f"{proto}_Rank-1"] = final[proto]["Rank-1"]
                row[f"{proto}_mAP"] = final[proto]["mAP"]
        rows.append(row)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="")
        w.writeheader()
        w.writerows(rows)
    plot_sweep(out / "sweep.png", args.axis, rows, base.eval.protocols)
    failed = [r["value"] for r in rows if r["status"] != "ok"]
    write_run_json(out, base, "sweep", started, axis=args.axis, values=values, failed=failed)
    for r in rows:
        print(r)
    if failed:
        print(f"{len(failed)} of {len(rows)} sub-runs failed: {failed}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def plot_sweep(path: Path, axis: str, rows: list[dict], protocols) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ok = [r for r in rows if r["status"] == "ok"]
    for proto in protocols:
        for metric, style in (("mAP", "-o"), ("Rank-1", "--s")):
            ys = [100 * r[f"{proto}_{metric}"] for r in ok]
            ax.plot([r["value"] for r in ok], ys, style, label=f"{proto} {metric}")
    ax.set_xlabel(axis)
    ax.set_ylabel("%")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccreid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", type=Path, help="YAML or JSON config file")
        sp.add_argument("--preset", help="named ablation preset, e.g. fire2, baseline, no-far")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--out", type=Path, help=out_help)
        sp.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, repeatable (e.g. --set ffm.epsilon=0.3)")

    sp = sub.add_parser("gen", help="generate the synthetic benchmark")
    common(sp, "dataset directory")
    sp.add_argument("--format", choices=("raw", "png"), default="raw")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", type=Path, help="dataset directory (default: generate in memory)")
    sp.add_argument("--eval-every", type=int)
    sp.add_argument("--resume", type=Path, help="checkpoint to resume from")
    sp.add_argument("--dump-embeddings", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--protocol", choices=("standard", "cloth_changing", "both"), default="both")
    sp.add_argument("--dump-embeddings", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("cluster-inspect", help="recluster the training set with a checkpoint")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_cluster_inspect)

    sp = sub.add_parser("sweep", help="train and evaluate over one hyperparameter axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--eval-every", type=int)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, TrainingAborted, FileNotFoundError, RuntimeError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
