"""Multi-seed ablation runs over named presets."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_preset
from .synthdata import Benchmark, benchmark_from_config
from .trainer import run_training

# Table rows in display order: preset name -> label
ABLATION_ROWS = {
    "baseline-id": "Baseline",
    "baseline": "Baseline w/ Tri.",
    "ours-w-cloth": "Ours w/ Cloth.",
    "no-attr": "Ours w/o L_attr",
    "no-far": "Ours w/o FAR",
    "mixup": "Ours w/ mixup",
    "far-within-id": "FAR within ID",
    "far-between-ids": "FAR between IDs",
    "fire2": "Full",
}


@dataclass
class AblationResult:
    seeds: tuple[int, ...]
    # preset -> protocol -> list of per-seed mAP
    mAP: dict = field(default_factory=dict)
    rank1: dict = field(default_factory=dict)
    n_clusters: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def mean(self, preset: str, protocol: str = "cloth_changing") -> float:
        return float(np.mean(self.mAP[preset][protocol]))

    def rows(self) -> list[dict]:
        out = []
        for p in self.mAP:
            row = {"preset": p, "label": ABLATION_ROWS.get(p, p)}
            for proto in self.mAP[p]:
                row[f"{proto}_mAP"] = float(np.mean(self.mAP[p][proto]))
                row[f"{proto}_Rank-1"] = float(np.mean(self.rank1[p][proto]))
                row[f"{proto}_mAP_per_seed"] = " ".join(f"{v:.4f}" for v in self.mAP[p][proto])
            row["N_s_final"] = " ".join(str(n) for n in self.n_clusters[p])
            row["seconds"] = round(self.seconds[p], 1)
            out.append(row)
        return out

    def write_csv(self, path: str | Path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def run_ablation(base: RunConfig | None = None, presets=("fire2", "no-far", "no-attr", "baseline"),
                 seeds=(0, 1, 2), bench: Benchmark | None = None, log=print) -> AblationResult:
    """Train and evaluate every preset under every seed on one shared benchmark."""
    base = base if base is not None else RunConfig()
    bench = bench if bench is not None else benchmark_from_config(base.data)
    res = AblationResult(tuple(seeds))
    for p in presets:
        started = time.time()
        res.mAP[p] = {proto: [] for proto in base.eval.protocols}
        res.rank1[p] = {proto: [] for proto in base.eval.protocols}
        res.n_clusters[p] = []
        for s in seeds:
            cfg = apply_preset(base, p)
            cfg.seed = s
            out = run_training(cfg, bench)
            for proto in base.eval.protocols:
                res.mAP[p][proto].append(out.final[proto]["mAP"])
                res.rank1[p][proto].append(out.final[proto]["Rank-1"])
            res.n_clusters[p].append(out.epochs[-1]["N_s"])
        res.seconds[p] = time.time() - started
        if log is not None:
            cc = res.mAP[p].get("cloth_changing", [])
            log(f"{p:16s} cloth-changing mAP {100 * np.mean(cc):6.2f} "
                f"({' '.join(f'{100 * v:.1f}' for v in cc)})  {res.seconds[p]:.0f}s")
    return res
