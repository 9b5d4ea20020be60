"""Training loop: per-epoch re-clustering, staged losses, PK batches,
warmup + step learning rate, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import far as far_mod
from .config import RunConfig
from .evalkit import evaluate
from .featnet import Backbone, extract, load_checkpoint, pool, save_checkpoint, to_tensor
from .ffm import (AttrClassifierState, ClusterTable, attr_loss, cluster_fixed_k,
                  cluster_identities, init_attr_classifier, table_from_keys)
from .objectives import IdentityClassifier, LossWeights, id_loss, total_loss, triplet_loss
from .synthdata import Benchmark, DatasetManifest, augment_batch, benchmark_from_config

log = logging.getLogger(__name__)

STEP_FIELDS = ["step", "epoch", "L_id", "L_tri", "L_attr", "L_r", "total"]
RNG_STREAMS = ("data", "sampler", "far")


class TrainingAborted(RuntimeError):
    pass


def lr_at(epoch: int, schedule) -> float:
    """Linear warmup from ``lr_start`` (epoch 1) to ``lr_peak`` (epoch ``warmup``),
    then divide by ``decay_factor`` at ``warmup + decay_every``, ``warmup + 2*decay_every``, ..."""
    s = schedule
    if not 1 <= epoch <= s.max_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{s.max_epochs}")
    if epoch <= s.warmup_epochs:
        if s.warmup_epochs == 1:
            return s.lr_peak
        return s.lr_start + (s.lr_peak - s.lr_start) * (epoch - 1) / (s.warmup_epochs - 1)
    n_decays = (epoch - s.warmup_epochs) // s.decay_every
    return s.lr_peak * s.decay_factor ** (-n_decays)


class PKSampler:
    """Batches of ``P`` identities x ``K`` instances.

    An epoch deals every sample at least once: each identity's shuffled
    indices are cut into chunks of ``K`` (the last chunk topped up from the
    same identity, with replacement when it has fewer than ``K`` images), and
    chunks are dealt ``P`` identities at a time.
    """

    def __init__(self, identity_labels, P: int, K: int):
        labels = np.asarray(identity_labels)
        self.ids = np.unique(labels)
        if P > len(self.ids):
            raise ValueError(f"ids_per_batch={P} exceeds the {len(self.ids)} identities available")
        if K < 1 or P < 1:
            raise ValueError("ids_per_batch and instances_per_id must be >= 1")
        self.P, self.K = P, K
        self.index = {int(i): np.flatnonzero(labels == i) for i in self.ids}

    def _chunks(self, ident: int, rng) -> list[np.ndarray]:
        idx = rng.permutation(self.index[ident])
        if len(idx) < self.K:
            return [rng.choice(idx, size=self.K, replace=True)]
        rem = len(idx) % self.K
        if rem:
            pool = np.setdiff1d(self.index[ident], idx[-rem:])
            idx = np.concatenate([idx, rng.choice(pool, size=self.K - rem, replace=False)])
        return list(idx.reshape(-1, self.K))

    def sample(self, rng) -> np.ndarray:
        chosen = rng.choice(self.ids, size=self.P, replace=False)
        return np.concatenate([self._chunks(int(i), rng)[0] for i in chosen])

    def epoch(self, rng) -> list[np.ndarray]:
        avail = {int(i): self._chunks(int(i), rng) for i in self.ids}
        batches = []
        while avail:
            keys = sorted(avail)
            if len(keys) >= self.P:
                chosen = rng.choice(keys, size=self.P, replace=False)
            else:
                others = [int(i) for i in self.ids if int(i) not in avail]
                fill = rng.choice(others, size=self.P - len(keys), replace=False)
                for i in fill:
                    avail[int(i)] = self._chunks(int(i), rng)[:1]
                chosen = np.array(keys + [int(i) for i in fill])
            batch = []
            for i in chosen:
                batch.append(avail[int(i)].pop())
                if not avail[int(i)]:
                    del avail[int(i)]
            batches.append(np.concatenate(batch))
        return batches


def pk_sample(manifest: DatasetManifest, ids_per_batch: int, instances_per_id: int,
              rng: np.random.Generator) -> np.ndarray:
    """One PK batch of sample ids."""
    labels = manifest.array("identity_id")
    idx = PKSampler(labels, ids_per_batch, instances_per_id).sample(rng)
    return manifest.array("sample_id")[idx]


def uses_clusters(cfg: RunConfig) -> bool:
    return cfg.losses.lambda3 > 0 or (
        cfg.losses.lambda4 > 0 and cfg.far.variant in ("full", "within_id", "between_ids"))


@dataclass
class TrainResult:
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    cluster_history: list[ClusterTable] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    trainer: "Trainer" = None


class Trainer:
    def __init__(self, cfg: RunConfig, bench: Benchmark | None = None, out_dir: str | Path | None = None):
        self.cfg = cfg
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        self.bench = bench if bench is not None else benchmark_from_config(cfg.data)
        train = self.bench.train
        self.images = train.images()
        self.sample_ids = train.array("sample_id")
        raw_ids = train.array("identity_id")
        self.id_values = np.unique(raw_ids)
        self.labels = np.searchsorted(self.id_values, raw_ids)
        self.clothing = train.array("clothing_id")
        self.out_dir = Path(out_dir) if out_dir is not None else None

        root = np.random.SeedSequence(cfg.seed)
        init_ss, *streams = root.spawn(1 + len(RNG_STREAMS))
        self.rngs = {name: np.random.default_rng(ss) for name, ss in zip(RNG_STREAMS, streams)}
        torch.manual_seed(int(init_ss.generate_state(1)[0]))

        C = cfg.backbone.embed_dim
        self.model = Backbone(cfg.backbone)
        self.classifier = IdentityClassifier(C, len(self.id_values), cfg.losses.bnneck)
        self.r_classifier = self.classifier
        params = list(self.model.parameters()) + list(self.classifier.parameters())
        if not cfg.far.shared_classifier and cfg.far.variant != "none":
            self.r_classifier = IdentityClassifier(C, len(self.id_values), cfg.losses.bnneck)
            params += list(self.r_classifier.parameters())
        self.optimizer = torch.optim.Adam([p for p in params if p.requires_grad],
                                          lr=cfg.schedule.lr_start,
                                          weight_decay=cfg.schedule.weight_decay)
        self.sampler = PKSampler(self.labels, cfg.schedule.ids_per_batch, cfg.schedule.instances_per_id)
        self.weights = LossWeights.from_config(cfg.losses)
        self.epoch = 0
        self.step = 0
        self.table: ClusterTable | None = None
        self.pseudo: np.ndarray | None = None
        self.attr_state: AttrClassifierState | None = None
        self.attr_opt = None
        self.targets = None
        self.result = TrainResult(trainer=self)

    # -- epoch setup -----------------------------------------------------------------

    def stage(self, epoch: int) -> str:
        return "warm" if epoch <= self.cfg.schedule.t0 else "full"

    def recluster(self, emb: torch.Tensor) -> ClusterTable:
        f = self.cfg.ffm
        if f.label_source == "clothing":
            return table_from_keys(self.sample_ids, self.labels, self.clothing)
        feats = torch.nn.functional.normalize(emb.double(), dim=1).numpy()
        if f.label_source == "kmeans":
            return cluster_fixed_k(feats, self.labels, self.sample_ids, f.fixed_k, seed=self.cfg.seed)
        return cluster_identities(feats, self.labels, self.sample_ids, f.radius, f.min_samples,
                                  identities=range(len(self.id_values)))

    def begin_epoch(self, epoch: int) -> float:
        self.epoch = epoch
        lr = lr_at(epoch, self.cfg.schedule)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        if uses_clusters(self.cfg):
            f = self.cfg.ffm
            _, emb = extract(self.model, self.images)
            self.table = self.recluster(emb)
            self.pseudo = self.table.labels_for(self.sample_ids)
            self.attr_state = init_attr_classifier(self.table, emb, self.sample_ids, f.tau, f.epsilon)
            self.attr_state.weights.requires_grad_(True)
            self.attr_opt = torch.optim.Adam([self.attr_state.weights], lr=lr)
            self.targets = self.table.smoothing_matrix(f.epsilon).float()
            self.result.cluster_history.append(self.table)
        return lr

    # -- one optimization step -----------------------------------------------------

    def losses(self, idx: np.ndarray, stage: str) -> dict:
        cfg = self.cfg
        imgs = augment_batch(self.images[idx], cfg.data.augment, self.rngs["data"])
        x = to_tensor(imgs)
        k = cfg.far.stage
        if k:
            tap = self.model.trunk(x, k)
            fmap = self.model.tail(tap, k)
        else:
            fmap = tap = self.model.feature_map(x)
        emb = pool(fmap, cfg.backbone.pooling)
        ids = self.labels[idx]
        comps = {"id": id_loss(emb, ids, self.classifier, cfg.losses.id_label_smoothing)}
        if stage == "warm":
            return comps
        w = self.weights
        if w.lambda2 > 0:
            comps["tri"] = triplet_loss(emb, ids, cfg.losses.margin)
        if w.lambda3 > 0:
            comps["attr"] = attr_loss(emb, self.pseudo[idx], self.table, self.attr_state,
                                      cfg.ffm.normalize, self.targets)
        if w.lambda4 > 0 and cfg.far.variant != "none":
            comps["r"] = self.far_loss(tap, emb, idx, ids)
        return comps

    def far_loss(self, tap, emb, idx, ids):
        a = self.cfg.far
        rng = self.rngs["far"]
        if a.variant == "mixup":
            mixed, ya, yb, lam = far_mod.mixup_substitute(emb, ids, a.mixup_alpha, rng)
            return far_mod.mixup_loss(self.r_classifier(mixed), ya, yb, lam)
        maps = []
        for _ in range(a.K_times):
            plan = far_mod.sample_donors(self.pseudo[idx], ids, a.P_parts, rng, a.variant)
            rec = far_mod.recompose_batch(tap, plan, a.P_parts, a.sigma_floor, a.detach_donor)
            maps.append(self.model.tail(rec, a.stage) if a.stage else rec)
        return far_mod.recomposed_id_loss(maps, ids, self.r_classifier, self.cfg.backbone.pooling)

    def train_step(self, idx: np.ndarray, stage: str) -> dict:
        comps = self.losses(idx, stage)
        loss = total_loss(comps, self.weights, stage)
        if not torch.isfinite(loss):
            raise TrainingAborted(f"non-finite loss at epoch {self.epoch}, step {self.step}")
        self.optimizer.zero_grad(set_to_none=True)
        if self.attr_opt is not None:
            self.attr_opt.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        if self.attr_opt is not None and self.attr_state.weights.grad is not None:
            self.attr_opt.step()
            self.attr_state.renormalize()
        self.step += 1
        row = {"step": self.step, "epoch": self.epoch, "total": loss.item()}
        for key, name in (("id", "L_id"), ("tri", "L_tri"), ("attr", "L_attr"), ("r", "L_r")):
            row[name] = comps[key].item() if key in comps else ""
        return row

    # -- evaluation and persistence --------------------------------------------------

    def evaluate(self) -> dict:
        q, g = self.bench.query, self.bench.gallery
        _, qe = extract(self.model, q.images())
        _, ge = extract(self.model, g.images())
        return evaluate(qe.numpy(), ge.numpy(), q.records, g.records,
                        self.cfg.eval.protocols, self.cfg.eval.ranks)

    def embed(self, manifest: DatasetManifest) -> np.ndarray:
        _, e = extract(self.model, manifest.images())
        return e.numpy()

    def state(self) -> dict:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "backbone": self.model.state_dict(),
            "classifier": self.classifier.state_dict(),
            "r_classifier": None if self.r_classifier is self.classifier else self.r_classifier.state_dict(),
            "attr_classifier": None if self.attr_state is None else self.attr_state.weights.detach().clone(),
            "optimizer": self.optimizer.state_dict(),
            "rng": {k: g.bit_generator.state for k, g in self.rngs.items()},
            "epochs_log": list(self.result.epochs),
            "steps_log": list(self.result.steps),
        }

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.state(), self.cfg.to_dict())

    def load(self, path: str | Path) -> None:
        payload = load_checkpoint(path, self.cfg.to_dict(), keys=("backbone", "data", "losses", "far", "ffm"))
        self.model.load_state_dict(payload["backbone"])
        self.classifier.load_state_dict(payload["classifier"])
        if payload["r_classifier"] is not None:
            self.r_classifier.load_state_dict(payload["r_classifier"])
        self.optimizer.load_state_dict(payload["optimizer"])
        for k, st in payload["rng"].items():
            self.rngs[k].bit_generator.state = st
        self.epoch = payload["epoch"]
        self.step = payload["step"]
        self.result.epochs = list(payload["epochs_log"])
        self.result.steps = list(payload["steps_log"])

    # -- main loop ---------------------------------------------------------------------

    def run(self, until: int | None = None) -> TrainResult:
        cfg = self.cfg
        last = cfg.schedule.max_epochs if until is None else min(until, cfg.schedule.max_epochs)
        ckpt_dir = None
        if self.out_dir is not None:
            ckpt_dir = self.out_dir / "checkpoints"
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        for epoch in range(self.epoch + 1, last + 1):
            lr = self.begin_epoch(epoch)
            stage = self.stage(epoch)
            rows = [self.train_step(idx, stage) for idx in self.sampler.epoch(self.rngs["sampler"])]
            self.result.steps.extend(rows)
            row = {"epoch": epoch, "lr": lr, "stage": stage,
                   "N_s": self.table.N_s if self.table is not None else ""}
            for name in ("L_id", "L_tri", "L_attr", "L_r", "total"):
                vals = [r[name] for r in rows if r[name] != ""]
                row[name] = float(np.mean(vals)) if vals else ""
            if cfg.eval_every and epoch % cfg.eval_every == 0:
                row.update(_flat(self.evaluate()))
            self.result.epochs.append(row)
            log.info("epoch %d lr %.2e stage %s N_s %s total %.4f", epoch, lr, stage, row["N_s"], row["total"])
            if ckpt_dir is not None:
                self.save(ckpt_dir / "last.pt")
                if cfg.schedule.checkpoint_every and epoch % cfg.schedule.checkpoint_every == 0:
                    self.save(ckpt_dir / f"epoch_{epoch:03d}.pt")
                write_csv(self.out_dir / "metrics.csv", self.result.epochs)
                write_csv(self.out_dir / "steps.csv", self.result.steps, STEP_FIELDS)
        if self.epoch == cfg.schedule.max_epochs:
            self.result.final = self.evaluate()
        return self.result


def _flat(report: dict) -> dict:
    out = {}
    for proto, r in report.items():
        out[f"{proto}_Rank-1"] = r["Rank-1"]
        out[f"{proto}_mAP"] = r["mAP"]
    return out


def write_csv(path: str | Path, rows: list[dict], fieldnames=None) -> None:
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            fieldnames += [k for k in r if k not in fieldnames]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) and math.isfinite(v) else v) for k, v in r.items()})


def run_training(cfg: RunConfig, bench: Benchmark | None = None, out_dir=None,
                 resume: str | Path | None = None) -> TrainResult:
    trainer = Trainer(cfg, bench, out_dir)
    if resume is not None:
        trainer.load(resume)
    return trainer.run()
