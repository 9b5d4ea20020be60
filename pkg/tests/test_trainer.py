import numpy as np
import pytest
import torch

from ccreid.config import RunConfig, ScheduleConfig, apply_preset
from ccreid.featnet import CheckpointError
from ccreid.trainer import PKSampler, Trainer, TrainingAborted, lr_at, pk_sample


def tiny_cfg(preset="fire2", **over):
    cfg = RunConfig().replace(**{
        "schedule.max_epochs": 4, "schedule.t0": 2, "schedule.warmup_epochs": 1,
        "schedule.decay_every": 2, "schedule.ids_per_batch": 4, "schedule.instances_per_id": 2,
        "schedule.batch_size": 8, "schedule.lr_peak": 1e-3,
        "backbone.widths": [8, 8, 8, 8], "backbone.embed_dim": 16, "far.stage": 1,
        "data.n_identities": 4, "data.n_test_identities": 3, "data.outfits_per_id": [2, 2],
        "data.images_per_outfit": [3, 3], "data.n_cameras": 2, **over})
    return apply_preset(cfg, preset)


def test_lr_schedule_examples():
    s = ScheduleConfig(max_epochs=80, warmup_epochs=10, decay_every=20, lr_peak=3.5e-4)
    assert lr_at(1, s) == pytest.approx(3.5e-6)
    assert lr_at(10, s) == pytest.approx(3.5e-4)
    assert lr_at(29, s) == pytest.approx(3.5e-4)
    assert lr_at(31, s) == pytest.approx(3.5e-5)
    assert lr_at(51, s) == pytest.approx(3.5e-6)
    warm = [lr_at(e, s) for e in range(1, 11)]
    assert all(b > a for a, b in zip(warm, warm[1:]))
    with pytest.raises(ValueError):
        lr_at(0, s)
    with pytest.raises(ValueError):
        lr_at(81, s)


def test_pk_batches_are_balanced_and_cover_the_epoch():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(12), [18] * 11 + [5])
    sampler = PKSampler(labels, 8, 4)
    balanced = 0
    for _ in range(100):
        batches = sampler.epoch(rng)
        seen = set(np.concatenate(batches).tolist())
        assert seen == set(range(len(labels)))
        ok = True
        for b in batches:
            ids, counts = np.unique(labels[b], return_counts=True)
            ok &= len(b) == 32 and len(ids) == 8 and np.all(counts == 4)
        balanced += ok
    assert balanced >= 95


def test_pk_sample_and_errors(tiny_bench):
    sids = pk_sample(tiny_bench.train, 4, 2, np.random.default_rng(0))
    by_id = {r.sample_id: r.identity_id for r in tiny_bench.train.records}
    ids, counts = np.unique([by_id[s] for s in sids], return_counts=True)
    assert len(ids) == 4 and np.all(counts == 2)
    with pytest.raises(ValueError):
        PKSampler([0, 1], 3, 2)


def test_warm_stage_leaves_attr_and_far_untouched(tiny_bench):
    cfg = tiny_cfg(**{"far.shared_classifier": False})
    t = Trainer(cfg, tiny_bench)
    t.begin_epoch(1)
    before = t.attr_state.weights.detach().clone()
    r_before = t.r_classifier.fc.weight.detach().clone()
    idx = t.sampler.sample(np.random.default_rng(0))
    comps = t.losses(idx, "warm")
    assert set(comps) == {"id"}
    t.train_step(idx, "warm")
    w = t.attr_state.weights
    assert w.grad is None or torch.count_nonzero(w.grad) == 0
    assert torch.equal(w.detach(), before)
    g = t.r_classifier.fc.weight.grad
    assert g is None or torch.count_nonzero(g) == 0
    assert torch.equal(t.r_classifier.fc.weight.detach(), r_before)


def test_full_stage_trains_every_term(tiny_bench):
    t = Trainer(tiny_cfg(), tiny_bench)
    t.begin_epoch(3)
    row = t.train_step(t.sampler.sample(np.random.default_rng(0)), "full")
    assert all(row[k] != "" for k in ("L_id", "L_tri", "L_attr", "L_r"))
    assert torch.count_nonzero(t.attr_state.weights.grad) > 0


def test_run_ending_at_t0_matches_id_only_baseline(tiny_bench):
    over = {"schedule.max_epochs": 2, "schedule.t0": 2}
    a = Trainer(tiny_cfg("fire2", **over), tiny_bench).run()
    b = Trainer(tiny_cfg("baseline-id", **over), tiny_bench).run()
    assert [r["L_id"] for r in a.steps] == [r["L_id"] for r in b.steps]
    for p, q in zip(a.trainer.model.parameters(), b.trainer.model.parameters()):
        assert torch.equal(p, q)
    assert a.final == b.final


def test_zero_weights_and_no_warm_stage_match_triplet_baseline(tiny_bench):
    a = Trainer(tiny_cfg("fire2", **{"schedule.t0": 0, "losses.lambda3": 0.0, "losses.lambda4": 0.0}),
                tiny_bench).run()
    b = Trainer(tiny_cfg("baseline", **{"schedule.t0": 0}), tiny_bench).run()
    for p, q in zip(a.trainer.model.parameters(), b.trainer.model.parameters()):
        assert torch.equal(p, q)
    # the weighted terms drop out of the objective entirely
    for row in a.steps:
        assert row["L_attr"] == row["L_r"] == ""
        assert row["total"] == pytest.approx(row["L_id"] + row["L_tri"], rel=1e-6)


def test_pseudo_labels_disjoint_every_epoch(tiny_bench):
    res = Trainer(tiny_cfg(), tiny_bench).run()
    ident = {r.sample_id: r.identity_id for r in tiny_bench.train.records}
    assert len(res.cluster_history) == 4
    for table in res.cluster_history:
        owners = {}
        for sid, lab in table.assignment.items():
            owners.setdefault(lab, set()).add(ident[sid])
        assert all(len(v) == 1 for v in owners.values())
        assert sorted(owners) == list(range(table.N_s))


def test_seeded_runs_write_identical_metrics(tiny_bench, tmp_path):
    cfg = tiny_cfg()
    Trainer(cfg, tiny_bench, tmp_path / "a").run()
    Trainer(cfg, tiny_bench, tmp_path / "b").run()
    for name in ("metrics.csv", "steps.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_reproduces_uninterrupted_curve(tiny_bench, tmp_path):
    cfg = tiny_cfg()
    full = Trainer(cfg, tiny_bench).run()
    first = Trainer(cfg, tiny_bench, tmp_path)
    first.run(until=3)
    resumed = Trainer(cfg, tiny_bench)
    resumed.load(tmp_path / "checkpoints" / "last.pt")
    res = resumed.run()
    assert len(res.steps) == len(full.steps)
    for a, b in zip(full.steps, res.steps):
        assert abs(a["total"] - b["total"]) <= 1e-6
    assert res.final["cloth_changing"]["mAP"] == pytest.approx(full.final["cloth_changing"]["mAP"], abs=1e-6)


def test_resume_refuses_other_config(tiny_bench, tmp_path):
    Trainer(tiny_cfg(), tiny_bench, tmp_path).run(until=1)
    other = Trainer(tiny_cfg(**{"backbone.embed_dim": 8}), tiny_bench)
    with pytest.raises(CheckpointError):
        other.load(tmp_path / "checkpoints" / "last.pt")


def test_non_finite_loss_aborts(tiny_bench):
    t = Trainer(tiny_cfg(), tiny_bench)
    t.begin_epoch(1)
    with torch.no_grad():
        t.classifier.fc.weight.fill_(float("inf"))
    with pytest.raises(TrainingAborted):
        t.train_step(t.sampler.sample(np.random.default_rng(0)), "warm")
