"""Retrieval scores of untrained (randomly initialized) backbones on the default benchmark.

This is the reference band for "near chance" when reading evaluation reports.
"""

import numpy as np
import torch

from ccreid.config import RunConfig
from ccreid.evalkit import evaluate
from ccreid.featnet import Backbone, extract
from ccreid.synthdata import benchmark_from_config


def main(n_models: int = 10):
    cfg = RunConfig()
    bench = benchmark_from_config(cfg.data)
    q, g = bench.query, bench.gallery
    scores = {"standard": [], "cloth_changing": []}
    for seed in range(n_models):
        torch.manual_seed(seed)
        model = Backbone(cfg.backbone)
        _, qe = extract(model, q.images())
        _, ge = extract(model, g.images())
        rep = evaluate(qe.numpy(), ge.numpy(), q.records, g.records)
        for proto in scores:
            scores[proto].append(rep[proto]["mAP"])
    # a shuffled ranking: expected AP when every ordering is equally likely
    rng = np.random.default_rng(0)
    shuffled = evaluate(rng.normal(size=(q.N, 16)), rng.normal(size=(g.N, 16)), q.records, g.records)
    for proto, v in scores.items():
        print(f"{proto:16s} untrained mAP {100 * np.mean(v):5.2f} +- {100 * np.std(v):4.2f} "
              f"(min {100 * min(v):.2f}, max {100 * max(v):.2f}); random embeddings {100 * shuffled[proto]['mAP']:.2f}")


if __name__ == "__main__":
    main()
