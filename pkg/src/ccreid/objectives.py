"""Identity cross-entropy, batch-hard triplet loss and the staged total objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import ConfigError


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 0.3

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if v < 0:
                raise ConfigError(f"{k} must be >= 0, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {"lambda1": self.lambda1, "lambda2": self.lambda2,
                "lambda3": self.lambda3, "lambda4": self.lambda4}

    @classmethod
    def from_config(cls, losses) -> "LossWeights":
        return cls(losses.lambda1, losses.lambda2, losses.lambda3, losses.lambda4)


class IdentityClassifier(nn.Module):
    """Bias-free linear identity head, optionally behind a batch-norm neck."""

    def __init__(self, dim: int, n_classes: int, bnneck: bool = False):
        super().__init__()
        self.neck = nn.BatchNorm1d(dim) if bnneck else None
        if self.neck is not None:
            self.neck.bias.requires_grad_(False)
        self.fc = nn.Linear(dim, n_classes, bias=False)
        nn.init.normal_(self.fc.weight, std=0.01)

    @property
    def n_classes(self) -> int:
        return self.fc.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.neck is not None:
            x = self.neck(x)
        return self.fc(x)


def id_loss(embeddings: torch.Tensor, identity_labels, classifier, label_smoothing: float = 0.0) -> torch.Tensor:
    labels = torch.as_tensor(np.asarray(identity_labels), dtype=torch.long)
    logits = classifier(embeddings)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"identity label out of range for {logits.shape[1]} classes")
    return F.cross_entropy(logits, labels, label_smoothing=label_smoothing)


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    diff = x[:, None, :] - x[None, :, :]
    return (diff ** 2).sum(-1).clamp_min(1e-12).sqrt()


def triplet_loss(embeddings: torch.Tensor, identity_labels, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss on raw Euclidean distances.

    Anchors without another same-identity sample in the batch are skipped.
    """
    labels = torch.as_tensor(np.asarray(identity_labels))
    dist = pairwise_euclidean(embeddings)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos = same & ~eye
    neg = ~same
    valid = pos.any(1) & neg.any(1)
    if not valid.any():
        raise ValueError("triplet loss needs >= 2 identities and >= 2 samples of one identity "
                         "per batch; use the PK sampler")
    hardest_pos = dist.masked_fill(~pos, float("-inf")).amax(1)
    hardest_neg = dist.masked_fill(~neg, float("inf")).amin(1)
    return F.relu(hardest_pos[valid] - hardest_neg[valid] + margin).mean()


COMPONENTS = (("id", "lambda1"), ("tri", "lambda2"), ("attr", "lambda3"), ("r", "lambda4"))


def total_loss(components: dict, weights: LossWeights, stage: str) -> torch.Tensor:
    """Weighted sum of the loss components.

    The warm stage uses only the identity term. Terms with zero weight or
    absent from ``components`` are left out of the graph entirely.
    """
    if stage not in ("warm", "full"):
        raise ValueError(f"unknown stage '{stage}'")
    w = weights.as_dict()
    if stage == "warm":
        return w["lambda1"] * components["id"]
    total = None
    for key, lam in COMPONENTS:
        if w[lam] == 0 or components.get(key) is None:
            continue
        term = w[lam] * components[key]
        total = term if total is None else total + term
    if total is None:
        total = 0.0 * components["id"]
    return total
