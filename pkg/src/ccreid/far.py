"""Attribute recomposition in feature space.

Each sample's feature map is cut into horizontal parts; every part is
instance-normalized with its own statistics and re-styled with the
statistics of the same part of an in-batch donor that carries a different
pseudo label. The recomposed map is pooled and classified by identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .featnet import part_split, pool
from .ffm import attribute_stats

VARIANTS = ("full", "within_id", "between_ids", "none", "mixup")


@dataclass
class RecompositionPlan:
    donors: np.ndarray       # (B, P) donor index per sample and part
    passthrough: np.ndarray  # (B, P) True where no admissible donor existed


def admissible_donors(i: int, pseudo_labels: np.ndarray, identity_labels: np.ndarray,
                      variant: str) -> np.ndarray:
    other = pseudo_labels != pseudo_labels[i]
    if variant == "within_id":
        other &= identity_labels == identity_labels[i]
    elif variant == "between_ids":
        other &= identity_labels != identity_labels[i]
    elif variant != "full":
        raise ValueError(f"variant '{variant}' does not sample donors")
    return np.flatnonzero(other)


def sample_donors(pseudo_labels, identity_labels, P: int, rng: np.random.Generator,
                  variant: str = "full") -> RecompositionPlan:
    pl = np.asarray(pseudo_labels)
    ids = np.asarray(identity_labels)
    B = len(pl)
    if B < 2:
        raise ValueError("donor sampling needs a batch of at least 2")
    donors = np.tile(np.arange(B)[:, None], (1, P))
    passthrough = np.zeros((B, P), dtype=bool)
    for i in range(B):
        pool_i = admissible_donors(i, pl, ids, variant)
        if len(pool_i) == 0:
            passthrough[i] = True
            continue
        donors[i] = rng.choice(pool_i, size=P, replace=True)
    return RecompositionPlan(donors, passthrough)


def recompose(part: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
              donor_mu: torch.Tensor, donor_sigma: torch.Tensor,
              sigma_floor: float = 1e-5) -> torch.Tensor:
    """``donor_sigma * (part - mu) / max(sigma, floor) + donor_mu`` per channel."""
    if not (mu.shape == sigma.shape == donor_mu.shape == donor_sigma.shape == part.shape[:-2]):
        raise ValueError(f"attribute shapes {tuple(mu.shape)}, {tuple(donor_mu.shape)} do not "
                         f"match part {tuple(part.shape)}")
    normed = (part - mu[..., None, None]) / sigma.clamp_min(sigma_floor)[..., None, None]
    return donor_sigma[..., None, None] * normed + donor_mu[..., None, None]


def recompose_batch(fmap: torch.Tensor, plan: RecompositionPlan, P: int,
                    sigma_floor: float = 1e-5, detach_donor: bool = False) -> torch.Tensor:
    """Recompose every part of every sample per ``plan``; parts are re-concatenated by row."""
    out = []
    floor2 = sigma_floor ** 2
    for p, part in enumerate(part_split(fmap, P)):
        mu, sigma = attribute_stats(part, min_var=floor2)
        idx = torch.as_tensor(plan.donors[:, p], dtype=torch.long)
        d_mu, d_sigma = mu[idx], sigma[idx]
        if detach_donor:
            d_mu, d_sigma = d_mu.detach(), d_sigma.detach()
        new = recompose(part, mu, sigma, d_mu, d_sigma, sigma_floor)
        keep = torch.as_tensor(plan.passthrough[:, p])[:, None, None, None]
        out.append(torch.where(keep, part, new))
    return torch.cat(out, dim=-2)


def _check_labels(labels: torch.Tensor, n_classes: int) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"identity label out of range for {n_classes} classes")


def recomposed_id_loss(recomposed, identity_labels, classifier, pooling: str = "avg") -> torch.Tensor:
    """Identity cross-entropy on pooled recomposed maps, averaged over the K maps given."""
    if torch.is_tensor(recomposed):
        recomposed = [recomposed]
    labels = torch.as_tensor(np.asarray(identity_labels), dtype=torch.long)
    losses = []
    for fmap in recomposed:
        logits = classifier(pool(fmap, pooling))
        _check_labels(labels, logits.shape[1])
        losses.append(F.cross_entropy(logits, labels))
    return torch.stack(losses).mean()


def mixup_substitute(features: torch.Tensor, identity_labels, alpha: float,
                     rng: np.random.Generator, lam: float | None = None):
    """Convex mix of embeddings with a shuffled copy of the batch.

    Returns ``(mixed, labels_a, labels_b, lam)``.
    """
    if alpha <= 0:
        raise ValueError("mixup alpha must be > 0")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = torch.as_tensor(rng.permutation(features.shape[0]), dtype=torch.long)
    labels = torch.as_tensor(np.asarray(identity_labels), dtype=torch.long)
    mixed = lam * features + (1.0 - lam) * features[perm]
    return mixed, labels, labels[perm], lam


def mixup_loss(logits: torch.Tensor, labels_a, labels_b, lam: float) -> torch.Tensor:
    _check_labels(labels_a, logits.shape[1])
    return lam * F.cross_entropy(logits, labels_a) + (1.0 - lam) * F.cross_entropy(logits, labels_b)
