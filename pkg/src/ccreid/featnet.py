"""Small convolutional backbone, pooling, part splitting and checkpoints."""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _stage(cin: int, cout: int, stride: int, groups: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Four conv stages and a 1x1 projection to the embedding width.

    ``forward`` returns the spatial map ``(B, C, H, W)`` and its global pooling
    ``(B, C)``. Group normalization keeps every sample independent of the rest
    of the batch.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        widths = list(cfg.widths)
        strides = list(cfg.stride_schedule)
        layers, cin = [], 3
        for w, s in zip(widths, strides):
            layers.append(_stage(cin, w, s, cfg.groups))
            cin = w
        self.stages = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, cfg.embed_dim, 1)
        self.pooling = cfg.pooling

    @property
    def downsample(self) -> int:
        return int(np.prod(self.cfg.stride_schedule))

    def trunk(self, x: torch.Tensor, upto: int | None = None) -> torch.Tensor:
        """Run the first ``upto`` stages (all of them by default)."""
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in input images")
        h = (x - 0.5) / 0.25
        for stage in self.stages[:upto]:
            h = stage(h)
        return h

    def tail(self, h: torch.Tensor, start: int) -> torch.Tensor:
        """Continue from the output of stage ``start`` through the projection."""
        for stage in self.stages[start:]:
            h = stage(h)
        return self.head(h)

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x))

    def forward(self, x: torch.Tensor):
        fmap = self.feature_map(x)
        return fmap, pool(fmap, self.pooling)


def pool(fmap: torch.Tensor, mode: str = "avg") -> torch.Tensor:
    if mode == "avg":
        return fmap.mean(dim=(2, 3))
    if mode == "max":
        return fmap.amax(dim=(2, 3))
    raise ValueError(f"unknown pooling '{mode}'")


def part_split(fmap: torch.Tensor, P: int) -> list[torch.Tensor]:
    """Split rows into ``P`` horizontal stripes; the last one takes the remainder."""
    H = fmap.shape[-2]
    if not 1 <= P <= H:
        raise ValueError(f"cannot split a map of height {H} into {P} parts")
    base = H // P
    sizes = [base] * (P - 1) + [H - base * (P - 1)]
    return list(torch.split(fmap, sizes, dim=-2))


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W, 3) array in [0, 1] -> (B, 3, H, W) tensor."""
    arr = np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))
    return torch.from_numpy(arr).to(dtype)


@torch.no_grad()
def extract(model: Backbone, images: np.ndarray, batch_size: int = 256):
    """Eval-mode maps and pooled embeddings for a whole image array."""
    was_training = model.training
    model.eval()
    maps, embs = [], []
    for i in range(0, len(images), batch_size):
        m, e = model(to_tensor(images[i:i + batch_size]))
        maps.append(m)
        embs.append(e)
    model.train(was_training)
    return torch.cat(maps), torch.cat(embs)


def save_checkpoint(path: str | Path, bundle: dict, config: dict) -> None:
    """Write a versioned checkpoint. ``bundle`` holds state dicts and plain data."""
    payload = {"version": CHECKPOINT_VERSION, "config": json.dumps(config, sort_keys=True), **bundle}
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_config: dict | None = None,
                    keys: tuple[str, ...] = ("backbone",)) -> dict:
    """Load a checkpoint; refuse it if ``keys`` sections of the config differ."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    payload["config"] = json.loads(payload["config"])
    if expected_config is not None:
        for k in keys:
            if payload["config"].get(k) != expected_config.get(k):
                raise CheckpointError(f"checkpoint config mismatch in section '{k}': "
                                      f"{payload['config'].get(k)} != {expected_config.get(k)}")
    return payload
