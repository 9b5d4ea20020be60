"""Seeded synthetic cloth-changing benchmark.

Each identity is a persistent silhouette (head shape, skin tone, hair, face
glyph, body and leg widths, shoe colour). Outfits paint an upper and a lower
clothing block from a palette shared by all identities, so clothing colour
is informative inside the training set but useless across outfits. Viewpoint
mirrors and shifts the figure, occlusion lays a gray bar over the torso,
cameras change the background and tint.

Every pixel is a pure function of the identity spec, the latent tags and a
per-sample noise seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError

VIEWPOINTS = ("front", "back", "side")
OCCLUDER_GRAY = 0.5

# Shared clothing palette. Identities draw outfits from it independently.
PALETTE = np.array([
    [0.85, 0.10, 0.10], [0.10, 0.60, 0.15], [0.10, 0.20, 0.85], [0.90, 0.80, 0.10],
    [0.55, 0.10, 0.65], [0.05, 0.70, 0.75], [0.95, 0.50, 0.05], [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08], [0.45, 0.30, 0.15], [0.95, 0.45, 0.70], [0.40, 0.55, 0.30],
])
HAIR = np.array([[0.05, 0.04, 0.03], [0.35, 0.20, 0.08], [0.85, 0.70, 0.35],
                 [0.60, 0.60, 0.60], [0.55, 0.12, 0.05]])


@dataclass
class IdentitySpec:
    identity_id: int
    base_pattern_seed: int
    num_outfits: int
    # one (upper, lower, accent) colour triple per outfit
    outfit_palettes: list = field(default_factory=list)

    def __post_init__(self):
        if self.num_outfits < 1:
            raise ConfigError("num_outfits must be >= 1")
        if len(self.outfit_palettes) != self.num_outfits:
            raise ConfigError("num_outfits must equal len(outfit_palettes)")


@dataclass
class SampleRecord:
    sample_id: int
    identity_id: int
    image: np.ndarray = field(repr=False)
    clothing_id: int
    camera_id: int
    viewpoint: str
    occlusion: float
    noise_seed: int = 0

    def meta(self) -> dict:
        d = asdict(self)
        d.pop("image")
        return d


@dataclass
class DatasetManifest:
    split: str
    records: list[SampleRecord]
    seed: int

    @property
    def N(self) -> int:
        return len(self.records)

    @property
    def N_p(self) -> int:
        return len({r.identity_id for r in self.records})

    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.records]).astype(np.float32)

    def array(self, attr: str) -> np.ndarray:
        return np.array([getattr(r, attr) for r in self.records])


@dataclass
class Benchmark:
    train: DatasetManifest
    query: DatasetManifest
    gallery: DatasetManifest
    identities: list[IdentitySpec]
    params: dict

    def split(self, name: str) -> DatasetManifest:
        return {"train": self.train, "query": self.query, "gallery": self.gallery}[name]


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class _Body:
    skin: np.ndarray
    hair: np.ndarray
    shoe: np.ndarray
    head_w: int
    hair_h: int
    torso_w: int
    leg_gap: int
    glyph: np.ndarray


def _rows(H: int):
    head = (1, max(3, round(0.22 * H)))
    upper = (head[1], round(0.58 * H))
    lower = (upper[1], H - max(1, round(0.06 * H)))
    feet = (lower[1], H)
    return head, upper, lower, feet


def _body(spec: IdentitySpec, W: int) -> _Body:
    rng = np.random.default_rng(spec.base_pattern_seed)
    skin = np.array([0.95, 0.78, 0.62]) * rng.uniform(0.55, 1.0) + rng.uniform(-0.04, 0.04, 3)
    hair = HAIR[rng.integers(len(HAIR))]
    shoe = rng.uniform(0.0, 1.0, 3)
    head_w = int(rng.integers(max(2, W // 4), max(3, W // 2) + 1))
    hair_h = int(rng.integers(1, 3))
    torso_w = int(rng.integers(max(2, (3 * W) // 8), max(3, (7 * W) // 8) + 1))
    leg_gap = int(rng.integers(0, max(1, W // 8) + 1))
    glyph = rng.random((3, 3)) < 0.5
    return _Body(np.clip(skin, 0, 1), hair, shoe, head_w, hair_h, torso_w, leg_gap, glyph)


def _span(W: int, width: int) -> tuple[int, int]:
    left = (W - width) // 2
    return left, left + width


def _layers(spec: IdentitySpec, clothing_id: int, viewpoint: str, size):
    """Return (base image, clothing mask, clothing colours) before camera effects."""
    H, W = size
    body = _body(spec, W)
    upper_c, lower_c, accent_c = (np.asarray(c, dtype=float) for c in spec.outfit_palettes[clothing_id])
    img = np.zeros((H, W, 3))
    cloth = np.zeros((H, W), dtype=bool)
    (h0, h1), (u0, u1), (l0, l1), (f0, f1) = _rows(H)

    a, b = _span(W, body.head_w)
    img[h0:h1, a:b] = body.skin
    img[h0:h0 + body.hair_h, a:b] = body.hair
    if viewpoint == "back":
        img[h0:h1, a:b] = body.hair
    else:
        gh, gw = body.glyph.shape
        gy = min(h0 + body.hair_h, h1 - 1)
        for dy in range(gh):
            for dx in range(gw):
                y, x = gy + dy, a + dx + max(0, (b - a - gw) // 2)
                if body.glyph[dy, dx] and y < h1 and x < b:
                    img[y, x] = body.skin * 0.35

    a, b = _span(W, body.torso_w)
    img[u0:u1, a:b] = upper_c
    cloth[u0:u1, a:b] = True
    # accent stripe band across the chest
    mid = (u0 + u1) // 2
    img[mid:mid + 1, a:b] = accent_c
    # bare forearms on both sides of the torso
    img[u0 + (u1 - u0) // 2:u1, max(0, a - 1):a] = body.skin
    img[u0 + (u1 - u0) // 2:u1, b:min(W, b + 1)] = body.skin

    leg_w = max(1, (body.torso_w - body.leg_gap) // 2)
    a, b = _span(W, body.torso_w)
    for left in (a, b - leg_w):
        img[l0:l1, left:left + leg_w] = lower_c
        cloth[l0:l1, left:left + leg_w] = True
        img[f0:f1, left:left + leg_w] = body.shoe
    return img, cloth


def _view(arr: np.ndarray, viewpoint: str) -> np.ndarray:
    if viewpoint == "front":
        return arr
    out = arr[:, ::-1]
    if viewpoint == "side":
        out = np.roll(out, 2 if arr.shape[1] >= 12 else 1, axis=1)
    return np.ascontiguousarray(out)


def _occlusion_rows(H: int, occlusion: float) -> tuple[int, int]:
    _, (u0, u1), _, _ = _rows(H)
    n = int(round(occlusion * (u1 - u0)))
    return u1 - n, u1


def clothing_mask(spec: IdentitySpec, viewpoint: str, size=(32, 16)) -> np.ndarray:
    """Pixels painted by the outfit (after the viewpoint transform)."""
    _, cloth = _layers(spec, 0, viewpoint, size)
    return _view(cloth, viewpoint)


def render_sample(spec: IdentitySpec, clothing_id: int, viewpoint: str = "front",
                  occlusion: float = 0.0, camera_id: int = 0, noise_seed: int = 0,
                  size=(32, 16), noise_std: float = 0.03, illumination: float = 0.1,
                  sample_id: int = 0) -> SampleRecord:
    if not 0 <= clothing_id < spec.num_outfits:
        raise ValueError(f"clothing_id {clothing_id} out of range for identity "
                         f"{spec.identity_id} with {spec.num_outfits} outfits")
    if viewpoint not in VIEWPOINTS:
        raise ValueError(f"unknown viewpoint '{viewpoint}'")
    if not 0.0 <= occlusion <= 1.0:
        raise ValueError("occlusion must be in [0, 1]")
    H, W = size
    img, _ = _layers(spec, clothing_id, viewpoint, size)

    # camera: background level and a mild colour tint
    cam_rng = np.random.default_rng(10_007 + camera_id)
    background = cam_rng.uniform(0.25, 0.7, 3)
    tint = 1.0 + cam_rng.uniform(-0.08, 0.08, 3)
    fg = img.any(axis=2, keepdims=True)
    img = np.where(fg, img * tint, background)
    img = _view(img, viewpoint)

    r0, r1 = _occlusion_rows(H, occlusion)
    img[r0:r1, :] = OCCLUDER_GRAY

    rng = np.random.default_rng(noise_seed)
    img = img * rng.uniform(1.0 - illumination, 1.0 + illumination)
    img = img + rng.normal(0.0, noise_std, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SampleRecord(sample_id=sample_id, identity_id=spec.identity_id, image=img,
                        clothing_id=clothing_id, camera_id=camera_id, viewpoint=viewpoint,
                        occlusion=float(occlusion), noise_seed=int(noise_seed))


# ---------------------------------------------------------------------------
# dataset generation


def _check_range(name: str, rng_pair) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in rng_pair)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a (lo, hi) pair") from None
    if lo < 1 or lo > hi:
        raise ConfigError(f"{name} must be a nonempty range with lo >= 1, got {rng_pair}")
    return lo, hi


def make_identity(identity_id: int, rng: np.random.Generator, n_outfits: int) -> IdentitySpec:
    palettes = []
    for _ in range(n_outfits):
        up, low, acc = rng.choice(len(PALETTE), size=3, replace=False)
        palettes.append([PALETTE[up].tolist(), PALETTE[low].tolist(), PALETTE[acc].tolist()])
    return IdentitySpec(identity_id, int(rng.integers(2**31)), n_outfits, palettes)


def generate_dataset(seed: int = 7, n_identities: int = 12, outfits_per_id=(3, 3),
                     images_per_outfit=(6, 6), n_cameras: int = 3, image_size=(32, 16),
                     n_test_identities: int | None = None, noise_std: float = 0.03,
                     illumination: float = 0.1, occlusion_p: float = 0.2) -> Benchmark:
    """Generate train/query/gallery splits.

    ``n_identities`` training identities are rendered for ``train``; a disjoint
    set of ``n_test_identities`` (default: same count) is split so that the
    first image of every outfit is a query and the rest form the gallery.
    """
    if n_identities < 2:
        raise ConfigError("n_identities must be >= 2")
    outfits = _check_range("outfits_per_id", outfits_per_id)
    per_outfit = _check_range("images_per_outfit", images_per_outfit)
    if n_cameras < 1:
        raise ConfigError("n_cameras must be >= 1")
    H, W = (int(v) for v in image_size)
    if H < 8 or W < 8:
        raise ConfigError(f"image_size must be >= 8 in each dimension, got {image_size}")
    n_test = n_identities if n_test_identities is None else int(n_test_identities)
    if n_test < 1:
        raise ConfigError("n_test_identities must be >= 1")

    rng = np.random.default_rng(seed)
    identities: list[IdentitySpec] = []
    splits: dict[str, list[SampleRecord]] = {"train": [], "query": [], "gallery": []}
    sid = 0
    for ident in range(n_identities + n_test):
        spec = make_identity(ident, rng, int(rng.integers(outfits[0], outfits[1] + 1)))
        identities.append(spec)
        k = 0
        for cloth in range(spec.num_outfits):
            for j in range(int(rng.integers(per_outfit[0], per_outfit[1] + 1))):
                viewpoint = VIEWPOINTS[int(rng.integers(3))]
                occ = float(rng.uniform(0.1, 0.4)) if rng.random() < occlusion_p else 0.0
                rec = render_sample(spec, cloth, viewpoint, occ, camera_id=k % n_cameras,
                                    noise_seed=int(rng.integers(2**31)), size=(H, W),
                                    noise_std=noise_std, illumination=illumination,
                                    sample_id=sid)
                sid += 1
                k += 1
                if ident < n_identities:
                    splits["train"].append(rec)
                else:
                    splits["query" if j == 0 else "gallery"].append(rec)

    params = dict(seed=seed, n_identities=n_identities, n_test_identities=n_test,
                  outfits_per_id=list(outfits), images_per_outfit=list(per_outfit),
                  n_cameras=n_cameras, image_size=[H, W], noise_std=noise_std,
                  illumination=illumination, occlusion_p=occlusion_p)
    return Benchmark(*(DatasetManifest(s, splits[s], seed) for s in ("train", "query", "gallery")),
                     identities=identities, params=params)


def benchmark_from_config(data_cfg) -> Benchmark:
    if data_cfg.root:
        return load_benchmark(data_cfg.root)
    return generate_dataset(seed=data_cfg.seed, n_identities=data_cfg.n_identities,
                            outfits_per_id=data_cfg.outfits_per_id,
                            images_per_outfit=data_cfg.images_per_outfit,
                            n_cameras=data_cfg.n_cameras, image_size=data_cfg.image_size,
                            n_test_identities=data_cfg.n_test_identities,
                            noise_std=data_cfg.noise_std, illumination=data_cfg.illumination,
                            occlusion_p=data_cfg.occlusion_p)


# ---------------------------------------------------------------------------
# persistence


def save_benchmark(bench: Benchmark, root: str | Path, fmt: str = "raw", force: bool = False) -> Path:
    """Write ``manifest.json`` plus one image file per sample.

    ``fmt="raw"`` stores float32 ``.npy`` arrays (bit-exact round trip);
    ``fmt="png"`` stores 8-bit PNGs.
    """
    root = Path(root)
    if fmt not in ("raw", "png"):
        raise ConfigError(f"unknown image format '{fmt}'")
    if (root / "manifest.json").exists() and not force:
        raise FileExistsError(f"{root} already holds a dataset; pass force=True to overwrite")
    (root / "images").mkdir(parents=True, exist_ok=True)
    doc = {"format": fmt, "params": bench.params,
           "identities": [asdict(s) for s in bench.identities], "splits": {}}
    for name in ("train", "query", "gallery"):
        man = bench.split(name)
        entries = []
        for r in man.records:
            rel = f"images/{r.sample_id:06d}." + ("npy" if fmt == "raw" else "png")
            if fmt == "raw":
                np.save(root / rel, r.image, allow_pickle=False)
            else:
                from PIL import Image
                Image.fromarray(np.round(r.image * 255).astype(np.uint8)).save(root / rel)
            entries.append({**r.meta(), "image": rel})
        doc["splits"][name] = {"N": man.N, "N_p": man.N_p, "seed": man.seed, "records": entries}
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(doc, indent=1))
    os.replace(tmp, root / "manifest.json")
    return root


def load_benchmark(root: str | Path) -> Benchmark:
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    splits = {}
    for name in ("train", "query", "gallery"):
        s = doc["splits"][name]
        recs = []
        for e in s["records"]:
            path = root / e["image"]
            if path.suffix == ".npy":
                img = np.load(path, allow_pickle=False)
            else:
                from PIL import Image
                img = np.asarray(Image.open(path), dtype=np.float32) / 255.0
            meta = {k: v for k, v in e.items() if k != "image"}
            recs.append(SampleRecord(image=img, **meta))
        splits[name] = DatasetManifest(name, recs, s["seed"])
    identities = [IdentitySpec(**d) for d in doc["identities"]]
    return Benchmark(splits["train"], splits["query"], splits["gallery"], identities, doc["params"])


# ---------------------------------------------------------------------------
# train-time augmentation


def augment_batch(images: np.ndarray, cfg, rng: np.random.Generator) -> np.ndarray:
    """Flip, pad-and-crop and random erasing on a (B, H, W, 3) batch."""
    out = images.copy()
    B, H, W, _ = out.shape
    for i in range(B):
        img = out[i]
        if rng.random() < cfg.flip_p:
            img = img[:, ::-1]
        if cfg.pad > 0:
            p = cfg.pad
            padded = np.pad(img, ((p, p), (p, p), (0, 0)))
            y, x = rng.integers(0, 2 * p + 1, size=2)
            img = padded[y:y + H, x:x + W]
        if rng.random() < cfg.erase_p:
            for _ in range(10):
                area = rng.uniform(*cfg.erase_area) * H * W
                aspect = np.exp(rng.uniform(np.log(0.3), np.log(3.3)))
                h = int(round(np.sqrt(area * aspect)))
                w = int(round(np.sqrt(area / aspect)))
                if 0 < h < H and 0 < w < W:
                    y, x = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
                    img = img.copy()
                    img[y:y + h, x:x + w] = rng.random((h, w, 3))
                    break
        out[i] = img
    return out
