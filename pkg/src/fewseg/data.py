"""Synthetic episode data: generation, folds, sampling.

Classes are (shape family, color distribution) pairs: six parametric
families cycled across class ids, with per-class hues spread by the golden
ratio so any two classes differ in family or color. Images vary in scale,
rotation, position, and color jitter; backgrounds are low-saturation noise
with a soft gradient, and a minority of scenes carry one unlabeled clutter
shape in a foreign hue (see _render). Masks are exact shape supports with
foreground fractions kept inside [1%, 60%] by construction (the generator
targets a narrower band so that 4x-downsampled masks stay nonempty).

On disk: PPM (P6) images, PGM (P5) masks, a JSON manifest mapping classes
to files, and a frozen random embedding table (one line per class).
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import ClassEmbeddings
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

__all__ = ["FAMILIES", "SyntheticClass", "SplitConfig", "Episode", "Dataset",
           "generate_synthetic_dataset", "sample_episode"]

FAMILIES = ("ellipse", "rectangle", "triangle", "ring", "cross", "blob")

_FG_LO, _FG_HI = 0.01, 0.60          # hard bounds every mask must satisfy
_GEN_LO, _GEN_HI = 0.035, 0.50       # narrower target the generator draws in

# Scene composition. Clutter is kept rare, small, and muted: enough that
# pure saliency cannot explain every episode, not so much that the early
# saliency gradient (the only learnable cue while the support pathway is
# still random) drowns in conflicting supervision.
_NOISE = 0.04                        # per-pixel uniform color noise
_CLUTTER_P = 0.15                    # fraction of draws with a clutter shape
_CLUTTER_SCALE = (0.07, 0.11)        # clutter size relative to the image
_CLUTTER_SAT = (0.55, 0.85)          # clutter color saturation range
_CLUTTER_VAL = (0.55, 0.80)          # clutter color value range
_HUE_PUSH = 0.18                     # min circular hue distance to the class


@dataclass
class SyntheticClass:
    """Generation parameters for one class."""
    class_id: int
    name: str
    family: str
    base_color: tuple[float, float, float]
    scale_range: tuple[float, float] = (0.15, 0.28)
    rotation_range: tuple[float, float] = (0.0, float(np.pi))
    color_jitter: float = 0.07
    texture_seed: int = 0


@dataclass
class SplitConfig:
    """Contiguous class folds; train = everything outside the test fold."""
    n_classes: int
    n_folds: int = 4
    test_fold: int = 0

    def __post_init__(self):
        if self.n_classes < 8:
            raise ValueError(f"need at least 8 classes, got {self.n_classes}")
        if self.n_classes % self.n_folds:
            raise ValueError(f"{self.n_classes} classes do not split into "
                             f"{self.n_folds} even folds")
        if not 0 <= self.test_fold < self.n_folds:
            raise ValueError(f"test_fold {self.test_fold} outside "
                             f"[0, {self.n_folds})")

    @property
    def fold_size(self) -> int:
        return self.n_classes // self.n_folds

    def fold_classes(self, fold: int) -> list[int]:
        return list(range(fold * self.fold_size, (fold + 1) * self.fold_size))

    def test_classes(self) -> list[int]:
        return self.fold_classes(self.test_fold)

    def train_classes(self) -> list[int]:
        test = set(self.test_classes())
        return [c for c in range(self.n_classes) if c not in test]


@dataclass
class Episode:
    """One few-shot task: K support pairs, one query, class identity."""
    class_id: int
    class_name: str
    supports: list[tuple[np.ndarray, np.ndarray]]
    query_image: np.ndarray
    query_mask: np.ndarray
    text: np.ndarray

    @property
    def k(self) -> int:
        return len(self.supports)


# ---------------------------------------------------------------------------
# rasterizers
# ---------------------------------------------------------------------------

def _rotated_coords(res: int, cy: float, cx: float, theta: float):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    return ct * dy + st * dx, -st * dy + ct * dx


def _raster(family: str, res: int, cy, cx, a, b, theta, rng) -> np.ndarray:
    ry, rx = _rotated_coords(res, cy, cx, theta)
    if family == "ellipse":
        return (rx / a) ** 2 + (ry / b) ** 2 <= 1.0
    if family == "rectangle":
        return (np.abs(rx) <= a) & (np.abs(ry) <= b)
    if family == "triangle":
        # isoceles triangle pointing +y before rotation
        top = ry >= -b
        left = ry <= b + (2.0 * b / a) * rx
        right = ry <= b - (2.0 * b / a) * rx
        return top & left & right
    if family == "ring":
        outer = (rx / a) ** 2 + (ry / b) ** 2 <= 1.0
        inner = (rx / (0.55 * a)) ** 2 + (ry / (0.55 * b)) ** 2 <= 1.0
        return outer & ~inner
    if family == "cross":
        bar = 0.34
        horiz = (np.abs(rx) <= a) & (np.abs(ry) <= bar * b)
        vert = (np.abs(ry) <= b) & (np.abs(rx) <= bar * a)
        return horiz | vert
    if family == "blob":
        rho = np.sqrt(rx ** 2 + ry ** 2)
        phi = np.arctan2(ry, rx)
        radius = a * (1.0
                      + 0.28 * np.sin(3 * phi + rng.uniform(0, 2 * np.pi))
                      + 0.14 * np.sin(5 * phi + rng.uniform(0, 2 * np.pi)))
        return rho <= radius
    raise ValueError(f"unknown shape family '{family}'")


def _render(cls: SyntheticClass, res: int, rng) -> tuple[np.ndarray,
                                                         np.ndarray]:
    """One (image, mask) draw; retries until the foreground bounds hold.

    A small fraction of draws add one unlabeled clutter shape in a hue
    pushed away from the class hue, so plain saliency cannot explain every
    episode and the support example keeps earning its keep. Clutter stays
    a minority pressure on purpose: when most scenes hold extra shapes,
    early training has no learnable cue at all and the decoder settles on
    a constant blob or an all-background answer.
    """
    for _ in range(64):
        scale = rng.uniform(*cls.scale_range) * res
        aspect = rng.uniform(0.7, 1.4)
        a, b = scale * aspect, scale / aspect
        cy = rng.uniform(0.32, 0.68) * res
        cx = rng.uniform(0.32, 0.68) * res
        theta = rng.uniform(*cls.rotation_range)
        mask = _raster(cls.family, res, cy, cx, a, b, theta, rng)
        frac = float(mask.mean())
        if _GEN_LO <= frac <= _GEN_HI:
            break
    else:
        raise RuntimeError(f"could not place a '{cls.family}' shape within "
                           f"foreground bounds")

    base = rng.uniform(0.25, 0.62)
    tilt_y = rng.uniform(-0.09, 0.09)
    tilt_x = rng.uniform(-0.09, 0.09)
    ramp = (np.linspace(-0.5, 0.5, res)[:, None] * tilt_y
            + np.linspace(-0.5, 0.5, res)[None, :] * tilt_x)
    tex = np.random.default_rng(
        np.random.SeedSequence([cls.texture_seed])).uniform(-1.0, 1.0, 3)
    tint = 0.03 * tex + rng.uniform(-0.04, 0.04, 3)
    image = (base + ramp)[:, :, None] + tint[None, None, :]
    image = image + rng.uniform(-_NOISE, _NOISE, (res, res, 3))

    target_hue = colorsys.rgb_to_hsv(*cls.base_color)[0]
    for _ in range(int(rng.random() < _CLUTTER_P)):
        fam = FAMILIES[int(rng.integers(len(FAMILIES)))]
        d_scale = rng.uniform(*_CLUTTER_SCALE) * res
        d_aspect = rng.uniform(0.7, 1.4)
        da, db = d_scale * d_aspect, d_scale / d_aspect
        dcy = rng.uniform(0.15, 0.85) * res
        dcx = rng.uniform(0.15, 0.85) * res
        dmask = _raster(fam, res, dcy, dcx, da, db,
                        rng.uniform(0.0, np.pi), rng)
        # circular hue distance to the target stays >= _HUE_PUSH
        span = 1.0 - 2.0 * _HUE_PUSH
        hue = (target_hue + _HUE_PUSH + span * rng.random()) % 1.0
        dcolor = np.asarray(colorsys.hsv_to_rgb(
            hue, rng.uniform(*_CLUTTER_SAT), rng.uniform(*_CLUTTER_VAL)))
        dfg = dcolor[None, None, :] + rng.uniform(-0.04, 0.04, (res, res, 3))
        image = np.where(dmask[:, :, None], dfg, image)

    color = np.asarray(cls.base_color)
    color = color + rng.uniform(-cls.color_jitter, cls.color_jitter, 3)
    fg = color[None, None, :] + rng.uniform(-0.04, 0.04, (res, res, 3))
    # target drawn last: it occludes clutter, never the other way round
    image = np.where(mask[:, :, None], fg, image)
    return np.clip(image, 0.0, 1.0).astype(np.float32), \
        mask.astype(np.float32)


def make_classes(n_classes: int) -> list[SyntheticClass]:
    """Deterministic class table: families cycle, hues never repeat."""
    classes = []
    for i in range(n_classes):
        family = FAMILIES[i % len(FAMILIES)]
        hue = (i * 0.618033988749895) % 1.0
        sat = 0.80 + 0.12 * ((i // len(FAMILIES)) % 2)
        val = 0.88 if i % 2 == 0 else 0.76
        color = colorsys.hsv_to_rgb(hue, sat, val)
        classes.append(SyntheticClass(
            class_id=i, name=f"class{i:02d}_{family}", family=family,
            base_color=tuple(round(c, 6) for c in color), texture_seed=i))
    return classes


def generate_synthetic_dataset(out_dir, n_classes: int = 20,
                               per_class: int = 25, resolution: int = 64,
                               seed: int = 0,
                               embedding_dim: int = 300) -> "Dataset":
    """Write a complete dataset directory; deterministic in the seed."""
    if n_classes < 8:
        raise ValueError(f"need at least 8 classes, got {n_classes}")
    if per_class < 2:
        raise ValueError("need at least 2 images per class (K=1 episodes)")
    if resolution % 4:
        raise ValueError("resolution must be divisible by the encoder "
                         "stride (4)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    classes = make_classes(n_classes)

    manifest: dict = {"format": 1, "resolution": resolution, "seed": seed,
                      "per_class": per_class,
                      "embeddings": "embeddings.txt", "classes": []}
    for cls in classes:
        cdir = out / f"class_{cls.class_id:02d}"
        cdir.mkdir(exist_ok=True)
        images, masks = [], []
        for j in range(per_class):
            img, mask = _render(cls, resolution, rng)
            frac = float(mask.mean())
            if not _FG_LO <= frac <= _FG_HI:
                raise RuntimeError(
                    f"generated mask outside foreground bounds: {frac:.3f}")
            ipath = f"class_{cls.class_id:02d}/img_{j:03d}.ppm"
            mpath = f"class_{cls.class_id:02d}/mask_{j:03d}.pgm"
            write_ppm(out / ipath, img)
            write_pgm(out / mpath, mask)
            images.append(ipath)
            masks.append(mpath)
        manifest["classes"].append({
            "id": cls.class_id, "name": cls.name, "family": cls.family,
            "base_color": list(cls.base_color),
            "images": images, "masks": masks})

    emb = ClassEmbeddings.random([c.name for c in classes], embedding_dim,
                                 seed=seed)
    emb.save(out / "embeddings.txt")
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return Dataset(out)


# ---------------------------------------------------------------------------
# loading and sampling
# ---------------------------------------------------------------------------

@dataclass
class _ClassRecord:
    class_id: int
    name: str
    family: str
    image_paths: list[str]
    mask_paths: list[str]
    _images: list = field(default_factory=list, repr=False)
    _masks: list = field(default_factory=list, repr=False)


class Dataset:
    """Loader over a generated directory; arrays cached after first read."""

    def __init__(self, root):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(f"no manifest.json under {self.root}")
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("format") != 1:
            raise ValueError(f"unsupported manifest format "
                             f"{manifest.get('format')}")
        self.resolution = int(manifest["resolution"])
        self.classes = [
            _ClassRecord(class_id=int(c["id"]), name=c["name"],
                         family=c["family"], image_paths=list(c["images"]),
                         mask_paths=list(c["masks"]))
            for c in manifest["classes"]]
        self._by_id = {c.class_id: c for c in self.classes}
        self._embeddings: ClassEmbeddings | None = None
        self._emb_file = manifest.get("embeddings", "embeddings.txt")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def embeddings(self) -> ClassEmbeddings:
        if self._embeddings is None:
            self._embeddings = ClassEmbeddings.from_file(
                self.root / self._emb_file)
        return self._embeddings

    def class_record(self, class_id: int) -> _ClassRecord:
        if class_id not in self._by_id:
            raise KeyError(f"unknown class id {class_id}")
        return self._by_id[class_id]

    def pair(self, class_id: int, index: int):
        rec = self.class_record(class_id)
        if not rec._images:
            rec._images = [None] * len(rec.image_paths)
            rec._masks = [None] * len(rec.mask_paths)
        if rec._images[index] is None:
            rec._images[index] = read_ppm(self.root / rec.image_paths[index])
            rec._masks[index] = \
                (read_pgm(self.root / rec.mask_paths[index]) > 0.5) \
                .astype(np.float32)
        return rec._images[index], rec._masks[index]


def sample_episode(dataset: Dataset, class_ids: list[int], k: int,
                   rng: np.random.Generator) -> Episode:
    """Uniform class, then K+1 distinct images: K supports and one query."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not class_ids:
        raise ValueError("empty class pool")
    class_id = int(class_ids[rng.integers(len(class_ids))])
    rec = dataset.class_record(class_id)
    n = len(rec.image_paths)
    if n < k + 1:
        raise ValueError(f"class {class_id} has {n} images, needs at least "
                         f"{k + 1} for {k}-shot episodes")
    picks = rng.choice(n, size=k + 1, replace=False)
    supports = [dataset.pair(class_id, int(i)) for i in picks[:k]]
    qimg, qmask = dataset.pair(class_id, int(picks[k]))
    text = dataset.embeddings.table[
        dataset.embeddings.names.index(rec.name)]
    return Episode(class_id=class_id, class_name=rec.name,
                   supports=supports, query_image=qimg, query_mask=qmask,
                   text=np.asarray(text))
