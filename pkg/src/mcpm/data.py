"""Synthetic blob segmentation data and annotation corruption.

Images contain one to three filled ellipses on a noisy background.  A
fraction of the training annotations is then corrupted by disk dilation or
by an elastic warp, and each sample keeps its clean label so that the
corrupted band can be scored later.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensorio

SPLITS = ("train", "meta", "test")
_SPLIT_CODE = {"train": 0, "meta": 1, "test": 2}


@dataclass
class Sample:
    image: np.ndarray  # [1, h, w] in [0, 1]
    label: np.ndarray  # [c, h, w] binary, possibly corrupted
    clean_label: np.ndarray  # [c, h, w] binary
    corrupted: bool = False

    @property
    def band(self) -> np.ndarray:
        """Pixels where the label disagrees with the clean label (any channel)."""
        return np.any(self.label != self.clean_label, axis=0)


@dataclass
class Dataset:
    samples: list
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "meta" and any(s.corrupted for s in self.samples):
            raise ValueError("meta split must contain clean annotations only")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def images(self, idx=None) -> np.ndarray:
        sel = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.image for s in sel])

    def labels(self, idx=None, clean: bool = False) -> np.ndarray:
        sel = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.clean_label if clean else s.label for s in sel])

    def bands(self, idx=None) -> np.ndarray:
        sel = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.band for s in sel])


@dataclass
class SyntheticSpec:
    n_train: int = 200
    n_meta: int = 20
    n_test: int = 100
    h: int = 32
    w: int = 32
    blobs: tuple = (1, 3)
    radius: tuple = (3.0, 7.0)
    fg_mean: float = 0.7
    bg_mean: float = 0.3
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.blobs = tuple(self.blobs)
        self.radius = tuple(self.radius)

    def validate(self) -> None:
        counts = (self.n_train, self.n_meta, self.n_test)
        if min(counts) < 0 or sum(counts) == 0:
            raise ValueError(f"split counts must be non-negative and not all zero, got {counts}")
        if self.h < 8 or self.w < 8:
            raise ValueError("images must be at least 8x8")
        lo, hi = self.blobs
        if not 1 <= lo <= hi:
            raise ValueError(f"blob count range {self.blobs} invalid")
        rlo, rhi = self.radius
        if not 0 < rlo <= rhi:
            raise ValueError(f"blob radius range {self.radius} invalid")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass
class ElasticParams:
    grid_spacing: int = 8
    sigma: float = 1.5
    rotation: tuple = (-10.0, 10.0)  # degrees
    translation: tuple = (-2.0, 2.0)  # pixels; one range for both axes, or ((y range), (x range))
    dilation: tuple = (0, 2)

    def __post_init__(self):
        self.rotation = tuple(self.rotation)
        t = self.translation
        self.translation = tuple(tuple(v) for v in t) if np.ndim(t) == 2 else tuple(t)
        self.dilation = tuple(self.dilation)


@dataclass
class CorruptionSpec:
    r: float = 0.4
    kind: str = "dilation"
    radius: tuple = (0, 6)
    elastic: ElasticParams = field(default_factory=ElasticParams)
    seed: int = 0

    def __post_init__(self):
        self.radius = tuple(self.radius)
        if isinstance(self.elastic, dict):
            self.elastic = ElasticParams(**self.elastic)

    def validate(self) -> None:
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"corruption fraction r must lie in [0, 1], got {self.r}")
        if self.kind not in ("dilation", "elastic"):
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        lo, hi = self.radius
        if not 0 <= lo <= hi or int(lo) != lo or int(hi) != hi:
            raise ValueError(f"dilation radius range {self.radius} must be non-negative integers")


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# -- generation ---------------------------------------------------------------

def _ellipse_mask(h, w, rng, spec: SyntheticSpec) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))):
        a, b = rng.uniform(*spec.radius, size=2)
        cy = rng.uniform(min(a, h / 2), max(h - 1 - a, h / 2))
        cx = rng.uniform(min(b, w / 2), max(w - 1 - b, w / 2))
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def make_sample(spec: SyntheticSpec, split: str, index: int) -> Sample:
    rng = _rng(spec.seed, _SPLIT_CODE[split], index)
    mask = _ellipse_mask(spec.h, spec.w, rng, spec)
    image = np.where(mask, spec.fg_mean, spec.bg_mean)
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    label = mask.astype(np.float64)[None]
    return Sample(image=image[None], label=label, clean_label=label.copy())


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset, Dataset]:
    spec.validate()
    counts = {"train": spec.n_train, "meta": spec.n_meta, "test": spec.n_test}
    return tuple(
        Dataset([make_sample(spec, split, i) for i in range(counts[split])], split)
        for split in SPLITS
    )


# -- corruption operators -------------------------------------------------------

def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy ** 2 + xx ** 2 <= r * r


def dilate(mask, radius: int) -> np.ndarray:
    """Dilation by a Euclidean disk; pixels beyond the border are background."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    mask = np.asarray(mask).astype(bool)
    if radius == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk(radius), border_value=0)


def elastic(mask, params: ElasticParams, seed: int) -> np.ndarray:
    """Random smooth warp, then rotation/translation, then a random dilation."""
    if params.grid_spacing < 4:
        raise ValueError("grid spacing must be at least 4")
    if params.sigma < 0:
        raise ValueError("displacement sigma must be non-negative")
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    rng = np.random.default_rng(seed)

    gh = math.ceil((h - 1) / params.grid_spacing) + 1
    gw = math.ceil((w - 1) / params.grid_spacing) + 1
    coarse = rng.normal(0.0, params.sigma, size=(2, gh, gw)) if params.sigma > 0 \
        else np.zeros((2, gh, gw))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    grid = np.stack([yy / params.grid_spacing, xx / params.grid_spacing])
    field_y = ndimage.map_coordinates(coarse[0], grid, order=1, mode="nearest")
    field_x = ndimage.map_coordinates(coarse[1], grid, order=1, mode="nearest")

    angle = np.deg2rad(rng.uniform(*params.rotation))
    if np.ndim(params.translation) == 2:
        ty = rng.uniform(*params.translation[0])
        tx = rng.uniform(*params.translation[1])
    else:
        ty, tx = rng.uniform(*params.translation, size=2)

    # inverse of rotate+translate about the centre, then inverse of the warp
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    py, px = yy - cy - ty, xx - cx - tx
    cos, sin = np.cos(angle), np.sin(angle)
    qy = cos * py + sin * px + cy
    qx = -sin * py + cos * px + cx
    qy_f = ndimage.map_coordinates(field_y, [qy, qx], order=1, mode="nearest")
    qx_f = ndimage.map_coordinates(field_x, [qy, qx], order=1, mode="nearest")
    sy = np.rint(qy + qy_f).astype(int)
    sx = np.rint(qx + qx_f).astype(int)
    inside = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = np.zeros_like(mask)
    out[inside] = mask[sy[inside], sx[inside]]

    lo, hi = params.dilation
    return dilate(out, int(rng.integers(lo, hi + 1)))


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def corrupt(dataset: Dataset, spec: CorruptionSpec) -> Dataset:
    """Corrupt exactly ``round(r * N)`` labels chosen without replacement."""
    spec.validate()
    n = len(dataset)
    k = round_half_away(spec.r * n)
    rng = _rng(spec.seed, 0xC0)
    chosen = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
    out = []
    for i, s in enumerate(dataset.samples):
        if i not in chosen:
            out.append(Sample(s.image, s.clean_label.copy(), s.clean_label, False))
            continue
        sub = _rng(spec.seed, 0xC1, i)
        if spec.kind == "dilation":
            radius = int(sub.integers(spec.radius[0], spec.radius[1] + 1))
            label = np.stack([dilate(ch, radius) for ch in s.clean_label])
        else:
            seed = int(sub.integers(2 ** 63))
            label = np.stack([elastic(ch, spec.elastic, seed) for ch in s.clean_label])
        out.append(Sample(s.image, label.astype(np.float64), s.clean_label, True))
    return Dataset(out, dataset.split)


# -- container ------------------------------------------------------------------

def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_jsonable(v) for v in obj]
    return obj


def save(root: str | os.PathLike, splits: dict[str, Dataset], synthetic: SyntheticSpec,
         corruption: CorruptionSpec | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    first = next(ds for ds in splits.values() if len(ds))
    manifest = {
        "format": "mcpm-dataset-v1",
        "counts": {name: len(ds) for name, ds in splits.items()},
        "image_shape": list(first[0].image.shape),
        "label_shape": list(first[0].label.shape),
        "seed": synthetic.seed,
        "synthetic": _jsonable(synthetic),
        "corruption": _jsonable(corruption) if corruption is not None else None,
        "r": corruption.r if corruption is not None else 0.0,
    }
    for name, ds in splits.items():
        d = root / name
        d.mkdir(exist_ok=True)
        with open(d / "flags.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "corrupted"])
            for i, s in enumerate(ds.samples):
                tensorio.save(d / f"img_{i:05d}.mptd", s.image)
                tensorio.save(d / f"lbl_{i:05d}.mptd", s.label)
                tensorio.save(d / f"clean_{i:05d}.mptd", s.clean_label)
                writer.writerow([i, int(s.corrupted)])
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return root


def load(root: str | os.PathLike) -> tuple[dict[str, Dataset], dict]:
    root = Path(root)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    splits = {}
    for name, n in manifest["counts"].items():
        d = root / name
        with open(d / "flags.csv") as fh:
            flags = {int(row["index"]): bool(int(row["corrupted"])) for row in csv.DictReader(fh)}
        if len(flags) != n:
            raise ValueError(f"{name}: flags.csv lists {len(flags)} samples, manifest says {n}")
        samples = [
            Sample(tensorio.load(d / f"img_{i:05d}.mptd"),
                   tensorio.load(d / f"lbl_{i:05d}.mptd"),
                   tensorio.load(d / f"clean_{i:05d}.mptd"),
                   flags[i])
            for i in range(n)
        ]
        splits[name] = Dataset(samples, name)
    return splits, manifest


def with_seed(spec, seed: int):
    return replace(spec, seed=seed)
