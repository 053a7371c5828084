"""Dataset loading, augmentation and ratio-controlled mixed-origin batching."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from PIL import Image
from scipy.ndimage import affine_transform

from .synthgen import IMAGE_SIZE, MAX_COUNT

ORIGIN_IDS = {"natural": 0, "synthetic": 1}


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


@dataclass
class Dataset:
    images: np.ndarray            # (N, 128, 128) float32 in [0, 1]
    labels: np.ndarray            # (N,) int64, -1 marks an unlabeled image
    origin: str
    filenames: list = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or self.images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
            raise DatasetError(f"images must be (N, {IMAGE_SIZE}, {IMAGE_SIZE}), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError("labels and images differ in length")
        if self.origin not in ORIGIN_IDS:
            raise DatasetError(f"unknown origin {self.origin!r}")
        if not self.filenames:
            self.filenames = [f"{self.origin}_{i:06d}" for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)

    @property
    def labeled(self):
        return self.labels >= 1

    @property
    def counts_index(self):
        index = {}
        for i, lab in enumerate(self.labels):
            if lab >= 1:
                index.setdefault(int(lab), []).append(i)
        return index

    def subset(self, indices, split=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.origin,
                       [self.filenames[i] for i in idx], split or self.split)

    def labeled_subset(self):
        return self.subset(np.flatnonzero(self.labeled))

    def with_origin(self, origin):
        return Dataset(self.images, self.labels, origin, list(self.filenames), self.split)

    @classmethod
    def from_samples(cls, samples, origin=None, split="train", labeled=True):
        images = np.stack([s.image for s in samples]) if samples else np.zeros(
            (0, IMAGE_SIZE, IMAGE_SIZE), np.float32)
        labels = [(s.label if labeled and s.label is not None else -1) for s in samples]
        return cls(images, labels, origin or (samples[0].origin if samples else "synthetic"),
                   [s.filename for s in samples], split)

    @classmethod
    def concat(cls, datasets, origin=None):
        ds = [d for d in datasets if len(d)]
        return cls(np.concatenate([d.images for d in ds]), np.concatenate([d.labels for d in ds]),
                   origin or ds[0].origin, sum((list(d.filenames) for d in ds), []), ds[0].split)

    @classmethod
    def empty(cls, origin):
        return cls(np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), np.float32), np.zeros(0, np.int64), origin)


def load_dataset(directory, origin=None, split="train"):
    """Read ``labels.csv`` (+ optional ``manifest.json``) and the referenced PNGs."""
    manifest_path = os.path.join(directory, "manifest.json")
    labels_path = os.path.join(directory, "labels.csv")
    manifest = None
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    if origin is None:
        if manifest is None:
            raise DatasetError(f"{directory}: missing manifest.json and no origin override given")
        origin = manifest.get("origin", "synthetic")
    if not os.path.exists(labels_path):
        raise DatasetError(f"{directory}: missing labels.csv")
    names, labels = [], []
    with open(labels_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"filename", "count"} <= set(reader.fieldnames):
            raise DatasetError(f"{labels_path}: header must be 'filename,count'")
        for row in reader:
            name = row["filename"]
            raw = (row["count"] or "").strip()
            if raw == "":
                lab = -1
            else:
                try:
                    lab = int(raw)
                except ValueError:
                    raise DatasetError(f"{name}: count {raw!r} is not an integer") from None
                if not 1 <= lab <= MAX_COUNT:
                    raise DatasetError(f"{name}: count {lab} outside 1..{MAX_COUNT}")
            names.append(name)
            labels.append(lab)
    images = np.empty((len(names), IMAGE_SIZE, IMAGE_SIZE), np.float32)
    for i, name in enumerate(names):
        path = os.path.join(directory, name)
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float32)
        except OSError as exc:
            raise DatasetError(f"{path}: unreadable image ({exc})") from exc
        if arr.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise DatasetError(f"{path}: expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {arr.shape}")
        images[i] = arr / 255.0
    return Dataset(images, labels, origin, names, split)


def stratified_split(dataset, fraction=0.15, seed=0):
    """Hold out ``fraction`` of the labeled samples per count value; unlabeled stay in train."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7919])))
    val = []
    for lab in sorted(dataset.counts_index):
        idx = np.array(dataset.counts_index[lab])
        rng.shuffle(idx)
        val.extend(idx[:int(round(fraction * len(idx)))].tolist())
    val = np.array(sorted(val), dtype=np.int64)
    train = np.setdiff1d(np.arange(len(dataset)), val)
    return dataset.subset(train, "train"), dataset.subset(val, "val")


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    crop_scale: float = 0.9
    small_rotation_max_deg: float = 5.0
    quarter_rotation: bool = True
    quarter_rotation_prob: float = 0.5
    noise_amplitude: float = 0.02

    def __post_init__(self):
        if not 0 < self.crop_scale <= 1 or self.crop_scale * IMAGE_SIZE < 64:
            raise ValueError("crop_scale must be in (0, 1] with crop_scale * 128 >= 64")
        for name in ("hflip_prob", "vflip_prob", "quarter_rotation_prob", "noise_amplitude"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.small_rotation_max_deg < 0:
            raise ValueError("small_rotation_max_deg must be nonnegative")

    @classmethod
    def identity(cls):
        return cls(hflip_prob=0, vflip_prob=0, crop_scale=1.0, small_rotation_max_deg=0,
                   quarter_rotation=False, noise_amplitude=0)

    def to_dict(self):
        return asdict(self)


def hflip(image):
    return image[:, ::-1]


def vflip(image):
    return image[::-1, :]


def _rotate_crop_resize(image, angle_deg, crop, oy, ox):
    """Small rotation about the center, crop ``crop`` px at (oy, ox), bilinear resize back.

    The three geometric steps are composed into one affine resampling with
    border replication.
    """
    n = image.shape[0]
    s = crop / n
    th = math.radians(angle_deg)
    c, si = math.cos(th), math.sin(th)
    center = (n - 1) / 2.0
    # output (i, j) -> crop coords q = s*(i,j) + (s*0.5 - 0.5) + (oy, ox) -> rotate about center
    rot = np.array([[c, -si], [si, c]])
    scale_off = np.array([oy + s * 0.5 - 0.5, ox + s * 0.5 - 0.5])
    matrix = rot * s
    offset = rot @ (scale_off - center) + center
    return affine_transform(image, matrix, offset=offset, order=1, mode="nearest")


def augment(image, config, rng):
    """Rotation -> crop -> resize -> flips -> quarter turn -> noise -> clamp."""
    n = image.shape[0]
    angle = rng.uniform(0.0, config.small_rotation_max_deg) if config.small_rotation_max_deg else 0.0
    if rng.random() < 0.5:
        angle = -angle
    crop = int(round(config.crop_scale * n))
    oy = int(rng.integers(0, n - crop + 1))
    ox = int(rng.integers(0, n - crop + 1))
    out = np.asarray(image, dtype=np.float32)
    if angle != 0.0 or crop != n:
        out = _rotate_crop_resize(out, angle, crop, oy, ox)
    if rng.random() < config.hflip_prob:
        out = hflip(out)
    if rng.random() < config.vflip_prob:
        out = vflip(out)
    if config.quarter_rotation and rng.random() < config.quarter_rotation_prob:
        out = np.rot90(out)
    if config.noise_amplitude > 0:
        out = out + rng.uniform(-config.noise_amplitude, config.noise_amplitude,
                                out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- batching

def parse_ratio(value):
    """Accept 2, 2.0, "2", "2:1", "1:0" (synthetic only) or "0:1" (natural only)."""
    if isinstance(value, str) and ":" in value:
        a, b = (float(x) for x in value.split(":"))
        if a < 0 or b < 0 or a == b == 0:
            raise ValueError(f"invalid ratio {value!r}")
        return math.inf if b == 0 else a / b
    r = float(value)
    if r < 0:
        raise ValueError("ratio must be nonnegative")
    return r


def format_ratio(r):
    if math.isinf(r):
        return "1:0"
    f = Fraction(r).limit_denominator(100)
    return f"{f.numerator}:{f.denominator}" if f.denominator != 1 else f"{f.numerator}:1"


@dataclass
class RatioSampler:
    syn_to_nat_ratio: float = 1.0
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.syn_to_nat_ratio = parse_ratio(self.syn_to_nat_ratio)
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def shares(self):
        """Items per batch as {"synthetic": n_syn, "natural": n_nat}."""
        b, r = self.batch_size, self.syn_to_nat_ratio
        if math.isinf(r):
            return {"synthetic": b, "natural": 0}
        if r == 0:
            return {"synthetic": 0, "natural": b}
        n_syn = math.ceil(b * r / (1.0 + r) - 1e-9)
        if b >= 2:
            n_syn = min(max(n_syn, 1), b - 1)
        return {"synthetic": n_syn, "natural": b - n_syn}

    def batches_per_epoch(self, sizes):
        shares = self.shares()
        counts = [math.ceil(sizes[o] / shares[o]) for o in shares if shares[o] > 0]
        return max(counts) if counts else 0


@dataclass
class Batch:
    images: dict
    labels: dict
    indices: dict

    def __len__(self):
        return sum(len(v) for v in self.images.values())


def _stream_rng(seed, epoch, origin, extra=0):
    ss = np.random.SeedSequence([int(seed), int(epoch), ORIGIN_IDS[origin], int(extra)])
    return np.random.Generator(np.random.Philox(ss))


def _index_stream(n, needed, seed, epoch, origin):
    """Permutations of range(n), reshuffled per pass, concatenated to ``needed`` entries."""
    out = []
    k = 0
    while sum(len(p) for p in out) < needed:
        out.append(_stream_rng(seed, epoch, origin, 1000 + k).permutation(n))
        k += 1
    return np.concatenate(out)[:needed] if out else np.zeros(0, np.int64)


def make_batches(nat, syn, sampler, epoch, augment_config=None, augment_origins=None):
    """Yield the mixed batches of one epoch.

    Sampling is without replacement within each pool's pass; pools that run out
    before the epoch ends start a fresh permutation. Every item's augmentation
    draws from its own stream keyed by (seed, epoch, origin, position).
    """
    pools = {"natural": nat, "synthetic": syn}
    shares = sampler.shares()
    for origin, share in shares.items():
        if share > 0 and (pools[origin] is None or len(pools[origin]) == 0):
            raise EmptyDatasetError(f"{origin} pool is empty but the ratio gives it {share} items per batch")
    sizes = {o: len(pools[o]) if pools[o] is not None else 0 for o in pools}
    n_batches = sampler.batches_per_epoch(sizes)
    streams = {o: _index_stream(sizes[o], n_batches * shares[o], sampler.seed, epoch, o)
               for o in pools if shares[o] > 0}
    if augment_origins is None:
        augment_origins = {"natural": True, "synthetic": True}
    for b in range(n_batches):
        images, labels, indices = {}, {}, {}
        for origin, stream in streams.items():
            share = shares[origin]
            idx = stream[b * share:(b + 1) * share]
            ds = pools[origin]
            imgs = ds.images[idx]
            if augment_config is not None and augment_origins.get(origin, True):
                imgs = np.stack([
                    augment(img, augment_config,
                            _stream_rng(sampler.seed, epoch, origin, 10_000_000 + b * share + j))
                    for j, img in enumerate(imgs)
                ])
            images[origin] = imgs
            labels[origin] = ds.labels[idx]
            indices[origin] = idx
        yield Batch(images, labels, indices)
