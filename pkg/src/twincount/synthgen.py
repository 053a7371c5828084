"""Procedural generator of labeled synthetic microscopy images.

Cells are drawn as deformed, anti-aliased ellipses on a constant background,
each with its own luminance and Gaussian edge blur, plus an optional bright
halo ring and zero-centered pixel noise. Every image draws from its own
Philox substream keyed by ``(seed, image index)``, so serial and parallel
generation produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

IMAGE_SIZE = 128
MAX_COUNT = 30
DATASET_FORMAT = "twincount-dataset"


class ConfigError(ValueError):
    pass


class PlacementError(RuntimeError):
    """Rejection sampling ran out of retries; the configuration is too dense."""


@dataclass(frozen=True)
class ModalityStyle:
    name: str
    background_level: float
    cell_polarity: str
    halo_intensity: float
    halo_width: float

    def __post_init__(self):
        if not 0.0 <= self.background_level <= 1.0:
            raise ConfigError("background_level must be in [0, 1]")
        if self.cell_polarity not in ("darker_than_bg", "brighter_than_bg"):
            raise ConfigError(f"unknown cell_polarity {self.cell_polarity!r}")
        if self.halo_intensity < 0 or self.halo_width < 0:
            raise ConfigError("halo parameters must be nonnegative")


STYLES = {
    "bf_like": ModalityStyle("bf_like", 0.75, "darker_than_bg", 0.08, 1.5),
    "pc_like": ModalityStyle("pc_like", 0.45, "brighter_than_bg", 0.55, 2.5),
}


def get_style(name):
    try:
        return STYLES[name]
    except KeyError:
        raise ConfigError(
            f"unknown style {name!r}; valid styles: {', '.join(sorted(STYLES))}"
        ) from None


def geometric_weights(ratio=0.9, lo=1, hi=MAX_COUNT):
    """Weights p(k) proportional to ratio**k on lo..hi, zero elsewhere."""
    return tuple(ratio ** k if lo <= k <= hi else 0.0 for k in range(1, MAX_COUNT + 1))


def uniform_weights(lo=1, hi=MAX_COUNT):
    return tuple(1.0 if lo <= k <= hi else 0.0 for k in range(1, MAX_COUNT + 1))


def point_mass(count):
    return tuple(1.0 if k == count else 0.0 for k in range(1, MAX_COUNT + 1))


def _interval(v, name, lo=None, hi=None):
    a, b = v
    if not a <= b:
        raise ConfigError(f"{name} must be a non-empty interval, got {v}")
    if lo is not None and a < lo:
        raise ConfigError(f"{name} lower bound below {lo}")
    if hi is not None and b > hi:
        raise ConfigError(f"{name} upper bound above {hi}")
    return (float(a), float(b))


@dataclass(frozen=True)
class GeneratorConfig:
    count_weights: tuple = field(default_factory=geometric_weights)
    overlap_probability: float = 0.1
    overlap_max_fraction: float = 0.2
    noise_amplitude: float = 0.02
    size_range: tuple = (5.0, 10.0)
    luminance_range: tuple = (0.3, 0.7)
    blur_range: tuple = (0.3, 1.2)
    style: ModalityStyle = STYLES["bf_like"]
    seed: int = 0
    max_aspect: float = 1.3
    deformation_max: float = 0.15
    edge_margin: float = 2.0
    retry_budget: int = 500
    background_path: str | None = None

    def __post_init__(self):
        w = np.asarray(self.count_weights, dtype=float)
        if w.shape != (MAX_COUNT,):
            raise ConfigError(f"count_weights must have {MAX_COUNT} entries (counts 1..{MAX_COUNT})")
        if np.any(w < 0) or w.sum() <= 0:
            raise ConfigError("count_weights must be nonnegative with positive sum")
        object.__setattr__(self, "count_weights", tuple(float(x) for x in w))
        for name in ("overlap_probability", "overlap_max_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if not 0.0 <= self.noise_amplitude < 0.5:
            raise ConfigError("noise_amplitude must be in [0, 0.5)")
        object.__setattr__(self, "size_range", _interval(self.size_range, "size_range", lo=0.5))
        object.__setattr__(
            self, "luminance_range", _interval(self.luminance_range, "luminance_range", 0.0, 1.0)
        )
        object.__setattr__(self, "blur_range", _interval(self.blur_range, "blur_range", lo=0.0))
        if isinstance(self.style, str):
            object.__setattr__(self, "style", get_style(self.style))
        elif isinstance(self.style, dict):
            object.__setattr__(self, "style", ModalityStyle(**self.style))
        if self.max_aspect < 1.0:
            raise ConfigError("max_aspect must be >= 1")
        if not 0.0 <= self.deformation_max < 0.5:
            raise ConfigError("deformation_max must be in [0, 0.5)")
        if self.retry_budget < 1:
            raise ConfigError("retry_budget must be positive")
        if not -1 < int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("size_range", "luminance_range", "blur_range", "count_weights"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class CellSpec:
    center: tuple
    radii: tuple
    orientation: float
    luminance: float
    edge_blur_sigma: float
    deformation: tuple = ()   # (angular order, relative amplitude, phase) triples


@dataclass
class Sample:
    image: np.ndarray
    label: int | None
    origin: str = "synthetic"
    filename: str = ""


def image_rng(seed, index):
    """Independent Philox stream for image ``index`` of a dataset with ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def sample_count(config, rng):
    w = np.asarray(config.count_weights)
    cdf = np.cumsum(w)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    k = min(k, MAX_COUNT - 1)
    while w[k] == 0:  # guard against landing on a zero-weight bin through rounding
        k -= 1
    return k + 1


def _draw_cell(config, rng, size):
    lo, hi = config.size_range
    a = rng.uniform(lo, hi)
    b_lo = max(lo, a / config.max_aspect)
    b_hi = min(hi, a * config.max_aspect)
    b = rng.uniform(b_lo, b_hi)
    m = config.edge_margin
    cx = rng.uniform(m, size - m)
    cy = rng.uniform(m, size - m)
    n_terms = int(rng.integers(2, 5))
    amps = rng.uniform(0.0, 1.0, n_terms)
    amps *= config.deformation_max / max(amps.sum(), 1e-12) * rng.uniform(0.3, 1.0)
    orders = rng.choice(np.arange(2, 6), size=n_terms, replace=False)
    phases = rng.uniform(0, 2 * math.pi, n_terms)
    return CellSpec(
        center=(float(cx), float(cy)),
        radii=(float(a), float(b)),
        orientation=float(rng.uniform(0, math.pi)),
        luminance=float(rng.uniform(*config.luminance_range)),
        edge_blur_sigma=float(rng.uniform(*config.blur_range)),
        deformation=tuple(
            (int(o), float(amp), float(ph)) for o, amp, ph in zip(orders, amps, phases)
        ),
    )


def _extent(cell):
    a, b = cell.radii
    return max(a, b) * (1.0 + sum(abs(t[1]) for t in cell.deformation))


def _signed_distance(cell, y0, x0, h, w):
    """Radial distance outside the deformed boundary for pixel centers of a patch."""
    ys = np.arange(y0, y0 + h) + 0.5
    xs = np.arange(x0, x0 + w) + 0.5
    dy = ys[:, None] - cell.center[1]
    dx = xs[None, :] - cell.center[0]
    c, s = math.cos(cell.orientation), math.sin(cell.orientation)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    a, b = cell.radii
    r = a * b / np.sqrt((b * np.cos(theta)) ** 2 + (a * np.sin(theta)) ** 2)
    mod = np.ones_like(theta)
    for order, amp, phase in cell.deformation:
        mod += amp * np.cos(order * theta + phase)
    return rho - r * mod


def support_mask(cell, size=IMAGE_SIZE):
    """On-canvas pixels covered by the unblurred cell interior: ``(y0, x0, bool patch)``."""
    r = _extent(cell) + 1.0
    x0 = max(int(math.floor(cell.center[0] - r)), 0)
    y0 = max(int(math.floor(cell.center[1] - r)), 0)
    x1 = min(int(math.ceil(cell.center[0] + r)) + 1, size)
    y1 = min(int(math.ceil(cell.center[1] + r)) + 1, size)
    if x1 <= x0 or y1 <= y0:
        return y0, x0, np.zeros((0, 0), bool)
    d = _signed_distance(cell, y0, x0, y1 - y0, x1 - x0)
    return y0, x0, d < 0.5


def _intersection(m1, m2):
    (ya, xa, pa), (yb, xb, pb) = m1, m2
    y0, x0 = max(ya, yb), max(xa, xb)
    y1 = min(ya + pa.shape[0], yb + pb.shape[0])
    x1 = min(xa + pa.shape[1], xb + pb.shape[1])
    if y1 <= y0 or x1 <= x0:
        return 0
    sa = pa[y0 - ya:y1 - ya, x0 - xa:x1 - xa]
    sb = pb[y0 - yb:y1 - yb, x0 - xb:x1 - xb]
    return int(np.count_nonzero(sa & sb))


def place_cells(count, config, rng, size=IMAGE_SIZE):
    """Rejection-sample ``count`` cells; overlaps only inside an overlap event."""
    if not 1 <= count <= MAX_COUNT:
        raise ValueError(f"count must be in 1..{MAX_COUNT}, got {count}")
    occupied = np.zeros((size, size), bool)
    cells, masks, areas = [], [], []
    for _ in range(count):
        allow_overlap = rng.random() < config.overlap_probability
        for _attempt in range(config.retry_budget):
            cell = _draw_cell(config, rng, size)
            mask = support_mask(cell, size)
            y0, x0, patch = mask
            area = int(np.count_nonzero(patch))
            if area == 0:
                continue
            region = occupied[y0:y0 + patch.shape[0], x0:x0 + patch.shape[1]]
            if not np.any(region & patch):
                break
            if allow_overlap and config.overlap_max_fraction > 0:
                ok = True
                for other, other_area in zip(masks, areas):
                    inter = _intersection(mask, other)
                    if inter and inter > config.overlap_max_fraction * min(area, other_area):
                        ok = False
                        break
                if ok:
                    break
        else:
            raise PlacementError(
                f"could not place cell {len(cells) + 1} of {count} within "
                f"{config.retry_budget} attempts; configuration is over-dense"
            )
        occupied[y0:y0 + patch.shape[0], x0:x0 + patch.shape[1]] |= patch
        cells.append(cell)
        masks.append(mask)
        areas.append(area)
    return cells


def _load_background(path, size):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if arr.shape != (size, size):
        raise ConfigError(f"background image {path} must be {size}x{size}, got {arr.shape}")
    return arr


def render_image(cells, config, rng=None, size=IMAGE_SIZE, background=None):
    """Rasterize ``cells``; noise is drawn from ``rng`` when noise_amplitude > 0."""
    style = config.style
    if background is None and config.background_path:
        background = _load_background(config.background_path, size)
    if background is None:
        img = np.full((size, size), style.background_level, dtype=np.float64)
    else:
        img = np.array(background, dtype=np.float64)
    bg = style.background_level
    for cell in cells:
        sigma = cell.edge_blur_sigma
        margin = _extent(cell) + 3.0 * sigma + 3.0 * style.halo_width + 2.0
        x0 = int(math.floor(cell.center[0] - margin))
        y0 = int(math.floor(cell.center[1] - margin))
        x1 = int(math.ceil(cell.center[0] + margin)) + 1
        y1 = int(math.ceil(cell.center[1] + margin)) + 1
        d = _signed_distance(cell, y0, x0, y1 - y0, x1 - x0)
        alpha = np.clip(0.5 - d, 0.0, 1.0)
        if sigma > 0:
            alpha = gaussian_filter(alpha, sigma, mode="constant", truncate=3.0)
        if style.cell_polarity == "brighter_than_bg":
            value = bg + cell.luminance * (1.0 - bg)
        else:
            value = bg - cell.luminance * bg
        cy0, cx0 = max(y0, 0), max(x0, 0)
        cy1, cx1 = min(y1, size), min(x1, size)
        if cy1 <= cy0 or cx1 <= cx0:
            continue
        sl = (slice(cy0 - y0, cy1 - y0), slice(cx0 - x0, cx1 - x0))
        a = alpha[sl]
        view = img[cy0:cy1, cx0:cx1]
        view *= 1.0 - a
        view += a * value
        if style.halo_intensity > 0 and style.halo_width > 0:
            half = style.halo_width / 2.0
            ring = np.exp(-0.5 * ((d[sl] - half) / half) ** 2)
            view += style.halo_intensity * ring * (1.0 - a) * (1.0 - view)
    if config.noise_amplitude > 0:
        if rng is None:
            raise ValueError("rng required when noise_amplitude > 0")
        img += rng.uniform(-config.noise_amplitude, config.noise_amplitude, img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return Sample(image=img.astype(np.float32), label=len(cells), origin="synthetic")


def generate_sample(config, index, size=IMAGE_SIZE):
    rng = image_rng(config.seed, index)
    count = sample_count(config, rng)
    cells = place_cells(count, config, rng, size)
    sample = render_image(cells, config, rng, size)
    sample.filename = image_filename(index)
    return sample


def generate_samples(config, n_images, start=0):
    """In-memory generation of ``n_images`` samples (no files)."""
    return [generate_sample(config, i) for i in range(start, start + n_images)]


def image_filename(index):
    return f"img_{index:06d}.png"


def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_one(args):
    config, index, out_dir = args
    sample = generate_sample(config, index)
    path = os.path.join(out_dir, sample.filename)
    try:
        Image.fromarray(to_uint8(sample.image), mode="L").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc
    return sample.filename, sample.label


def generate_dataset(config, n_images, out_dir, jobs=1, labeled=True):
    """Write ``n_images`` PNGs plus ``labels.csv`` and ``manifest.json`` to ``out_dir``.

    ``labeled=False`` leaves the count column empty (an unlabeled pool); the true
    counts are still recorded in the manifest under ``hidden_counts``.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    tasks = [(config, i, out_dir) for i in range(n_images)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_write_one, tasks, chunksize=max(1, n_images // (4 * jobs))))
    else:
        rows = [_write_one(t) for t in tasks]
    labels_path = os.path.join(out_dir, "labels.csv")
    with open(labels_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "count"])
        for name, label in rows:
            writer.writerow([name, label if labeled else ""])
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "origin": "synthetic",
        "seed": int(config.seed),
        "style": config.style.name,
        "n_images": n_images,
        "labeled": labeled,
        "config": config.to_dict(),
    }
    if not labeled:
        manifest["hidden_counts"] = [label for _, label in rows]
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def with_style(config, style_name, **overrides):
    return replace(config, style=get_style(style_name), **overrides)
