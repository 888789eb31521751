"""Datasets: on-disk loading, synthetic generation, splitting, preprocessing.

On-disk format is 8-bit binary PGM (P5) images plus a ``labels.csv`` mapping
``filename,class``; class names map to indices in sorted order. Pixels are
normalized to [0, 1] by /255 at load time. The training pipeline order is
normalize -> augment -> resize.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import streams
from .errors import DataError, ShapeError

LABELS_HEADER = ["filename", "class"]
MANIFEST_HEADER = ["source_id", "class", "seed"]


@dataclass
class LabeledImage:
    pixels: np.ndarray        # (H, W) float32 in [0, 1]
    class_label: int
    source_id: str


@dataclass
class Dataset:
    items: list[LabeledImage]
    class_count: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.class_count < 2:
            raise DataError("a dataset needs at least 2 classes")
        if not self.class_names:
            self.class_names = [f"class{k}" for k in range(self.class_count)]
        for it in self.items:
            if not 0 <= it.class_label < self.class_count:
                raise DataError(f"label {it.class_label} out of range for {it.source_id}")

    def __len__(self):
        return len(self.items)

    @property
    def per_class_counts(self) -> list[int]:
        counts = [0] * self.class_count
        for it in self.items:
            counts[it.class_label] += 1
        return counts

    def labels(self) -> np.ndarray:
        return np.array([it.class_label for it in self.items], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.items[i] for i in indices], self.class_count,
                       list(self.class_names))


# ---------------------------------------------------------------------------
# PGM (P5) files
# ---------------------------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM into a float array scaled to [0, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if not raw.startswith(b"P5"):
        raise DataError(f"{path} is not a binary PGM (P5) file")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataError(f"{path} has a malformed PGM header") from exc
    if not 0 < maxval <= 255:
        raise DataError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    data = np.frombuffer(raw, dtype=np.uint8, offset=min(pos, len(raw)))
    if data.size < width * height:
        raise DataError(f"{path}: truncated pixel data")
    return (data[: width * height].reshape(height, width).astype(np.float32) / maxval)


def write_pgm(path, image) -> None:
    """Write a [0, 1] float image as 8-bit binary PGM (values clamped first)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"PGM image must be 2-D, got shape {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + q.tobytes())


# ---------------------------------------------------------------------------
# Loading and saving datasets
# ---------------------------------------------------------------------------

def load_dataset(root_path, labels_file="labels.csv") -> Dataset:
    root = Path(root_path)
    labels_path = root / labels_file
    if not labels_path.exists():
        raise DataError(f"labels file not found: {labels_path}")
    rows = []
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != LABELS_HEADER:
            raise DataError(f"{labels_path}: expected header '{','.join(LABELS_HEADER)}'")
        for row in reader:
            if not row:
                continue
            if len(row) != 2 or not row[0].strip() or not row[1].strip():
                raise DataError(f"{labels_path}: malformed row {row!r}")
            rows.append((row[0].strip(), row[1].strip()))
    class_names = sorted({cls for _, cls in rows})
    if len(class_names) < 2:
        raise DataError("labels file must reference at least 2 classes")
    index = {c: k for k, c in enumerate(class_names)}
    items = []
    for fname, cls in rows:
        path = root / fname
        if not path.exists():
            raise DataError(f"image listed in labels file is missing: {path}")
        items.append(LabeledImage(read_pgm(path), index[cls], Path(fname).stem))
    return Dataset(items, len(class_names), class_names)


def save_dataset(ds: Dataset, out_dir, seeds: dict[str, int] | None = None) -> None:
    """Write PGM files plus labels.csv; with per-image seeds also a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABELS_HEADER)
        for it in ds.items:
            write_pgm(out / f"{it.source_id}.pgm", it.pixels)
            writer.writerow([f"{it.source_id}.pgm", ds.class_names[it.class_label]])
    if seeds is not None:
        with open(out / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            for it in ds.items:
                writer.writerow([it.source_id, ds.class_names[it.class_label],
                                 seeds[it.source_id]])


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

BLOB_BASE_SIGMA = 1.8
BLOB_SIGMA_STEP = 0.15
NOISE_LOW = 0.05
NOISE_HIGH = 0.25
BLOB_AMPLITUDE = (0.6, 0.9)


def _render_image(rng, size, n_blobs, sigma):
    img = rng.uniform(NOISE_LOW, NOISE_HIGH, (size, size))
    margin = min(sigma * 2.0 + 1.0, (size - 1) / 2.0 - 0.5)  # tiny canvases
    min_sep = sigma * 4.0
    centers = []
    attempts = 0
    while len(centers) < n_blobs:
        c = rng.uniform(margin, size - 1 - margin, 2)
        attempts += 1
        if all(np.hypot(*(c - o)) >= min_sep for o in centers):
            centers.append(c)
        elif attempts > 200:      # pathological geometry: relax, stay deterministic
            min_sep *= 0.9
            attempts = 0
    yy, xx = np.mgrid[0:size, 0:size]
    for c in centers:
        amp = rng.uniform(*BLOB_AMPLITUDE)
        d2 = (yy - c[0]) ** 2 + (xx - c[1]) ** 2
        img += amp * np.exp(-d2 / (2.0 * sigma * sigma))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_blob_params(class_label: int):
    """(blob count, blob sigma) for a class: count k+1, width grows with k."""
    return class_label + 1, BLOB_BASE_SIGMA + BLOB_SIGMA_STEP * class_label


def generate_synthetic_dataset(class_count, per_class_counts, image_size, seed) -> Dataset:
    """Deterministic blob-count dataset: class k has k+1 blobs of class-specific
    width over low uniform noise. A stand-in for scarce, visually similar
    medical classes; not a model of them."""
    if class_count < 2 or len(per_class_counts) != class_count:
        raise DataError("need one positive count per class, at least 2 classes")
    if any(c < 1 for c in per_class_counts):
        raise DataError("per-class counts must be >= 1")
    items = []
    for k in range(class_count):
        n_blobs, sigma = synthetic_blob_params(k)
        for i in range(per_class_counts[k]):
            rng = streams.stream(seed, streams.SYNTH, k, i)
            pixels = _render_image(rng, image_size, n_blobs, sigma)
            items.append(LabeledImage(pixels, k, f"c{k}_{i:05d}"))
    return Dataset(items, class_count)


def synthetic_image_seeds(ds: Dataset, seed: int) -> dict[str, int]:
    """Per-image derived seeds recorded in the synthetic manifest."""
    out = {}
    for it in ds.items:
        k, i = it.source_id[1:].split("_")
        out[it.source_id] = streams.derive_seed(seed, streams.SYNTH, int(k), int(i))
    return out


def scaled_counts(base_counts, scale) -> list[int]:
    """Round half up, at least 1 per class."""
    return [max(1, int(np.floor(c * scale + 0.5))) for c in base_counts]


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    test_per_class: int = 100
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise DataError("validation_fraction must lie in (0,1)")
        if self.test_per_class < 1:
            raise DataError("test_per_class must be >= 1")


def split_dataset(ds: Dataset, spec: SplitSpec):
    """(train, validation, test): a fixed per-class test draw, then an 80/20
    shuffle of the pooled remainder. Disjoint and covering."""
    by_class = [[] for _ in range(ds.class_count)]
    for idx, it in enumerate(ds.items):
        by_class[it.class_label].append(idx)
    test_idx, rest = [], []
    for k, members in enumerate(by_class):
        if len(members) < spec.test_per_class:
            raise DataError(
                f"class {k} has {len(members)} samples, fewer than "
                f"test_per_class={spec.test_per_class}"
            )
        order = streams.stream(spec.seed, streams.SPLIT, "test", k).permutation(len(members))
        chosen = [members[i] for i in order]
        test_idx.extend(chosen[:spec.test_per_class])
        rest.extend(chosen[spec.test_per_class:])
    order = streams.stream(spec.seed, streams.SPLIT, "trainval").permutation(len(rest))
    rest = [rest[i] for i in order]
    n_val = int(round(spec.validation_fraction * len(rest)))
    val_idx = rest[:n_val]
    train_idx = rest[n_val:]
    return ds.subset(sorted(train_idx)), ds.subset(sorted(val_idx)), ds.subset(sorted(test_idx))


def stratified_fraction(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Per-class random subsample keeping round(fraction * count) per class."""
    if not 0.0 < fraction <= 1.0:
        raise DataError("fraction must lie in (0,1]")
    if fraction == 1.0:
        return ds
    keep = []
    by_class = [[] for _ in range(ds.class_count)]
    for idx, it in enumerate(ds.items):
        by_class[it.class_label].append(idx)
    for k, members in enumerate(by_class):
        n = max(1, int(round(fraction * len(members))))
        order = streams.stream(seed, streams.FRACTION, k).permutation(len(members))
        keep.extend(members[i] for i in order[:n])
    return ds.subset(sorted(keep))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def resize_bilinear(image, target: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center alignment and edge clamping."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    if target < 1:
        raise ShapeError("target size must be >= 1")
    if (h, w) == (target, target):
        return img.copy()

    def axis_coords(n_src, n_dst):
        src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        lo = np.floor(src).astype(int)
        frac = src - lo
        lo0 = np.clip(lo, 0, n_src - 1)
        lo1 = np.clip(lo + 1, 0, n_src - 1)
        return lo0, lo1, frac.astype(np.float32)

    r0, r1, fr = axis_coords(h, target)
    c0, c1, fc = axis_coords(w, target)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def rotate_bilinear(image, degrees: float) -> np.ndarray:
    """Rotate about the image center, bilinear sampling, zero fill outside."""
    img = np.asarray(image, dtype=np.float32)
    if degrees == 0.0:
        return img.copy()
    h, w = img.shape
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    # inverse map: rotate destination coordinates by -theta
    sy = cos_t * dy + sin_t * dx + cy
    sx = -sin_t * dy + cos_t * dx + cx
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = (sy - y0).astype(np.float32)
    fx = (sx - x0).astype(np.float32)

    def sample(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside, vals, 0.0).astype(np.float32)

    out = (sample(y0, x0) * (1 - fy) * (1 - fx)
           + sample(y0, x0 + 1) * (1 - fy) * fx
           + sample(y0 + 1, x0) * fy * (1 - fx)
           + sample(y0 + 1, x0 + 1) * fy * fx)
    return out


@dataclass(frozen=True)
class AugmentConfig:
    rotation_range: float = 10.0       # degrees, symmetric
    flip_probability: float = 0.5
    target_size: int = 32
    rotation_enabled: bool = True

    def __post_init__(self):
        if self.rotation_range < 0 or not 0.0 <= self.flip_probability <= 1.0:
            raise DataError("invalid augmentation configuration")


def augment_image(image, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random rotation then random horizontal flip.

    Both draws are always consumed so streams stay aligned across
    configurations that disable one of them.
    """
    angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    flip = rng.random() < cfg.flip_probability
    out = rotate_bilinear(image, angle if cfg.rotation_enabled else 0.0)
    if flip and cfg.flip_probability > 0:
        out = out[:, ::-1].copy()
    return out


def prepare_training_image(image, cfg: AugmentConfig, rng) -> np.ndarray:
    return resize_bilinear(augment_image(image, cfg, rng), cfg.target_size)


def prepare_eval_image(image, target: int) -> np.ndarray:
    return resize_bilinear(image, target)


# ---------------------------------------------------------------------------
# Minibatch sampling
# ---------------------------------------------------------------------------

def ros_minibatch(per_class_indices, m, rng) -> np.ndarray:
    """Class-balanced slots: each slot draws a class uniformly, then a sample
    from that class with replacement."""
    if any(len(members) == 0 for members in per_class_indices):
        raise DataError("random over-sampling requires every class to be non-empty")
    k = len(per_class_indices)
    out = np.empty(m, dtype=np.int64)
    for slot in range(m):
        cls = rng.integers(0, k)
        members = per_class_indices[cls]
        out[slot] = members[rng.integers(0, len(members))]
    return out


class MinibatchSampler:
    """Per-epoch batch index streams over a training dataset.

    ``plain`` shuffles the pool and walks it without replacement (the last
    batch may be short); ``ros`` emits the same number of batches, each drawn
    class-balanced with replacement. The pool is the dataset plus any extra
    indices (hard-example duplicates) registered for the epoch.
    """

    def __init__(self, labels: np.ndarray, class_count: int, m: int, mode: str = "plain"):
        if mode not in ("plain", "ros"):
            raise DataError(f"unknown sampling mode {mode!r}")
        if m < 1:
            raise DataError("minibatch size must be >= 1")
        self.labels = np.asarray(labels)
        self.class_count = class_count
        self.m = m
        self.mode = mode
        self.per_class = [np.flatnonzero(self.labels == k) for k in range(class_count)]

    def epoch_batches(self, rng: np.random.Generator, extra_pool=()):
        pool = np.concatenate([np.arange(len(self.labels)), np.asarray(extra_pool, dtype=np.int64)]) \
            if len(extra_pool) else np.arange(len(self.labels))
        n_batches = int(np.ceil(len(pool) / self.m))
        if self.mode == "plain":
            order = pool[rng.permutation(len(pool))]
            for b in range(n_batches):
                yield order[b * self.m:(b + 1) * self.m]
        else:
            for _ in range(n_batches):
                yield ros_minibatch(self.per_class, self.m, rng)
