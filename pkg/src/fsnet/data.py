"""Dataset ingestion, preprocessing, augmentation, and split conventions.

Images arrive as PNG or binary PGM/PPM (8- or 16-bit) and are converted
to grayscale floats in [0, 1] at ingest.  Masks binarize at 50% of the
file's maximum so {0, 1} and {0, 255} encodings both work.  A dataset
directory looks like::

    <dir>/images/       one file per sample
    <dir>/masks/        same stems    (or masks_1st/ + masks_2nd/)
    <dir>/fov/          optional field-of-view masks, same stems

When both ``masks_1st`` and ``masks_2nd`` exist, the first-expert folder
is used.  Split sizes follow the published conventions per dataset tag
(see ``DATASETS``); the validation set is carved deterministically from
the tail of the training ids.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .ops import _interp_matrix

IMAGE_EXTENSIONS = (".png", ".pgm", ".ppm")


@dataclass
class SegmentationSample:
    """Grayscale image, binary mask, optional field of view, provenance."""

    image: np.ndarray
    mask: np.ndarray
    fov: np.ndarray | None
    dataset: str
    sample_id: str


@dataclass
class SplitPlan:
    train: list
    val: list
    test: list
    fold: int | None = None

    def all_ids(self):
        return list(self.train) + list(self.val) + list(self.test)


@dataclass(frozen=True)
class DatasetSpec:
    size: int
    resolution: tuple  # (width, height) as published
    train_count: int
    test_count: int
    kfold: int | None = None
    resize_to: tuple | None = None  # square training resolution at full scale


DATASETS = {
    "drive": DatasetSpec(40, (565, 584), 20, 20, resize_to=(565, 565)),
    "chase": DatasetSpec(28, (990, 960), 20, 8, resize_to=(960, 960)),
    "stare": DatasetSpec(20, (700, 605), 19, 1, kfold=20, resize_to=(605, 605)),
    "dca1": DatasetSpec(134, (300, 300), 104, 30, resize_to=(300, 300)),
}

_ALIASES = {"chase-db1": "chase", "chase_db1": "chase", "chasedb1": "chase"}


def canonical_tag(tag):
    tag = tag.strip().lower()
    return _ALIASES.get(tag, tag)


# ---------------------------------------------------------------------------
# image files


def _read_netpbm(path):
    with open(path, "rb") as f:
        raw = f.read()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm magic {magic!r} (binary P5/P6 only)")
    # header tokens: magic, width, height, maxval; # comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    arr = data.reshape((height, width, channels) if channels == 3 else (height, width))
    return arr.astype(np.float64) / maxval


def _write_netpbm(path, arr, bits=8):
    arr = np.asarray(arr, dtype=np.float64)
    maxval = 65535 if bits == 16 else 255
    quant = np.clip(np.rint(arr * maxval), 0, maxval)
    channels = arr.shape[2] if arr.ndim == 3 else 1
    magic = b"P6" if channels == 3 else b"P5"
    header = magic + f"\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    payload = quant.astype(">u2" if bits == 16 else "u1").tobytes()
    with open(path, "wb") as f:
        f.write(header + payload)


def read_image(path):
    """Load PNG/PGM/PPM as float [0, 1]; (H, W) gray or (H, W, 3) color."""
    path = str(path)
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm"):
        return _read_netpbm(path)
    img = Image.open(path)
    if img.mode in ("I;16", "I;16B", "I;16L"):
        return np.asarray(img, dtype=np.float64) / 65535.0
    if img.mode == "I":
        arr = np.asarray(img, dtype=np.float64)
        return arr / 65535.0 if arr.max() > 255 else arr / 255.0
    if img.mode == "L":
        return np.asarray(img, dtype=np.float64) / 255.0
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, arr, bits=8):
    """Save a float [0, 1] array as 8- or 16-bit grayscale (or 8-bit RGB)."""
    path = str(path)
    ext = os.path.splitext(path)[1].lower()
    arr = np.asarray(arr, dtype=np.float64)
    if ext in (".pgm", ".ppm"):
        _write_netpbm(path, arr, bits)
        return
    if arr.ndim == 3:
        Image.fromarray(np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8), "RGB").save(path)
    elif bits == 16:
        quant = np.clip(np.rint(arr * 65535), 0, 65535).astype(np.uint16)
        Image.fromarray(quant).save(path)  # uint16 maps to mode I;16
    else:
        quant = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
        Image.fromarray(quant, "L").save(path)


# ---------------------------------------------------------------------------
# preprocessing


def to_grayscale(image):
    """Luminance-weighted grayscale: 0.299 R + 0.587 G + 0.114 B."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {image.shape}")


def resize(image, out_h, out_w, mode="bilinear"):
    """Resample to (out_h, out_w); masks should use mode="nearest"."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    if mode == "bilinear":
        mh = _interp_matrix(h, out_h, np.float64)
        mw = _interp_matrix(w, out_w, np.float64)
        out = np.tensordot(mh, image, axes=([1], [0]))
        out = np.moveaxis(np.tensordot(mw, out, axes=([1], [1])), 0, 1)
        return out
    if mode == "nearest":
        ri = np.clip(((np.arange(out_h) + 0.5) * h / out_h).astype(int), 0, h - 1)
        ci = np.clip(((np.arange(out_w) + 0.5) * w / out_w).astype(int), 0, w - 1)
        return image[np.ix_(ri, ci)]
    raise ValueError(f"unknown resize mode {mode!r}")


def _quantize(image, levels=256):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * (levels - 1)), 0, levels - 1).astype(int)


def _equalize_mapping(hist, levels=256):
    """CDF remap placing the lowest occupied level at 0, in [0, 1]."""
    cdf = np.cumsum(hist).astype(np.float64)
    total = cdf[-1]
    if total == 0:
        return np.linspace(0.0, 1.0, levels)
    cdf /= total
    nonzero = np.flatnonzero(hist)
    cdf_min = cdf[nonzero[0]]
    if cdf_min >= 1.0:
        return None  # single occupied level, mapping degenerate
    return np.clip((cdf - cdf_min) / (1.0 - cdf_min), 0.0, 1.0)


def hist_equalize(image):
    """Global histogram equalization over 256 gray levels."""
    q = _quantize(image)
    hist = np.bincount(q.ravel(), minlength=256)
    mapping = _equalize_mapping(hist)
    if mapping is None:
        return np.asarray(image, dtype=np.float64).copy()
    return mapping[q]


def gamma_correct(image, gamma):
    """Pointwise power law x -> x**gamma on [0, 1]."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) ** gamma


def clahe(image, clip_limit=2.0, tile_grid=(8, 8)):
    """Contrast-limited adaptive histogram equalization.

    Tile histograms are clipped at ``clip_limit`` times the mean bin
    height, the excess is redistributed uniformly, and per-pixel output
    is bilinearly interpolated between the four surrounding tile
    mappings.  With one tile and an effectively infinite clip limit this
    reduces to :func:`hist_equalize`.
    """
    if clip_limit < 1:
        raise ValueError(f"clip_limit must be >= 1, got {clip_limit}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"clahe expects a grayscale image, got shape {image.shape}")
    h, w = image.shape
    ty, tx = tile_grid
    ty, tx = min(ty, h), min(tx, w)
    q = _quantize(image)

    y_edges = np.linspace(0, h, ty + 1).astype(int)
    x_edges = np.linspace(0, w, tx + 1).astype(int)
    mappings = np.zeros((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            tile = q[y_edges[i] : y_edges[i + 1], x_edges[j] : x_edges[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            clip_count = clip_limit * tile.size / 256.0
            excess = np.maximum(hist - clip_count, 0.0).sum()
            hist = np.minimum(hist, clip_count) + excess / 256.0
            mapping = _equalize_mapping(hist)
            if mapping is None:
                level = tile.flat[0] / 255.0 if tile.size else 0.0
                mapping = np.full(256, level)
            mappings[i, j] = mapping

    centers_y = (y_edges[:-1] + y_edges[1:]) / 2.0
    centers_x = (x_edges[:-1] + x_edges[1:]) / 2.0
    yy = np.arange(h, dtype=np.float64)
    xx = np.arange(w, dtype=np.float64)

    def _axis_weights(coords, centers):
        if len(centers) == 1:
            return np.zeros(len(coords), int), np.zeros(len(coords), int), np.ones(len(coords))
        hi = np.clip(np.searchsorted(centers, coords), 1, len(centers) - 1)
        lo = hi - 1
        span = centers[hi] - centers[lo]
        t = np.clip((coords - centers[lo]) / span, 0.0, 1.0)
        return lo, hi, 1.0 - t

    ylo, yhi, wy = _axis_weights(yy, centers_y)
    xlo, xhi, wx = _axis_weights(xx, centers_x)
    wy = wy[:, None]
    wx = wx[None, :]
    rows_lo, rows_hi = ylo[:, None], yhi[:, None]
    cols_lo, cols_hi = xlo[None, :], xhi[None, :]
    out = (
        wy * wx * mappings[rows_lo, cols_lo, q]
        + wy * (1 - wx) * mappings[rows_lo, cols_hi, q]
        + (1 - wy) * wx * mappings[rows_hi, cols_lo, q]
        + (1 - wy) * (1 - wx) * mappings[rows_hi, cols_hi, q]
    )
    return out


# ---------------------------------------------------------------------------
# geometric warps and augmentation

AUGMENT_OPS = ("rotation", "flip", "optical_distortion", "gamma", "hist_eq")


def _sample_bilinear(arr, src_y, src_x):
    h, w = arr.shape
    y0 = np.clip(np.floor(src_y).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(src_x).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(src_y - y0, 0.0, 1.0)
    fx = np.clip(src_x - x0, 0.0, 1.0)
    top = arr[y0, x0] * (1 - fx) + arr[y0, x1] * fx
    bot = arr[y1, x0] * (1 - fx) + arr[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _sample_nearest(arr, src_y, src_x):
    h, w = arr.shape
    yi = np.clip(np.rint(src_y).astype(int), 0, h - 1)
    xi = np.clip(np.rint(src_x).astype(int), 0, w - 1)
    return arr[yi, xi]


def warp(arr, src_y, src_x, mode="bilinear"):
    """Inverse-mapped resampling: output[i, j] = arr[src_y[i,j], src_x[i,j]]."""
    if mode == "bilinear":
        return _sample_bilinear(np.asarray(arr, dtype=np.float64), src_y, src_x)
    if mode == "nearest":
        return _sample_nearest(np.asarray(arr), src_y, src_x)
    raise ValueError(f"unknown warp mode {mode!r}")


def rotation_map(h, w, angle_deg):
    """Inverse coordinate map for a rotation about the image center."""
    theta = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    dy, dx = yy - cy, xx - cx
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_y = cy + cos_t * dy - sin_t * dx
    src_x = cx + sin_t * dy + cos_t * dx
    return src_y, src_x


def distortion_map(h, w, k):
    """Radial barrel (k > 0) or pincushion (k < 0) inverse map."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    dy, dx = yy - cy, xx - cx
    rmax = np.sqrt(cy * cy + cx * cx)
    r2 = (dy * dy + dx * dx) / (rmax * rmax)
    factor = 1.0 + k * r2
    return cy + dy * factor, cx + dx * factor


def _apply_geometric(sample, src_y, src_x):
    image = warp(sample.image, src_y, src_x, "bilinear")
    mask = warp(sample.mask, src_y, src_x, "nearest")
    fov = warp(sample.fov, src_y, src_x, "nearest") if sample.fov is not None else None
    return replace(sample, image=image, mask=mask, fov=fov)


def augment(sample, ops, rng, rotation_mode="continuous"):
    """Random augmentation; geometric ops hit image, mask, and fov alike.

    ``ops`` is any subset of ``AUGMENT_OPS``.  Masks are resampled with
    nearest interpolation so they stay strictly binary.  All randomness
    comes from ``rng``, so a fixed seed fixes the output.
    """
    unknown = set(ops) - set(AUGMENT_OPS)
    if unknown:
        raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
    out = sample
    h, w = np.asarray(sample.image).shape[:2]
    if "rotation" in ops:
        if rotation_mode == "right_angle":
            k = int(rng.integers(0, 4))
            if k:
                out = replace(
                    out,
                    image=np.rot90(out.image, k).copy(),
                    mask=np.rot90(out.mask, k).copy(),
                    fov=np.rot90(out.fov, k).copy() if out.fov is not None else None,
                )
        else:
            angle = float(rng.uniform(-15.0, 15.0))
            out = _apply_geometric(out, *rotation_map(h, w, angle))
    if "flip" in ops:
        flip_h = bool(rng.random() < 0.5)
        flip_v = bool(rng.random() < 0.5)
        image, mask, fov = out.image, out.mask, out.fov
        if flip_h:
            image, mask = image[:, ::-1], mask[:, ::-1]
            fov = fov[:, ::-1] if fov is not None else None
        if flip_v:
            image, mask = image[::-1], mask[::-1]
            fov = fov[::-1] if fov is not None else None
        out = replace(out, image=np.ascontiguousarray(image),
                      mask=np.ascontiguousarray(mask),
                      fov=np.ascontiguousarray(fov) if fov is not None else None)
    if "optical_distortion" in ops:
        k = float(rng.uniform(-0.2, 0.2))
        out = _apply_geometric(out, *distortion_map(h, w, k))
    if "gamma" in ops:
        out = replace(out, image=gamma_correct(out.image, float(rng.uniform(0.7, 1.4))))
    if "hist_eq" in ops and rng.random() < 0.5:
        out = replace(out, image=hist_equalize(out.image))
    return out


# ---------------------------------------------------------------------------
# datasets and splits


def _binarize_mask(arr):
    arr = np.asarray(arr, dtype=np.float64)
    peak = arr.max()
    if peak <= 0:
        return np.zeros(arr.shape, dtype=np.uint8)
    return (arr >= 0.5 * peak).astype(np.uint8)


def _index_dir(directory):
    files = {}
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in IMAGE_EXTENSIONS:
            files[stem] = os.path.join(directory, name)
    return files


def _mask_dir(root):
    first = os.path.join(root, "masks_1st")
    if os.path.isdir(first):
        return first  # first-expert annotations win when two sets exist
    plain = os.path.join(root, "masks")
    if os.path.isdir(plain):
        return plain
    raise FileNotFoundError(f"no masks/ or masks_1st/ directory under {root}")


def dataset_dir(data_root, tag):
    """Resolve the dataset directory: either the root itself or root/<tag>."""
    if os.path.isdir(os.path.join(data_root, "images")):
        return data_root
    candidate = os.path.join(data_root, canonical_tag(tag))
    if os.path.isdir(os.path.join(candidate, "images")):
        return candidate
    raise FileNotFoundError(f"no images/ directory under {data_root} or {candidate}")


def load_dataset(root, tag):
    """Load every sample of a dataset directory, sorted by sample id."""
    tag = canonical_tag(tag)
    images = _index_dir(os.path.join(root, "images"))
    if not images:
        raise FileNotFoundError(f"no images found under {root}/images")
    masks = _index_dir(_mask_dir(root))
    fov_dir = os.path.join(root, "fov")
    fovs = _index_dir(fov_dir) if os.path.isdir(fov_dir) else {}

    spec = DATASETS.get(tag)
    samples = []
    for stem, image_path in images.items():
        if stem not in masks:
            raise FileNotFoundError(f"missing mask for sample {stem!r} under {root}")
        image = to_grayscale(read_image(image_path))
        if spec is not None:
            expected = {spec.resolution, spec.resolution[::-1]}
            if (image.shape[1], image.shape[0]) not in expected:
                warnings.warn(
                    f"{tag}/{stem}: resolution {image.shape[1]}x{image.shape[0]} differs "
                    f"from published {spec.resolution[0]}x{spec.resolution[1]}",
                    stacklevel=2,
                )
        mask = _binarize_mask(read_image(masks[stem]))
        if mask.shape != image.shape:
            raise ValueError(f"{tag}/{stem}: mask shape {mask.shape} != image {image.shape}")
        fov = None
        if stem in fovs:
            fov = _binarize_mask(read_image(fovs[stem]))
            if fov.shape != image.shape:
                raise ValueError(f"{tag}/{stem}: fov shape {fov.shape} != image {image.shape}")
        samples.append(SegmentationSample(image, mask, fov, tag, stem))
    return samples


def _carve_validation(train_ids, val_fraction):
    if val_fraction <= 0 or len(train_ids) < 2:
        return list(train_ids), []
    n_val = int(round(val_fraction * len(train_ids)))
    n_val = min(max(n_val, 1), len(train_ids) - 1)
    return list(train_ids[:-n_val]), list(train_ids[-n_val:])


def make_splits(tag, ids, k=None, fold=None, val_fraction=0.1) -> SplitPlan:
    """Deterministic train/val/test ids following the dataset convention.

    DRIVE: 20/20, CHASE-DB1: 20/8, DCA1: 104/30, all by sorted id order
    with validation carved from the tail of the training ids.  STARE
    uses k-fold cross-validation (k = 20): ``fold`` selects which single
    image is held out.  Id lists of non-standard length split
    proportionally.
    """
    tag = canonical_tag(tag)
    ids = sorted(ids)
    if not ids:
        raise ValueError("make_splits: empty id list")
    spec = DATASETS.get(tag)

    if spec is not None and spec.kfold is not None:
        k = k or spec.kfold
    if k is not None:
        if k < 2 or k > len(ids):
            raise ValueError(f"k={k} invalid for {len(ids)} ids")
        fold = 0 if fold is None else fold
        if not 0 <= fold < k:
            raise ValueError(f"fold {fold} outside [0, {k})")
        # contiguous fold blocks partition the id list
        edges = np.linspace(0, len(ids), k + 1).astype(int)
        test = ids[edges[fold] : edges[fold + 1]]
        train_pool = ids[: edges[fold]] + ids[edges[fold + 1] :]
        train, val = _carve_validation(train_pool, val_fraction)
        return SplitPlan(train=train, val=val, test=test, fold=fold)

    if spec is not None and len(ids) == spec.size:
        n_train = spec.train_count
    elif spec is not None:
        n_train = int(round(len(ids) * spec.train_count / spec.size))
        n_train = min(max(n_train, 1), len(ids) - 1) if len(ids) > 1 else len(ids)
    else:
        n_train = max(1, len(ids) - max(1, len(ids) // 2))
    train, val = _carve_validation(ids[:n_train], val_fraction)
    return SplitPlan(train=train, val=val, test=ids[n_train:], fold=None)


def select_samples(samples, ids):
    by_id = {s.sample_id: s for s in samples}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise KeyError(f"samples not found: {missing}")
    return [by_id[i] for i in ids]
