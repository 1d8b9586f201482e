"""Synthetic vessel-like fixtures for tests and desk-scale training.

Samples imitate fundus crops: thin dark curvilinear structures with
occasional branches on a bright, slowly varying background, plus mild
sensor noise, inside a circular field of view.
"""

from __future__ import annotations

import os

import numpy as np

from .data import SegmentationSample, _write_netpbm, resize


def _stamp_disk(mask, y, x, radius):
    h, w = mask.shape
    y0, y1 = max(0, int(y - radius - 1)), min(h, int(y + radius + 2))
    x0, x1 = max(0, int(x - radius - 1)), min(w, int(x + radius + 2))
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask[y0:y1, x0:x1] |= (yy - y) ** 2 + (xx - x) ** 2 <= radius**2


def _trace_vessel(mask, rng, start, heading, length, radius):
    y, x = start
    for _ in range(length):
        _stamp_disk(mask, y, x, radius)
        heading += rng.normal(0.0, 0.18)
        y += np.sin(heading)
        x += np.cos(heading)
        if not (-2 <= y < mask.shape[0] + 2 and -2 <= x < mask.shape[1] + 2):
            break
    return y, x, heading


def make_vessel_sample(size=48, rng=None, sample_id="synth", dataset="synthetic",
                       n_vessels=3, with_fov=True) -> SegmentationSample:
    """One vessel-like grayscale sample with its binary ground truth."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_vessels):
        edge = rng.integers(0, 4)
        pos = float(rng.uniform(0.1, 0.9)) * size
        start, heading = {
            0: ((0.0, pos), np.pi / 2),
            1: ((size - 1.0, pos), -np.pi / 2),
            2: ((pos, 0.0), 0.0),
            3: ((pos, size - 1.0), np.pi),
        }[int(edge)]
        heading += rng.normal(0.0, 0.4)
        radius = float(rng.uniform(0.6, 1.4))
        end_y, end_x, _ = _trace_vessel(mask, rng, start, heading, int(size * 1.3), radius)
        if rng.random() < 0.6:
            # branch from the midpoint with a thinner radius
            midpoint = ((start[0] + end_y) / 2, (start[1] + end_x) / 2)
            _trace_vessel(mask, rng, midpoint, float(rng.uniform(0, 2 * np.pi)),
                          int(size * 0.5), max(radius * 0.6, 0.5))

    coarse = rng.uniform(0.65, 0.85, size=(4, 4))
    background = resize(coarse, size, size, "bilinear")
    image = background - 0.35 * mask
    image += rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    fov = None
    if with_fov:
        yy, xx = np.mgrid[0:size, 0:size]
        c = (size - 1) / 2.0
        fov = ((yy - c) ** 2 + (xx - c) ** 2 <= (0.52 * size) ** 2).astype(np.uint8)
    return SegmentationSample(image, mask.astype(np.uint8), fov, dataset, sample_id)


def make_vessel_set(count, size=48, seed=0, dataset="synthetic"):
    """Deterministic list of samples with zero-padded ids."""
    rng = np.random.default_rng(seed)
    return [
        make_vessel_sample(size, rng, sample_id=f"{i:02d}", dataset=dataset)
        for i in range(count)
    ]


def write_fixture_dataset(root, count=4, size=64, seed=7):
    """Write a tiny PGM dataset tree (images/, masks/, fov/) for tests."""
    for sub in ("images", "masks", "fov"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    samples = make_vessel_set(count, size, seed, dataset="fixture")
    for s in samples:
        _write_netpbm(os.path.join(root, "images", f"{s.sample_id}.pgm"), s.image)
        _write_netpbm(os.path.join(root, "masks", f"{s.sample_id}.pgm"), s.mask.astype(float))
        _write_netpbm(os.path.join(root, "fov", f"{s.sample_id}.pgm"), s.fov.astype(float))
    return samples
