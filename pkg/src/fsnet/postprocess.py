"""Sigmoid smoothing and ratio-guided adaptive binarization.

The detector head emits raw logits.  :func:`smooth` maps them through a
sigmoid so near-negative pixels shift toward the positive side, then
:func:`adaptive_threshold` scans thresholds until the resulting
background-to-foreground pixel ratio matches a target ratio estimated
from training masks (:func:`estimate_optimum_ratio`).  The scan walks a
fixed grid from ``theta_initial`` upward; a pixel equal to the threshold
counts as foreground (inclusive comparison).  Because the printed form
of the scan never terminates when the tolerance is unreachable, the
search caps at ``theta_max`` and falls back to the grid point whose
ratio deviated least.

:func:`eq2_oracle` is the label-aware ideal the ratio heuristic
approximates: the grid threshold minimizing total pixel disagreement
with the ground truth.  It needs true labels, so it is test-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import stable_sigmoid


@dataclass
class ProbabilityMap:
    """Per-pixel foreground probability with provenance."""

    values: np.ndarray
    model_id: str = ""
    sample_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"probability map must be 2-d, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("probability map contains non-finite values")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("probability map values must lie in [0, 1]")


def _as_values(pmap):
    return pmap.values if isinstance(pmap, ProbabilityMap) else np.asarray(pmap, dtype=np.float64)


@dataclass
class ThresholdSearchConfig:
    """Grid and stopping rule for the adaptive threshold scan."""

    optimum: float
    theta_initial: float = 0.05
    delta_theta: float = 0.005
    epsilon: float | None = None
    theta_max: float = 0.99

    def __post_init__(self):
        if self.epsilon is None:
            # relative tolerance: 5% of the target ratio
            self.epsilon = 0.05 * self.optimum
        if self.optimum <= 0:
            raise ValueError(f"optimum ratio must be positive, got {self.optimum}")
        if not 0.0 <= self.theta_initial < self.theta_max <= 1.0:
            raise ValueError(
                f"need 0 <= theta_initial < theta_max <= 1, got "
                f"{self.theta_initial}, {self.theta_max}"
            )
        if self.delta_theta <= 0:
            raise ValueError(f"delta_theta must be positive, got {self.delta_theta}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    def grid(self):
        count = int(np.floor((self.theta_max - self.theta_initial) / self.delta_theta)) + 1
        return self.theta_initial + self.delta_theta * np.arange(count)


@dataclass
class ThresholdResult:
    theta: float
    mask: np.ndarray
    ratio: float
    iterations: int
    converged: bool


def smooth(logits) -> ProbabilityMap:
    """Elementwise sigmoid of a 2-d logit map; order-preserving."""
    arr = logits.data if hasattr(logits, "data") else np.asarray(logits)
    return ProbabilityMap(stable_sigmoid(np.asarray(arr, dtype=np.float64)))


def estimate_optimum_ratio(masks, fovs=None, mode="pooled") -> float:
    """Background-to-foreground pixel ratio over a set of binary masks.

    "pooled" divides total background by total foreground across all
    masks; "per_mask" averages the per-mask ratios.  When field-of-view
    masks are given, only pixels inside them are counted.
    """
    if fovs is None:
        fovs = [None] * len(masks)
    if len(masks) == 0:
        raise ValueError("estimate_optimum_ratio: no masks given")
    if mode not in ("pooled", "per_mask"):
        raise ValueError(f"unknown mode {mode!r}")
    fg_total = 0
    bg_total = 0
    ratios = []
    for mask, fov in zip(masks, fovs):
        mask = np.asarray(mask) > 0
        if fov is not None:
            inside = np.asarray(fov) > 0
            fg = int(np.count_nonzero(mask & inside))
            bg = int(np.count_nonzero(~mask & inside))
        else:
            fg = int(np.count_nonzero(mask))
            bg = mask.size - fg
        fg_total += fg
        bg_total += bg
        if fg > 0:
            ratios.append(bg / fg)
    if fg_total == 0:
        raise ValueError("estimate_optimum_ratio: no foreground pixels in any mask")
    if mode == "per_mask":
        return float(np.mean(ratios))
    return bg_total / fg_total


def fixed_threshold(pmap, theta):
    """Binary mask by inclusive comparison: pixel >= theta is foreground."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must be in [0, 1], got {theta}")
    return (_as_values(pmap) >= theta).astype(np.uint8)


def adaptive_threshold(pmap, cfg: ThresholdSearchConfig) -> ThresholdResult:
    """Scan the threshold grid for a background/foreground ratio match.

    Returns at the first grid point whose ratio is within ``epsilon`` of
    ``optimum``.  Grid points that leave zero foreground have infinite
    deviation and are skipped.  If the scan exhausts the grid, the point
    with the smallest deviation wins (first such point on ties).
    """
    values = _as_values(pmap)
    total = values.size
    best_theta = None
    best_dev = np.inf
    iterations = 0
    for theta in cfg.grid():
        iterations += 1
        foreground = int(np.count_nonzero(values >= theta))
        if foreground == 0:
            continue
        ratio = (total - foreground) / foreground
        dev = abs(cfg.optimum - ratio)
        if dev <= cfg.epsilon:
            return ThresholdResult(
                theta=float(theta),
                mask=(values >= theta).astype(np.uint8),
                ratio=ratio,
                iterations=iterations,
                converged=True,
            )
        if dev < best_dev:
            best_dev = dev
            best_theta = float(theta)
    if best_theta is None:
        # every grid point emptied the foreground; lowest threshold is least wrong
        best_theta = float(cfg.theta_initial)
    foreground = int(np.count_nonzero(values >= best_theta))
    ratio = (total - foreground) / foreground if foreground else np.inf
    return ThresholdResult(
        theta=best_theta,
        mask=(values >= best_theta).astype(np.uint8),
        ratio=ratio,
        iterations=iterations,
        converged=False,
    )


def eq2_objective(pmap, truth, theta) -> int:
    """Total pixel disagreement between the thresholded map and the truth."""
    values = _as_values(pmap)
    truth = np.asarray(truth) > 0
    if truth.shape != values.shape:
        raise ValueError(f"truth shape {truth.shape} != map shape {values.shape}")
    return int(np.count_nonzero((values >= theta) != truth))


def eq2_oracle(pmap, truth, theta_grid) -> float:
    """Grid threshold minimizing pixel disagreement with the ground truth.

    Ties go to the smallest grid value.  Label-aware, hence test-only:
    this is the ideal that the ratio-matching scan approximates.
    """
    values = _as_values(pmap)
    truth = np.asarray(truth) > 0
    if truth.shape != values.shape:
        raise ValueError(f"truth shape {truth.shape} != map shape {values.shape}")
    best_theta = None
    best_obj = None
    for theta in np.asarray(theta_grid, dtype=np.float64):
        obj = int(np.count_nonzero((values >= theta) != truth))
        if best_obj is None or obj < best_obj:
            best_obj = obj
            best_theta = float(theta)
    if best_theta is None:
        raise ValueError("eq2_oracle: empty threshold grid")
    return best_theta
