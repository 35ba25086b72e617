"""Confidence-seeded marker watershed for refining predicted masks.

Flooding follows Meyer's algorithm with a binary heap keyed by
``(priority, insertion counter)``. A pixel takes its label at the moment a
front first pushes it, so equal-priority ties go to whichever front was
queued earlier. Seeds are visited in raster order and neighbors in the order
N, E, S, W (then NE, SE, SW, NW with 8-connectivity).
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass

import numpy as np

from .errors import NoSeedsError, UsageError

logger = logging.getLogger(__name__)

UNKNOWN, NEGATIVE, POSITIVE = 0, 1, 2
NEGATIVE_MAX = 77
POSITIVE_MIN = 179
FALLBACK_THRESHOLD = 128

_OFFSETS = {
    4: ((-1, 0), (0, 1), (1, 0), (0, -1)),
    8: ((-1, 0), (0, 1), (1, 0), (0, -1), (-1, 1), (1, 1), (1, -1), (-1, -1)),
}
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class SeedMap:
    labels: np.ndarray
    n_negative: int
    n_positive: int

    @property
    def one_sided(self) -> bool:
        return self.n_negative == 0 or self.n_positive == 0


def extract_seeds(conf: np.ndarray) -> SeedMap:
    """NEGATIVE where conf <= 77, POSITIVE where conf >= 179, UNKNOWN between."""
    conf = np.asarray(conf)
    labels = np.full(conf.shape, UNKNOWN, dtype=np.uint8)
    labels[conf <= NEGATIVE_MAX] = NEGATIVE
    labels[conf >= POSITIVE_MIN] = POSITIVE
    return SeedMap(labels, int(np.count_nonzero(labels == NEGATIVE)), int(np.count_nonzero(labels == POSITIVE)))


def confidence_from_probability(p: np.ndarray) -> np.ndarray:
    """Scale probabilities to 0..255 with round half up."""
    return np.clip(np.floor(np.asarray(p, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """Sobel magnitude of luminance (RGB input) or of the array itself (2-D input)."""
    img = np.asarray(img, dtype=np.float64)
    lum = img @ _LUMA if img.ndim == 3 else img
    p = np.pad(lum, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.hypot(gx, gy)


def watershed_flood(priority: np.ndarray, seeds: SeedMap | np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Grow NEGATIVE/POSITIVE seed regions over ``priority``; returns labels in {1, 2}."""
    labels = np.array(seeds.labels if isinstance(seeds, SeedMap) else seeds, dtype=np.uint8)
    priority = np.asarray(priority, dtype=np.float64)
    if priority.shape != labels.shape or labels.ndim != 2:
        raise UsageError(f"priority {priority.shape} and seeds {labels.shape} must be equal 2-D shapes")
    if connectivity not in _OFFSETS:
        raise UsageError("connectivity must be 4 or 8")
    if not np.all(np.isfinite(priority)):
        raise UsageError("priority field must be finite")
    has_neg = bool(np.any(labels == NEGATIVE))
    has_pos = bool(np.any(labels == POSITIVE))
    if not (has_neg or has_pos):
        raise NoSeedsError("no seeds: the prediction has no confident pixels")
    if not (has_neg and has_pos):
        return np.full(labels.shape, POSITIVE if has_pos else NEGATIVE, dtype=np.uint8)

    h, w = labels.shape
    offsets = _OFFSETS[connectivity]
    flat_prio = priority.ravel().tolist()
    lab = labels.ravel().tolist()
    heap: list = []
    counter = 0

    def spread(idx: int):
        nonlocal counter
        y, x = divmod(idx, w)
        value = lab[idx]
        for dy, dx in offsets:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w:
                n = ny * w + nx
                if lab[n] == UNKNOWN:
                    lab[n] = value
                    heapq.heappush(heap, (flat_prio[n], counter, n))
                    counter += 1

    for idx in np.flatnonzero(labels.ravel()).tolist():
        spread(idx)
    while heap:
        spread(heapq.heappop(heap)[2])
    return np.array(lab, dtype=np.uint8).reshape(h, w)


def refine(conf: np.ndarray, img: np.ndarray | None = None, surface: str = "image", connectivity: int = 4) -> np.ndarray:
    """Refine an 8-bit confidence map into a {0, 255} mask.

    ``surface="image"`` floods the Sobel gradient of ``img`` luminance;
    ``surface="confidence"`` floods the gradient of ``conf`` itself. When the
    seeds are one-sided the map is thresholded at 128 instead and a warning is
    logged.
    """
    conf = np.asarray(conf)
    seeds = extract_seeds(conf)
    if seeds.one_sided:
        logger.warning("one-sided seeds (%d negative, %d positive); falling back to threshold %d",
                       seeds.n_negative, seeds.n_positive, FALLBACK_THRESHOLD)
        return np.where(conf >= FALLBACK_THRESHOLD, 255, 0).astype(np.uint8)
    if surface == "image":
        if img is None:
            raise UsageError("surface='image' needs the image")
        if np.asarray(img).shape[:2] != conf.shape:
            raise UsageError(f"image {np.asarray(img).shape[:2]} and confidence {conf.shape} differ in size")
        priority = gradient_magnitude(img)
    elif surface == "confidence":
        priority = gradient_magnitude(conf)
    else:
        raise UsageError(f"surface must be 'image' or 'confidence', got {surface!r}")
    labels = watershed_flood(priority, seeds, connectivity)
    return np.where(labels == POSITIVE, 255, 0).astype(np.uint8)
