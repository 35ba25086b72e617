"""Jaccard metrics, the thresholded score and the BCE-JI training loss.

Hard metrics take numpy masks whose positive pixels are any nonzero value
(``{0, 1}``, ``{0, 255}`` and bool masks all work). Losses take tensors of
positive-class probabilities and are differentiable.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .errors import UsageError

JI_THRESHOLD = 0.65
SOFT_EPS = 1e-7
BCE_CLAMP = 1e-7


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim < 1 or arr.size == 0:
        raise UsageError(f"{name} must be a nonempty mask")
    if arr.dtype == bool:
        return arr
    values = np.unique(arr)
    if not (np.isin(values, (0, 1)).all() or np.isin(values, (0, 255)).all()):
        raise UsageError(f"{name} is not binary; values {values[:5].tolist()}... (binarize it first)")
    return arr > 0


def jaccard(a, b) -> float:
    """|A and B| / |A or B| over positive pixels; 1.0 when both masks are empty."""
    a, b = _binary(a, "a"), _binary(b, "b")
    if a.shape != b.shape:
        raise UsageError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def thresholded_jaccard(ji: float, threshold: float = JI_THRESHOLD) -> float:
    """Zero a score strictly below ``threshold``; leave it unchanged otherwise."""
    return 0.0 if ji < threshold else ji


def _as_target(target, like: Tensor) -> Tensor:
    if isinstance(target, Tensor):
        return target
    return Tensor(_binary(target, "target").astype(like.dtype))


def soft_jaccard(pred: Tensor, target) -> Tensor:
    """(sum pg + eps) / (sum p + sum g - sum pg + eps), summed over the whole batch."""
    g = _as_target(target, pred)
    if pred.shape != g.shape:
        raise UsageError(f"prediction shape {pred.shape} does not match target {g.shape}")
    inter = ops.sum(pred * g)
    return (inter + SOFT_EPS) / (ops.sum(pred) + ops.sum(g) - inter + SOFT_EPS)


def bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    g = _as_target(target, pred)
    if pred.shape != g.shape:
        raise UsageError(f"prediction shape {pred.shape} does not match target {g.shape}")
    p = ops.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -ops.mean(g * ops.log(p) + (1.0 - g) * ops.log(1.0 - p))


def bce_ji_loss(pred: Tensor, target) -> Tensor:
    """bce + (1 - soft_jaccard), equally weighted."""
    g = _as_target(target, pred)
    return bce(pred, g) + (1.0 - soft_jaccard(pred, g))


@dataclass
class ScoreReport:
    image_ids: list
    ji: list
    thresholded_ji: list
    threshold: float = JI_THRESHOLD
    mean_ji: float = field(init=False)
    mean_thresholded_ji: float = field(init=False)
    below_threshold: int = field(init=False)

    def __post_init__(self):
        n = len(self.ji)
        self.mean_ji = float(np.sum(self.ji) / n)
        self.mean_thresholded_ji = float(np.sum(self.thresholded_ji) / n)
        self.below_threshold = sum(1 for s in self.ji if s < self.threshold)

    def to_text(self) -> str:
        """CSV rows ``image_id,ji,thresholded_ji`` followed by ``#`` summary lines."""
        buf = io.StringIO()
        buf.write("image_id,ji,thresholded_ji\n")
        for image_id, ji, tji in zip(self.image_ids, self.ji, self.thresholded_ji):
            buf.write(f"{image_id},{ji:.6f},{tji:.6f}\n")
        buf.write(f"# images = {len(self.ji)}\n")
        buf.write(f"# threshold = {self.threshold:.6f}\n")
        buf.write(f"# mean_ji = {self.mean_ji:.6f}\n")
        buf.write(f"# mean_thresholded_ji = {self.mean_thresholded_ji:.6f}\n")
        buf.write(f"# below_threshold = {self.below_threshold}\n")
        return buf.getvalue()

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "ScoreReport":
        ids, ji, tji, threshold = [], [], [], JI_THRESHOLD
        for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                if key.strip() == "threshold":
                    threshold = float(value)
                continue
            image_id, a, b = line.rsplit(",", 2)
            ids.append(image_id)
            ji.append(float(a))
            tji.append(float(b))
        return cls(ids, ji, tji, threshold)


def score_dataset(pairs: Sequence[tuple], threshold: float = JI_THRESHOLD,
                  image_ids: Optional[Iterable[str]] = None) -> ScoreReport:
    """Score ``(pred, truth)`` mask pairs into a :class:`ScoreReport`."""
    pairs = list(pairs)
    if not pairs:
        raise UsageError("score_dataset needs at least one mask pair")
    ids = [str(i) for i in image_ids] if image_ids is not None else [str(i) for i in range(len(pairs))]
    if len(ids) != len(pairs):
        raise UsageError("image_ids and pairs differ in length")
    ji = [jaccard(p, t) for p, t in pairs]
    return ScoreReport(ids, ji, [thresholded_jaccard(s, threshold) for s in ji], threshold)
