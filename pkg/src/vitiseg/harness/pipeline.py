"""Batch prediction, watershed refinement, evaluation and overlays over a manifest split.

Per-image work fans out over a thread pool; outputs go to distinct files and
results keep manifest order. Per-image failures are collected rather than
aborting the batch.
"""

from __future__ import annotations

import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import DataError, VitisegError
from ..imaging import binarize_mask, load_image, load_mask, overlay, resize, save_image, save_mask
from ..metrics import ScoreReport, score_dataset
from ..models import UNetModel
from ..watershed import confidence_from_probability, refine
from .data import Manifest, Record
from .training import predict_probabilities

logger = logging.getLogger(__name__)


@dataclass
class BatchResult:
    written: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (image_id, message)

    @property
    def ok(self) -> bool:
        return not self.failures


def output_name(image_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", image_id) + ".png"


def _records(manifest: Manifest, split: str) -> list[Record]:
    records = manifest.records if split == "all" else manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    return records


def _run(records: Sequence[Record], work: Callable[[Record], object], jobs: int) -> list:
    """Apply ``work`` to each record in order; errors become ``(None, message)``."""
    def guarded(record):
        try:
            return work(record), None
        except (VitisegError, OSError) as exc:
            return None, str(exc)

    if jobs <= 1:
        return [guarded(r) for r in records]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(guarded, records))


def predict(model: UNetModel, manifest: Manifest, split: str, out_dir: str | os.PathLike,
            jobs: int = 1) -> BatchResult:
    """Write one 8-bit confidence PNG per image: round-half-up of 255 * P(lesion)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = model.config.input_size
    records = _records(manifest, split)
    loaded = _run(records, lambda r: resize(load_image(manifest.resolve(r.image_path)), size, size), jobs)
    result = BatchResult()
    good = []
    for record, (img, err) in zip(records, loaded):
        if err is not None:
            result.failures.append((record.image_id, err))
        else:
            good.append((record, img))
    if good:
        probs = predict_probabilities(model, np.stack([img for _, img in good]).astype(np.float64))
        conf = {r.image_id: c for (r, _), c in zip(good, confidence_from_probability(probs))}

        def write(record):
            path = out / output_name(record.image_id)
            save_mask(conf[record.image_id], path)
            return path

        for record, (path, err) in zip([r for r, _ in good], _run([r for r, _ in good], write, jobs)):
            if err is not None:
                result.failures.append((record.image_id, err))
            else:
                result.written.append(path)
    _log_failures("predict", result)
    return result


def refine_predictions(manifest: Manifest, split: str, conf_dir: str | os.PathLike, out_dir: str | os.PathLike,
                       surface: str = "image", jobs: int = 1) -> BatchResult:
    """Watershed-refine every confidence map of the split into a {0,255} mask."""
    conf_dir, out = Path(conf_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = _records(manifest, split)

    def work(record):
        conf = load_mask(conf_dir / output_name(record.image_id))
        img = None
        if surface == "image":
            img = resize(load_image(manifest.resolve(record.image_path)), conf.shape[1], conf.shape[0])
        path = out / output_name(record.image_id)
        save_mask(refine(conf, img, surface), path)
        return path

    result = BatchResult()
    for record, (path, err) in zip(records, _run(records, work, jobs)):
        if err is not None:
            result.failures.append((record.image_id, err))
        else:
            result.written.append(path)
    _log_failures("refine", result)
    return result


@dataclass
class EvaluationResult:
    report: Optional[ScoreReport]
    missing: list

    @property
    def ok(self) -> bool:
        return self.report is not None and not self.missing


def _binary_prediction(path: Path, shape: tuple) -> np.ndarray:
    pred = binarize_mask(load_mask(path))
    if pred.shape != shape:
        pred = resize(pred, shape[1], shape[0])
    return pred


def evaluate(manifest: Manifest, split: str, pred_dir: str | os.PathLike, threshold: float = 0.65,
             report_path: Optional[str | os.PathLike] = None, jobs: int = 1) -> EvaluationResult:
    """Score predictions (binarized at 128, upsampled to the ground-truth size) against masks.

    Works for both confidence maps and refined masks. Images without a
    readable prediction are listed in ``missing`` and excluded.
    """
    pred_dir = Path(pred_dir)
    records = _records(manifest, split)

    def work(record):
        truth = binarize_mask(load_mask(manifest.resolve(record.mask_path)))
        return _binary_prediction(pred_dir / output_name(record.image_id), truth.shape), truth

    pairs, ids, missing = [], [], []
    for record, (pair, err) in zip(records, _run(records, work, jobs)):
        if err is not None:
            missing.append((record.image_id, err))
        else:
            pairs.append(pair)
            ids.append(record.image_id)
    for image_id, err in missing:
        logger.error("evaluate: no usable prediction for %s: %s", image_id, err)
    report = score_dataset(pairs, threshold, ids) if pairs else None
    if report is not None and report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        report.write(report_path)
    return EvaluationResult(report, missing)


def write_overlays(manifest: Manifest, split: str, pred_dir: str | os.PathLike, out_dir: str | os.PathLike,
                   jobs: int = 1) -> BatchResult:
    """Tint each image by TP/FP/FN against its ground truth at the original resolution."""
    pred_dir, out = Path(pred_dir), Path(out_dir)
    records = _records(manifest, split)

    def work(record):
        img = load_image(manifest.resolve(record.image_path))
        truth = binarize_mask(load_mask(manifest.resolve(record.mask_path)))
        pred = _binary_prediction(pred_dir / output_name(record.image_id), truth.shape)
        path = out / output_name(record.image_id)
        save_image(overlay(img, truth, pred), path)
        return path

    result = BatchResult()
    for record, (path, err) in zip(records, _run(records, work, jobs)):
        if err is not None:
            result.failures.append((record.image_id, err))
        else:
            result.written.append(path)
    _log_failures("overlay", result)
    return result


def _log_failures(stage: str, result: BatchResult) -> None:
    for image_id, err in result.failures:
        logger.error("%s failed for %s: %s", stage, image_id, err)
