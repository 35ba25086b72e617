"""Mini-batch training with Nadam, the BCE-JI loss and best-validation checkpointing."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..autodiff import NadamState, Tape, Tensor, nadam_step, ops
from ..errors import DataError, DivergenceError, NumericError
from ..imaging import apply_augment, derive_rng, normalize, sample_augment
from ..metrics import bce_ji_loss, jaccard, thresholded_jaccard
from ..models import UNetModel, build_unet, model_from_bytes, model_to_bytes
from ..watershed import confidence_from_probability
from .config import TrainConfig
from .data import Manifest, Record

logger = logging.getLogger(__name__)

EVAL_BATCH = 16


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_ji: float
    val_ji: Optional[float]
    val_thresholded_ji: Optional[float]
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self, include_time: bool = False) -> str:
        names = [n for n in EpochRecord.__dataclass_fields__ if include_time or n != "seconds"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for r in self.records:
            row = asdict(r)
            writer.writerow([_fmt(row[n]) for n in names])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6f}" if isinstance(v, float) else str(v)


@dataclass
class TrainResult:
    model: UNetModel
    history: TrainHistory


def load_split(manifest: Manifest, records: Sequence[Record], size: int):
    """Stack images (float64, 0..255) and {0,255} masks resized to ``size``."""
    if not records:
        return [], np.zeros((0, size, size, 3)), np.zeros((0, size, size), np.uint8)
    pairs = [manifest.load_pair(r, size) for r in records]
    return ([r.image_id for r in records],
            np.stack([p[0] for p in pairs]).astype(np.float64),
            np.stack([p[1] for p in pairs]))


def to_batch(images: Sequence[np.ndarray], dtype) -> Tensor:
    """Normalize H x W x 3 images and stack them as an N x 3 x H x W tensor."""
    return Tensor(np.stack([normalize(im).transpose(2, 0, 1) for im in images]).astype(dtype))


def predict_probabilities(model: UNetModel, images: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Positive-class probabilities (N x H x W) from an eval-mode forward."""
    out = []
    for start in range(0, len(images), batch_size):
        probs = model.forward(to_batch(images[start:start + batch_size], model.dtype), mode="eval")
        out.append(probs.data[:, 1].astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:3])


def score_predictions(model: UNetModel, images: np.ndarray, masks: np.ndarray, threshold: float):
    """Mean JI and mean thresholded JI with predictions binarized at confidence 128."""
    conf = confidence_from_probability(predict_probabilities(model, images))
    ji = [jaccard(c >= 128, m > 0) for c, m in zip(conf, masks)]
    return float(np.mean(ji)), float(np.mean([thresholded_jaccard(s, threshold) for s in ji]))


def train(manifest: Manifest, config: TrainConfig,
          callback: Optional[Callable[[EpochRecord], None]] = None,
          until_train_ji: Optional[float] = None) -> TrainResult:
    """Train a fresh model; returns the best checkpoint and the per-epoch history.

    The checkpoint with the best validation thresholded JI (ties: validation
    JI, then the earlier epoch) is kept. Without a validation split the best
    training JI is used instead. ``until_train_ji`` stops early once the
    training JI reaches that value.
    """
    train_recs = manifest.split("train", "val") if config.combine else manifest.split("train")
    val_recs = [] if config.combine else manifest.split("val")
    if not train_recs:
        raise DataError("the training split is empty")
    size = config.input_size
    train_ids, train_imgs, train_masks = load_split(manifest, train_recs, size)
    _, val_imgs, val_masks = load_split(manifest, val_recs, size)
    targets = (train_masks > 0).astype(config.dtype)[:, None]

    model = build_unet(config.unet_config(), config.seed)
    params = model.parameters()
    state = NadamState.for_params(params)
    aug = config.augment_params()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EA1]))
    history = TrainHistory()
    best_key, best_bytes, step = None, None, 0
    n = len(train_recs)

    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        lr_t = config.lr
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            images, masks = [], []
            for i in idx.tolist():
                img, mask = train_imgs[i], targets[i, 0]
                if config.augment:
                    draw = sample_augment(aug, size, size, derive_rng(config.seed, train_ids[i], epoch))
                    img, mask = apply_augment(img, mask, draw)
                images.append(img)
                masks.append(mask)
            lr_t = config.lr / (1.0 + config.lr_decay * step)
            try:
                with Tape() as tape:
                    probs = model.forward(to_batch(images, model.dtype), mode="train", rng=rng)
                    loss = bce_ji_loss(ops.slice_channels(probs, 1, 2), Tensor(np.stack(masks)[:, None]))
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"loss is {value}")
                tape.backward(loss)
                nadam_step(params, state, lr_t, config.weight_decay)
            except NumericError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch + 1}, step {step + 1}: {exc}") from None
            losses.append(value)
            step += 1

        train_ji, _ = score_predictions(model, train_imgs, train_masks, config.threshold)
        val_ji = val_tji = None
        if len(val_recs):
            val_ji, val_tji = score_predictions(model, val_imgs, val_masks, config.threshold)
        record = EpochRecord(epoch + 1, float(np.mean(losses)), train_ji, val_ji, val_tji, lr_t,
                             time.perf_counter() - started)
        history.records.append(record)
        key = (val_tji, val_ji) if val_recs else (train_ji,)
        if best_key is None or key > best_key:
            best_key, best_bytes, history.best_epoch = key, model_to_bytes(model), epoch + 1
        logger.info("epoch %d loss %.4f train_ji %.4f val_ji %s", epoch + 1, record.train_loss, train_ji,
                    "-" if val_ji is None else f"{val_ji:.4f}")
        if callback is not None:
            callback(record)
        if until_train_ji is not None and train_ji >= until_train_ji:
            break

    return TrainResult(model_from_bytes(best_bytes), history)
