"""Random hyperparameter search over the training configuration."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..errors import ConfigError, DataError, DivergenceError
from .config import TrainConfig
from .data import Manifest
from .training import load_split, score_predictions, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchSpace:
    lr: tuple = (1e-5, 1e-2)            # log-uniform
    weight_decay: tuple = (1e-6, 1e-2)  # log-uniform
    dropout: tuple = (0.0, 0.5)         # uniform
    lr_decay: tuple = (0.0, 1e-3)       # uniform
    batch_sizes: tuple = (4, 8, 16)

    def __post_init__(self):
        for name in ("lr", "weight_decay"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} range must be positive and ordered, got {(lo, hi)}")
        for name in ("dropout", "lr_decay"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{name} range must be nonnegative and ordered, got {(lo, hi)}")
        if not self.batch_sizes:
            raise ConfigError("batch_sizes must not be empty")


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample_config(space: SearchSpace, base: TrainConfig, rng: np.random.Generator, seed: int) -> TrainConfig:
    return base.replace(
        lr=_log_uniform(rng, *space.lr),
        weight_decay=_log_uniform(rng, *space.weight_decay),
        dropout=float(rng.uniform(*space.dropout)),
        lr_decay=float(rng.uniform(*space.lr_decay)),
        batch_size=int(rng.choice(space.batch_sizes)),
        seed=seed,
    )


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


@dataclass
class TrialResult:
    trial: int
    seed: int
    lr: float
    weight_decay: float
    dropout: float
    lr_decay: float
    batch_size: int
    mean_thresholded_ji: float
    mean_ji: float
    status: str
    seconds: float


def run_trial(manifest: Manifest, config: TrainConfig) -> tuple[float, float]:
    """Train with ``config`` and score the result on the validation split."""
    records = manifest.split("val")
    if not records:
        raise DataError("random search needs a nonempty validation split")
    model = train(manifest, config).model
    _, images, masks = load_split(manifest, records, config.input_size)
    ji, tji = score_predictions(model, images, masks, config.threshold)
    return tji, ji


def random_search(manifest: Manifest, budget: int, base_config: TrainConfig, seed: int = 0,
                  space: SearchSpace = SearchSpace(), out_csv: Optional[str | os.PathLike] = None,
                  trial_fn: Callable[[Manifest, TrainConfig], tuple] = run_trial) -> list[TrialResult]:
    """Run ``budget`` independent trials; sorted by thresholded JI, then JI (descending), then seed.

    A diverging trial scores 0 and the search continues.
    """
    if budget < 1:
        raise ConfigError("budget must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EA]))
    results = []
    for t in range(budget):
        config = sample_config(space, base_config, rng, trial_seed(seed, t))
        started = time.perf_counter()
        try:
            tji, ji = trial_fn(manifest, config)
            status = "ok"
        except DivergenceError as exc:
            logger.warning("trial %d diverged: %s", t, exc)
            tji, ji, status = 0.0, 0.0, "diverged"
        results.append(TrialResult(t, config.seed, config.lr, config.weight_decay, config.dropout, config.lr_decay,
                                   config.batch_size, tji, ji, status, time.perf_counter() - started))
        logger.info("trial %d: thresholded_ji %.4f ji %.4f (%s)", t, tji, ji, status)
    results.sort(key=lambda r: (-r.mean_thresholded_ji, -r.mean_ji, r.seed))
    if out_csv is not None:
        write_trials(results, out_csv)
    return results


def write_trials(results: list, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(TrialResult.__dataclass_fields__)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for r in results:
            writer.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in asdict(r).values()])
