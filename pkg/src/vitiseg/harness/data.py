"""Manifests, dataset splitting and the synthetic stand-in dataset."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..errors import DataError, UsageError
from ..imaging import binarize_mask, load_image, load_mask, resize, save_image, save_mask

HEADER = ("image_id", "image_path", "mask_path", "split")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Record:
    image_id: str
    image_path: Path
    mask_path: Path
    split: str


class Manifest:
    """Ordered image records. Relative paths resolve against ``root``."""

    def __init__(self, records: Iterable[Record], root: str | os.PathLike = "."):
        self.records = list(records)
        self.root = Path(root)
        seen = set()
        for r in self.records:
            if r.image_id in seen:
                raise DataError(f"duplicate image_id {r.image_id!r} in manifest")
            if r.split not in SPLITS:
                raise DataError(f"image {r.image_id!r}: split must be one of {SPLITS}, got {r.split!r}")
            seen.add(r.image_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, path: Path) -> Path:
        return path if path.is_absolute() else self.root / path

    def split(self, *names: str) -> list[Record]:
        return [r for r in self.records if r.split in names]

    def counts(self) -> dict:
        return {s: sum(r.split == s for r in self.records) for s in SPLITS}

    def check_files(self, records: Optional[Iterable[Record]] = None) -> None:
        missing = [str(self.resolve(p)) for r in (records or self.records)
                   for p in (r.image_path, r.mask_path) if not self.resolve(p).is_file()]
        if missing:
            raise DataError(f"{len(missing)} manifest file(s) missing, first: {missing[0]}")

    def to_text(self, root: Optional[Path] = None) -> str:
        """CSV text; relative paths are rewritten to be relative to ``root``."""
        def rel(p: Path) -> str:
            if root is None or p.is_absolute():
                return p.as_posix()
            return Path(os.path.relpath(self.resolve(p).resolve(), root.resolve())).as_posix()

        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HEADER)
        for r in self.records:
            writer.writerow((r.image_id, rel(r.image_path), rel(r.mask_path), r.split))
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(path.parent), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path: str | os.PathLike, check_files: bool = True) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(c.strip() for c in rows[0]) != HEADER:
            raise DataError(f"{path}: manifest header must be {','.join(HEADER)}")
        records = []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            image_id, image_path, mask_path, split = (c.strip() for c in row)
            records.append(Record(image_id, Path(image_path), Path(mask_path), split))
        manifest = cls(records, path.parent)
        if check_files:
            manifest.check_files()
        return manifest

    def load_pair(self, record: Record, size: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        """Image (uint8 RGB) and binarized mask, both resized to ``size`` if given."""
        img = load_image(self.resolve(record.image_path))
        mask = binarize_mask(load_mask(self.resolve(record.mask_path)))
        if img.shape[:2] != mask.shape:
            raise DataError(f"image {record.image_id!r}: image {img.shape[:2]} and mask {mask.shape} differ")
        if size is not None:
            img, mask = resize(img, size, size), resize(mask, size, size)
        return img, mask


def split_counts(n: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Floor-allocate val and test (at least one each); the remainder goes to train."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise UsageError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    if n < 3:
        raise DataError(f"need at least 3 images to split, got {n}")
    n_val = max(1, math.floor(n * ratios[1] + 1e-9))
    n_test = max(1, math.floor(n * ratios[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split_dataset(manifest: Manifest, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> Manifest:
    """Shuffle by ``seed`` and assign train/val/test; record order is preserved."""
    n_train, n_val, _ = split_counts(len(manifest), ratios)
    order = np.random.default_rng(seed).permutation(len(manifest))
    assignment = {}
    for rank, idx in enumerate(order.tolist()):
        assignment[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return Manifest([replace(r, split=assignment[i]) for i, r in enumerate(manifest.records)], manifest.root)


# ---------------------------------------------------------------- synthetic data

def _skin_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth low-frequency texture around a random skin tone, float 0..255."""
    tone = rng.uniform([150, 100, 80], [215, 165, 140])
    coarse = rng.normal(0.0, 1.0, (size // 8 + 2, size // 8 + 2, 3))
    texture = resize(coarse, size, size, method="bilinear")
    grain = rng.normal(0.0, 3.0, (size, size, 3))
    return tone + 8.0 * texture + grain


def _ellipse(size: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    ry, rx = rng.uniform(0.06, 0.2, size=2) * size
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[:size, :size].astype(float)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _disk(size: int, rng: np.random.Generator) -> np.ndarray:
    r = rng.uniform(0.15, 0.3) * size
    cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
    yy, xx = np.mgrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2


def synth_sample(size: int, rng: np.random.Generator, kind: str = "lesions") -> tuple[np.ndarray, np.ndarray]:
    """One (uint8 RGB image, {0,255} mask) pair; lesion fraction is in (0, 0.5)."""
    if kind not in ("lesions", "disks"):
        raise UsageError(f"kind must be 'lesions' or 'disks', got {kind!r}")
    img = _skin_background(size, rng)
    while True:
        if kind == "disks":
            mask = _disk(size, rng)
        else:
            mask = np.zeros((size, size), bool)
            for _ in range(rng.integers(1, 4)):
                mask |= _ellipse(size, rng)
        frac = mask.mean()
        if 0.0 < frac < 0.5:
            break
    # depigmented lesion: lighter and less saturated than the surrounding skin
    lesion = rng.uniform(0.25, 0.45) if kind == "lesions" else 0.6
    img[mask] = img[mask] + lesion * (245.0 - img[mask])
    img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return img, np.where(mask, 255, 0).astype(np.uint8)


def synth_dataset(n: int, size: int, seed: int, out_dir: str | os.PathLike, kind: str = "lesions") -> Manifest:
    """Write ``n`` image/mask PNGs plus ``manifest.csv`` (all records in split "train")."""
    if n < 3:
        raise UsageError(f"synth_dataset needs n >= 3, got {n}")
    if size < 8:
        raise UsageError(f"image size must be at least 8, got {size}")
    out = Path(out_dir)
    records = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        img, mask = synth_sample(size, rng, kind)
        image_id = f"synth_{i:04d}"
        image_rel, mask_rel = Path("images") / f"{image_id}.png", Path("masks") / f"{image_id}.png"
        save_image(img, out / image_rel)
        save_mask(mask, out / mask_rel)
        records.append(Record(image_id, image_rel, mask_rel, "train"))
    manifest = Manifest(records, out)
    manifest.save(out / "manifest.csv")
    return manifest
