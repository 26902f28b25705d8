"""
Toy manifolds, IDX image files, and seeded subsampling.
"""
import gzip
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ren.logger import get_logger
from ren.models import DatasetConfig, ToySpec
from ren.utils import ConfigError, DomainError, IdxFormatError, ren_error, rng_stream

logger = get_logger()

NOISE_LEVELS = (0.01, 0.05, 0.07, 0.10)
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class ImageSet:
    images: np.ndarray
    height: int
    width: int
    split: str = "train"
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.height * self.width


def gen_toy(spec: ToySpec, split: str = "train") -> np.ndarray:
    """Points on a circle (t ∈ [0, 2π)) or upper semicircle (t ∈ [0, π)) plus isotropic noise."""
    rng = rng_stream(spec.seed, "toy", spec.family, split)
    upper = 2.0 * np.pi if spec.family == "circle" else np.pi
    t = rng.uniform(0.0, upper, size=spec.n)
    points = spec.radius * np.stack([np.cos(t), np.sin(t)], axis=1)
    noise = rng.standard_normal((spec.n, 2))
    return points + spec.noise_frac * spec.radius * noise


# IDX container

def _read_bytes(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except (EOFError, gzip.BadGzipFile, zlib.error) as exc:
        raise ren_error(IdxFormatError, f"{path}: corrupt gzip stream: {exc}") from None


def _header(payload: bytes, path: str, words: int) -> Tuple[int, ...]:
    needed = 4 * words
    if len(payload) < needed:
        raise ren_error(IdxFormatError, f"{path}: header truncated at byte {len(payload)}, need {needed} bytes",
                        offset=len(payload))
    return struct.unpack(f">{words}I", payload[:needed])


def _check_magic(found: int, expected: int, path: str):
    if found != expected:
        raise ren_error(IdxFormatError, f"{path}: bad magic at byte 0: expected 0x{expected:08x}, found 0x{found:08x}",
                        offset=0, expected=expected, found=found)


def read_idx_images(path: str) -> np.ndarray:
    payload = _read_bytes(path)
    magic, count, rows, cols = _header(payload, path, 4)
    _check_magic(magic, IDX_IMAGES_MAGIC, path)
    expected = count * rows * cols
    body = len(payload) - 16
    if body != expected:
        raise ren_error(IdxFormatError, f"{path}: pixel block at byte 16 holds {body} bytes, header declares "
                                        f"{count}x{rows}x{cols} = {expected}", offset=16 + min(body, expected))
    return np.frombuffer(payload, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path: str) -> np.ndarray:
    payload = _read_bytes(path)
    magic, count = _header(payload, path, 2)
    _check_magic(magic, IDX_LABELS_MAGIC, path)
    body = len(payload) - 8
    if body != count:
        raise ren_error(IdxFormatError, f"{path}: label block at byte 8 holds {body} bytes, header declares {count}",
                        offset=8 + min(body, count))
    return np.frombuffer(payload, dtype=np.uint8, offset=8).copy()


def write_idx_images(path: str, images: np.ndarray) -> str:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ren_error(DomainError, f"IDX images must be a uint8 N×H×W array, got {images.dtype} {images.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(np.ascontiguousarray(images).tobytes())
    return path


def write_idx_labels(path: str, labels: np.ndarray) -> str:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())
    return path


def load_idx(images_path: str, labels_path: Optional[str] = None, split: str = "train") -> ImageSet:
    logger.info(f"Reading IDX images: {images_path} ({os.path.getsize(images_path)} bytes)")
    raw = read_idx_images(images_path)
    labels = None
    if labels_path:
        labels = read_idx_labels(labels_path)
        if labels.shape[0] != raw.shape[0]:
            raise ren_error(IdxFormatError, f"{labels_path}: {labels.shape[0]} labels for {raw.shape[0]} images",
                            offset=4)
    images = raw.reshape(raw.shape[0], -1).astype(np.float64) / 255.0
    logger.info(f"Loaded {raw.shape[0]} images of {raw.shape[1]}x{raw.shape[2]}")
    return ImageSet(images=images, height=raw.shape[1], width=raw.shape[2], split=split, labels=labels)


def convert_npz_images(npz_path: str, out_path: str, key: str = "imgs") -> str:
    """Rewrite an archive raster dump (e.g. dSprites) as an IDX image file."""
    with np.load(npz_path) as archive:
        if key not in archive:
            raise ren_error(DomainError, f"{npz_path}: no array named {key!r} (have {list(archive.keys())})")
        data = np.asarray(archive[key])
    if data.dtype != np.uint8:
        scale = 255.0 if data.max() <= 1.0 else 1.0
        data = np.clip(np.rint(data * scale), 0, 255).astype(np.uint8)
    logger.info(f"Converted {data.shape[0]} rasters from {npz_path} to {out_path}")
    return write_idx_images(out_path, data)


def _allocate(counts: Dict[int, int], n: int, rng: np.random.Generator) -> Dict[int, int]:
    quota = {c: 0 for c in counts}
    remaining = n
    while remaining > 0:
        active = [c for c in counts if quota[c] < counts[c]]
        share, extra = divmod(remaining, len(active))
        for rank, i in enumerate(rng.permutation(len(active))):
            c = active[i]
            give = min(share + (1 if rank < extra else 0), counts[c] - quota[c])
            quota[c] += give
            remaining -= give
    return quota


def subsample(images: ImageSet, n: int, seed: int) -> ImageSet:
    """Seeded draw without replacement, stratified by label when labels are present."""
    total = len(images)
    if n > total:
        raise ren_error(DomainError, f"cannot subsample {n} items from a set of {total}")
    rng = rng_stream(seed, "subsample", images.split)
    if images.labels is None:
        chosen = rng.permutation(total)[:n]
    else:
        classes = sorted(int(c) for c in np.unique(images.labels))
        members = {c: np.flatnonzero(images.labels == c) for c in classes}
        quota = _allocate({c: len(members[c]) for c in classes}, n, rng)
        picked: List[np.ndarray] = [rng.permutation(members[c])[: quota[c]] for c in classes]
        chosen = rng.permutation(np.concatenate(picked))
    return ImageSet(
        images=images.images[chosen],
        height=images.height,
        width=images.width,
        split=images.split,
        labels=None if images.labels is None else images.labels[chosen],
    )


# point clouds on disk

POINT_COLUMNS = {
    "x": ["x", "x0", "x_0", "dim_0"],
    "y": ["y", "x1", "x_1", "dim_1"],
}


def load_points_csv(path: str) -> np.ndarray:
    logger.info(f"Reading points file: {path} ({os.path.getsize(path)} bytes)")
    df = pd.read_csv(path, float_precision="round_trip")
    df.columns = [str(col).strip().lower().replace(" ", "_") for col in df.columns]
    renames = {}
    for standard_name, variations in POINT_COLUMNS.items():
        for col in df.columns:
            if col in variations:
                renames[col] = standard_name
                break
    df = df.rename(columns=renames)
    missing = [col for col in POINT_COLUMNS if col not in df.columns]
    if missing:
        raise ren_error(ConfigError, f"{path}: missing columns {missing}. Accepted variations: {POINT_COLUMNS}")
    points = df[list(POINT_COLUMNS)].to_numpy(dtype=np.float64)
    logger.info(f"Parsed {points.shape[0]} points from {path}")
    return points


def save_points_csv(path: str, points: np.ndarray) -> str:
    pd.DataFrame(points, columns=list(POINT_COLUMNS)).to_csv(path, index=False, float_format="%.17g")
    return path


def load_dataset(cfg: DatasetConfig, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Train and test matrices for an experiment."""
    if cfg.is_toy:
        def toy(split: str, path: Optional[str], n: Optional[int]) -> np.ndarray:
            if path:
                return load_points_csv(path)
            spec = ToySpec(family=cfg.name, n=n or 4096, noise_frac=cfg.noise_frac, radius=cfg.radius, seed=seed)
            return gen_toy(spec, split)

        return toy("train", cfg.train_path, cfg.n_train), toy("test", cfg.test_path, cfg.n_test)

    train = load_idx(cfg.train_path, cfg.train_labels, "train")
    test = load_idx(cfg.test_path, cfg.test_labels, "test")
    if cfg.n_train and cfg.n_train < len(train):
        train = subsample(train, cfg.n_train, seed)
    if cfg.n_test and cfg.n_test < len(test):
        test = subsample(test, cfg.n_test, seed)
    return train.images, test.images
