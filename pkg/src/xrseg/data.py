"""Image/mask ingestion, splitting, batching and synthetic lung phantoms."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .tensor_core import Tensor

IMAGE_SUFFIXES = (".png", ".pgm")
MASK_SUFFIX = "_mask"
_LUMA = np.array([0.299, 0.587, 0.114])


class DatasetError(ValueError):
    """Raised for unreadable, unpaired or empty datasets."""


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray  # 1×H×W float32 in [0, 1]
    mask: np.ndarray  # 1×H×W float32 in {0, 1}

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DatasetError(f"sample {self.id}: image shape {self.image.shape} != mask shape {self.mask.shape}")


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    source: str
    target_hw: tuple[int, int]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]


def read_gray(path: Path) -> np.ndarray:
    """Decode a PNG/PGM to a float64 H×W array scaled to [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except Exception as exc:  # PIL raises a variety of types
        raise DatasetError(f"cannot decode image file {path}: {exc}") from exc
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        full_scale = 65535.0
    elif mode in ("L", "P", "RGB", "RGBA", "LA", "1"):
        full_scale = 255.0 if mode != "1" else 1.0
    else:
        raise DatasetError(f"unsupported pixel mode {mode!r} in {path}")
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if arr.shape[2] >= 3:
            arr = arr[..., :3] @ _LUMA
        else:
            arr = arr[..., 0]
    return np.clip(arr / full_scale, 0.0, 1.0)


def _resize(arr: np.ndarray, hw: tuple[int, int], resample) -> np.ndarray:
    h, w = hw
    if arr.shape == (h, w):
        return arr
    im = Image.fromarray(arr.astype(np.float32))
    return np.asarray(im.resize((w, h), resample=resample), dtype=np.float64)


def preprocess_image(arr: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    out = _resize(arr, hw, Image.Resampling.BILINEAR)
    return np.clip(out, 0.0, 1.0).astype(np.float32)[None]


def preprocess_mask(arr: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    out = _resize(arr, hw, Image.Resampling.NEAREST)
    peak = out.max()
    if peak <= 0:
        return np.zeros((1, *hw), dtype=np.float32)
    return (out >= 0.5 * peak).astype(np.float32)[None]


def _list_images(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def pair_files(image_dir: Path, mask_dir: Path) -> list[tuple[str, Path, Path]]:
    images, masks = _list_images(image_dir), _list_images(mask_dir)
    pairs, unpaired = [], []
    for stem, path in images.items():
        partner = masks.get(stem) or masks.get(stem + MASK_SUFFIX)
        if partner is None:
            unpaired.append(stem)
        else:
            pairs.append((stem, path, partner))
    if unpaired:
        raise DatasetError(f"images without a matching mask: {', '.join(sorted(unpaired))}")
    return sorted(pairs)


def load_dataset(image_dir: str | os.PathLike, mask_dir: str | os.PathLike, target_hw: tuple[int, int]) -> Dataset:
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise DatasetError(f"not a directory: {d}")
    target_hw = (int(target_hw[0]), int(target_hw[1]))
    pairs = pair_files(image_dir, mask_dir)
    if not pairs:
        raise DatasetError(f"no images found in {image_dir}")
    samples = tuple(
        Sample(stem, preprocess_image(read_gray(ip), target_hw), preprocess_mask(read_gray(mp), target_hw))
        for stem, ip, mp in pairs
    )
    return Dataset(samples, str(image_dir.parent), target_hw)


def load_root(root: str | os.PathLike, target_hw: tuple[int, int]) -> Dataset:
    """Load the ``<root>/images`` + ``<root>/masks`` layout."""
    root = Path(root)
    return load_dataset(root / "images", root / "masks", target_hw)


def split(ds: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    n = len(ds)
    if n < 2:
        raise DatasetError(f"cannot split a dataset of {n} sample(s)")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(np.floor(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise DatasetError(f"train_fraction {train_fraction} leaves an empty side for n={n}")
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: tuple(ds.samples[i] for i in idx)  # noqa: E731
    return (
        Dataset(pick(order[:n_train]), ds.source, ds.target_hw),
        Dataset(pick(order[n_train:]), ds.source, ds.target_hw),
    )


def stack(samples: Sequence[Sample]) -> tuple[Tensor, Tensor]:
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return Tensor(images), Tensor(masks)


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[tuple[Tensor, Tensor]]:
    """Yield (images, masks) pairs of shape B×1×H×W; the last batch may be short."""
    for chunk in batch_indices(len(ds), batch_size, shuffle_seed):
        yield stack([ds.samples[i] for i in chunk])


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None = None) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# -- synthetic phantoms -----------------------------------------------------

NOISE_SIGMA = 0.05


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def synthetic_sample(rng: np.random.Generator, hw: tuple[int, int], sample_id: str) -> Sample:
    """Dark field with two bright rotated ellipses standing in for the lung fields."""
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w]
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w
    background = rng.uniform(0.05, 0.25)
    mask = np.zeros((h, w), dtype=bool)
    image = np.full((h, w), background)
    for side_cx in ((0.25, 0.38), (0.62, 0.75)):
        cx = rng.uniform(*side_cx)
        cy = rng.uniform(0.42, 0.58)
        rx = rng.uniform(0.09, 0.15)
        ry = rng.uniform(0.2, 0.3)
        theta = rng.uniform(-0.3, 0.3)
        region = _ellipse(yy, xx, cy, cx, ry, rx, theta)
        image[region] = rng.uniform(0.55, 0.9)
        mask |= region
    image = image + rng.normal(0.0, NOISE_SIGMA, size=(h, w))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(sample_id, image[None], mask.astype(np.float32)[None])


def gen_synthetic(n: int, hw: tuple[int, int] = (128, 128), seed: int = 0) -> Dataset:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    hw = (int(hw[0]), int(hw[1]))
    children = np.random.SeedSequence(seed).spawn(n)
    samples = tuple(
        synthetic_sample(np.random.default_rng(child), hw, f"synth_{i:05d}") for i, child in enumerate(children)
    )
    return Dataset(samples, "synthetic", hw)


def write_png(path: Path, arr01: np.ndarray) -> None:
    """Write a [0, 1] H×W array as 8-bit grayscale PNG."""
    data = np.clip(np.rint(np.asarray(arr01, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def write_dataset(ds: Dataset, root: str | os.PathLike) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds:
        write_png(root / "images" / f"{s.id}.png", s.image[0])
        write_png(root / "masks" / f"{s.id}.png", s.mask[0])
