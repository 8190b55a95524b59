"""Datasets: CIFAR binary batches, synthetic pattern images, class-balanced IPC subsampling.

All randomness goes through ``numpy.random.Generator(PCG64(seed))``; the subsample
algorithm below is versioned as :data:`SUBSAMPLE_ALGORITHM` so index files can be
regenerated by any implementation that follows it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32
LABEL_BYTES = {"10": 1, "100": 2}
# per class in ascending label order: PCG64(seed).permutation of that class's
# indices (ascending), keep the first ipc; final index list sorted ascending
SUBSAMPLE_ALGORITHM = "pcg64-class-permute-v1"


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    class_count: int
    ipc: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError("images and labels disagree in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.images.shape[2:])

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[indices], labels=self.labels[indices])


# -- CIFAR binary ----------------------------------------------------------------


def load_cifar_binary(path, variant: str = "10") -> Dataset:
    """Read one or more CIFAR binary batch files.

    Each record is 1 (CIFAR-10) or 2 (CIFAR-100: coarse, fine) label bytes
    followed by 3072 pixel bytes in R, G, B planes, row-major. CIFAR-100 uses
    the fine label. Pixels are mapped to [0, 1].
    """
    variant = str(variant)
    if variant not in LABEL_BYTES:
        raise DataFormatError(f"variant must be '10' or '100', got {variant!r}")
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    nlab = LABEL_BYTES[variant]
    rec = nlab + PIXELS
    images, labels = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        if not raw or len(raw) % rec:
            n = len(raw) // rec
            raise DataFormatError(
                f"{p}: size {len(raw)} bytes is not a positive multiple of the {rec}-byte record "
                f"(expected {max(n, 1) * rec} bytes for {max(n, 1)} records)"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
        labels.append(arr[:, nlab - 1].astype(np.int64))
        images.append(arr[:, nlab:].reshape(-1, *IMAGE_SHAPE))
    imgs = (np.concatenate(images).astype(np.float32) / 255.0)
    return Dataset(
        images=imgs,
        labels=np.concatenate(labels),
        class_count=int(variant),
        provenance={"source": [str(p) for p in paths], "variant": variant},
    )


def write_cifar_binary(path, images_u8: np.ndarray, labels, variant: str = "10", coarse=None) -> None:
    """Write uint8 images (N, 3, 32, 32) in the CIFAR binary layout (fixtures, tests)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if str(variant) == "100":
        c = np.zeros(len(labels), np.uint8) if coarse is None else np.asarray(coarse, np.uint8)
        cols.insert(0, c[:, None])
    Path(path).write_bytes(np.concatenate(cols + [images_u8], axis=1).tobytes())


# -- subsampling -------------------------------------------------------------------


class InsufficientSamples(ValueError):
    pass


def subsample_indices(labels, ipc: int, seed: int, class_count: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    class_count = int(labels.max()) + 1 if class_count is None else class_count
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = []
    for c in range(class_count):
        idx = np.flatnonzero(labels == c)
        if idx.size < ipc:
            raise InsufficientSamples(f"class {c} has {idx.size} samples, fewer than ipc={ipc}")
        chosen.append(rng.permutation(idx)[:ipc])
    return np.sort(np.concatenate(chosen))


def subsample_ipc(ds: Dataset, ipc: int, seed: int) -> Dataset:
    idx = subsample_indices(ds.labels, ipc, seed, ds.class_count)
    sub = ds.take(idx)
    prov = dict(ds.provenance, ipc=ipc, seed=seed, algorithm=SUBSAMPLE_ALGORITHM)
    return replace(sub, ipc=ipc, provenance=prov)


def write_indices(path, indices) -> None:
    Path(path).write_text(json.dumps([int(i) for i in np.sort(np.asarray(indices))]))


def read_indices(path) -> np.ndarray:
    idx = json.loads(Path(path).read_text())
    if not isinstance(idx, list) or any(not isinstance(i, int) for i in idx):
        raise DataFormatError(f"{path}: index file must be a JSON array of integers")
    return np.asarray(idx, dtype=np.int64)


# -- synthetic data ------------------------------------------------------------------


def synth_dataset(
    classes: int,
    samples_per_class: int,
    resolution: int | tuple[int, int] = 8,
    channels: int = 3,
    noise: float = 0.15,
    family: str = "grating",
    seed: int = 0,
    template_seed: int | None = None,
) -> Dataset:
    """Class templates plus Gaussian noise.

    ``family="grating"``: class ``k`` is a colored sinusoidal grating whose
    orientation and frequency depend on ``k``. ``family="blob"``: a colored
    Gaussian bump at a class-indexed position. Templates depend only on
    ``template_seed`` (defaults to 0), so train and test splits generated with
    different ``seed`` share the same classes.
    """
    if classes < 1 or samples_per_class < 1 or channels < 1:
        raise ValueError("classes, samples_per_class and channels must be positive")
    H, W = (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)
    trng = np.random.default_rng(0 if template_seed is None else template_seed)
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    templates = np.empty((classes, channels, H, W))
    for k in range(classes):
        color = trng.choice([-1.0, 1.0], size=channels) * trng.uniform(0.5, 1.0, size=channels)
        if family == "grating":
            theta = np.pi * k / classes
            freq = 1.0 + (k % 3)
            pattern = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + trng.uniform(0, 2 * np.pi))
        elif family == "blob":
            cy, cx = trng.uniform(0.2, 0.8, size=2)
            pattern = 2 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.05) - 0.5
        else:
            raise ValueError(f"unknown synthetic family {family!r}")
        templates[k] = color[:, None, None] * pattern
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), samples_per_class)
    imgs = 0.5 + 0.35 * templates[labels] + noise * rng.standard_normal((labels.size, channels, H, W))
    imgs = np.clip(imgs, 0.0, 1.0).astype(np.float32)
    spec = {"classes": classes, "samples_per_class": samples_per_class, "resolution": [H, W],
            "channels": channels, "noise": noise, "family": family, "template_seed": template_seed}
    return Dataset(imgs, labels.astype(np.int64), classes, provenance={"generator": spec, "seed": seed})


def save_npz(path, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, images=ds.images, labels=ds.labels, class_count=ds.class_count,
                 provenance=json.dumps(ds.provenance, sort_keys=True))


def load_dataset(path, variant: str = "10") -> Dataset:
    """Load a ``.npz`` dataset written by :func:`save_npz` or a CIFAR binary file."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return Dataset(z["images"].astype(np.float32), z["labels"].astype(np.int64),
                           int(z["class_count"]), provenance=json.loads(str(z["provenance"])))
    return load_cifar_binary(path, variant)


# -- normalization and augmentation ---------------------------------------------------


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    x = ds.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def standardize(ds: Dataset, mean, std) -> Dataset:
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return replace(ds, images=((ds.images - m) / s).astype(np.float32))


def augment(batch: np.ndarray, rng: np.random.Generator, shift: int = 4, flip: bool = True) -> np.ndarray:
    """Random horizontal flip and zero-padded random crop of up to ``shift`` pixels."""
    N, C, H, W = batch.shape
    out = batch.copy()
    if flip:
        fl = rng.random(N) < 0.5
        out[fl] = out[fl, :, :, ::-1]
    if shift:
        padded = np.pad(out, ((0, 0), (0, 0), (shift, shift), (shift, shift)))
        dy = rng.integers(0, 2 * shift + 1, N)
        dx = rng.integers(0, 2 * shift + 1, N)
        for i in range(N):
            out[i] = padded[i, :, dy[i]:dy[i] + H, dx[i]:dx[i] + W]
    return out
