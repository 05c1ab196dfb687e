"""Frozen dual image encoders.

The general branch sees a rounded box-blurred image through coarse 16-pixel
patches; the detail branch sees 8-pixel patches with each patch's per-channel
mean removed (local contrast), amplified by a fixed gain. Both are fixed,
seeded linear patch embeddings plus sinusoidal position codes.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    patch_size: int
    rows: int
    dims: int
    blur_kernel: Optional[int] = None
    seed: int = 0
    image_size: int = 64
    local_contrast: bool = False
    gain: float = 1.0

    def __post_init__(self):
        if self.kind not in ("general", "detail"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.rows != (self.image_size // self.patch_size) ** 2:
            raise ConfigError(f"rows must be (image_size/patch_size)^2 = {(self.image_size // self.patch_size) ** 2}")
        if (self.blur_kernel is not None) != (self.kind == "general"):
            raise ConfigError("blur_kernel is required for the general encoder and forbidden for the detail encoder")
        if self.blur_kernel is not None and (self.blur_kernel < 1 or self.blur_kernel % 2 == 0):
            raise ConfigError("blur_kernel must be a positive odd integer")
        if not self.gain > 0:
            raise ConfigError("gain must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


GENERAL_SPEC = EncoderSpec("general", patch_size=16, rows=16, dims=32, blur_kernel=9, seed=1001)
DETAIL_SPEC = EncoderSpec("detail", patch_size=8, rows=64, dims=48, seed=2002, local_contrast=True, gain=4.0)


def box_blur(image: np.ndarray, kernel: int) -> np.ndarray:
    """k x k mean filter with edge replication, rounded back to uint8."""
    r = kernel // 2
    x = np.pad(image.astype(np.int64), ((r, r), (r, r), (0, 0)), mode="edge")
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0), (0, 0)))
    h, w = image.shape[:2]
    s = c[kernel:kernel + h, kernel:kernel + w] - c[:h, kernel:kernel + w] - c[kernel:kernel + h, :w] + c[:h, :w]
    # round half up in exact integer arithmetic
    area = kernel * kernel
    return ((2 * s + area) // (2 * area)).astype(np.uint8)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    h, w, ch = image.shape
    g = h // patch
    return (
        image.reshape(g, patch, w // patch, patch, ch)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * (w // patch), patch * patch * ch)
    )


def sinusoidal_positions(rows: int, dims: int) -> np.ndarray:
    pos = np.arange(rows)[:, None]
    i = np.arange(dims)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dims)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class FrozenEncoder:
    """Immutable encoder built from an EncoderSpec."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        fan_in = spec.patch_size * spec.patch_size * 3
        rng = np.random.default_rng(spec.seed)
        weight = rng.standard_normal((fan_in, spec.dims)) / np.sqrt(fan_in)
        pos = sinusoidal_positions(spec.rows, spec.dims)
        weight.setflags(write=False)
        pos.setflags(write=False)
        self.weight = weight
        self.positions = pos

    def preprocess(self, image: np.ndarray) -> np.ndarray:
        size = self.spec.image_size
        if image.shape != (size, size, 3):
            raise DataError(f"expected a {size}x{size} RGB image, got shape {image.shape}")
        if self.spec.blur_kernel is not None:
            image = box_blur(image, self.spec.blur_kernel)
        return image

    def __call__(self, image: np.ndarray) -> np.ndarray:
        x = self.preprocess(np.asarray(image))
        patches = patchify(x, self.spec.patch_size).astype(np.float64) / 255.0
        if self.spec.local_contrast:
            per_channel = patches.reshape(len(patches), -1, 3)
            patches = (per_channel - per_channel.mean(axis=1, keepdims=True)).reshape(len(patches), -1)
        return self.spec.gain * patches @ self.weight + self.positions

    def encode_batch(self, images) -> np.ndarray:
        return np.stack([self(im) for im in images])

    def fingerprint(self) -> str:
        return _digest(self.spec, self.weight, self.positions)


def _digest(spec: EncoderSpec, *arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(repr(sorted(spec.to_dict().items())).encode())
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


_CACHE: dict[EncoderSpec, FrozenEncoder] = {}


def get_encoder(spec: EncoderSpec) -> FrozenEncoder:
    if spec not in _CACHE:
        _CACHE[spec] = FrozenEncoder(spec)
    return _CACHE[spec]


def encode_general(image: np.ndarray, spec: EncoderSpec = GENERAL_SPEC) -> np.ndarray:
    """Coarse features, (N, C) = (16, 32) at defaults."""
    return get_encoder(spec)(image)


def encode_detail(image: np.ndarray, spec: EncoderSpec = DETAIL_SPEC) -> np.ndarray:
    """Fine features, (Q, S) = (64, 48) at defaults."""
    return get_encoder(spec)(image)


def encoder_fingerprint(spec: EncoderSpec) -> str:
    return get_encoder(spec).fingerprint()


def linear_probe_accuracy(
    train_feats: np.ndarray, train_labels, test_feats: np.ndarray, test_labels, seed: int = 0
) -> float:
    """Held-out accuracy of a logistic-regression probe on mean-pooled features."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    xtr = train_feats.mean(axis=1)
    xte = test_feats.mean(axis=1)
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000, C=10.0, random_state=seed))
    probe.fit(xtr, train_labels)
    return float(probe.score(xte, test_labels))
