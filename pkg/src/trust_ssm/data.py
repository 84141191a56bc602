"""Synthetic 8-class image set and the corruption suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

N_CLASSES = 8
IMAGE_SIZE = 16
CLASS_NAMES = (
    "bar_horizontal", "bar_vertical", "bar_diagonal", "bar_antidiagonal",
    "checker_even", "checker_odd", "radial_bright", "radial_dark",
)

CORRUPTIONS = ("gaussian_noise", "shot_noise", "box_blur", "contrast", "pixelate")
MAX_SEVERITY = 5

GAUSSIAN_SIGMA = (0.0, 0.05, 0.1, 0.2, 0.3, 0.4)
SHOT_PHOTONS = (np.inf, 60.0, 25.0, 12.0, 6.0, 3.0)
BLUR_KERNEL = (1, 1, 3, 3, 5, 5)
CONTRAST_FACTOR = (1.0, 0.8, 0.6, 0.4, 0.3, 0.2)
PIXELATE_FACTOR = (1, 1, 2, 2, 4, 4)


@dataclass
class SyntheticDataset:
    images: np.ndarray  # [n, 16, 16, 1] in [0, 1]
    labels: np.ndarray
    seed: int
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images[self.train_idx], self.labels[self.train_idx]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images[self.test_idx], self.labels[self.test_idx]


def _draw(cls: int, rng: np.random.Generator) -> np.ndarray:
    s = IMAGE_SIZE
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c = (s - 1) / 2.0
    bg = rng.uniform(0.15, 0.35)
    amp = rng.uniform(0.3, 0.55)
    if cls < 4:
        off = rng.uniform(-1.5, 1.5)
        half = rng.uniform(1.0, 2.0)
        dist = {
            0: yy - c - off,
            1: xx - c - off,
            2: (yy - xx - off) / np.sqrt(2.0),
            3: (yy + xx - 2 * c - off) / np.sqrt(2.0),
        }[cls]
        img = bg + amp * (np.abs(dist) <= half)
    elif cls < 6:
        cell = 2
        phase = cls - 4
        board = ((yy // cell + xx // cell + phase) % 2).astype(np.float64)
        img = bg + amp * board
    else:
        cy, cx = c + rng.uniform(-1.5, 1.5, size=2)
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / rng.uniform(7.0, 10.0)
        ramp = np.clip(1.0 - r, 0.0, 1.0)
        img = bg + amp * (ramp if cls == 6 else 1.0 - ramp)
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_dataset(seed: int, n: int, test_fraction: float = 0.2) -> SyntheticDataset:
    """Class-balanced synthetic set with a stratified train/test split."""
    if n <= 0 or n % N_CLASSES:
        raise ValueError(f"n must be a positive multiple of {N_CLASSES}, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    labels = np.repeat(np.arange(N_CLASSES), n // N_CLASSES)
    labels = labels[rng.permutation(n)]
    images = np.stack([_draw(int(k), rng) for k in labels])[..., None]
    test = []
    per_class = int(round(test_fraction * n / N_CLASSES))
    for k in range(N_CLASSES):
        test.extend(np.flatnonzero(labels == k)[:per_class])
    test_idx = np.sort(np.array(test, dtype=np.intp))
    train_idx = np.setdiff1d(np.arange(n), test_idx)
    return SyntheticDataset(images, labels, seed, train_idx, test_idx)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTIONS}")
        if not 0 <= int(self.severity) <= MAX_SEVERITY:
            raise ValueError(f"severity must be in 0..{MAX_SEVERITY}, got {self.severity}")


def corrupt(images: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply ``spec`` to ``images[n, H, W, ch]``; output is clipped to [0, 1]."""
    x = np.asarray(images, dtype=np.float64)
    s = int(spec.severity)
    if s == 0:
        return x.copy()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 202, CORRUPTIONS.index(spec.kind), s]))
    if spec.kind == "gaussian_noise":
        out = x + rng.normal(0.0, GAUSSIAN_SIGMA[s], size=x.shape)
    elif spec.kind == "shot_noise":
        lam = SHOT_PHOTONS[s]
        out = rng.poisson(np.clip(x, 0, 1) * lam) / lam
    elif spec.kind == "box_blur":
        k = BLUR_KERNEL[s]
        out = x if k == 1 else ndimage.uniform_filter(x, size=(1, k, k, 1), mode="nearest")
    elif spec.kind == "contrast":
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        out = mean + CONTRAST_FACTOR[s] * (x - mean)
    else:
        f = PIXELATE_FACTOR[s]
        if f == 1:
            out = x
        else:
            n, h, w, ch = x.shape
            blocks = x.reshape(n, h // f, f, w // f, f, ch).mean(axis=(2, 4))
            out = blocks.repeat(f, axis=1).repeat(f, axis=2)
    return np.clip(out, 0.0, 1.0)


class CorruptionTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`corrupt` for pipelines."""

    def __init__(self, kind: str = "gaussian_noise", severity: int = 3, random_state: int = 0):
        self.kind = kind
        self.severity = severity
        self.random_state = random_state

    def fit(self, X, y=None):
        CorruptionSpec(self.kind, self.severity, self.random_state)
        self.n_features_in_ = int(np.prod(np.shape(X)[1:]))
        return self

    def transform(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        return corrupt(X, CorruptionSpec(self.kind, self.severity, self.random_state))
