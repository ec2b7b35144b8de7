"""Masked image distances and quality monitors.

The default distance backend is a seeded, randomly initialized multi-scale
convolutional feature stack with per-pixel channel normalization: the same
computation structure as deep perceptual distances, minus pretrained weights,
so it is fully deterministic and needs no downloads. A multi-scale structural
similarity backend and a plug-in point for an external pretrained feature
extractor are provided as alternatives.

Masked distances follow one convention: per-pixel channel L2 norm of the
(normalized) feature difference, weighted by the resolution-matched binary
mask, averaged over mask-positive pixels, then over scales.
"""

from __future__ import annotations

import warnings
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg as scipy_linalg

from .errors import DimensionError, ProtocolError, ShapeError
from .generator import images_to_torch
from .scene_core import ClassMask, nearest_indices

_EPS = 1e-8

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


class DistanceBackend(Protocol):
    backend_id: str

    def distance(
        self, x1: np.ndarray, x2: np.ndarray, mask: Optional[np.ndarray]
    ) -> float: ...


def _mask_values(mask: Optional[ClassMask | np.ndarray]) -> Optional[np.ndarray]:
    if mask is None:
        return None
    return mask.values if isinstance(mask, ClassMask) else np.asarray(mask)


def _layer_mask(mask: Optional[np.ndarray], h: int, w: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    rows = nearest_indices(mask.shape[0], h)
    cols = nearest_indices(mask.shape[1], w)
    return mask[np.ix_(rows, cols)].astype(np.float64)


class FeatureBackbone:
    """Seeded random conv stack; features normalized per pixel over channels."""

    backend_id = "seeded-random-features"

    def __init__(
        self,
        seed: int = 0,
        widths: Sequence[int] = (16, 32, 64),
        in_channels: int = 3,
    ):
        self.seed = seed
        self.widths = tuple(widths)
        gen = torch.Generator().manual_seed(seed)
        self._convs = []
        prev = in_channels
        for i, width in enumerate(self.widths):
            kernel = 5 if i == 0 else 3
            fan_in = prev * kernel * kernel
            w = torch.randn(width, prev, kernel, kernel, generator=gen) * (
                2.0 / fan_in
            ) ** 0.5
            b = torch.zeros(width)
            self._convs.append((w, b, kernel // 2))
            prev = width

    def raw_features(self, images: np.ndarray) -> list[torch.Tensor]:
        """Unnormalized activations per scale; images (N, H, W, 3) in [-1, 1]."""
        x = images_to_torch(images)
        feats = []
        with torch.no_grad():
            for w, b, pad in self._convs:
                x = F.conv2d(x, w, b, stride=2, padding=pad)
                x = F.leaky_relu(x, 0.2)
                feats.append(x)
        return feats

    def features(self, images: np.ndarray) -> list[torch.Tensor]:
        """Per-pixel channel-unit-normalized activations per scale."""
        normalized = []
        for f in self.raw_features(images):
            norm = torch.sqrt((f**2).sum(dim=1, keepdim=True)) + _EPS
            normalized.append(f / norm)
        return normalized

    def pooled(self, images: np.ndarray, batch: int = 128) -> np.ndarray:
        """Spatially pooled raw features, concatenated over scales: (N, F)."""
        rows = []
        for start in range(0, images.shape[0], batch):
            feats = self.raw_features(images[start : start + batch])
            rows.append(
                np.concatenate(
                    [f.mean(dim=(2, 3)).numpy().astype(np.float64) for f in feats],
                    axis=1,
                )
            )
        return np.concatenate(rows, axis=0)

    def distance(
        self, x1: np.ndarray, x2: np.ndarray, mask: Optional[np.ndarray]
    ) -> float:
        f1 = self.features(x1[None] if x1.ndim == 3 else x1)
        f2 = self.features(x2[None] if x2.ndim == 3 else x2)
        per_layer = []
        for a, b in zip(f1, f2):
            diff = (a - b).squeeze(0).numpy().astype(np.float64)
            dist = np.sqrt((diff**2).sum(axis=0))
            m = _layer_mask(mask, dist.shape[0], dist.shape[1])
            if m is None:
                per_layer.append(dist.mean())
            else:
                count = m.sum()
                if count == 0:
                    continue
                per_layer.append((dist * m).sum() / count)
        if not per_layer:
            raise ProtocolError("mask empty at every feature scale")
        return float(np.mean(per_layer))


class ExternalFeatureBackend(FeatureBackbone):
    """Plug-in point: wraps a user feature extractor in the same distance."""

    backend_id = "external-plugin"

    def __init__(self, extractor: Callable[[np.ndarray], list[torch.Tensor]]):
        self._extractor = extractor

    def raw_features(self, images: np.ndarray) -> list[torch.Tensor]:
        return self._extractor(images)


def _gaussian_kernel(size: int = 7, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    kernel = torch.outer(g, g)
    return kernel / kernel.sum()


class MsssimBackend:
    """Distance = 1 - mask-weighted multi-scale structural similarity."""

    backend_id = "msssim"

    def __init__(self, window: int = 7, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03):
        self.window = window
        self._kernel = _gaussian_kernel(window, sigma)
        self.c1 = (k1) ** 2
        self.c2 = (k2) ** 2

    def _filter(self, x: torch.Tensor) -> torch.Tensor:
        c = x.shape[1]
        k = self._kernel.to(x.dtype).expand(c, 1, -1, -1)
        pad = self.window // 2
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        return F.conv2d(x, k, groups=c)

    def _ssim_maps(self, x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu_x, mu_y = self._filter(x), self._filter(y)
        sigma_x = self._filter(x * x) - mu_x**2
        sigma_y = self._filter(y * y) - mu_y**2
        sigma_xy = self._filter(x * y) - mu_x * mu_y
        cs = (2 * sigma_xy + self.c2) / (sigma_x + sigma_y + self.c2)
        lum = (2 * mu_x * mu_y + self.c1) / (mu_x**2 + mu_y**2 + self.c1)
        return (lum * cs).mean(dim=1), cs.mean(dim=1)

    def masked_msssim(
        self, x1: np.ndarray, x2: np.ndarray, mask: Optional[np.ndarray]
    ) -> float:
        # images arrive in [-1, 1]; data range mapped to [0, 1]
        a = (images_to_torch(x1) + 1) / 2
        b = (images_to_torch(x2) + 1) / 2
        a, b = a.double(), b.double()
        size = min(a.shape[2], a.shape[3])
        scales = 1
        while scales < len(MSSSIM_WEIGHTS) and size // 2 >= self.window:
            scales += 1
            size //= 2
        weights = np.asarray(MSSSIM_WEIGHTS[:scales])
        weights = weights / weights.sum()
        m = None if mask is None else np.asarray(mask, dtype=np.float64)
        values, kept = [], []
        for s in range(scales):
            ssim_map, cs_map = self._ssim_maps(a, b)
            chosen = ssim_map if s == scales - 1 else cs_map
            grid = chosen.squeeze(0)
            if m is None:
                values.append(float(grid.mean()))
                kept.append(s)
            else:
                lm = _layer_mask(m, grid.shape[0], grid.shape[1])
                count = lm.sum()
                if count > 0:
                    values.append(float((grid.numpy() * lm).sum() / count))
                    kept.append(s)
            if s < scales - 1:
                a = F.avg_pool2d(a, 2)
                b = F.avg_pool2d(b, 2)
        if not values:
            raise ProtocolError("mask empty at every similarity scale")
        weights = weights[kept] / weights[kept].sum()
        values = np.clip(np.asarray(values), 0.0, 1.0)
        return float(np.prod(values**weights))

    def distance(
        self, x1: np.ndarray, x2: np.ndarray, mask: Optional[np.ndarray]
    ) -> float:
        return 1.0 - self.masked_msssim(x1, x2, mask)


def masked_distance(
    backend: DistanceBackend,
    x1: np.ndarray,
    x2: np.ndarray,
    mask: Optional[ClassMask | np.ndarray] = None,
) -> float:
    """Masked image distance; absent mask means all ones."""
    if x1.shape != x2.shape:
        raise ShapeError(f"image shapes differ: {x1.shape} vs {x2.shape}")
    m = _mask_values(mask)
    if m is not None and m.shape != x1.shape[:2]:
        raise ShapeError(f"mask shape {m.shape} does not match images {x1.shape[:2]}")
    return backend.distance(x1, x2, m)


# ---------------------------------------------------------------------------
# quality monitors


def fit_gaussian(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False)
    return mu, np.atleast_2d(sigma)


def gaussian_frechet(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray
) -> float:
    """Fréchet distance between two Gaussians; clamps round-off negatives."""
    diff = mu1 - mu2
    prod = sigma1 @ sigma2
    sqrt_prod, _ = scipy_linalg.sqrtm(prod, disp=False)
    if np.iscomplexobj(sqrt_prod):
        sqrt_prod = sqrt_prod.real
    trace_term = np.trace(sigma1 + sigma2 - 2 * sqrt_prod)
    value = float(diff @ diff + trace_term)
    if value < 0:
        if value < -1e-6:
            warnings.warn(f"clamping negative Fréchet value {value:.3g} to 0")
        value = 0.0
    return value


def fid_lite(
    real_images: np.ndarray,
    generated_images: np.ndarray,
    backbone: FeatureBackbone,
) -> float:
    """Fréchet distance between Gaussian fits of pooled backbone features."""
    if real_images.shape[0] < 2 or generated_images.shape[0] < 2:
        raise DimensionError("need at least 2 samples per side")
    mu1, s1 = fit_gaussian(backbone.pooled(real_images))
    mu2, s2 = fit_gaussian(backbone.pooled(generated_images))
    return gaussian_frechet(mu1, s1, mu2, s2)


class Segmenter(Protocol):
    def predict_labels(self, images: np.ndarray) -> np.ndarray: ...


def miou_proxy(
    segmenter: Segmenter,
    images: np.ndarray,
    label_grids: Sequence[np.ndarray],
) -> float:
    """Mean per-class IoU of predictions against the input labels.

    Classes absent from both predictions and ground truth everywhere are
    excluded from the mean.
    """
    preds = segmenter.predict_labels(images)
    truths = np.stack([np.asarray(g) for g in label_grids])
    if preds.shape != truths.shape:
        raise ShapeError(f"prediction shape {preds.shape} != labels {truths.shape}")
    classes = np.union1d(np.unique(preds), np.unique(truths))
    ious = []
    for c in classes:
        inter = np.logical_and(preds == c, truths == c).sum()
        union = np.logical_or(preds == c, truths == c).sum()
        if union > 0:
            ious.append(inter / union)
    if not ious:
        raise ProtocolError("no classes present anywhere")
    return float(np.mean(ious))
