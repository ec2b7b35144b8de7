"""Small spatially-conditioned generator with 3D latent injection.

The generator upsamples from a coarse grid to the canvas through blocks whose
normalization layers are modulated by (one-hot label map, latent tensor)
resampled to each block's resolution. Activations can be tapped per block at
the modulated-normalization site or at the block output, with gradients
available with respect to the latent tensor.

A per-pixel linear generator (no nonlinearity, no cross-pixel mixing) is
provided as an analytic verification oracle.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError
from .scene_core import LabelMap, LatentCode3D, nearest_indices

TAP_SITES = ("norm_act", "block_out")


@dataclass(frozen=True)
class GeneratorConfig:
    latent_channels: int = 64
    class_count: int = 6
    height: int = 64
    width: int = 64
    blocks: int = 4
    base_width: int = 64
    min_width: int = 16

    def __post_init__(self):
        if min(self.latent_channels, self.class_count, self.base_width) <= 0:
            raise ConfigurationError("channel counts must be positive")
        stride = 2**self.blocks
        if self.height % stride or self.width % stride:
            raise ConfigurationError(
                f"canvas {self.height}x{self.width} must be divisible by 2^{self.blocks}"
            )
        if self.height // stride < 2 or self.width // stride < 2:
            raise ConfigurationError("base grid must be at least 2x2")

    @property
    def base_size(self) -> tuple[int, int]:
        s = 2**self.blocks
        return self.height // s, self.width // s

    def block_size(self, index: int) -> tuple[int, int]:
        s = 2 ** (self.blocks - 1 - index)
        return self.height // s, self.width // s

    def block_widths(self) -> list[int]:
        return [max(self.base_width // (2**i), self.min_width) for i in range(self.blocks)]

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "class_count": self.class_count,
            "height": self.height,
            "width": self.width,
            "blocks": self.blocks,
            "base_width": self.base_width,
            "min_width": self.min_width,
        }

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        return GeneratorConfig(**d)


@dataclass(frozen=True)
class FeatureTapSpec:
    """Ordered (block index, site) pairs naming which activations to expose."""

    taps: tuple[tuple[int, str], ...]

    def __post_init__(self):
        if not self.taps:
            raise ConfigurationError("tap spec must be non-empty")
        for block, site in self.taps:
            if site not in TAP_SITES:
                raise ConfigurationError(f"unknown tap site {site!r}")
            if block < 0:
                raise ConfigurationError(f"negative block index {block}")

    def validate_for(self, config: GeneratorConfig) -> None:
        for block, _ in self.taps:
            if block >= config.blocks:
                raise ConfigurationError(
                    f"tap block {block} out of range for {config.blocks}-block generator"
                )

    def names(self) -> list[str]:
        return [f"b{block}.{site}" for block, site in self.taps]

    def to_list(self) -> list[list]:
        return [[block, site] for block, site in self.taps]

    @staticmethod
    def from_list(items: Sequence[Sequence]) -> "FeatureTapSpec":
        return FeatureTapSpec(taps=tuple((int(b), str(s)) for b, s in items))

    @staticmethod
    def all_norm_acts(config: GeneratorConfig) -> "FeatureTapSpec":
        return FeatureTapSpec(taps=tuple((i, "norm_act") for i in range(config.blocks)))


def _resample_nearest(t: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Downsample (B, C, H, W) by index selection; matches the numpy mask rule."""
    if t.shape[2] == height and t.shape[3] == width:
        return t
    rows = torch.from_numpy(nearest_indices(t.shape[2], height)).to(t.device)
    cols = torch.from_numpy(nearest_indices(t.shape[3], width)).to(t.device)
    return t.index_select(2, rows).index_select(3, cols)


class CondNorm(nn.Module):
    """Parameter-free batch norm with spatially-adaptive scale and bias.

    Batch statistics are frozen at inference, so normalization is per-pixel
    and a masked latent edit cannot leak through spatial statistics. The
    modulation has a 3x3 context branch and a strictly pointwise branch; the
    pointwise branch gives latent directions a pathway whose support never
    crosses the class-mask boundary.
    """

    def __init__(self, width: int, cond_channels: int, hidden: int = 64):
        super().__init__()
        self.norm = nn.BatchNorm2d(width, affine=False)
        self.shared = nn.Conv2d(cond_channels, hidden, 3, padding=1)
        self.point = nn.Conv2d(cond_channels, hidden, 1)
        self.gamma = nn.Conv2d(hidden, width, 3, padding=1)
        self.beta = nn.Conv2d(hidden, width, 3, padding=1)
        self.gamma_point = nn.Conv2d(hidden, width, 1)
        self.beta_point = nn.Conv2d(hidden, width, 1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        a = F.silu(self.shared(cond))
        p = F.silu(self.point(cond))
        gamma = self.gamma(a) + self.gamma_point(p)
        beta = self.beta(a) + self.beta_point(p)
        return self.norm(x) * (1 + gamma) + beta


class GenBlock(nn.Module):
    def __init__(self, in_width: int, out_width: int, cond_channels: int):
        super().__init__()
        self.norm1 = CondNorm(in_width, cond_channels)
        self.conv1 = nn.Conv2d(in_width, out_width, 3, padding=1)
        self.norm2 = CondNorm(out_width, cond_channels)
        self.conv2 = nn.Conv2d(out_width, out_width, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_width, out_width, 1) if in_width != out_width else nn.Identity()
        )

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        norm_act = self.norm1(x, cond)
        h = self.conv1(F.silu(norm_act))
        h = self.conv2(F.silu(self.norm2(h, cond)))
        out = h + self.skip(x)
        return out, norm_act


class ToyGenerator(nn.Module):
    """Label-driven stem; the latent enters only through the per-block
    spatially-adaptive norms, so latent edits act at each block's resolution
    through local modulation convs."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        cond_channels = config.class_count + config.latent_channels
        widths = config.block_widths()
        self.conv_in = nn.Conv2d(config.class_count, config.base_width, 3, padding=1)
        self.blocks = nn.ModuleList()
        in_w = config.base_width
        for out_w in widths:
            self.blocks.append(GenBlock(in_w, out_w, cond_channels))
            in_w = out_w
        self.conv_out = nn.Conv2d(in_w, 3, 3, padding=1)

    def forward(
        self,
        z: torch.Tensor,
        y_onehot: torch.Tensor,
        z_per_block: Optional[Sequence[torch.Tensor]] = None,
    ) -> tuple[torch.Tensor, dict[tuple[int, str], torch.Tensor]]:
        """Returns (image in [-1, 1], all tapped activations).

        z and each entry of z_per_block are (B, D, H, W) at full canvas
        resolution; they are resampled to each block's resolution internally.
        """
        cfg = self.config
        if z_per_block is not None:
            if len(z_per_block) != cfg.blocks:
                raise ShapeError(f"expected {cfg.blocks} per-block latents")
            zs = list(z_per_block)
        else:
            zs = [z] * cfg.blocks
        bh, bw = cfg.base_size
        x = self.conv_in(_resample_nearest(y_onehot, bh, bw))
        taps: dict[tuple[int, str], torch.Tensor] = {}
        for i, block in enumerate(self.blocks):
            h, w = cfg.block_size(i)
            x = F.interpolate(x, size=(h, w), mode="nearest")
            cond = _resample_nearest(torch.cat([y_onehot, zs[i]], dim=1), h, w)
            x, norm_act = block(x, cond)
            taps[(i, "norm_act")] = norm_act
            taps[(i, "block_out")] = x
        image = torch.tanh(self.conv_out(F.silu(x)))
        return image, taps

    def first_latent_weight(self) -> np.ndarray:
        """Latent-channel slices of the first latent-consuming weights (the
        first block's two modulation convs), flattened to (out, D)."""
        parts = []
        for conv in (self.blocks[0].norm1.shared, self.blocks[0].norm1.point):
            w = conv.weight.detach()
            z_slice = w[:, self.config.class_count :, :, :]
            parts.append(
                z_slice.permute(0, 2, 3, 1).reshape(-1, self.config.latent_channels)
            )
        return torch.cat(parts, dim=0).numpy()


class PatchDiscriminator(nn.Module):
    """Small conditional patch critic over (image, one-hot labels)."""

    def __init__(self, config: GeneratorConfig, width: int = 48):
        super().__init__()
        in_ch = 3 + config.class_count
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, 1, 3, padding=1),
        )

    def forward(self, image: torch.Tensor, y_onehot: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([image, y_onehot], dim=1))


class ConvSegmenter(nn.Module):
    def __init__(self, class_count: int, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, class_count, 1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.net(image)

    def predict_labels(self, images: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            logits = self.net(images_to_torch(images))
        return logits.argmax(dim=1).numpy().astype(np.int32)


def build_generator(config: GeneratorConfig, seed: int) -> ToyGenerator:
    torch.manual_seed(seed)
    model = ToyGenerator(config)
    model.eval()  # inference-mode normalization statistics
    return model


def parameter_hash(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# numpy <-> torch plumbing


def onehot_labels(label_map: LabelMap) -> torch.Tensor:
    """One-hot (1, C, H, W) float tensor."""
    labels = torch.from_numpy(np.array(label_map.labels)).long()
    onehot = F.one_hot(labels, num_classes=label_map.class_count)
    return onehot.permute(2, 0, 1).unsqueeze(0).float()


def latent_to_torch(values: np.ndarray) -> torch.Tensor:
    """(H, W, D) -> (1, D, H, W)."""
    return torch.from_numpy(np.array(values)).permute(2, 0, 1).unsqueeze(0).float()


def images_to_torch(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) or (H, W, 3) -> (N, 3, H, W)."""
    arr = np.array(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2)


def torch_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) -> (H, W, 3) float32."""
    return t.squeeze(0).permute(1, 2, 0).detach().numpy().astype(np.float32)


def _check_dims(config: GeneratorConfig, z_values: np.ndarray, y: LabelMap) -> None:
    if z_values.shape != (config.height, config.width, config.latent_channels):
        raise ShapeError(
            f"latent shape {z_values.shape} does not match config "
            f"({config.height}, {config.width}, {config.latent_channels})"
        )
    if (y.height, y.width) != (config.height, config.width) or y.class_count != config.class_count:
        raise ShapeError("label map does not match generator config")


def generate(model: ToyGenerator, z: LatentCode3D | np.ndarray, y: LabelMap) -> np.ndarray:
    """Render one image; pure given (weights, z, y)."""
    values = z.values if isinstance(z, LatentCode3D) else np.asarray(z)
    _check_dims(model.config, values, y)
    with torch.no_grad():
        image, _ = model(latent_to_torch(values), onehot_labels(y))
    return torch_to_image(image)


def generate_per_block(
    model: ToyGenerator, z_per_block: Sequence[np.ndarray], y: LabelMap
) -> np.ndarray:
    """Render with a separate latent tensor seen by each block."""
    for values in z_per_block:
        _check_dims(model.config, values, y)
    zs = [latent_to_torch(v) for v in z_per_block]
    with torch.no_grad():
        image, _ = model(zs[0], onehot_labels(y), z_per_block=zs)
    return torch_to_image(image)


def tap_features(
    model: ToyGenerator,
    z: LatentCode3D | np.ndarray,
    y: LabelMap,
    taps: FeatureTapSpec,
) -> dict[str, np.ndarray]:
    """Named activations (C, h, w) at each tap for one (z, y)."""
    taps.validate_for(model.config)
    values = z.values if isinstance(z, LatentCode3D) else np.asarray(z)
    _check_dims(model.config, values, y)
    with torch.no_grad():
        _, bank = model(latent_to_torch(values), onehot_labels(y))
    return {
        name: bank[key].squeeze(0).numpy()
        for name, key in zip(taps.names(), taps.taps)
    }


# ---------------------------------------------------------------------------
# Feature sources: a uniform differentiable view for direction discovery


class ToyFeatureSource:
    """Tapped generator activations for a fixed label map."""

    def __init__(self, model: ToyGenerator, y: LabelMap, taps: FeatureTapSpec):
        taps.validate_for(model.config)
        if (y.height, y.width) != (model.config.height, model.config.width):
            raise ShapeError("label map does not match generator canvas")
        model.eval()  # keep normalization statistics frozen under autograd
        self.model = model
        self.taps = taps
        self.latent_channels = model.config.latent_channels
        self.height = model.config.height
        self.width = model.config.width
        self._dtype = next(model.parameters()).dtype
        self._onehot = onehot_labels(y).to(self._dtype)

    def feature_maps(self, z: torch.Tensor) -> list[torch.Tensor]:
        onehot = self._onehot.expand(z.shape[0], -1, -1, -1)
        _, bank = self.model(z.to(self._dtype), onehot)
        return [bank[key] for key in self.taps.taps]


@dataclass(frozen=True)
class LinearOracleGenerator:
    """x[p] = A_{y[p]} z[p] exactly; per-pixel, no mixing, no nonlinearity."""

    matrices: np.ndarray  # (C, 3, D)

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=np.float64)
        if m.ndim != 3 or m.shape[1] != 3:
            raise ShapeError(f"expected (C, 3, D) matrices, got {m.shape}")
        object.__setattr__(self, "matrices", m)

    @property
    def class_count(self) -> int:
        return self.matrices.shape[0]

    @property
    def latent_channels(self) -> int:
        return self.matrices.shape[2]


def random_linear_oracle(seed: int, class_count: int, channels: int) -> LinearOracleGenerator:
    rng = np.random.default_rng(seed)
    return LinearOracleGenerator(
        matrices=rng.standard_normal((class_count, 3, channels))
    )


def linear_oracle_generate(
    oracle: LinearOracleGenerator, z: LatentCode3D | np.ndarray, y: LabelMap
) -> np.ndarray:
    values = z.values if isinstance(z, LatentCode3D) else np.asarray(z)
    if values.shape[:2] != (y.height, y.width):
        raise ShapeError("latent canvas does not match label map")
    if values.shape[2] != oracle.latent_channels:
        raise ShapeError("latent channels do not match oracle matrices")
    per_pixel = oracle.matrices[y.labels]  # (H, W, 3, D)
    return np.einsum("hwod,hwd->hwo", per_pixel, values.astype(np.float64))


class OracleFeatureSource:
    """The oracle image as a single full-resolution feature map (differentiable)."""

    def __init__(self, oracle: LinearOracleGenerator, y: LabelMap, dtype=torch.float64):
        if oracle.class_count <= int(y.labels.max()):
            raise ShapeError("oracle has fewer classes than the label map")
        self.latent_channels = oracle.latent_channels
        self.height, self.width = y.height, y.width
        self._matrices = torch.from_numpy(oracle.matrices).to(dtype)  # (C, 3, D)
        onehot = onehot_labels(y).to(dtype)  # (1, C, H, W)
        # per-pixel matrix (3, D, H, W)
        self._pixel_mat = torch.einsum("cod,chw->odhw", self._matrices, onehot.squeeze(0))
        self._dtype = dtype

    def feature_maps(self, z: torch.Tensor) -> list[torch.Tensor]:
        return [torch.einsum("odhw,bdhw->bohw", self._pixel_mat, z.to(self._dtype))]


class IdentityFeatureSource:
    """Features are the latent tensor itself; used to sanity-check baselines."""

    def __init__(self, channels: int, height: int, width: int):
        self.latent_channels = channels
        self.height = height
        self.width = width

    def feature_maps(self, z: torch.Tensor) -> list[torch.Tensor]:
        return [z]
