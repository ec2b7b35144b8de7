"""Class-specific latent direction discovery.

The optimized objective combines three masked feature-space terms: a
diversity term pushing the K directions of one class apart, a
disentanglement term suppressing change outside the class region, and a
consistency term tying a direction's effect together across initial latent
codes. Directions live in latent channel space, are re-projected to unit
norm after every optimizer step, and are scaled by an intensity drawn from
[-n, n] where n is the mean channel norm of the latent code.

Masked feature distances use one convention everywhere: per-pixel L2 norm
over channels of the feature difference, multiplied by the layer-resolution
mask, averaged over mask-positive pixels, then averaged over tapped layers.

Baselines: unit-normalized random directions, PCA on generator features
pulled back to latent space through a linear regression, and the
eigendecomposition of the first latent-consuming weight tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch

from .errors import (
    ClassCoverageError,
    ConfigurationError,
    DimensionError,
    EmptyBatchError,
    NumericalRankError,
)
from .generator import FeatureTapSpec
from .scene_core import ClassMask, EditVector, LabelMap, class_mask, nearest_indices

METHOD_IDS = ("ctrl_sis", "random", "ganspace", "sefa")


class FeatureSource(Protocol):
    latent_channels: int
    height: int
    width: int

    def feature_maps(self, z: torch.Tensor) -> list[torch.Tensor]: ...


SourceFactory = Callable[[LabelMap], FeatureSource]
MapSampler = Callable[[np.random.Generator], LabelMap]


@dataclass(frozen=True)
class DiscoveryConfig:
    direction_count: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 2000
    alpha_bound: Optional[float] = None  # None: caller supplies the latent-norm bound
    min_class_area: float = 0.01
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    consistency_differences: bool = False
    map_pool_size: int = 64

    def __post_init__(self):
        if self.direction_count < 2:
            raise ConfigurationError("need K >= 2 for pairwise terms")
        if self.alpha_bound is not None and self.alpha_bound <= 0:
            raise ConfigurationError("alpha bound must be positive")
        if not 0 <= self.min_class_area < 1:
            raise ConfigurationError("min_class_area must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "direction_count": self.direction_count,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "alpha_bound": self.alpha_bound,
            "min_class_area": self.min_class_area,
            "weights": list(self.weights),
            "consistency_differences": self.consistency_differences,
            "map_pool_size": self.map_pool_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "DiscoveryConfig":
        d = dict(d)
        d["weights"] = tuple(d.get("weights", (1.0, 1.0, 1.0)))
        return DiscoveryConfig(**d)


@dataclass(frozen=True)
class DirectionSet:
    class_id: int
    directions: np.ndarray  # (K, D), unit rows
    method: str
    taps: Optional[FeatureTapSpec] = None
    config_hash: str = ""
    seed: int = 0

    def __post_init__(self):
        arr = np.asarray(self.directions, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise DimensionError(f"directions must be (K, D), got {arr.shape}")
        if self.method not in METHOD_IDS:
            raise ConfigurationError(f"unknown method id {self.method!r}")
        if self.method == "ctrl_sis" and arr.shape[0] < 2:
            raise ConfigurationError("pairwise losses need K >= 2")
        norms = np.linalg.norm(arr, axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise ConfigurationError(f"directions must be unit norm, got {norms}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "directions", arr)

    @property
    def count(self) -> int:
        return self.directions.shape[0]

    @property
    def channels(self) -> int:
        return self.directions.shape[1]

    def vector(self, k: int) -> EditVector:
        return EditVector(values=self.directions[k], unit_norm=True)


@dataclass
class LossBreakdown:
    l_div: torch.Tensor
    l_dis: torch.Tensor
    l_const: torch.Tensor
    total: torch.Tensor

    def detached(self) -> dict[str, float]:
        return {
            "l_div": float(self.l_div),
            "l_dis": float(self.l_dis),
            "l_const": float(self.l_const),
            "total": float(self.total),
        }


@dataclass
class BatchElement:
    label_map: LabelMap
    mask: ClassMask
    z1: np.ndarray  # (D,) base vector
    z2: np.ndarray
    alpha: float


# ---------------------------------------------------------------------------
# masked feature distances


def _mask_for_layer(mask_values: np.ndarray, h: int, w: int, dtype, device) -> torch.Tensor:
    rows = nearest_indices(mask_values.shape[0], h)
    cols = nearest_indices(mask_values.shape[1], w)
    reduced = mask_values[np.ix_(rows, cols)].astype(np.float64)
    return torch.from_numpy(np.array(reduced)).to(dtype=dtype, device=device)


def masked_bank_distance(
    feats_a: Sequence[torch.Tensor],
    feats_b: Sequence[torch.Tensor],
    mask_values: np.ndarray,
) -> Optional[torch.Tensor]:
    """Mean over layers of the masked per-pixel feature distance.

    feats_a/feats_b are per-layer (C, h, w) tensors for one sample. Layers
    whose downsampled mask is empty are skipped; returns None if every layer
    is empty (the skip signal).
    """
    per_layer = []
    for fa, fb in zip(feats_a, feats_b):
        m = _mask_for_layer(mask_values, fa.shape[-2], fa.shape[-1], fa.dtype, fa.device)
        count = m.sum()
        if float(count) == 0.0:
            continue
        # vector_norm keeps a zero subgradient at zero difference; a manual
        # sqrt would propagate NaN through mask-suppressed pixels
        dist = torch.linalg.vector_norm(fa - fb, dim=0)
        per_layer.append((dist * m).sum() / count)
    if not per_layer:
        return None
    return torch.stack(per_layer).mean()


def _pairwise_mean(
    banks: Sequence[Sequence[torch.Tensor]], mask_values: np.ndarray
) -> Optional[torch.Tensor]:
    """Mean masked distance over unordered direction pairs."""
    k = len(banks)
    terms = []
    for i in range(k):
        for j in range(i + 1, k):
            d = masked_bank_distance(banks[i], banks[j], mask_values)
            if d is not None:
                terms.append(d)
    if not terms:
        return None
    return torch.stack(terms).mean()


def loss_diversity(
    banks: Sequence[Sequence[torch.Tensor]], mask: ClassMask
) -> Optional[torch.Tensor]:
    """Negated mean pairwise masked distance; more-different edits go more negative."""
    if len(banks) < 2:
        raise ConfigurationError("diversity needs at least two direction banks")
    mean = _pairwise_mean(banks, mask.values)
    return None if mean is None else -mean


def loss_disentanglement(
    banks: Sequence[Sequence[torch.Tensor]], mask: ClassMask
) -> Optional[torch.Tensor]:
    """Mean pairwise distance outside the class region."""
    if len(banks) < 2:
        raise ConfigurationError("disentanglement needs at least two direction banks")
    return _pairwise_mean(banks, 1 - mask.values)


def loss_consistency(
    banks_z1: Sequence[Sequence[torch.Tensor]],
    banks_z2: Sequence[Sequence[torch.Tensor]],
    mask: ClassMask,
) -> Optional[torch.Tensor]:
    """Mean over directions of the masked distance between the two codes' edits."""
    if len(banks_z1) != len(banks_z2):
        raise ConfigurationError("consistency banks must share the direction count")
    terms = []
    for a, b in zip(banks_z1, banks_z2):
        d = masked_bank_distance(a, b, mask.values)
        if d is not None:
            terms.append(d)
    if not terms:
        return None
    return torch.stack(terms).mean()


# ---------------------------------------------------------------------------
# objective


def _edited_latents(
    base: np.ndarray,
    mask_values: np.ndarray,
    directions: torch.Tensor,
    alpha: float,
    height: int,
    width: int,
) -> torch.Tensor:
    """(K, D, H, W): replicated base plus alpha * (mask o v_k)."""
    dtype = directions.dtype
    base_t = torch.from_numpy(np.array(base)).to(dtype)
    z = base_t[None, :, None, None].expand(directions.shape[0], -1, height, width)
    m = torch.from_numpy(np.array(mask_values, dtype=np.float64)).to(dtype)
    return z + alpha * m[None, None, :, :] * directions[:, :, None, None]


def _split_banks(layers: Sequence[torch.Tensor], count: int) -> list[list[torch.Tensor]]:
    """Per-layer (K, C, h, w) tensors -> per-direction banks of (C, h, w)."""
    return [[layer[k] for layer in layers] for k in range(count)]


def _replicated(base: np.ndarray, dtype, height: int, width: int) -> torch.Tensor:
    base_t = torch.from_numpy(np.array(base)).to(dtype)
    return base_t[None, :, None, None].expand(1, -1, height, width)


def ctrl_sis_objective(
    source_factory: SourceFactory,
    directions: torch.Tensor,
    batch: Sequence[BatchElement],
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    consistency_differences: bool = False,
) -> LossBreakdown:
    """Assemble the three loss terms over a batch, differentiable in `directions`.

    Each element contributes its diversity/disentanglement terms from the
    first latent code and its consistency term from the pair; terms whose
    mask is empty at every tapped layer are omitted. With
    `consistency_differences` the consistency term compares edit deltas
    h(z, v_k) - h(z, 0) instead of the raw edited features.
    """
    if not batch:
        raise EmptyBatchError("no usable batch elements")
    k = directions.shape[0]
    # edits always use unit directions; differentiating through the
    # normalization keeps the radial gradient component out of the optimizer,
    # so adaptive per-coordinate rescaling cannot bias the constrained optimum
    directions = directions / torch.linalg.vector_norm(directions, dim=1, keepdim=True)
    div_terms, dis_terms, const_terms = [], [], []
    for element in batch:
        source = source_factory(element.label_map)
        h, w = source.height, source.width
        z1 = _edited_latents(element.z1, element.mask.values, directions, element.alpha, h, w)
        z2 = _edited_latents(element.z2, element.mask.values, directions, element.alpha, h, w)
        stacked = torch.cat([z1, z2], dim=0)
        if consistency_differences:
            stacked = torch.cat(
                [
                    stacked,
                    _replicated(element.z1, directions.dtype, h, w),
                    _replicated(element.z2, directions.dtype, h, w),
                ],
                dim=0,
            )
        feats = source.feature_maps(stacked)
        banks1 = _split_banks([f[:k] for f in feats], k)
        banks2 = _split_banks([f[k : 2 * k] for f in feats], k)
        d = loss_diversity(banks1, element.mask)
        if d is not None:
            div_terms.append(d)
        s = loss_disentanglement(banks1, element.mask)
        if s is not None:
            dis_terms.append(s)
        if consistency_differences:
            ref1 = [f[2 * k] for f in feats]
            ref2 = [f[2 * k + 1] for f in feats]
            cbanks1 = [[f - r for f, r in zip(bank, ref1)] for bank in banks1]
            cbanks2 = [[f - r for f, r in zip(bank, ref2)] for bank in banks2]
        else:
            cbanks1, cbanks2 = banks1, banks2
        c = loss_consistency(cbanks1, cbanks2, element.mask)
        if c is not None:
            const_terms.append(c)

    dtype = directions.dtype

    def reduce(terms: list[torch.Tensor]) -> torch.Tensor:
        if not terms:
            return torch.zeros((), dtype=dtype)
        return torch.stack(terms).mean()

    l_div, l_dis, l_const = reduce(div_terms), reduce(dis_terms), reduce(const_terms)
    total = weights[0] * l_div + weights[1] * l_dis + weights[2] * l_const
    return LossBreakdown(l_div=l_div, l_dis=l_dis, l_const=l_const, total=total)


# ---------------------------------------------------------------------------
# optimization loop


def _unit_rows(arr: np.ndarray) -> np.ndarray:
    return arr / np.linalg.norm(arr, axis=1, keepdims=True)


def sample_class_batch(
    maps: Sequence[tuple[LabelMap, ClassMask]],
    rng: np.random.Generator,
    batch_size: int,
    channels: int,
    alpha_bound: float,
) -> list[BatchElement]:
    batch = []
    for _ in range(batch_size):
        y, mask = maps[int(rng.integers(len(maps)))]
        batch.append(
            BatchElement(
                label_map=y,
                mask=mask,
                z1=rng.standard_normal(channels).astype(np.float32),
                z2=rng.standard_normal(channels).astype(np.float32),
                alpha=float(rng.uniform(-alpha_bound, alpha_bound)),
            )
        )
    return batch


def build_map_pool(
    map_sampler: MapSampler,
    class_id: int,
    rng: np.random.Generator,
    pool_size: int,
    min_class_area: float,
    max_attempts: int = 2000,
) -> list[tuple[LabelMap, ClassMask]]:
    """Label maps where the class covers at least the minimum area fraction."""
    pool: list[tuple[LabelMap, ClassMask]] = []
    attempts = 0
    while len(pool) < pool_size and attempts < max_attempts:
        y = map_sampler(rng)
        attempts += 1
        mask = class_mask(y, class_id)
        if mask.pixel_count >= min_class_area * y.height * y.width and mask.pixel_count > 0:
            pool.append((y, mask))
    if not pool:
        raise ClassCoverageError(
            f"class {class_id} never covered >= {min_class_area:.2%} of a sampled map"
        )
    return pool


def optimize_directions(
    source_factory: SourceFactory,
    class_id: int,
    map_sampler: MapSampler,
    cfg: DiscoveryConfig,
    seed: int,
    alpha_bound: Optional[float] = None,
    taps: Optional[FeatureTapSpec] = None,
    config_hash: str = "",
    step_callback: Optional[Callable[[int, LossBreakdown, np.ndarray], None]] = None,
    dtype: torch.dtype = torch.float32,
) -> DirectionSet:
    """Gradient-optimize K unit directions for one class.

    Per step: sample a batch of (label map containing the class, two latent
    codes, one shared intensity), take one decoupled-weight-decay adaptive
    step on the directions, then re-project every row to unit channel norm.
    Deterministic per seed.
    """
    bound = cfg.alpha_bound if cfg.alpha_bound is not None else alpha_bound
    if bound is None or bound <= 0:
        raise ConfigurationError("alpha bound must be provided (mean latent norm)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15C]))
    pool = build_map_pool(map_sampler, class_id, rng, cfg.map_pool_size, cfg.min_class_area)
    channels = source_factory(pool[0][0]).latent_channels

    init = _unit_rows(rng.standard_normal((cfg.direction_count, channels)))
    directions = torch.tensor(init, dtype=dtype, requires_grad=True)
    optimizer = torch.optim.AdamW([directions], lr=cfg.learning_rate)

    for step in range(cfg.steps):
        batch = sample_class_batch(pool, rng, cfg.batch_size, channels, bound)
        breakdown = ctrl_sis_objective(
            source_factory,
            directions,
            batch,
            weights=cfg.weights,
            consistency_differences=cfg.consistency_differences,
        )
        recomposed = (
            cfg.weights[0] * float(breakdown.l_div.detach())
            + cfg.weights[1] * float(breakdown.l_dis.detach())
            + cfg.weights[2] * float(breakdown.l_const.detach())
        )
        if abs(recomposed - float(breakdown.total.detach())) > 1e-5 * max(1.0, abs(recomposed)):
            raise ConfigurationError("loss breakdown does not recompose to the total")
        optimizer.zero_grad()
        breakdown.total.backward()
        optimizer.step()
        with torch.no_grad():
            directions /= directions.norm(dim=1, keepdim=True)
        if step_callback is not None:
            step_callback(step, breakdown, directions.detach().numpy().copy())

    final = _unit_rows(directions.detach().numpy().astype(np.float64)).astype(np.float32)
    return DirectionSet(
        class_id=class_id,
        directions=final,
        method="ctrl_sis",
        taps=taps,
        config_hash=config_hash,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# baselines


def random_directions(
    count: int, channels: int, seed: int, class_id: int = 0
) -> DirectionSet:
    if count < 1:
        raise ConfigurationError("need at least one direction")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A2D]))
    arr = _unit_rows(rng.standard_normal((count, channels)))
    return DirectionSet(
        class_id=class_id,
        directions=arr.astype(np.float32),
        method="random",
        seed=seed,
    )


def ganspace_directions(
    source: FeatureSource,
    sample_count: int,
    count: int,
    seed: int,
    class_id: int = 0,
    batch_size: int = 32,
    taps: Optional[FeatureTapSpec] = None,
    config_hash: str = "",
) -> tuple[DirectionSet, np.ndarray]:
    """PCA of pooled generator features pulled back to latent channel space.

    Samples base latents, collects spatially pooled tapped features, fits a
    least-squares map from latent space to feature space, and maps the top
    principal components back through its pseudo-inverse. Returns the
    direction set (ordered by explained variance) and the PCA eigenvalues.
    """
    channels = source.latent_channels
    if sample_count < channels:
        raise ConfigurationError(
            f"need at least D={channels} samples, got {sample_count}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6A25]))
    latents = rng.standard_normal((sample_count, channels)).astype(np.float32)
    pooled = []
    with torch.no_grad():
        for start in range(0, sample_count, batch_size):
            chunk = latents[start : start + batch_size]
            z = torch.from_numpy(chunk)[:, :, None, None].expand(
                -1, -1, source.height, source.width
            )
            feats = source.feature_maps(z.contiguous())
            pooled.append(
                np.concatenate(
                    [f.mean(dim=(2, 3)).cpu().numpy().astype(np.float64) for f in feats],
                    axis=1,
                )
            )
    features = np.concatenate(pooled, axis=0)  # (N, F)

    x = latents.astype(np.float64)
    x_aug = np.concatenate([x, np.ones((sample_count, 1))], axis=1)
    coef, _, _, _ = np.linalg.lstsq(x_aug, features, rcond=None)
    regression = coef[:-1]  # (D, F): feature response per latent channel
    sing = np.linalg.svd(regression, compute_uv=False)
    rank = int((sing > sing[0] * 1e-10).sum()) if sing.size else 0
    if rank < min(channels, features.shape[1]):
        raise NumericalRankError(
            f"latent-to-feature regression rank {rank} < {min(channels, features.shape[1])}"
        )

    centered = features - features.mean(axis=0, keepdims=True)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if count > min(vt.shape[0], channels):
        raise DimensionError(f"cannot extract {count} components")
    explained = (svals**2) / max(sample_count - 1, 1)
    directions = []
    for i in range(count):
        pulled, _, _, _ = np.linalg.lstsq(regression.T, vt[i], rcond=None)
        directions.append(pulled)
    arr = _unit_rows(np.stack(directions))
    ds = DirectionSet(
        class_id=class_id,
        directions=arr.astype(np.float32),
        method="ganspace",
        taps=taps,
        config_hash=config_hash,
        seed=seed,
    )
    return ds, explained[:count]


def sefa_directions(
    weight: np.ndarray, count: int, class_id: int = 0, config_hash: str = ""
) -> DirectionSet:
    """Top eigenvectors of W^T W for the first latent-consuming weight W.

    `weight` is (outputs, D) with outputs flattened over all non-latent dims;
    closed form, no sampling.
    """
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"weight must be 2D (outputs, D), got {w.shape}")
    channels = w.shape[1]
    if count > channels:
        raise DimensionError(f"asked for {count} directions in {channels} channels")
    gram = w.T @ w
    eigvals, eigvecs = np.linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1][:count]
    arr = _unit_rows(eigvecs[:, order].T)
    return DirectionSet(
        class_id=class_id,
        directions=arr.astype(np.float32),
        method="sefa",
        config_hash=config_hash,
    )
