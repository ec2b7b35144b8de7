"""Procedurally generated scenes with exact segmentation labels.

Each class has a fixed appearance family (anchor color + texture rule) with a
few discrete modes plus continuous variation, so a dataset rendered from one
spec genuinely contains several appearance modes per class. Label maps are
exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError
from .scene_core import LabelMap

LayoutRule = Literal["rects", "blobs", "stripes", "mixed"]

# family id -> (anchor RGB in [0,1], texture rule)
FAMILIES = (
    ("backdrop", (0.20, 0.35, 0.85)),
    ("stripes", (0.85, 0.25, 0.20)),
    ("checker", (0.20, 0.80, 0.30)),
    ("speckle", (0.75, 0.30, 0.80)),
    ("gradient", (0.90, 0.60, 0.15)),
    ("rings", (0.15, 0.80, 0.85)),
)

# discrete within-class modes
STRIPE_FREQS = (2, 4, 8)
CHECKER_CELLS = (2, 4, 8)
SPECKLE_GRAINS = (1, 2, 4)
RING_FREQS = (2, 4, 8)
GRADIENT_DIRS = 4
BACKDROP_LEVELS = (0.35, 0.6, 0.85)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    class_count: int = 6
    height: int = 64
    width: int = 64
    layout_rule: LayoutRule = "mixed"

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.height < 8 or self.width < 8:
            raise ConfigurationError("canvas must be at least 8 x 8")
        if self.layout_rule not in ("rects", "blobs", "stripes", "mixed"):
            raise ConfigurationError(f"unknown layout rule {self.layout_rule!r}")

    def family_name(self, class_id: int) -> str:
        return FAMILIES[class_id % len(FAMILIES)][0]

    def class_names(self) -> list[str]:
        names = []
        for c in range(self.class_count):
            base = self.family_name(c)
            suffix = c // len(FAMILIES)
            names.append(base if suffix == 0 else f"{base}_{suffix}")
        return names

    def to_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "height": self.height,
            "width": self.width,
            "layout_rule": self.layout_rule,
        }

    @staticmethod
    def from_dict(d: dict) -> "SyntheticSceneSpec":
        return SyntheticSceneSpec(**d)


def _layout_rects(rng: np.random.Generator, spec: SyntheticSceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.int32)
    count = int(rng.integers(3, 6))
    for _ in range(count):
        c = int(rng.integers(1, spec.class_count))
        rh = int(rng.integers(h // 4, 3 * h // 4))
        rw = int(rng.integers(w // 4, 3 * w // 4))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        labels[r0 : r0 + rh, c0 : c0 + rw] = c
    return labels


def _layout_blobs(rng: np.random.Generator, spec: SyntheticSceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    sigma = max(h, w) / 8.0
    fields = np.stack(
        [
            gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
            for _ in range(spec.class_count)
        ]
    )
    return np.argmax(fields, axis=0).astype(np.int32)


def _layout_stripes(rng: np.random.Generator, spec: SyntheticSceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    horizontal = bool(rng.integers(0, 2))
    extent = h if horizontal else w
    bands = int(rng.integers(3, 7))
    cuts = np.sort(rng.choice(np.arange(1, extent), size=bands - 1, replace=False))
    edges = np.concatenate([[0], cuts, [extent]])
    labels = np.zeros((h, w), dtype=np.int32)
    for i in range(bands):
        c = int(rng.integers(0, spec.class_count))
        if horizontal:
            labels[edges[i] : edges[i + 1], :] = c
        else:
            labels[:, edges[i] : edges[i + 1]] = c
    return labels


_LAYOUTS = {"rects": _layout_rects, "blobs": _layout_blobs, "stripes": _layout_stripes}


def _texture(family: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Texture field in [0, 1]; one discrete mode plus continuous variation."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if family == "backdrop":
        level = BACKDROP_LEVELS[int(rng.integers(len(BACKDROP_LEVELS)))]
        field = gaussian_filter(rng.standard_normal((h, w)), max(h, w) / 6.0, mode="wrap")
        span = field.max() - field.min()
        field = (field - field.min()) / span if span > 0 else np.zeros_like(field)
        return np.clip(level + 0.25 * (field - 0.5), 0.0, 1.0)
    if family == "stripes":
        freq = STRIPE_FREQS[int(rng.integers(len(STRIPE_FREQS)))]
        phase = rng.uniform(0, 2 * np.pi)
        coord = yy if rng.integers(0, 2) else xx
        size = h if coord is yy else w
        return 0.5 + 0.5 * np.sin(2 * np.pi * freq * coord / size + phase)
    if family == "checker":
        cell = CHECKER_CELLS[int(rng.integers(len(CHECKER_CELLS)))]
        off_y, off_x = int(rng.integers(cell)), int(rng.integers(cell))
        parity = (((yy + off_y) // cell) + ((xx + off_x) // cell)) % 2
        lo = rng.uniform(0.0, 0.25)
        return lo + (1.0 - lo) * parity
    if family == "speckle":
        grain = SPECKLE_GRAINS[int(rng.integers(len(SPECKLE_GRAINS)))]
        coarse = rng.random(((h + grain - 1) // grain, (w + grain - 1) // grain))
        field = np.repeat(np.repeat(coarse, grain, axis=0), grain, axis=1)[:h, :w]
        amp = rng.uniform(0.5, 1.0)
        return 1.0 - amp + amp * field
    if family == "gradient":
        direction = int(rng.integers(GRADIENT_DIRS))
        ramp = {0: xx / max(w - 1, 1), 1: 1 - xx / max(w - 1, 1),
                2: yy / max(h - 1, 1), 3: 1 - yy / max(h - 1, 1)}[direction]
        lo = rng.uniform(0.0, 0.3)
        return lo + (1.0 - lo) * ramp
    if family == "rings":
        freq = RING_FREQS[int(rng.integers(len(RING_FREQS)))]
        cy = h / 2 + rng.uniform(-h / 4, h / 4)
        cx = w / 2 + rng.uniform(-w / 4, w / 4)
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return 0.5 + 0.5 * np.sin(2 * np.pi * freq * r / max(h, w))
    raise ConfigurationError(f"unknown appearance family {family!r}")


def render_synthetic_pair(spec: SyntheticSceneSpec, seed: int) -> tuple[np.ndarray, LabelMap]:
    """Render one scene; returns (RGB image in [-1, 1], exact label map)."""
    layout_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A70]))
    rule = spec.layout_rule
    if rule == "mixed":
        rule = ("rects", "blobs", "stripes")[int(layout_rng.integers(3))]
    labels = _LAYOUTS[rule](layout_rng, spec)
    label_map = LabelMap(labels=labels, class_count=spec.class_count)

    image = np.zeros((spec.height, spec.width, 3), dtype=np.float64)
    for c in label_map.present_classes():
        region_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAE5, c]))
        family, anchor = FAMILIES[c % len(FAMILIES)]
        texture = _texture(family, region_rng, spec.height, spec.width)
        jitter = region_rng.uniform(-0.08, 0.08, size=3)
        color = np.clip(np.asarray(anchor) + jitter, 0.0, 1.0)
        shaded = color[None, None, :] * (0.45 + 0.55 * texture[:, :, None])
        region = labels == c
        image[region] = shaded[region]
    return (2.0 * image - 1.0).astype(np.float32), label_map


def sample_scenes(spec: SyntheticSceneSpec, seed: int, count: int) -> list[tuple[np.ndarray, LabelMap]]:
    """Deterministic list of scenes; scene i uses a seed derived from (seed, i)."""
    root = np.random.SeedSequence([seed, 0x5CE5])
    child_seeds = root.generate_state(count)
    return [render_synthetic_pair(spec, int(s)) for s in child_seeds]


def scene_seed_stream(spec: SyntheticSceneSpec, seed: int):
    """Infinite deterministic stream of (scene_seed, image, label_map)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57AE]))
    while True:
        s = int(rng.integers(0, 2**63 - 1))
        image, label_map = render_synthetic_pair(spec, s)
        yield s, image, label_map
