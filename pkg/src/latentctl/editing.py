"""User-facing edit semantics: stacks, composition, per-block injection.

An edit adds alpha * (class mask o direction) to the latent tensor seen by
the generator blocks inside the spec's injection range. Specs on disjoint
classes commute bitwise because class masks partition the canvas.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ClassIdError, ConflictError, ShapeError
from .generator import ToyGenerator, generate_per_block
from .scene_core import EditVector, LabelMap, LatentCode3D, class_mask

DirectionLookup = Callable[[int, int], EditVector]
"""(class id, direction index) -> direction vector."""


@dataclass(frozen=True)
class EditSpec:
    class_id: int
    alpha: float
    direction: Optional[EditVector] = None
    direction_index: Optional[int] = None
    blocks: Optional[tuple[int, int]] = None  # inclusive [first, last]; None = all

    def __post_init__(self):
        if (self.direction is None) == (self.direction_index is None):
            raise ConflictError("give exactly one of direction or direction_index")
        if self.blocks is not None:
            first, last = self.blocks
            if first < 0 or last < first:
                raise ConflictError(f"invalid block interval {self.blocks}")

    def block_range(self, depth: int) -> tuple[int, int]:
        if self.blocks is None:
            return 0, depth - 1
        first, last = self.blocks
        if last >= depth:
            raise ConflictError(f"block interval {self.blocks} exceeds depth {depth}")
        return first, last

    def resolve(self, lookup: Optional[DirectionLookup]) -> EditVector:
        if self.direction is not None:
            return self.direction
        if lookup is None:
            raise ConflictError("direction_index given but no direction lookup")
        return lookup(self.class_id, self.direction_index)

    def to_dict(self) -> dict:
        d: dict = {"classId": self.class_id, "alpha": self.alpha}
        if self.direction_index is not None:
            d["k"] = self.direction_index
        else:
            d["vector"] = [float(v) for v in self.direction.values]
        if self.blocks is not None:
            d["blocks"] = [self.blocks[0], self.blocks[1]]
        return d

    @staticmethod
    def from_dict(d: dict) -> "EditSpec":
        blocks = d.get("blocks")
        return EditSpec(
            class_id=int(d["classId"]),
            alpha=float(d["alpha"]),
            direction=None if "vector" not in d else EditVector(np.asarray(d["vector"], dtype=np.float32)),
            direction_index=None if "k" not in d else int(d["k"]),
            blocks=None if blocks is None else (int(blocks[0]), int(blocks[1])),
        )


@dataclass(frozen=True)
class EditStack:
    specs: tuple[EditSpec, ...]
    base_seed: int = 0
    label_map_id: str = ""

    def __post_init__(self):
        seen = set()
        for spec in self.specs:
            key = (spec.class_id, spec.blocks)
            if key in seen:
                raise ConflictError(
                    f"duplicate edit for class {spec.class_id} on range {spec.blocks}"
                )
            seen.add(key)

    def to_dict(self) -> dict:
        return {
            "labelMapId": self.label_map_id,
            "seed": self.base_seed,
            "edits": [s.to_dict() for s in self.specs],
        }

    @staticmethod
    def from_dict(d: dict) -> "EditStack":
        return EditStack(
            specs=tuple(EditSpec.from_dict(e) for e in d.get("edits", [])),
            base_seed=int(d.get("seed", 0)),
            label_map_id=str(d.get("labelMapId", "")),
        )


def _check_stack_against(stack_specs: Sequence[EditSpec], y: LabelMap, depth: int) -> None:
    present = set(y.present_classes())
    for spec in stack_specs:
        if spec.class_id not in present:
            raise ClassIdError(f"class {spec.class_id} not present in the label map")
        spec.block_range(depth)
    ranges: dict[int, list[tuple[int, int]]] = {}
    for spec in stack_specs:
        r = spec.block_range(depth)
        for other in ranges.get(spec.class_id, []):
            if r[0] <= other[1] and other[0] <= r[1]:
                raise ConflictError(
                    f"class {spec.class_id} edited twice on overlapping block ranges"
                )
        ranges.setdefault(spec.class_id, []).append(r)


def _per_block_values(
    specs: Sequence[EditSpec],
    z: LatentCode3D,
    y: LabelMap,
    depth: int,
    lookup: Optional[DirectionLookup],
) -> list[np.ndarray]:
    deltas: list[tuple[tuple[int, int], np.ndarray]] = []
    for spec in specs:
        v = spec.resolve(lookup)
        if v.channels != z.channels:
            raise ShapeError(
                f"direction channels {v.channels} != latent channels {z.channels}"
            )
        mask = class_mask(y, spec.class_id)
        delta = np.float32(spec.alpha) * mask.values[:, :, None].astype(np.float32) * v.values
        deltas.append((spec.block_range(depth), delta))
    per_block = []
    for b in range(depth):
        values = z.values
        for (first, last), delta in deltas:
            if first <= b <= last:
                values = values + delta
        per_block.append(values)
    return per_block


def apply_edit_stack(
    model: ToyGenerator,
    z: LatentCode3D,
    y: LabelMap,
    stack: EditStack,
    lookup: Optional[DirectionLookup] = None,
) -> np.ndarray:
    """Render the stacked edits; empty stacks reproduce the base image bitwise."""
    depth = model.config.blocks
    _check_stack_against(stack.specs, y, depth)
    per_block = _per_block_values(stack.specs, z, y, depth, lookup)
    return generate_per_block(model, per_block, y)


def edited_latents_per_block(
    specs: Sequence[EditSpec],
    z: LatentCode3D,
    y: LabelMap,
    depth: int,
    lookup: Optional[DirectionLookup] = None,
) -> list[np.ndarray]:
    """The per-block latent tensors a stack would feed the generator."""
    _check_stack_against(specs, y, depth)
    return _per_block_values(specs, z, y, depth, lookup)


def compose_directions(
    v1: EditVector, alpha1: float, v2: EditVector, alpha2: float
) -> EditVector:
    """alpha1 * v1 + alpha2 * v2, deliberately not renormalized."""
    if v1.channels != v2.channels:
        raise ShapeError(f"channel mismatch: {v1.channels} vs {v2.channels}")
    return EditVector(
        values=np.float32(alpha1) * v1.values + np.float32(alpha2) * v2.values,
        unit_norm=False,
    )


def layerwise_inject(
    model: ToyGenerator,
    z: LatentCode3D,
    y: LabelMap,
    assignments: Sequence[EditSpec],
    lookup: Optional[DirectionLookup] = None,
) -> np.ndarray:
    """Per-block injection; assignment intervals must be pairwise disjoint."""
    depth = model.config.blocks
    resolved = [spec.block_range(depth) for spec in assignments]
    for i in range(len(resolved)):
        for j in range(i + 1, len(resolved)):
            a, b = resolved[i], resolved[j]
            if a[0] <= b[1] and b[0] <= a[1]:
                raise ConflictError(
                    f"assignments {i} and {j} overlap on blocks {a} / {b}"
                )
    _check_stack_against(assignments, y, depth)
    per_block = _per_block_values(assignments, z, y, depth, lookup)
    return generate_per_block(model, per_block, y)
