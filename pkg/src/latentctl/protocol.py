"""Control-quality metric family over a fixed evaluation protocol.

Scores come in a local flavor (one class edited at a time, masked distance)
and a global flavor (every class edited at once, unmasked distance):

  - control diversity: distance across different directions, same code
  - outside-class diversity: same pairs, complement mask (lower is better)
  - control consistency: distance across codes at a fixed direction

All random choices (initial code seeds, edit intensities, per-class direction
picks) are pre-materialized into per-map plans from the protocol seed alone,
so every method is scored against identical draws and an independent
re-implementation can replay them. Each pairwise score is reported under two
normalizations: the mean over unordered pairs, and the historical 1/(Z*K)
prefactor over ordered pairs (literal variant).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .backbone import DistanceBackend, masked_distance
from .discovery import DirectionSet
from .errors import ProtocolError
from .scene_core import ClassMask, LabelMap, LatentCode3D, apply_direction, build_latent, class_mask

RenderFn = Callable[[int, np.ndarray], np.ndarray]
"""(map index, latent values H x W x D) -> image H x W x 3."""

ImageCollector = Callable[[int, int, int, np.ndarray], None]
"""(map index, code index, edit index, rendered image) -> None."""


@dataclass(frozen=True)
class EvalProtocol:
    codes_per_map: int = 5
    edits_per_map: int = 10
    seed: int = 0
    class_ids: Optional[tuple[int, ...]] = None
    min_class_pixels: int = 8

    def __post_init__(self):
        if self.codes_per_map < 1 or self.edits_per_map < 1:
            raise ProtocolError("need at least one code and one edit per map")

    def to_dict(self) -> dict:
        return {
            "codes_per_map": self.codes_per_map,
            "edits_per_map": self.edits_per_map,
            "seed": self.seed,
            "class_ids": None if self.class_ids is None else list(self.class_ids),
            "min_class_pixels": self.min_class_pixels,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalProtocol":
        d = dict(d)
        if d.get("class_ids") is not None:
            d["class_ids"] = tuple(d["class_ids"])
        return EvalProtocol(**d)


@dataclass(frozen=True)
class MapPlan:
    """Frozen randomness for one label map; identical for every method."""

    code_seeds: tuple[int, ...]
    local_alphas: dict[int, float]
    edit_alphas: tuple[float, ...]
    edit_selectors: tuple[dict[int, float], ...]  # per edit: class -> u in [0, 1)


def build_plans(
    protocol: EvalProtocol,
    map_count: int,
    class_ids: Sequence[int],
    alpha_bound: float,
) -> list[MapPlan]:
    """One plan per map; draws depend only on (protocol seed, map index)."""
    classes = sorted(class_ids)
    plans = []
    for m in range(map_count):
        rng = np.random.default_rng(np.random.SeedSequence([protocol.seed, 0xE7A1, m]))
        code_seeds = tuple(int(s) for s in rng.integers(0, 2**31 - 1, size=protocol.codes_per_map))
        local_alphas = {c: float(rng.uniform(-alpha_bound, alpha_bound)) for c in classes}
        edit_alphas = []
        edit_selectors = []
        for _ in range(protocol.edits_per_map):
            edit_alphas.append(float(rng.uniform(-alpha_bound, alpha_bound)))
            edit_selectors.append({c: float(rng.random()) for c in classes})
        plans.append(
            MapPlan(
                code_seeds=code_seeds,
                local_alphas=local_alphas,
                edit_alphas=tuple(edit_alphas),
                edit_selectors=tuple(edit_selectors),
            )
        )
    return plans


@dataclass(frozen=True)
class ScorePair:
    pair_mean: float
    literal: float


@dataclass(frozen=True)
class LocalScores:
    mcd: ScorePair
    mod: ScorePair
    mcc: ScorePair
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)


@dataclass(frozen=True)
class GlobalScores:
    mcd: ScorePair
    mcc: ScorePair


def _classes_for(
    protocol: EvalProtocol, direction_sets: dict[int, DirectionSet]
) -> list[int]:
    if protocol.class_ids is not None:
        missing = [c for c in protocol.class_ids if c not in direction_sets]
        if missing:
            raise ProtocolError(f"no direction sets for classes {missing}")
        return sorted(protocol.class_ids)
    return sorted(direction_sets)


def local_scores(
    render: RenderFn,
    maps: Sequence[LabelMap],
    direction_sets: dict[int, DirectionSet],
    protocol: EvalProtocol,
    backend: DistanceBackend,
    alpha_bound: float,
    plans: Optional[Sequence[MapPlan]] = None,
) -> LocalScores:
    """All three local scores from one shared render bank per (class, map)."""
    classes = _classes_for(protocol, direction_sets)
    z_count = protocol.codes_per_map
    if plans is None:
        plans = build_plans(protocol, len(maps), classes, alpha_bound)
    per_class: dict[int, dict[str, float]] = {}
    channels = direction_sets[classes[0]].channels

    for c in classes:
        k_count = direction_sets[c].count
        pairs_k = k_count * (k_count - 1) // 2
        pairs_z = z_count * (z_count - 1) // 2
        cd_maps: list[float] = []
        od_maps: list[float] = []
        cc_maps: list[float] = []
        for m, y in enumerate(maps):
            mask = class_mask(y, c)
            if mask.pixel_count < protocol.min_class_pixels:
                continue
            alpha = plans[m].local_alphas[c]
            images: dict[tuple[int, int], np.ndarray] = {}
            for zi, zseed in enumerate(plans[m].code_seeds):
                z = build_latent(zseed, channels, y.height, y.width)
                for k in range(k_count):
                    edited = apply_direction(z, direction_sets[c].vector(k), alpha, mask)
                    images[(zi, k)] = render(m, edited.values)
            s_cd = 0.0
            for zi in range(z_count):
                for k1 in range(k_count):
                    for k2 in range(k1 + 1, k_count):
                        s_cd += masked_distance(backend, images[(zi, k1)], images[(zi, k2)], mask)
            cd_maps.append(s_cd / (z_count * pairs_k))
            if mask.pixel_count < y.height * y.width:
                comp = mask.complement()
                s_od = 0.0
                for zi in range(z_count):
                    for k1 in range(k_count):
                        for k2 in range(k1 + 1, k_count):
                            s_od += masked_distance(
                                backend, images[(zi, k1)], images[(zi, k2)], comp
                            )
                od_maps.append(s_od / (z_count * pairs_k))
            if z_count >= 2:
                s_cc = 0.0
                for k in range(k_count):
                    for z1 in range(z_count):
                        for z2 in range(z1 + 1, z_count):
                            s_cc += masked_distance(
                                backend, images[(z1, k)], images[(z2, k)], mask
                            )
                cc_maps.append(s_cc / (k_count * pairs_z))
        if not cd_maps:
            warnings.warn(f"class {c} absent from every evaluation map; excluded")
            continue
        entry = {
            "mcd": float(np.mean(cd_maps)),
            "mcd_literal": float(np.mean(cd_maps)) * (k_count - 1),
        }
        if od_maps:
            entry["mod"] = float(np.mean(od_maps))
            entry["mod_literal"] = entry["mod"] * (k_count - 1)
        if cc_maps:
            entry["mcc"] = float(np.mean(cc_maps))
            entry["mcc_literal"] = entry["mcc"] * (z_count - 1)
        per_class[c] = entry

    if not per_class:
        raise ProtocolError("no class was present in any evaluation map")

    def mean_over_classes(key: str) -> float:
        vals = [v[key] for v in per_class.values() if key in v]
        return float(np.mean(vals)) if vals else float("nan")

    if protocol.codes_per_map < 2:
        mcc = ScorePair(float("nan"), float("nan"))
    else:
        mcc = ScorePair(mean_over_classes("mcc"), mean_over_classes("mcc_literal"))
    return LocalScores(
        mcd=ScorePair(mean_over_classes("mcd"), mean_over_classes("mcd_literal")),
        mod=ScorePair(mean_over_classes("mod"), mean_over_classes("mod_literal")),
        mcc=mcc,
        per_class=per_class,
    )


def _global_edit_values(
    z: "LatentCode3D",
    masks: dict[int, ClassMask],
    direction_sets: dict[int, DirectionSet],
    selectors: dict[int, float],
    alpha: float,
) -> np.ndarray:
    # chain the single-class edit primitive in sorted class order so the
    # float realization is the one the edit arithmetic is specified (and
    # unit-tested) to produce
    edited = z
    for c in sorted(masks):
        k = int(selectors[c] * direction_sets[c].count)
        edited = apply_direction(edited, direction_sets[c].vector(k), alpha, masks[c])
    return edited.values


def global_scores(
    render: RenderFn,
    maps: Sequence[LabelMap],
    direction_sets: dict[int, DirectionSet],
    protocol: EvalProtocol,
    backend: DistanceBackend,
    alpha_bound: float,
    plans: Optional[Sequence[MapPlan]] = None,
    collector: Optional[ImageCollector] = None,
) -> GlobalScores:
    """Pairwise unmasked distances over global edits and over initial codes."""
    if protocol.edits_per_map < 2:
        raise ProtocolError("global diversity needs at least 2 edits per map")
    if protocol.codes_per_map < 2:
        raise ProtocolError("global consistency needs at least 2 codes per map")
    classes = _classes_for(protocol, direction_sets)
    if plans is None:
        plans = build_plans(protocol, len(maps), classes, alpha_bound)
    channels = direction_sets[classes[0]].channels
    z_count, e_count = protocol.codes_per_map, protocol.edits_per_map
    pairs_e = e_count * (e_count - 1) // 2
    pairs_z = z_count * (z_count - 1) // 2

    mcd_maps, mcc_maps = [], []
    for m, y in enumerate(maps):
        # a global edit touches every protocol-scoped class present in the
        # map; classes outside the scope stay unedited
        masks = {}
        for c in classes:
            mask = class_mask(y, c) if c in y.present_classes() else None
            if mask is not None and mask.pixel_count >= protocol.min_class_pixels:
                masks[c] = mask
        if not masks:
            continue
        images: dict[tuple[int, int], np.ndarray] = {}
        for zi, zseed in enumerate(plans[m].code_seeds):
            z = build_latent(zseed, channels, y.height, y.width)
            for e in range(e_count):
                values = _global_edit_values(
                    z,
                    masks,
                    direction_sets,
                    plans[m].edit_selectors[e],
                    plans[m].edit_alphas[e],
                )
                image = render(m, values)
                images[(zi, e)] = image
                if collector is not None:
                    collector(m, zi, e, image)
        s_cd = 0.0
        for zi in range(z_count):
            for e1 in range(e_count):
                for e2 in range(e1 + 1, e_count):
                    s_cd += masked_distance(backend, images[(zi, e1)], images[(zi, e2)], None)
        mcd_maps.append(s_cd / (z_count * pairs_e))
        s_cc = 0.0
        for e in range(e_count):
            for z1 in range(z_count):
                for z2 in range(z1 + 1, z_count):
                    s_cc += masked_distance(backend, images[(z1, e)], images[(z2, e)], None)
        mcc_maps.append(s_cc / (e_count * pairs_z))
    if not mcd_maps:
        raise ProtocolError("no evaluation map contained a scoreable class")
    mcd = float(np.mean(mcd_maps))
    mcc = float(np.mean(mcc_maps))
    # global scores are plain pair means; both normalizations coincide
    return GlobalScores(mcd=ScorePair(mcd, mcd), mcc=ScorePair(mcc, mcc))


# ---------------------------------------------------------------------------
# single-score wrappers matching the operation-level contracts


def mcd_local(render, maps, direction_sets, protocol, backend, alpha_bound) -> float:
    return local_scores(render, maps, direction_sets, protocol, backend, alpha_bound).mcd.pair_mean


def mod_score(render, maps, direction_sets, protocol, backend, alpha_bound) -> float:
    return local_scores(render, maps, direction_sets, protocol, backend, alpha_bound).mod.pair_mean


def mcc_local(render, maps, direction_sets, protocol, backend, alpha_bound) -> float:
    if protocol.codes_per_map < 2:
        raise ProtocolError("consistency needs at least 2 initial codes")
    return local_scores(render, maps, direction_sets, protocol, backend, alpha_bound).mcc.pair_mean


def mcd_global(render, maps, direction_sets, protocol, backend, alpha_bound) -> float:
    return global_scores(render, maps, direction_sets, protocol, backend, alpha_bound).mcd.pair_mean


def mcc_global(render, maps, direction_sets, protocol, backend, alpha_bound) -> float:
    return global_scores(render, maps, direction_sets, protocol, backend, alpha_bound).mcc.pair_mean


# ---------------------------------------------------------------------------
# report container


METRIC_COLUMNS = ("mcd", "mcc", "mod", "mcd_l", "mcc_l", "fid_lite", "miou_proxy")


@dataclass
class MethodRow:
    method: str
    scores: dict[str, float]
    literal: dict[str, float]

    def to_dict(self) -> dict:
        return {"method": self.method, "scores": self.scores, "literal": self.literal}


@dataclass
class MetricReport:
    rows: list[MethodRow]
    protocol: dict
    backend_id: str
    alpha_bound: float
    map_count: int
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "protocol": self.protocol,
            "backend_id": self.backend_id,
            "alpha_bound": self.alpha_bound,
            "map_count": self.map_count,
            "alpha_policy": "uniform[-n, n]; one draw per (map, class) locally and per (map, edit) globally",
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        d = json.loads(text)
        rows = [MethodRow(r["method"], r["scores"], r["literal"]) for r in d["rows"]]
        return MetricReport(
            rows=rows,
            protocol=d["protocol"],
            backend_id=d["backend_id"],
            alpha_bound=d["alpha_bound"],
            map_count=d["map_count"],
            extras=d.get("extras", {}),
        )

    def to_text(self) -> str:
        columns = [c for c in METRIC_COLUMNS if any(c in r.scores for r in self.rows)]
        header = ["method"] + list(columns)
        lines = []
        table = [header]
        for row in self.rows:
            cells = [row.method]
            for c in columns:
                v = row.scores.get(c)
                cells.append("-" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.4f}")
            table.append(cells)
        widths = [max(len(r[i]) for r in table) for i in range(len(header))]
        for r in table:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))
        lines.append("")
        lines.append(
            f"backend={self.backend_id}  maps={self.map_count}  "
            f"codes/map={self.protocol.get('codes_per_map')}  "
            f"edits/map={self.protocol.get('edits_per_map')}  "
            f"alpha_bound={self.alpha_bound:.4f}  seed={self.protocol.get('seed')}"
        )
        return "\n".join(lines)
