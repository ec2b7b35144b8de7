"""Experiment orchestration: one config drives train / discover / evaluate.

Every artifact embeds the hash of the producing config, and every random
choice is derived from the single global seed, so a full pipeline re-run
reproduces checkpoint, archive, and report byte-for-byte on one backend.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .archive import (
    CheckpointContainer,
    DirectionsArchive,
    canonical_json,
    config_hash,
    file_hash,
    load_checkpoint,
    load_directions_archive,
    save_checkpoint,
    save_directions_archive,
)
from .backbone import FeatureBackbone, MsssimBackend, fid_lite, miou_proxy
from .discovery import (
    DirectionSet,
    DiscoveryConfig,
    METHOD_IDS,
    ganspace_directions,
    optimize_directions,
    random_directions,
    sefa_directions,
)
from .errors import ConfigurationError
from .generator import (
    FeatureTapSpec,
    GeneratorConfig,
    ToyFeatureSource,
    ToyGenerator,
    latent_to_torch,
    onehot_labels,
    torch_to_image,
)
from .protocol import (
    EvalProtocol,
    MethodRow,
    MetricReport,
    build_plans,
    global_scores,
    local_scores,
)
from .scene_core import (
    LabelMap,
    average_channel_norm,
    build_latent,
    gaussian_latent_sampler,
)
from .synthetic import SyntheticSceneSpec, render_synthetic_pair, sample_scenes
from .training import TrainConfig, train_generator

ABLATION_VARIANTS = {
    "full": (1.0, 1.0, 1.0),
    "no_div": (0.0, 1.0, 1.0),
    "no_dis": (1.0, 0.0, 1.0),
    "no_const": (1.0, 1.0, 0.0),
}


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(canonical_json(list(parts)).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    taps: Optional[FeatureTapSpec] = None
    eval_maps: int = 12
    ganspace_samples: int = 512
    norm_samples: int = 4096
    output_dir: str = "runs/latest"

    def resolved_taps(self) -> FeatureTapSpec:
        taps = self.taps or FeatureTapSpec.all_norm_acts(self.generator)
        taps.validate_for(self.generator)
        return taps

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "scene": self.scene.to_dict(),
            "generator": self.generator.to_dict(),
            "train": self.train.to_dict(),
            "discovery": self.discovery.to_dict(),
            "protocol": self.protocol.to_dict(),
            "taps": self.resolved_taps().to_list(),
            "eval_maps": self.eval_maps,
            "ganspace_samples": self.ganspace_samples,
            "norm_samples": self.norm_samples,
            "output_dir": self.output_dir,
        }

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return config_hash(d)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        return ExperimentConfig(
            seed=int(d.get("seed", 0)),
            scene=SyntheticSceneSpec.from_dict(d.get("scene", {})),
            generator=GeneratorConfig.from_dict(d.get("generator", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            discovery=DiscoveryConfig.from_dict(d.get("discovery", {})),
            protocol=EvalProtocol.from_dict(d.get("protocol", {})),
            taps=None if "taps" not in d else FeatureTapSpec.from_list(d["taps"]),
            eval_maps=int(d.get("eval_maps", 12)),
            ganspace_samples=int(d.get("ganspace_samples", 512)),
            norm_samples=int(d.get("norm_samples", 4096)),
            output_dir=str(d.get("output_dir", "runs/latest")),
        )

    @staticmethod
    def from_json_file(path: str | Path) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# runtime around a loaded checkpoint


@dataclass
class Runtime:
    container: CheckpointContainer
    model: ToyGenerator
    checkpoint_hash: str

    @staticmethod
    def from_path(path: str | Path) -> "Runtime":
        container = load_checkpoint(path)
        return Runtime(
            container=container,
            model=container.build_generator(),
            checkpoint_hash=file_hash(path),
        )

    @property
    def config(self) -> GeneratorConfig:
        return self.container.generator_config

    @property
    def scene_spec(self) -> SyntheticSceneSpec:
        return self.container.scene_spec

    @property
    def channel_norm(self) -> float:
        return self.container.channel_norm

    def make_render(self, maps: Sequence[LabelMap]):
        onehots = [onehot_labels(y) for y in maps]

        def render(m: int, values: np.ndarray) -> np.ndarray:
            with torch.no_grad():
                image, _ = self.model(latent_to_torch(values), onehots[m])
            return torch_to_image(image)

        return render


# ---------------------------------------------------------------------------
# commands


def run_train(config: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = train_generator(config.scene, config.generator, config.train, config.seed)
    norm_seed = derive_seed(config.seed, "channel-norm")
    norm = average_channel_norm(
        gaussian_latent_sampler(norm_seed, config.generator.latent_channels),
        config.norm_samples,
    )
    checkpoint_path = out / "checkpoint.zip"
    save_checkpoint(
        checkpoint_path,
        models.generator,
        models.discriminator,
        models.segmenter,
        config.scene,
        config.seed,
        channel_norm={"value": norm, "samples": config.norm_samples, "seed": norm_seed},
        train_config=config.train.to_dict(),
    )
    (out / "training_log.json").write_text(json.dumps(models.log, indent=1))
    return checkpoint_path


def _label_map_sampler(spec: SyntheticSceneSpec):
    def sampler(rng: np.random.Generator) -> LabelMap:
        _, label_map = render_synthetic_pair(spec, int(rng.integers(0, 2**63 - 1)))
        return label_map

    return sampler


def discover_direction_sets(
    runtime: Runtime,
    config: ExperimentConfig,
    methods: Sequence[str],
    classes: Sequence[int],
    weights: Optional[tuple[float, float, float]] = None,
    seed_override: Optional[int] = None,
) -> dict[str, dict[int, DirectionSet]]:
    """One DirectionSet per (method, class); deterministic per config seed."""
    for method in methods:
        if method not in METHOD_IDS:
            raise ConfigurationError(f"unknown method id {method!r}")
    if not classes:
        raise ConfigurationError("class list must not be empty")
    taps = config.resolved_taps()
    cfg = config.discovery
    if weights is not None:
        cfg = DiscoveryConfig.from_dict({**cfg.to_dict(), "weights": list(weights)})
    base_seed = config.seed if seed_override is None else seed_override
    n = runtime.channel_norm
    d = runtime.config.latent_channels
    disc_hash = config_hash({"discovery": cfg.to_dict(), "taps": taps.to_list()})
    out: dict[str, dict[int, DirectionSet]] = {}

    for method in methods:
        per_class: dict[int, DirectionSet] = {}
        if method == "sefa":
            base = sefa_directions(
                runtime.model.first_latent_weight(), cfg.direction_count,
                config_hash=disc_hash,
            )
            for c in classes:
                per_class[c] = DirectionSet(
                    class_id=c, directions=base.directions, method="sefa",
                    taps=taps, config_hash=disc_hash,
                )
        elif method == "ganspace":
            map_seed = derive_seed(base_seed, "ganspace-map")
            _, y = render_synthetic_pair(runtime.scene_spec, map_seed)
            source = ToyFeatureSource(runtime.model, y, taps)
            base, _ = ganspace_directions(
                source,
                config.ganspace_samples,
                cfg.direction_count,
                seed=derive_seed(base_seed, "ganspace"),
                taps=taps,
                config_hash=disc_hash,
            )
            for c in classes:
                per_class[c] = DirectionSet(
                    class_id=c, directions=base.directions, method="ganspace",
                    taps=taps, config_hash=disc_hash, seed=base.seed,
                )
        elif method == "random":
            for c in classes:
                per_class[c] = DirectionSet(
                    class_id=c,
                    directions=random_directions(
                        cfg.direction_count, d, derive_seed(base_seed, "random", c)
                    ).directions,
                    method="random",
                    seed=derive_seed(base_seed, "random", c),
                )
        else:  # ctrl_sis
            sampler = _label_map_sampler(runtime.scene_spec)
            for c in classes:
                per_class[c] = optimize_directions(
                    lambda y: ToyFeatureSource(runtime.model, y, taps),
                    c,
                    sampler,
                    cfg,
                    seed=derive_seed(base_seed, "ctrl_sis", c),
                    alpha_bound=n,
                    taps=taps,
                    config_hash=disc_hash,
                )
        out[method] = per_class
    return out


def run_discover(
    config: ExperimentConfig,
    checkpoint_path: str | Path,
    methods: Sequence[str],
    classes: Sequence[int],
    out_path: str | Path | None = None,
) -> Path:
    runtime = Runtime.from_path(checkpoint_path)
    sets = discover_direction_sets(runtime, config, methods, classes)
    out_path = Path(out_path or Path(config.output_dir) / "directions.zip")
    records, matrices = [], {}
    for method, per_class in sets.items():
        for c, ds in per_class.items():
            key = f"{method}/{c}"
            records.append(
                {
                    "class_id": c,
                    "method": method,
                    "seed": ds.seed,
                    "config_hash": ds.config_hash,
                    "taps": None if ds.taps is None else ds.taps.to_list(),
                    "array_key": key,
                }
            )
            matrices[key] = ds.directions
    save_directions_archive(
        out_path, runtime.checkpoint_hash, records, matrices,
        experiment_hash=config.hash(),
    )
    return out_path


def archive_direction_sets(archive: DirectionsArchive) -> dict[str, dict[int, DirectionSet]]:
    sets: dict[str, dict[int, DirectionSet]] = {}
    for record in archive.records():
        ds = DirectionSet(
            class_id=record["class_id"],
            directions=archive.arrays[record["array_key"]],
            method=record["method"],
            taps=None if record.get("taps") is None else FeatureTapSpec.from_list(record["taps"]),
            config_hash=record.get("config_hash", ""),
            seed=record.get("seed", 0),
        )
        sets.setdefault(record["method"], {})[record["class_id"]] = ds
    return sets


def make_backend(backend_id: str, seed: int = 0):
    if backend_id in ("features", "seeded-random-features"):
        return FeatureBackbone(seed=seed)
    if backend_id == "msssim":
        return MsssimBackend()
    raise ConfigurationError(f"unknown distance backend {backend_id!r}")


ALL_METRICS = ("mcd", "mcc", "mod", "mcd_l", "mcc_l", "fid_lite", "miou_proxy")


def evaluate_archive(
    runtime: Runtime,
    config: ExperimentConfig,
    sets_by_method: dict[str, dict[int, DirectionSet]],
    backend_id: str = "features",
    metrics: Sequence[str] = ALL_METRICS,
) -> MetricReport:
    for m in metrics:
        if m not in ALL_METRICS:
            raise ConfigurationError(f"unknown metric {m!r}")
    spec = runtime.scene_spec
    eval_seed = derive_seed(config.seed, "eval-maps")
    scenes = sample_scenes(spec, eval_seed, config.eval_maps)
    real_images = np.stack([img for img, _ in scenes])
    maps = [y for _, y in scenes]
    render = runtime.make_render(maps)
    backend = make_backend(backend_id, seed=derive_seed(config.seed, "backend"))
    n = runtime.channel_norm
    protocol = config.protocol
    segmenter = runtime.container.build_segmenter()

    want_local = any(m in metrics for m in ("mcd_l", "mcc_l", "mod"))
    want_global = any(m in metrics for m in ("mcd", "mcc"))
    want_quality = any(m in metrics for m in ("fid_lite", "miou_proxy"))

    rows: list[MethodRow] = []
    if want_quality:
        base_images = []
        base_labels = []
        # code seeds are the first draws of each map plan, so the baseline
        # renders use the same initial codes as every method row
        plans = build_plans(protocol, len(maps), [0], n)
        for m, y in enumerate(maps):
            for zseed in plans[m].code_seeds:
                z = build_latent(zseed, runtime.config.latent_channels, y.height, y.width)
                base_images.append(render(m, z.values))
                base_labels.append(y.labels)
        base_images = np.stack(base_images)
        fid_backbone = FeatureBackbone(seed=derive_seed(config.seed, "fid"))
        scores = {}
        if "fid_lite" in metrics:
            scores["fid_lite"] = fid_lite(real_images, base_images, fid_backbone)
        if "miou_proxy" in metrics:
            scores["miou_proxy"] = miou_proxy(segmenter, base_images, base_labels)
        rows.append(MethodRow(method="baseline", scores=scores, literal=dict(scores)))

    for method in sorted(sets_by_method):
        sets = sets_by_method[method]
        scores: dict[str, float] = {}
        literal: dict[str, float] = {}
        if want_local:
            ls = local_scores(render, maps, sets, protocol, backend, n)
            if "mcd_l" in metrics:
                scores["mcd_l"], literal["mcd_l"] = ls.mcd.pair_mean, ls.mcd.literal
            if "mod" in metrics:
                scores["mod"], literal["mod"] = ls.mod.pair_mean, ls.mod.literal
            if "mcc_l" in metrics:
                scores["mcc_l"], literal["mcc_l"] = ls.mcc.pair_mean, ls.mcc.literal
        edited_images: list[np.ndarray] = []
        edited_labels: list[np.ndarray] = []
        if want_global or want_quality:
            collector = None
            if want_quality:

                def collector(m, zi, e, image, _imgs=edited_images, _lbls=edited_labels):
                    _imgs.append(image)
                    _lbls.append(maps[m].labels)

            gs = global_scores(
                render, maps, sets, protocol, backend, n, collector=collector
            )
            if "mcd" in metrics:
                scores["mcd"], literal["mcd"] = gs.mcd.pair_mean, gs.mcd.literal
            if "mcc" in metrics:
                scores["mcc"], literal["mcc"] = gs.mcc.pair_mean, gs.mcc.literal
        if want_quality and edited_images:
            stack = np.stack(edited_images)
            fid_backbone = FeatureBackbone(seed=derive_seed(config.seed, "fid"))
            if "fid_lite" in metrics:
                scores["fid_lite"] = fid_lite(real_images, stack, fid_backbone)
            if "miou_proxy" in metrics:
                scores["miou_proxy"] = miou_proxy(segmenter, stack, edited_labels)
        rows.append(MethodRow(method=method, scores=scores, literal=literal))

    return MetricReport(
        rows=rows,
        protocol=protocol.to_dict(),
        backend_id=backend.backend_id,
        alpha_bound=n,
        map_count=len(maps),
        extras={"eval_seed": eval_seed, "config_hash": config.hash()},
    )


def run_evaluate(
    config: ExperimentConfig,
    checkpoint_path: str | Path,
    archive_path: str | Path,
    backend_id: str = "features",
    metrics: Sequence[str] = ALL_METRICS,
    out_dir: str | Path | None = None,
) -> tuple[Path, Path]:
    runtime = Runtime.from_path(checkpoint_path)
    archive = load_directions_archive(archive_path, runtime.checkpoint_hash)
    sets_by_method = archive_direction_sets(archive)
    report = evaluate_archive(runtime, config, sets_by_method, backend_id, metrics)
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    text_path = out / "report.txt"
    json_path.write_text(report.to_json())
    text_path.write_text(report.to_text() + "\n")
    return text_path, json_path


def run_ablation(
    config: ExperimentConfig,
    checkpoint_path: str | Path,
    classes: Sequence[int],
    seeds: Optional[Sequence[int]] = None,
    out_dir: str | Path | None = None,
) -> Path:
    """Re-run discovery with each loss term dropped and score every variant."""
    runtime = Runtime.from_path(checkpoint_path)
    seeds = list(seeds) if seeds is not None else [config.seed]
    variants: dict[str, dict] = {}
    for name, weights in ABLATION_VARIANTS.items():
        per_seed = []
        for seed in seeds:
            sets = discover_direction_sets(
                runtime, config, ["ctrl_sis"], classes,
                weights=weights, seed_override=seed,
            )
            report = evaluate_archive(
                runtime, config, {name: sets["ctrl_sis"]},
                metrics=("mcd", "mcc", "mod", "mcd_l", "mcc_l"),
            )
            row = next(r for r in report.rows if r.method == name)
            per_seed.append(row.scores)
        medians = {
            key: float(np.median([s[key] for s in per_seed]))
            for key in per_seed[0]
        }
        variants[name] = {
            "weights": list(ABLATION_VARIANTS[name]),
            "per_seed": per_seed,
            "median": medians,
        }
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ablation.json"
    payload = {
        "seeds": list(seeds),
        "classes": list(classes),
        "variants": variants,
        "config_hash": config.hash(),
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    text = [
        "variant    " + "  ".join(f"{k:>8}" for k in ("mcd", "mcc", "mod", "mcd_l", "mcc_l"))
    ]
    for name in ABLATION_VARIANTS:
        med = variants[name]["median"]
        text.append(
            f"{name:<10} " + "  ".join(f"{med.get(k, float('nan')):8.4f}" for k in ("mcd", "mcc", "mod", "mcd_l", "mcc_l"))
        )
    (out / "ablation.txt").write_text("\n".join(text) + "\n")
    return path
