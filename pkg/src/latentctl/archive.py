"""Versioned artifact containers with deterministic bytes.

A container is a zip holding `manifest.json` plus one `.npy` entry per named
tensor, written with fixed timestamps and no compression so identical content
produces identical files. Every artifact embeds the hash of the producing
config; loaders verify lineage before use.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError
from .generator import (
    ConvSegmenter,
    GeneratorConfig,
    PatchDiscriminator,
    ToyGenerator,
)
from .synthetic import SyntheticSceneSpec

FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_container(path: str | Path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_ZIP_EPOCH)
            zf.writestr(info, buf.getvalue())


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    arrays = {}
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for entry in zf.namelist():
            if entry.startswith("arrays/") and entry.endswith(".npy"):
                arrays[entry[len("arrays/") : -len(".npy")]] = np.load(
                    io.BytesIO(zf.read(entry))
                )
    return manifest, arrays


def _state_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{name}": tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {
        name[len(prefix) + 1 :]: torch.from_numpy(np.ascontiguousarray(arr))
        for name, arr in arrays.items()
        if name.startswith(prefix + ".")
    }
    module.load_state_dict(state)


# ---------------------------------------------------------------------------
# checkpoint container


@dataclass
class CheckpointContainer:
    manifest: dict
    arrays: dict[str, np.ndarray]

    @property
    def format_version(self) -> int:
        return self.manifest["format_version"]

    @property
    def config_hash(self) -> str:
        return self.manifest["config_hash"]

    @property
    def seed(self) -> int:
        return self.manifest["seed"]

    @property
    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig.from_dict(self.manifest["generator_config"])

    @property
    def scene_spec(self) -> SyntheticSceneSpec:
        return SyntheticSceneSpec.from_dict(self.manifest["scene_spec"])

    @property
    def channel_norm(self) -> float:
        return self.manifest["channel_norm"]["value"]

    def build_generator(self) -> ToyGenerator:
        model = ToyGenerator(self.generator_config)
        _load_state(model, self.arrays, "generator")
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model

    def build_discriminator(self) -> PatchDiscriminator:
        model = PatchDiscriminator(self.generator_config)
        _load_state(model, self.arrays, "discriminator")
        model.eval()
        return model

    def build_segmenter(self) -> ConvSegmenter:
        model = ConvSegmenter(self.generator_config.class_count)
        _load_state(model, self.arrays, "segmenter")
        model.eval()
        return model


def save_checkpoint(
    path: str | Path,
    generator: ToyGenerator,
    discriminator: PatchDiscriminator,
    segmenter: ConvSegmenter,
    scene_spec: SyntheticSceneSpec,
    seed: int,
    channel_norm: dict,
    train_config: dict | None = None,
) -> str:
    cfg = generator.config.to_dict()
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "generator_config": cfg,
        "scene_spec": scene_spec.to_dict(),
        "train_config": train_config or {},
        "seed": seed,
        "channel_norm": channel_norm,
        "config_hash": config_hash(
            {"generator": cfg, "scene": scene_spec.to_dict(), "train": train_config or {}, "seed": seed}
        ),
    }
    arrays = {}
    arrays.update(_state_arrays(generator, "generator"))
    arrays.update(_state_arrays(discriminator, "discriminator"))
    arrays.update(_state_arrays(segmenter, "segmenter"))
    write_container(path, manifest, arrays)
    return file_hash(path)


def load_checkpoint(path: str | Path) -> CheckpointContainer:
    manifest, arrays = read_container(path)
    if manifest.get("kind") != "checkpoint":
        raise IntegrityError(f"{path} is not a checkpoint container")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {manifest.get('format_version')}")
    expected = config_hash(
        {
            "generator": manifest["generator_config"],
            "scene": manifest["scene_spec"],
            "train": manifest.get("train_config", {}),
            "seed": manifest["seed"],
        }
    )
    if manifest.get("config_hash") != expected:
        raise IntegrityError("checkpoint config hash does not match its manifest")
    return CheckpointContainer(manifest=manifest, arrays=arrays)


# ---------------------------------------------------------------------------
# directions archive


@dataclass
class DirectionsArchive:
    manifest: dict
    arrays: dict[str, np.ndarray]

    @property
    def checkpoint_hash(self) -> str:
        return self.manifest["checkpoint_hash"]

    def records(self) -> list[dict]:
        return self.manifest["records"]

    def methods(self) -> list[str]:
        return sorted({r["method"] for r in self.records()})

    def classes(self, method: str) -> list[int]:
        return sorted(r["class_id"] for r in self.records() if r["method"] == method)

    def direction_matrix(self, method: str, class_id: int) -> np.ndarray:
        for record in self.records():
            if record["method"] == method and record["class_id"] == class_id:
                return self.arrays[record["array_key"]]
        raise IntegrityError(f"no record for method={method} class={class_id}")

    def record_for(self, method: str, class_id: int) -> dict:
        for record in self.records():
            if record["method"] == method and record["class_id"] == class_id:
                return record
        raise IntegrityError(f"no record for method={method} class={class_id}")


def save_directions_archive(
    path: str | Path,
    checkpoint_hash: str,
    records: list[dict],
    matrices: dict[str, np.ndarray],
    experiment_hash: str = "",
) -> str:
    """records: [{class_id, method, seed, config_hash, taps, array_key}]."""
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "directions",
        "checkpoint_hash": checkpoint_hash,
        "experiment_hash": experiment_hash,
        "records": sorted(records, key=lambda r: (r["method"], r["class_id"])),
    }
    write_container(path, manifest, matrices)
    return file_hash(path)


def load_directions_archive(
    path: str | Path, expected_checkpoint_hash: str | None = None
) -> DirectionsArchive:
    manifest, arrays = read_container(path)
    if manifest.get("kind") != "directions":
        raise IntegrityError(f"{path} is not a directions archive")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported archive version {manifest.get('format_version')}")
    if (
        expected_checkpoint_hash is not None
        and manifest["checkpoint_hash"] != expected_checkpoint_hash
    ):
        raise IntegrityError(
            "directions archive was produced against a different checkpoint "
            f"({manifest['checkpoint_hash'][:12]} != {expected_checkpoint_hash[:12]})"
        )
    return DirectionsArchive(manifest=manifest, arrays=arrays)
