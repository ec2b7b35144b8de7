import json

import pytest

# small-but-real trained fixture shared by the trend acceptance criteria and
# the service locality check; sized so training + discovery stay in minutes
SMALL_CONFIG = {
    "seed": 0,
    "scene": {"class_count": 4, "height": 24, "width": 24, "layout_rule": "rects"},
    "generator": {
        "latent_channels": 64,
        "class_count": 4,
        "height": 24,
        "width": 24,
        "blocks": 2,
        "base_width": 32,
        "min_width": 16,
    },
    "train": {"steps": 1200, "batch_size": 16, "segmenter_steps": 400, "log_every": 250},
    "discovery": {
        "direction_count": 3,
        "steps": 400,
        "batch_size": 6,
        "learning_rate": 1e-2,
        "weights": [1.0, 3.0, 1.0],
        "map_pool_size": 48,
    },
    "protocol": {"codes_per_map": 3, "edits_per_map": 6, "seed": 0, "min_class_pixels": 24},
    "taps": [[0, "norm_act"], [1, "norm_act"], [1, "block_out"]],
    "eval_maps": 10,
    "ganspace_samples": 256,
    "norm_samples": 2048,
}

SMALL_CLASSES = [1, 2]


@pytest.fixture(scope="session")
def small_config(tmp_path_factory):
    from latentctl.harness import ExperimentConfig

    root = tmp_path_factory.mktemp("small")
    cfg = dict(SMALL_CONFIG)
    cfg["output_dir"] = str(root / "out")
    return ExperimentConfig.from_dict(cfg)


@pytest.fixture(scope="session")
def small_checkpoint(small_config):
    from latentctl.harness import run_train

    return run_train(small_config, small_config.output_dir)


@pytest.fixture(scope="session")
def small_runtime(small_checkpoint):
    from latentctl.harness import Runtime

    return Runtime.from_path(small_checkpoint)


@pytest.fixture(scope="session")
def small_sets(small_runtime, small_config):
    from latentctl.harness import discover_direction_sets

    return discover_direction_sets(
        small_runtime, small_config, ["ctrl_sis", "random"], SMALL_CLASSES
    )


@pytest.fixture(scope="session")
def small_archive(tmp_path_factory, small_runtime, small_sets):
    from latentctl.archive import save_directions_archive

    path = tmp_path_factory.mktemp("small_archive") / "directions.zip"
    records, matrices = [], {}
    for method, per_class in small_sets.items():
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
    save_directions_archive(path, small_runtime.checkpoint_hash, records, matrices)
    return path


TINY_CONFIG = {
    "seed": 3,
    "scene": {"class_count": 3, "height": 16, "width": 16, "layout_rule": "mixed"},
    "generator": {
        "latent_channels": 8,
        "class_count": 3,
        "height": 16,
        "width": 16,
        "blocks": 2,
        "base_width": 16,
        "min_width": 8,
    },
    "train": {"steps": 40, "batch_size": 4, "segmenter_steps": 40, "log_every": 20},
    "discovery": {
        "direction_count": 3,
        "steps": 4,
        "batch_size": 2,
        "learning_rate": 5e-3,
        "map_pool_size": 8,
    },
    "protocol": {"codes_per_map": 2, "edits_per_map": 2, "seed": 1, "min_class_pixels": 4},
    "eval_maps": 3,
    "ganspace_samples": 32,
    "norm_samples": 512,
}


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = dict(TINY_CONFIG)
    cfg["output_dir"] = str(root / "out")
    path = root / "config.json"
    path.write_text(json.dumps(cfg, indent=1))
    return path


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_config_file):
    from latentctl.harness import ExperimentConfig, run_train

    config = ExperimentConfig.from_json_file(tiny_config_file)
    return run_train(config, config.output_dir)


@pytest.fixture(scope="session")
def tiny_archive(tiny_config_file, tiny_checkpoint):
    from latentctl.harness import ExperimentConfig, run_discover

    config = ExperimentConfig.from_json_file(tiny_config_file)
    return run_discover(
        config, tiny_checkpoint, ["ctrl_sis", "random", "ganspace", "sefa"], [0, 1]
    )
