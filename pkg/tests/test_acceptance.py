"""Acceptance suite: one test per criterion, printing a pass/fail line each.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
Criteria needing a trained model share the session-scoped small checkpoint
fixture from conftest; everything else runs on analytic oracles.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest
import scipy.linalg
import torch

from brute_force import brute_global_scores, brute_local_scores
from latentctl.archive import file_hash, load_directions_archive
from latentctl.backbone import (
    FeatureBackbone,
    MsssimBackend,
    fid_lite,
    fit_gaussian,
    gaussian_frechet,
    masked_distance,
)
from latentctl.discovery import (
    BatchElement,
    DirectionSet,
    DiscoveryConfig,
    ctrl_sis_objective,
    optimize_directions,
    random_directions,
    sefa_directions,
)
from latentctl.editing import EditSpec, EditStack, apply_edit_stack
from latentctl.generator import (
    FeatureTapSpec,
    GeneratorConfig,
    OracleFeatureSource,
    ToyFeatureSource,
    build_generator,
    generate,
    linear_oracle_generate,
    parameter_hash,
    random_linear_oracle,
)
from latentctl.harness import (
    ExperimentConfig,
    Runtime,
    archive_direction_sets,
    discover_direction_sets,
    evaluate_archive,
    run_ablation,
    run_discover,
    run_evaluate,
    run_train,
)
from latentctl.protocol import EvalProtocol, build_plans, global_scores, local_scores
from latentctl.scene_core import ClassMask, EditVector, LabelMap, apply_direction, build_latent, class_mask


@contextmanager
def criterion(num: int, description: str):
    try:
        yield
    except Exception:
        print(f"\n[criterion {num:2d}] FAIL  {description}")
        raise
    print(f"\n[criterion {num:2d}] PASS  {description}")


def split_map(h=16, w=16, class_count=3):
    labels = np.zeros((h, w), dtype=np.int32)
    labels[4:12, 2:12] = 1
    labels[0:3, 12:] = 2
    return LabelMap(labels=labels, class_count=class_count)


def test_criterion_01_sefa_exactness():
    with criterion(1, "eigendecomposition baseline matches brute-force oracle"):
        rng = np.random.default_rng(11)
        w = rng.standard_normal((48, 16))
        start = time.time()
        ds = sefa_directions(w, 4)
        elapsed = time.time() - start
        gram = w.T @ w
        deflated = gram.copy()
        oracle = []
        for _ in range(4):
            v = rng.standard_normal(16)
            for _ in range(8000):
                v = deflated @ v
                v /= np.linalg.norm(v)
            lam = v @ deflated @ v
            oracle.append(v.copy())
            deflated -= lam * np.outer(v, v)
        for i in range(4):
            cos = abs(float(ds.directions[i].astype(np.float64) @ oracle[i]))
            assert cos >= 0.999, f"direction {i}: |cos| = {cos}"
        assert elapsed < 1.0, f"took {elapsed:.2f}s"


def test_criterion_02_linear_oracle_consistency():
    with criterion(2, "difference-convention consistency vanishes on the linear oracle"):
        start = time.time()
        oracle = random_linear_oracle(3, 3, 16)
        y = split_map()
        mask = class_mask(y, 1)
        factory = lambda ym: OracleFeatureSource(oracle, ym)
        rng = np.random.default_rng(0)
        for trial in range(100):
            v = rng.standard_normal((2, 16))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            batch = [
                BatchElement(
                    y,
                    mask,
                    rng.standard_normal(16).astype(np.float32),
                    rng.standard_normal(16).astype(np.float32),
                    float(rng.uniform(-4, 4)),
                )
            ]
            bd = ctrl_sis_objective(
                factory, torch.tensor(v), batch, consistency_differences=True
            )
            assert abs(float(bd.l_const)) < 1e-6, f"trial {trial}: {float(bd.l_const)}"
        assert time.time() - start < 10.0


def test_criterion_03_subspace_recovery():
    with criterion(3, "optimized direction span lies in the top-2 singular subspace"):
        start = time.time()
        oracle = random_linear_oracle(7, 3, 16)
        y = split_map()
        _, _, vt = np.linalg.svd(oracle.matrices[1])
        basis, _ = np.linalg.qr(vt[:2].T)
        factory = lambda ym: OracleFeatureSource(oracle, ym)
        cfg = DiscoveryConfig(
            direction_count=2, steps=150, batch_size=8, map_pool_size=4,
            learning_rate=1e-2,
        )
        for seed in range(5):
            ds = optimize_directions(
                factory, 1, lambda rng: y, cfg, seed=seed, alpha_bound=3.94,
                dtype=torch.float64,
            )
            for v in ds.directions.astype(np.float64):
                v = v / np.linalg.norm(v)
                angle = np.degrees(np.arccos(np.clip(np.linalg.norm(basis.T @ v), 0, 1)))
                assert angle < 15.0, f"seed {seed}: angle {angle:.2f} deg"
        assert time.time() - start < 120.0


def test_criterion_04_objective_gradient_fidelity():
    with criterion(4, "objective gradient matches central differences at step 1e-3"):
        cfg = GeneratorConfig(
            latent_channels=6, class_count=3, height=16, width=16,
            blocks=2, base_width=16, min_width=8,
        )
        model = build_generator(cfg, seed=5).double()
        taps = FeatureTapSpec(taps=((0, "norm_act"), (1, "norm_act")))
        y = split_map()
        mask = class_mask(y, 1)
        factory = lambda ym: ToyFeatureSource(model, ym, taps)
        rng = np.random.default_rng(1)
        batch = [
            BatchElement(
                y,
                mask,
                rng.standard_normal(6).astype(np.float32),
                rng.standard_normal(6).astype(np.float32),
                float(rng.uniform(-2, 2)),
            )
            for _ in range(2)
        ]
        v0 = rng.standard_normal((2, 6))
        v0 /= np.linalg.norm(v0, axis=1, keepdims=True)
        v = torch.tensor(v0, requires_grad=True)
        bd = ctrl_sis_objective(factory, v, batch)
        bd.total.backward()
        analytic = v.grad.numpy()
        h = 1e-3
        worst = 0.0
        for k in range(2):
            for d in range(6):
                plus, minus = v0.copy(), v0.copy()
                plus[k, d] += h
                minus[k, d] -= h
                fp = float(ctrl_sis_objective(factory, torch.tensor(plus), batch).total)
                fm = float(ctrl_sis_objective(factory, torch.tensor(minus), batch).total)
                fd = (fp - fm) / (2 * h)
                rel = abs(analytic[k, d] - fd) / max(abs(analytic[k, d]), abs(fd), 1e-8)
                worst = max(worst, rel)
        assert worst < 1e-3, f"worst relative error {worst:.2e}"


def test_criterion_05_metric_oracle_equivalence():
    with criterion(5, "metric family matches brute force to 1e-9, both normalizations"):
        channels, k, z, e = 6, 3, 2, 3
        oracle = random_linear_oracle(0, 3, channels)
        rng = np.random.default_rng(100)
        maps = []
        for _ in range(3):
            labels = np.zeros((16, 16), dtype=np.int32)
            r0, c0 = rng.integers(2, 6), rng.integers(2, 6)
            labels[r0 : r0 + 7, c0 : c0 + 7] = 1
            labels[-3:, -5:] = 2
            maps.append(LabelMap(labels=labels, class_count=3))

        def render(m, values):
            return linear_oracle_generate(oracle, values, maps[m]).astype(np.float32)

        sets = {
            c: DirectionSet(
                class_id=c,
                directions=random_directions(k, channels, 50 + c).directions,
                method="random",
            )
            for c in (0, 1, 2)
        }
        backend = FeatureBackbone(seed=0)
        protocol = EvalProtocol(codes_per_map=z, edits_per_map=e, seed=5, min_class_pixels=1)
        plans = build_plans(protocol, len(maps), [0, 1, 2], 2.0)

        ls = local_scores(render, maps, sets, protocol, backend, 2.0, plans=plans)
        gs = global_scores(render, maps, sets, protocol, backend, 2.0, plans=plans)
        brute_l = brute_local_scores(render, maps, sets, plans, backend, z)
        brute_g = brute_global_scores(render, maps, sets, plans, backend, z, e)

        assert ls.mcd.pair_mean == pytest.approx(brute_l["mcd"], abs=1e-9)
        assert ls.mod.pair_mean == pytest.approx(brute_l["mod"], abs=1e-9)
        assert ls.mcc.pair_mean == pytest.approx(brute_l["mcc"], abs=1e-9)
        assert ls.mcd.literal == pytest.approx(brute_l["mcd_lit"], abs=1e-9)
        assert ls.mod.literal == pytest.approx(brute_l["mod_lit"], abs=1e-9)
        assert ls.mcc.literal == pytest.approx(brute_l["mcc_lit"], abs=1e-9)
        assert gs.mcd.pair_mean == pytest.approx(brute_g["mcd"], abs=1e-9)
        assert gs.mcc.pair_mean == pytest.approx(brute_g["mcc"], abs=1e-9)
        assert gs.mcd.literal == pytest.approx(brute_g["mcd"], abs=1e-9)
        assert gs.mcc.literal == pytest.approx(brute_g["mcc"], abs=1e-9)


def test_criterion_08_projection_and_frozen_generator():
    with criterion(8, "unit projection after every step; generator untouched"):
        cfg_g = GeneratorConfig(
            latent_channels=8, class_count=3, height=16, width=16,
            blocks=2, base_width=16, min_width=8,
        )
        model = build_generator(cfg_g, seed=0)
        for p in model.parameters():
            p.requires_grad_(False)
        taps = FeatureTapSpec.all_norm_acts(cfg_g)
        y = split_map()
        before = parameter_hash(model)
        norms = []
        cfg = DiscoveryConfig(direction_count=3, steps=12, batch_size=2, map_pool_size=4)
        optimize_directions(
            lambda ym: ToyFeatureSource(model, ym, taps), 1, lambda rng: y,
            cfg, seed=3, alpha_bound=2.7,
            step_callback=lambda s, b, d: norms.append(np.linalg.norm(d, axis=1)),
        )
        assert len(norms) == 12
        for step_norms in norms:
            assert np.abs(step_norms - 1.0).max() <= 1e-5
        assert parameter_hash(model) == before


def test_criterion_09_edit_identities():
    with criterion(9, "null edits bitwise; all-ones mask = global; disjoint stacks commute"):
        cfg_g = GeneratorConfig(
            latent_channels=8, class_count=4, height=16, width=16,
            blocks=2, base_width=16, min_width=8,
        )
        model = build_generator(cfg_g, seed=2)
        labels = np.zeros((16, 16), dtype=np.int32)
        labels[2:9, 2:9] = 1
        labels[10:16, 10:16] = 2
        y = LabelMap(labels=labels, class_count=4)
        z = build_latent(4, 8, 16, 16)
        base = generate(model, z, y)
        rng = np.random.default_rng(0)
        v1 = EditVector(rng.standard_normal(8).astype(np.float32)).normalized()
        v2 = EditVector(rng.standard_normal(8).astype(np.float32)).normalized()

        np.testing.assert_array_equal(
            base, apply_edit_stack(model, z, y, EditStack(specs=()))
        )
        np.testing.assert_array_equal(
            base,
            apply_edit_stack(
                model, z, y, EditStack(specs=(EditSpec(class_id=1, alpha=0.0, direction=v1),))
            ),
        )
        ones = ClassMask(values=np.ones((16, 16), dtype=np.uint8), class_id=0)
        z_global = apply_direction(z, v1, 1.7)
        z_masked = apply_direction(z, v1, 1.7, ones)
        np.testing.assert_array_equal(z_global.values, z_masked.values)
        np.testing.assert_array_equal(
            generate(model, z_global, y), generate(model, z_masked, y)
        )
        a = EditSpec(class_id=1, alpha=1.2, direction=v1)
        b = EditSpec(class_id=2, alpha=-0.9, direction=v2)
        np.testing.assert_array_equal(
            apply_edit_stack(model, z, y, EditStack(specs=(a, b))),
            apply_edit_stack(model, z, y, EditStack(specs=(b, a))),
        )


def test_criterion_10_masked_distance_and_frechet_sanity():
    with criterion(10, "mask identities and Fréchet distance sanity"):
        backend = FeatureBackbone(seed=0)
        rng = np.random.default_rng(0)
        x1 = (rng.random((64, 64, 3)) * 2 - 1).astype(np.float32)
        x2 = (rng.random((64, 64, 3)) * 2 - 1).astype(np.float32)
        ones = ClassMask(values=np.ones((64, 64), dtype=np.uint8), class_id=0)
        assert masked_distance(backend, x1, x2, ones) == pytest.approx(
            masked_distance(backend, x1, x2, None), abs=1e-6
        )
        mask_values = np.zeros((64, 64), dtype=np.uint8)
        mask_values[:, :16] = 1
        mask = ClassMask(values=mask_values, class_id=0)
        pasted = x1.copy()
        pasted[:, 48:] = x2[:, 48:]
        assert masked_distance(backend, x1, pasted, mask) == 0.0

        images = (rng.random((16, 32, 32, 3)) * 2 - 1).astype(np.float32)
        assert fid_lite(images, images.copy(), backend) < 1e-6

        dim = 8
        mu1 = rng.standard_normal(dim)
        mu2 = rng.standard_normal(dim) + 0.4
        a1 = rng.standard_normal((dim, dim)) * 0.3
        a2 = rng.standard_normal((dim, dim)) * 0.3
        s1 = a1 @ a1.T + 0.25 * np.eye(dim)
        s2 = a2 @ a2.T + 0.25 * np.eye(dim)
        exact = gaussian_frechet(mu1, s1, mu2, s2)
        x1s = rng.multivariate_normal(mu1, s1, size=5000)
        x2s = rng.multivariate_normal(mu2, s2, size=5000)
        fitted = gaussian_frechet(*fit_gaussian(x1s), *fit_gaussian(x2s))
        assert fitted == pytest.approx(exact, rel=0.05)


def test_criterion_06_diversity_gap(small_runtime, small_config, small_sets):
    with criterion(6, "optimized controls beat random diversity without extra leak"):
        report = evaluate_archive(
            small_runtime, small_config, small_sets,
            metrics=("mcd_l", "mod", "miou_proxy"),
        )
        rows = {r.method: r.scores for r in report.rows}
        ctrl, rand = rows["ctrl_sis"], rows["random"]
        assert ctrl["mcd_l"] >= 1.5 * rand["mcd_l"], (
            f"mcd_l {ctrl['mcd_l']:.4f} vs random {rand['mcd_l']:.4f}"
        )
        assert ctrl["mod"] <= 2.0 * rand["mod"], (
            f"mod {ctrl['mod']:.4f} vs random {rand['mod']:.4f}"
        )
        # quality gate: the trained segmenter agrees with real renders
        assert rows["baseline"]["miou_proxy"] >= 0.9


def test_criterion_07_ablation_sign_pattern(small_runtime, small_config, tmp_path):
    with criterion(7, "loss-term ablation moves each score the expected way"):
        ablate_cfg = ExperimentConfig.from_dict(
            {
                **small_config.to_dict(),
                "discovery": {
                    "direction_count": 3,
                    "steps": 120,
                    "batch_size": 4,
                    "learning_rate": 1e-2,
                    "map_pool_size": 32,
                },
            }
        )
        path = run_ablation(
            ablate_cfg,
            small_config.output_dir + "/checkpoint.zip",
            classes=[1],
            seeds=[0, 1, 2],
            out_dir=tmp_path,
        )
        data = json.loads(path.read_text())
        med = {name: v["median"] for name, v in data["variants"].items()}
        assert med["no_div"]["mcd"] < med["full"]["mcd"], (
            f"dropping the diversity term must lower mcd: "
            f"{med['no_div']['mcd']:.4f} vs {med['full']['mcd']:.4f}"
        )
        assert med["no_dis"]["mod"] > med["full"]["mod"], (
            f"dropping the disentanglement term must raise mod: "
            f"{med['no_dis']['mod']:.4f} vs {med['full']['mod']:.4f}"
        )
        assert med["no_const"]["mcc"] >= med["full"]["mcc"] * 0.9, (
            f"dropping the consistency term must not beat full-objective mcc "
            f"beyond noise: {med['no_const']['mcc']:.4f} vs {med['full']['mcc']:.4f}"
        )


def test_criterion_11_msssim_rank_agreement(small_runtime, small_config, small_sets):
    with criterion(11, "structural-similarity distance ranks methods like features"):
        # four direction sets with graded diversity: interpolate between
        # collapsed copies of one vector and the optimized set
        base = small_sets["ctrl_sis"][1].directions.astype(np.float64)
        collapsed = np.repeat(base[:1], base.shape[0], axis=0)
        graded = {}
        for t in (0.0, 0.2, 0.6, 1.0):
            mix = (1 - t) * collapsed + t * base
            mix /= np.linalg.norm(mix, axis=1, keepdims=True)
            graded[f"t{t}"] = {
                1: DirectionSet(
                    class_id=1, directions=mix.astype(np.float32), method="random"
                )
            }
        spec = small_runtime.scene_spec
        from latentctl.synthetic import sample_scenes

        maps = [y for _, y in sample_scenes(spec, 777, 6)]
        render = small_runtime.make_render(maps)
        protocol = EvalProtocol(codes_per_map=2, edits_per_map=2, seed=3, min_class_pixels=24)
        n = small_runtime.channel_norm
        feature_backend = FeatureBackbone(seed=0)
        msssim_backend = MsssimBackend()
        feat_scores, ms_scores = {}, {}
        for name, sets in graded.items():
            feat_scores[name] = local_scores(
                render, maps, sets, protocol, feature_backend, n
            ).mcd.pair_mean
            ms_scores[name] = local_scores(
                render, maps, sets, protocol, msssim_backend, n
            ).mcd.pair_mean
        feat_rank = sorted(feat_scores, key=feat_scores.get)
        ms_rank = sorted(ms_scores, key=ms_scores.get)
        assert feat_rank == ms_rank, f"{feat_scores} vs {ms_scores}"


def test_criterion_12_end_to_end_determinism(tmp_path, tiny_config_file):
    with criterion(12, "one seed reproduces checkpoint, archive, and report hashes"):
        cfg = json.loads(open(tiny_config_file).read())
        cfg["train"] = {"steps": 25, "batch_size": 4, "segmenter_steps": 10}
        hashes = []
        for name in ("runA", "runB"):
            out = tmp_path / name
            cfg["output_dir"] = str(out)
            config = ExperimentConfig.from_dict(cfg)
            ckpt = run_train(config, out)
            archive = run_discover(
                config, ckpt, ["ctrl_sis", "random", "sefa"], [0, 1], out / "dirs.zip"
            )
            _, report_path = run_evaluate(
                config, ckpt, archive,
                metrics=("mcd_l", "mod", "mcd", "mcc"),
                out_dir=out,
            )
            hashes.append(
                (file_hash(ckpt), file_hash(archive), file_hash(report_path))
            )
        assert hashes[0] == hashes[1], f"{hashes[0]} != {hashes[1]}"
