import numpy as np
import pytest
import scipy.linalg
import torch

from latentctl.discovery import (
    BatchElement,
    DirectionSet,
    DiscoveryConfig,
    ctrl_sis_objective,
    ganspace_directions,
    loss_consistency,
    loss_disentanglement,
    loss_diversity,
    optimize_directions,
    random_directions,
    sefa_directions,
)
from latentctl.errors import (
    ClassCoverageError,
    ConfigurationError,
    DimensionError,
    EmptyBatchError,
)
from latentctl.generator import (
    GeneratorConfig,
    IdentityFeatureSource,
    OracleFeatureSource,
    ToyFeatureSource,
    FeatureTapSpec,
    build_generator,
    parameter_hash,
    random_linear_oracle,
)
from latentctl.scene_core import ClassMask, LabelMap, class_mask


def split_map(h=16, w=16, class_count=3):
    labels = np.zeros((h, w), dtype=np.int32)
    labels[4:12, 2:12] = 1
    labels[0:3, 12:] = 2
    return LabelMap(labels=labels, class_count=class_count)


def constant_bank(vector, h=8, w=8):
    """Single-layer bank whose per-pixel fiber equals `vector` everywhere."""
    c = len(vector)
    t = torch.tensor(vector, dtype=torch.float64)[:, None, None].expand(c, h, w)
    return [t.contiguous()]


def full_mask(h=8, w=8):
    return ClassMask(values=np.ones((h, w), dtype=np.uint8), class_id=0)


def direction_projection_angle_deg(directions: np.ndarray, basis: np.ndarray) -> float:
    """Worst angle between any single direction and the reference subspace."""
    q, _ = np.linalg.qr(basis)
    angles = []
    for v in directions.astype(np.float64):
        v = v / np.linalg.norm(v)
        angles.append(np.degrees(np.arccos(np.clip(np.linalg.norm(q.T @ v), 0, 1))))
    return max(angles)


class TestLossTerms:
    def test_identical_banks_zero_diversity(self):
        bank = constant_bank([1.0, 2.0, 3.0])
        assert float(loss_diversity([bank, bank, bank], full_mask())) == 0.0

    def test_unit_difference_inside_mask(self):
        zero = constant_bank([0.0, 0.0, 0.0])
        unit = constant_bank([1.0, 0.0, 0.0])
        assert float(loss_diversity([zero, unit], full_mask())) == pytest.approx(-1.0)

    def test_disentanglement_identical_zero(self):
        bank = constant_bank([0.5, -0.5, 0.25])
        mask_values = np.zeros((8, 8), dtype=np.uint8)
        mask_values[:4] = 1
        mask = ClassMask(values=mask_values, class_id=0)
        assert float(loss_disentanglement([bank, bank], mask)) == 0.0

    def test_disentanglement_unit_difference_outside(self):
        zero = constant_bank([0.0, 0.0])
        unit = constant_bank([0.0, 1.0])
        mask_values = np.zeros((8, 8), dtype=np.uint8)
        mask_values[0, 0] = 1  # complement covers almost everything
        mask = ClassMask(values=mask_values, class_id=0)
        assert float(loss_disentanglement([zero, unit], mask)) == pytest.approx(1.0)

    def test_consistency_same_codes_zero(self):
        banks = [constant_bank([1.0, 1.0]), constant_bank([2.0, 0.0])]
        assert float(loss_consistency(banks, banks, full_mask())) == 0.0

    def test_consistency_unit_difference(self):
        a = [constant_bank([0.0, 0.0])]
        b = [constant_bank([1.0, 0.0])]
        assert float(loss_consistency(a, b, full_mask())) == pytest.approx(1.0)

    def test_empty_mask_skip_signal(self):
        bank = constant_bank([1.0])
        empty = ClassMask(values=np.zeros((8, 8), dtype=np.uint8), class_id=0)
        assert loss_diversity([bank, bank], empty) is None

    def test_permutation_symmetry(self):
        rng = np.random.default_rng(0)
        banks = [constant_bank(rng.standard_normal(4)) for _ in range(4)]
        mask_values = np.zeros((8, 8), dtype=np.uint8)
        mask_values[:, :4] = 1
        mask = ClassMask(values=mask_values, class_id=0)
        base_div = float(loss_diversity(banks, mask))
        base_dis = float(loss_disentanglement(banks, mask))
        perm = [banks[2], banks[0], banks[3], banks[1]]
        assert float(loss_diversity(perm, mask)) == pytest.approx(base_div, abs=1e-12)
        assert float(loss_disentanglement(perm, mask)) == pytest.approx(base_dis, abs=1e-12)


class TestObjective:
    @pytest.fixture()
    def oracle_setup(self):
        oracle = random_linear_oracle(7, 3, 16)
        y = split_map()
        mask = class_mask(y, 1)
        factory = lambda ym: OracleFeatureSource(oracle, ym)
        return oracle, y, mask, factory

    def _batch(self, y, mask, alpha, seed=0, count=1, channels=16):
        rng = np.random.default_rng(seed)
        return [
            BatchElement(
                y,
                mask,
                rng.standard_normal(channels).astype(np.float32),
                rng.standard_normal(channels).astype(np.float32),
                alpha,
            )
            for _ in range(count)
        ]

    def test_zero_weights_zero_total(self, oracle_setup):
        _, y, mask, factory = oracle_setup
        v = torch.randn(2, 16, dtype=torch.float64)
        bd = ctrl_sis_objective(factory, v, self._batch(y, mask, 1.5), weights=(0, 0, 0))
        assert float(bd.total) == 0.0

    def test_identical_directions(self, oracle_setup):
        _, y, mask, factory = oracle_setup
        one = torch.randn(1, 16, dtype=torch.float64)
        v = one.repeat(3, 1)
        bd = ctrl_sis_objective(factory, v, self._batch(y, mask, 2.0))
        assert float(bd.l_div) == 0.0
        assert float(bd.l_dis) == 0.0
        assert float(bd.l_const) >= 0.0

    def test_oracle_diversity_closed_form(self, oracle_setup):
        oracle, y, mask, factory = oracle_setup
        rng = np.random.default_rng(3)
        v = rng.standard_normal((2, 16))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        alpha = 1.7
        bd = ctrl_sis_objective(
            factory, torch.tensor(v, dtype=torch.float64), self._batch(y, mask, alpha)
        )
        expected = -abs(alpha) * np.linalg.norm(oracle.matrices[1] @ (v[0] - v[1]))
        assert float(bd.l_div) == pytest.approx(expected, abs=1e-8)

    def test_oracle_disentanglement_exactly_zero(self, oracle_setup):
        _, y, mask, factory = oracle_setup
        v = torch.randn(3, 16, dtype=torch.float64)
        bd = ctrl_sis_objective(factory, v, self._batch(y, mask, 2.5))
        assert float(bd.l_dis) == 0.0

    def test_oracle_consistency_difference_convention_zero(self, oracle_setup):
        _, y, mask, factory = oracle_setup
        for seed in range(5):
            v = torch.randn(2, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
            bd = ctrl_sis_objective(
                factory, v, self._batch(y, mask, 1.2, seed=seed),
                consistency_differences=True,
            )
            assert abs(float(bd.l_const)) < 1e-6

    def test_oracle_alpha_sign_symmetry(self, oracle_setup):
        _, y, mask, factory = oracle_setup
        v = torch.randn(3, 16, dtype=torch.float64)
        plus = ctrl_sis_objective(factory, v, self._batch(y, mask, 1.9))
        minus = ctrl_sis_objective(factory, v, self._batch(y, mask, -1.9))
        assert abs(float(plus.l_div)) == pytest.approx(abs(float(minus.l_div)), abs=1e-10)

    def test_empty_batch_raises(self, oracle_setup):
        *_, factory = oracle_setup
        with pytest.raises(EmptyBatchError):
            ctrl_sis_objective(factory, torch.randn(2, 16), [])

    def test_gradient_matches_finite_differences(self):
        # the acceptance-gate check at module scale: 16x16 generator instance
        cfg = GeneratorConfig(
            latent_channels=6, class_count=3, height=16, width=16,
            blocks=2, base_width=16, min_width=8,
        )
        model = build_generator(cfg, seed=2).double()
        taps = FeatureTapSpec(taps=((0, "norm_act"), (1, "norm_act")))
        y = split_map()
        mask = class_mask(y, 1)
        factory = lambda ym: ToyFeatureSource(model, ym, taps)
        batch = self._batch(y, mask, 1.3, seed=4, count=2, channels=6)
        v0 = np.random.default_rng(0).standard_normal((2, 6))
        v0 /= np.linalg.norm(v0, axis=1, keepdims=True)

        v = torch.tensor(v0, requires_grad=True)
        bd = ctrl_sis_objective(factory, v, batch)
        bd.total.backward()
        analytic = v.grad.numpy()

        h = 1e-3
        for k in range(2):
            for d in range(6):
                plus, minus = v0.copy(), v0.copy()
                plus[k, d] += h
                minus[k, d] -= h
                fp = float(
                    ctrl_sis_objective(factory, torch.tensor(plus), batch).total
                )
                fm = float(
                    ctrl_sis_objective(factory, torch.tensor(minus), batch).total
                )
                fd = (fp - fm) / (2 * h)
                denom = max(abs(analytic[k, d]), abs(fd), 1e-8)
                assert abs(analytic[k, d] - fd) / denom < 1e-3


class TestOptimizeDirections:
    def _oracle_problem(self):
        oracle = random_linear_oracle(7, 3, 16)
        y = split_map()
        return oracle, y, (lambda rng: y), (lambda ym: OracleFeatureSource(oracle, ym))

    def test_zero_steps_returns_normalized_init(self):
        _, y, sampler, factory = self._oracle_problem()
        cfg = DiscoveryConfig(direction_count=3, steps=0, batch_size=2, map_pool_size=2)
        ds = optimize_directions(factory, 1, sampler, cfg, seed=5, alpha_bound=3.9)
        np.testing.assert_allclose(np.linalg.norm(ds.directions, axis=1), 1.0, atol=1e-5)
        assert ds.method == "ctrl_sis"

    def test_projection_invariant_every_step(self):
        _, y, sampler, factory = self._oracle_problem()
        norms_seen = []
        cfg = DiscoveryConfig(direction_count=2, steps=8, batch_size=2, map_pool_size=2)
        optimize_directions(
            factory, 1, sampler, cfg, seed=1, alpha_bound=3.9,
            step_callback=lambda s, b, d: norms_seen.append(np.linalg.norm(d, axis=1)),
        )
        assert len(norms_seen) == 8
        for norms in norms_seen:
            np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_oracle_subspace_recovery(self):
        # top-2 right-singular subspace of the class matrix is the optimum for
        # the pure-diversity landscape; every recovered direction must lie in it
        oracle, y, sampler, factory = self._oracle_problem()
        _, _, vt = np.linalg.svd(oracle.matrices[1])
        top2 = vt[:2].T
        cfg = DiscoveryConfig(
            direction_count=2, steps=150, batch_size=8, map_pool_size=4,
            learning_rate=1e-2,
        )
        ds = optimize_directions(
            factory, 1, sampler, cfg, seed=0, alpha_bound=3.9, dtype=torch.float64
        )
        assert direction_projection_angle_deg(ds.directions, top2) < 15.0

    def test_deterministic(self):
        _, y, sampler, factory = self._oracle_problem()
        cfg = DiscoveryConfig(direction_count=2, steps=5, batch_size=2, map_pool_size=2)
        a = optimize_directions(factory, 1, sampler, cfg, seed=9, alpha_bound=3.9)
        b = optimize_directions(factory, 1, sampler, cfg, seed=9, alpha_bound=3.9)
        np.testing.assert_array_equal(a.directions, b.directions)

    def test_frozen_generator(self):
        cfg_g = GeneratorConfig(
            latent_channels=6, class_count=3, height=16, width=16,
            blocks=2, base_width=16, min_width=8,
        )
        model = build_generator(cfg_g, seed=0)
        for p in model.parameters():
            p.requires_grad_(False)
        taps = FeatureTapSpec.all_norm_acts(cfg_g)
        y = split_map()
        before = parameter_hash(model)
        cfg = DiscoveryConfig(direction_count=2, steps=3, batch_size=2, map_pool_size=2)
        optimize_directions(
            lambda ym: ToyFeatureSource(model, ym, taps), 1, lambda rng: y,
            cfg, seed=0, alpha_bound=2.4,
        )
        assert parameter_hash(model) == before

    def test_class_coverage_error(self):
        oracle = random_linear_oracle(7, 3, 16)
        factory = lambda ym: OracleFeatureSource(oracle, ym)
        two_class = LabelMap(
            labels=np.tile(np.asarray([[0, 1]], dtype=np.int32), (8, 8)), class_count=3
        )
        cfg = DiscoveryConfig(direction_count=2, steps=1, batch_size=2, map_pool_size=2)
        with pytest.raises(ClassCoverageError):
            optimize_directions(
                factory, 2, lambda rng: two_class, cfg, seed=0, alpha_bound=3.9
            )  # class 2 never appears in the sampled maps

    def test_requires_alpha_bound(self):
        _, y, sampler, factory = self._oracle_problem()
        cfg = DiscoveryConfig(direction_count=2, steps=1)
        with pytest.raises(ConfigurationError):
            optimize_directions(factory, 1, sampler, cfg, seed=0)


class TestRandomDirections:
    def test_unit_norms(self):
        ds = random_directions(5, 32, seed=0)
        np.testing.assert_allclose(
            np.linalg.norm(ds.directions.astype(np.float64), axis=1), 1.0, atol=1e-6
        )

    def test_seeds_differ(self):
        a = random_directions(4, 16, seed=0)
        b = random_directions(4, 16, seed=1)
        assert not np.array_equal(a.directions, b.directions)

    def test_one_dimensional(self):
        ds = random_directions(6, 1, seed=3)
        assert set(np.unique(ds.directions)) <= {-1.0, 1.0}


class TestGanspace:
    def test_identity_stub_recovers_pca_axes(self):
        source = IdentityFeatureSource(channels=6, height=4, width=4)
        ds, explained = ganspace_directions(source, sample_count=400, count=3, seed=0)
        # oracle: PCA axes of the sampled latents themselves
        rng = np.random.default_rng(np.random.SeedSequence([0, 0x6A25]))
        latents = rng.standard_normal((400, 6)).astype(np.float32).astype(np.float64)
        centered = latents - latents.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        for i in range(3):
            cos = abs(float(ds.directions[i].astype(np.float64) @ vt[i]))
            assert cos > 0.999

    def test_isotropic_variances_flat(self):
        # eigenvalue spread of an isotropic sample covariance shrinks like
        # ~4*sqrt(D/N); D=4, N=30000 puts the edge safely under 10%
        source = IdentityFeatureSource(channels=4, height=4, width=4)
        _, explained = ganspace_directions(
            source, sample_count=30_000, count=4, seed=1, batch_size=2048
        )
        spread = (explained.max() - explained.min()) / explained.mean()
        assert spread < 0.10

    def test_oracle_recovers_singular_vectors(self):
        oracle = random_linear_oracle(2, 2, 12)
        labels = np.ones((8, 8), dtype=np.int32)
        y = LabelMap(labels=labels, class_count=2)
        source = OracleFeatureSource(oracle, y, dtype=torch.float32)
        ds, _ = ganspace_directions(source, sample_count=10_000, count=2, seed=2)
        _, _, vt = np.linalg.svd(oracle.matrices[1])
        for i in range(2):
            cos = abs(float(ds.directions[i].astype(np.float64) @ vt[i]))
            assert cos >= 0.99

    def test_sample_count_guard(self):
        source = IdentityFeatureSource(channels=8, height=2, width=2)
        with pytest.raises(ConfigurationError):
            ganspace_directions(source, sample_count=4, count=2, seed=0)


class TestSefa:
    def test_orthogonal_weight_gram_identity(self):
        rng = np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
        np.testing.assert_allclose(q.T @ q, np.eye(16), atol=1e-10)
        ds = sefa_directions(q, 4)
        np.testing.assert_allclose(
            np.linalg.norm(ds.directions.astype(np.float64), axis=1), 1.0, atol=1e-6
        )

    def test_diagonal_weight_reads_axes(self):
        w = np.diag([3.0, 2.0, 1.0, 0.5])
        ds = sefa_directions(w, 2)
        np.testing.assert_allclose(np.abs(ds.directions[0]), [1, 0, 0, 0], atol=1e-12)
        np.testing.assert_allclose(np.abs(ds.directions[1]), [0, 1, 0, 0], atol=1e-12)

    def test_matches_power_iteration_oracle(self):
        # independent brute-force eigensolver: power iteration with deflation
        rng = np.random.default_rng(42)
        w = rng.standard_normal((40, 16))
        gram = w.T @ w
        oracle_vecs = []
        deflated = gram.copy()
        for _ in range(4):
            v = rng.standard_normal(16)
            for _ in range(5000):
                v = deflated @ v
                v /= np.linalg.norm(v)
            lam = v @ deflated @ v
            oracle_vecs.append(v.copy())
            deflated = deflated - lam * np.outer(v, v)
        ds = sefa_directions(w, 4)
        for i in range(4):
            cos = abs(float(ds.directions[i].astype(np.float64) @ oracle_vecs[i]))
            assert cos >= 0.999

    def test_too_many_directions(self):
        with pytest.raises(DimensionError):
            sefa_directions(np.eye(4), 5)


class TestDirectionSet:
    def test_unit_norm_enforced(self):
        with pytest.raises(ConfigurationError):
            DirectionSet(class_id=0, directions=np.ones((2, 4)), method="random")

    def test_pairwise_methods_need_two(self):
        v = np.asarray([[1.0, 0.0]])
        with pytest.raises(ConfigurationError):
            DirectionSet(class_id=0, directions=v, method="ctrl_sis")
        DirectionSet(class_id=0, directions=v, method="random")  # fine
