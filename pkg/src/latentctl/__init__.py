"""Class-specific latent controls for a spatially-conditioned toy generator.

Train a small conditional generator on procedural scenes, optimize per-class
latent directions against a diversity / disentanglement / consistency
objective, compare with PCA-, eigendecomposition-, and random-direction
baselines, score everything with a masked-distance metric family, and serve
interactive class-wise edits over HTTP.
"""

from .scene_core import (
    ClassMask,
    EditVector,
    LabelMap,
    LatentCode3D,
    apply_direction,
    average_channel_norm,
    build_latent,
    class_mask,
    downsample_mask,
    gaussian_latent_sampler,
)
from .synthetic import SyntheticSceneSpec, render_synthetic_pair, sample_scenes
from .generator import (
    FeatureTapSpec,
    GeneratorConfig,
    LinearOracleGenerator,
    ToyGenerator,
    generate,
    linear_oracle_generate,
    random_linear_oracle,
    tap_features,
)
from .discovery import (
    DirectionSet,
    DiscoveryConfig,
    LossBreakdown,
    ctrl_sis_objective,
    ganspace_directions,
    loss_consistency,
    loss_disentanglement,
    loss_diversity,
    optimize_directions,
    random_directions,
    sefa_directions,
)
from .backbone import (
    FeatureBackbone,
    MsssimBackend,
    fid_lite,
    gaussian_frechet,
    masked_distance,
    miou_proxy,
)
from .protocol import (
    EvalProtocol,
    MetricReport,
    global_scores,
    local_scores,
    mcc_global,
    mcc_local,
    mcd_global,
    mcd_local,
    mod_score,
)
from .editing import EditSpec, EditStack, apply_edit_stack, compose_directions, layerwise_inject
from .training import TrainConfig, train_generator
from .harness import ExperimentConfig, Runtime, run_ablation, run_discover, run_evaluate, run_train

__version__ = "0.1.0"
