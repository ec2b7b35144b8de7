"""Adversarial training of the toy generator plus a supervised segmenter.

Hinge loss with a small conditional patch critic; no perceptual or
reconstruction terms, which keeps the generator's latent sensitivity high.
Scenes are rendered on the fly from the synthetic spec and never stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, TrainingDivergenceError
from .generator import (
    ConvSegmenter,
    GeneratorConfig,
    PatchDiscriminator,
    ToyGenerator,
    images_to_torch,
)
from .synthetic import SyntheticSceneSpec, render_synthetic_pair


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    betas: tuple[float, float] = (0.0, 0.99)
    segmenter_steps: int = 600
    segmenter_lr: float = 2e-3
    log_every: int = 200

    def __post_init__(self):
        if self.steps < 0 or self.segmenter_steps < 0:
            raise ConfigurationError("step counts must be nonnegative")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be positive")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr_generator": self.lr_generator,
            "lr_discriminator": self.lr_discriminator,
            "betas": list(self.betas),
            "segmenter_steps": self.segmenter_steps,
            "segmenter_lr": self.segmenter_lr,
            "log_every": self.log_every,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.0, 0.99)))
        return TrainConfig(**d)


@dataclass
class TrainedModels:
    generator: ToyGenerator
    discriminator: PatchDiscriminator
    segmenter: ConvSegmenter
    log: list[dict] = field(default_factory=list)


def _scene_batch(
    spec: SyntheticSceneSpec, rng: np.random.Generator, batch_size: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(images (B,3,H,W), one-hot labels (B,C,H,W), raw labels (B,H,W))."""
    images, onehots, labels = [], [], []
    for _ in range(batch_size):
        seed = int(rng.integers(0, 2**63 - 1))
        image, label_map = render_synthetic_pair(spec, seed)
        images.append(image)
        labels.append(label_map.labels)
        eye = np.eye(spec.class_count, dtype=np.float32)
        onehots.append(eye[label_map.labels].transpose(2, 0, 1))
    return (
        images_to_torch(np.stack(images)),
        torch.from_numpy(np.stack(onehots)),
        torch.from_numpy(np.stack(labels)).long(),
    )


def _latent_batch(
    rng: np.random.Generator, batch_size: int, channels: int, height: int, width: int
) -> torch.Tensor:
    base = rng.standard_normal((batch_size, channels)).astype(np.float32)
    z = torch.from_numpy(base)[:, :, None, None]
    return z.expand(-1, -1, height, width).contiguous()


def train_generator(
    spec: SyntheticSceneSpec,
    gen_config: GeneratorConfig,
    train_config: TrainConfig,
    seed: int,
) -> TrainedModels:
    """Hinge-loss adversarial training; deterministic per seed on one backend."""
    if (spec.height, spec.width) != (gen_config.height, gen_config.width):
        raise ConfigurationError("scene spec and generator canvas disagree")
    if spec.class_count != gen_config.class_count:
        raise ConfigurationError("scene spec and generator class counts disagree")
    torch.manual_seed(seed)
    generator = ToyGenerator(gen_config)
    discriminator = PatchDiscriminator(gen_config)
    segmenter = ConvSegmenter(gen_config.class_count)
    opt_g = torch.optim.Adam(
        generator.parameters(), lr=train_config.lr_generator, betas=train_config.betas
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(), lr=train_config.lr_discriminator, betas=train_config.betas
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7124]))
    log: list[dict] = []

    for step in range(train_config.steps):
        real, onehot, _ = _scene_batch(spec, rng, train_config.batch_size)
        z = _latent_batch(
            rng, train_config.batch_size, gen_config.latent_channels,
            gen_config.height, gen_config.width,
        )
        fake, _ = generator(z, onehot)

        d_real = discriminator(real, onehot)
        d_fake = discriminator(fake.detach(), onehot)
        loss_d = F.relu(1 - d_real).mean() + F.relu(1 + d_fake).mean()
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        loss_g = -discriminator(fake, onehot).mean()
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        if not (math.isfinite(float(loss_d.detach())) and math.isfinite(float(loss_g.detach()))):
            raise TrainingDivergenceError(step)
        if step % train_config.log_every == 0 or step == train_config.steps - 1:
            log.append({"step": step, "loss_d": float(loss_d), "loss_g": float(loss_g)})

    seg_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E6]))
    opt_s = torch.optim.Adam(segmenter.parameters(), lr=train_config.segmenter_lr)
    for step in range(train_config.segmenter_steps):
        images, _, labels = _scene_batch(spec, seg_rng, train_config.batch_size)
        logits = segmenter(images)
        loss_s = F.cross_entropy(logits, labels)
        opt_s.zero_grad()
        loss_s.backward()
        opt_s.step()
        if not math.isfinite(float(loss_s)):
            raise TrainingDivergenceError(step, "segmenter training diverged")
        if step % train_config.log_every == 0 or step == train_config.segmenter_steps - 1:
            log.append({"step": step, "loss_seg": float(loss_s)})

    generator.eval()
    discriminator.eval()
    segmenter.eval()
    for p in generator.parameters():
        p.requires_grad_(False)
    return TrainedModels(
        generator=generator, discriminator=discriminator, segmenter=segmenter, log=log
    )
