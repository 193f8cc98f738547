"""Input corruptions and the two corruption-response protocols.

Occlusion: black squares, by default one 16 px square centered in each image
quadrant; nodes are grouped inside/outside a square using their ground-truth
positions (predictions drift under occlusion, ground truth does not), and the
groups are compared by median node std and rank separability.

Noise: a ladder of Gaussian pixel-noise levels; per level the subset-mean
latent uncertainty and predictive score are reported together with the
Spearman statistic of level index versus each measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anomaly import roc_auc
from .errors import ConfigError
from .graph import NormalizedAdjacency
from .model import ModelConfig, Weights, sample_predictions
from .seeding import rng_from
from .synth import Sample
from .uncertainty import latent_uncertainty, nodewise_uncertainty, predictive_score, spearman


@dataclass(frozen=True)
class OcclusionSpec:
    """Square occluder, top-left corner (row, col), zero fill."""

    side: int = 16
    row: int = 0
    col: int = 0

    def validate(self, h: int, w: int) -> None:
        if self.side < 0:
            raise ConfigError(f"negative occlusion side {self.side}")
        if self.side > 0 and not (
            0 <= self.row <= h - self.side and 0 <= self.col <= w - self.side
        ):
            raise ConfigError(f"occlusion {self} does not fit inside {h}x{w}")


@dataclass(frozen=True)
class NoiseSpec:
    levels: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2, 0.4, 0.8)

    def __post_init__(self):
        if any(l < 0 for l in self.levels):
            raise ConfigError("noise levels must be non-negative")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ConfigError("noise levels must be strictly increasing")


def occlude(image: np.ndarray, spec: OcclusionSpec) -> np.ndarray:
    """Zero out the square; everything else is untouched."""
    h, w = image.shape[-2:]
    spec.validate(h, w)
    out = image.copy()
    out[..., spec.row : spec.row + spec.side, spec.col : spec.col + spec.side] = 0.0
    return out


def add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian pixel noise, clamped back to [0, 1]."""
    if sigma < 0:
        raise ConfigError(f"negative noise sigma {sigma}")
    if sigma == 0:
        return image.copy()
    noisy = image + rng.normal(0.0, sigma, size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def quadrant_occlusions(h: int, w: int, side: int) -> list[OcclusionSpec]:
    """One square centered in each image quadrant."""
    specs = []
    for qr in (0, 1):
        for qc in (0, 1):
            row = qr * (h // 2) + (h // 2 - side) // 2
            col = qc * (w // 2) + (w // 2 - side) // 2
            specs.append(OcclusionSpec(side=side, row=row, col=col))
    return specs


@dataclass
class OcclusionReport:
    rows: list[tuple[str, str, str, int, float]]  # (image_id, placement, group, node, node_std)
    inside_median: float
    outside_median: float
    separability_auc: float
    n_images: int
    side: int

    def summary(self) -> dict:
        return {
            "mode": "occlusion",
            "inside_median": self.inside_median,
            "outside_median": self.outside_median,
            "separability_auc": self.separability_auc,
            "n_images": self.n_images,
            "side": self.side,
        }


def occlusion_experiment(
    weights: Weights,
    cfg: ModelConfig,
    adj: NormalizedAdjacency,
    samples: list[Sample],
    n_samples: int = 50,
    side: int = 16,
    seed: int = 0,
) -> OcclusionReport:
    h, w = cfg.image_hw
    placements = quadrant_occlusions(h, w, side)
    rows = []
    inside_stds: list[float] = []
    outside_stds: list[float] = []
    for sample in samples:
        for spec in placements:
            corrupted = occlude(sample.image, spec)
            rng = rng_from(seed, "occlusion", sample.id, spec.row, spec.col)
            _, ens = sample_predictions(corrupted, weights, cfg, adj, n_samples, rng)
            node_std = nodewise_uncertainty(ens)
            px = sample.landmarks[:, 0] * (w - 1)
            py = sample.landmarks[:, 1] * (h - 1)
            inside = (
                (py >= spec.row)
                & (py < spec.row + spec.side)
                & (px >= spec.col)
                & (px < spec.col + spec.side)
            )
            placement = f"r{spec.row}c{spec.col}"
            for k in range(len(node_std)):
                group = "inside" if inside[k] else "outside"
                rows.append((sample.id, placement, group, k, float(node_std[k])))
                (inside_stds if inside[k] else outside_stds).append(float(node_std[k]))
    auc = roc_auc(inside_stds, outside_stds) if inside_stds and outside_stds else float("nan")
    return OcclusionReport(
        rows=rows,
        inside_median=float(np.median(inside_stds)) if inside_stds else float("nan"),
        outside_median=float(np.median(outside_stds)) if outside_stds else float("nan"),
        separability_auc=auc,
        n_images=len(samples),
        side=side,
    )


@dataclass
class NoiseSweepReport:
    levels: tuple[float, ...]
    latent_means: list[float]
    predictive_means: list[float]
    spearman_latent: float
    spearman_predictive: float

    def summary(self) -> dict:
        return {
            "mode": "noise",
            "levels": list(self.levels),
            "latent_unc_means": self.latent_means,
            "pred_score_means": self.predictive_means,
            "spearman_latent": self.spearman_latent,
            "spearman_predictive": self.spearman_predictive,
        }


def noise_sweep(
    weights: Weights,
    cfg: ModelConfig,
    adj: NormalizedAdjacency,
    samples: list[Sample],
    spec: NoiseSpec = NoiseSpec(),
    n_samples: int = 50,
    seed: int = 0,
) -> NoiseSweepReport:
    latent_means = []
    predictive_means = []
    for level_idx, sigma in enumerate(spec.levels):
        lat = []
        pred = []
        for sample in samples:
            noise_rng = rng_from(seed, "noise", sample.id, level_idx)
            corrupted = add_noise(sample.image, sigma, noise_rng)
            draw_rng = rng_from(seed, "noise-draws", sample.id, level_idx)
            dist, ens = sample_predictions(corrupted, weights, cfg, adj, n_samples, draw_rng)
            lat.append(latent_uncertainty(dist))
            pred.append(predictive_score(nodewise_uncertainty(ens)))
        latent_means.append(float(np.mean(lat)))
        predictive_means.append(float(np.mean(pred)))
    idx = list(range(len(spec.levels)))
    # the rank statistic needs at least 3 levels; shorter ladders still get a report
    undefined = len(spec.levels) < 3
    return NoiseSweepReport(
        levels=spec.levels,
        latent_means=latent_means,
        predictive_means=predictive_means,
        spearman_latent=float("nan") if undefined else spearman(idx, latent_means),
        spearman_predictive=float("nan") if undefined else spearman(idx, predictive_means),
    )
