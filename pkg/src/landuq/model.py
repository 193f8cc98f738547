"""Convolutional encoder, variational bottleneck, graph convolutional decoder.

The encoder is a stack of stride-2 conv+relu stages with two affine heads
producing the posterior mean and log variance. The decoder maps a latent
vector to initial per-node features through one affine layer, then applies
graph convolutions over the anatomy adjacency down to 2 coordinates per node.

Two variants: "plain" decodes from the latent alone; "skip" adds a readout
head before the final graph layer, bilinearly samples one encoder feature map
at those intermediate coordinates, and concatenates the sampled features onto
the node features so high-resolution image evidence can bypass the
bottleneck.

Everything runs on the autodiff tape; batching over latent draws uses a
leading axis so an ensemble decode is a single pass.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ConfigError, DataError, ShapeError
from .graph import AnatomyTopology, NormalizedAdjacency, build_topology, graph_conv, normalize_adjacency
from .seeding import rng_from

LOG_VAR_CLAMP = 10.0


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "plain"  # "plain" or "skip"
    latent_dim: int = 32
    encoder_channels: tuple[int, ...] = (8, 16, 32, 64)
    decoder_widths: tuple[int, ...] = (64, 48, 32, 2)
    skip_stage: int = 2  # 1-based encoder stage whose feature map feeds the skip path
    image_hw: tuple[int, int] = (64, 64)
    topology: tuple[tuple[str, int, bool], ...] = (
        ("left_lung", 24, True),
        ("right_lung", 24, True),
        ("heart", 16, True),
    )

    def __post_init__(self):
        if self.variant not in ("plain", "skip"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.decoder_widths[-1] != 2:
            raise ConfigError("final decoder width must be 2 (x, y per node)")
        if len(self.decoder_widths) < 2:
            raise ConfigError("decoder needs at least one graph layer")
        if not 1 <= self.skip_stage <= len(self.encoder_channels):
            raise ConfigError(f"skip_stage {self.skip_stage} outside encoder depth")

    def build_topology(self) -> AnatomyTopology:
        return build_topology([(n, c, cl) for n, c, cl in self.topology])

    def node_count(self) -> int:
        return sum(c for _, c, _ in self.topology)

    def encoder_spatial(self) -> list[tuple[int, int]]:
        """Feature map size after each stride-2 stage."""
        h, w = self.image_hw
        sizes = []
        for _ in self.encoder_channels:
            h, w = -(-h // 2), -(-w // 2)
            sizes.append((h, w))
        return sizes

    def flat_dim(self) -> int:
        h, w = self.encoder_spatial()[-1]
        return self.encoder_channels[-1] * h * w


@dataclass(frozen=True)
class LatentDistribution:
    """Diagonal Gaussian posterior parameters for one image."""

    mu: Tensor
    log_var: Tensor

    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)


@dataclass(frozen=True)
class PredictionEnsemble:
    """N decoded landmark sets for one image plus per-node statistics."""

    samples: np.ndarray  # (n, M, 2)
    node_mean: np.ndarray  # (M, 2)
    node_std_xy: np.ndarray  # (M, 2), population std per coordinate
    n: int

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "PredictionEnsemble":
        if samples.ndim != 3 or samples.shape[0] < 2:
            raise ConfigError(f"ensemble needs (n>=2, M, 2) samples, got {samples.shape}")
        return cls(
            samples=samples,
            node_mean=samples.mean(axis=0),
            node_std_xy=samples.std(axis=0),
            n=samples.shape[0],
        )


class Weights:
    """Named parameter tensors in a fixed order."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = dict(params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> "Weights":
        return Weights(
            {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.params.items()}
        )


def _layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    c_in = 1
    for i, c_out in enumerate(cfg.encoder_channels):
        shapes.append((f"enc.conv{i}.w", (c_out, c_in, 3, 3)))
        shapes.append((f"enc.conv{i}.b", (c_out, 1, 1)))
        c_in = c_out
    flat = cfg.flat_dim()
    for head in ("mu", "logvar"):
        shapes.append((f"enc.{head}.w", (flat, cfg.latent_dim)))
        shapes.append((f"enc.{head}.b", (cfg.latent_dim,)))
    m = cfg.node_count()
    f0 = cfg.decoder_widths[0]
    shapes.append(("dec.init.w", (cfg.latent_dim, m * f0)))
    shapes.append(("dec.init.b", (m * f0,)))
    widths = list(cfg.decoder_widths)
    skip_extra = cfg.encoder_channels[cfg.skip_stage - 1] if cfg.variant == "skip" else 0
    for j in range(1, len(widths)):
        w_in = widths[j - 1]
        if cfg.variant == "skip" and j == len(widths) - 1:
            w_in += skip_extra
        shapes.append((f"dec.gc{j - 1}.w", (w_in, widths[j])))
        shapes.append((f"dec.gc{j - 1}.b", (widths[j],)))
    if cfg.variant == "skip":
        shapes.append(("dec.readout.w", (widths[-2], 2)))
        shapes.append(("dec.readout.b", (2,)))
    return shapes


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name.endswith(".w") and len(shape) == 4:  # conv kernel
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    if name.endswith(".w"):
        return shape[0], shape[1]
    return shape[0], shape[0]


def init_weights(cfg: ModelConfig, seed: int) -> Weights:
    """Uniform Glorot init for weights, zeros for biases, fixed draw order."""
    rng = rng_from(seed, "init")
    params: dict[str, Tensor] = {}
    for name, shape in _layer_shapes(cfg):
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in, fan_out = _fans(name, shape)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return Weights(params)


def encode(
    tape: Tape, image: Tensor, weights: Weights, cfg: ModelConfig
) -> tuple[LatentDistribution, list[Tensor]]:
    """Run the conv stack and affine heads; returns the posterior and all
    post-relu feature maps (for the skip path)."""
    if image.shape != (1, *cfg.image_hw):
        raise ShapeError(f"expected image (1, {cfg.image_hw[0]}, {cfg.image_hw[1]}), got {image.shape}")
    h = image
    fmaps: list[Tensor] = []
    for i in range(len(cfg.encoder_channels)):
        h = tape.conv2d(h, weights[f"enc.conv{i}.w"], stride=2)
        h = tape.relu(tape.add(h, weights[f"enc.conv{i}.b"]))
        fmaps.append(h)
    flat = tape.reshape(h, (1, cfg.flat_dim()))
    mu = tape.reshape(tape.affine(flat, weights["enc.mu.w"], weights["enc.mu.b"]), (cfg.latent_dim,))
    log_var = tape.reshape(
        tape.affine(flat, weights["enc.logvar.w"], weights["enc.logvar.b"]), (cfg.latent_dim,)
    )
    log_var = tape.clamp(log_var, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
    return LatentDistribution(mu=mu, log_var=log_var), fmaps


def reparameterize(
    tape: Tape,
    dist: LatentDistribution,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
) -> Tensor:
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I).

    Pass eps directly to pin the noise (tests, batched draws); otherwise it is
    drawn from rng. A leading axis on eps batches the draws.
    """
    if eps is None:
        if rng is None:
            raise ConfigError("reparameterize needs either rng or eps")
        eps = rng.standard_normal(dist.mu.shape).astype(np.float32)
    sigma = tape.exp(tape.scale(tape.clamp(dist.log_var, -LOG_VAR_CLAMP, LOG_VAR_CLAMP), 0.5))
    return tape.add(dist.mu, tape.mul(sigma, Tensor(np.asarray(eps, dtype=np.float32))))


def _decoder_stack(
    tape: Tape,
    z: Tensor,
    weights: Weights,
    adj: NormalizedAdjacency,
    cfg: ModelConfig,
    fmaps: list[Tensor] | None,
) -> Tensor:
    single = z.ndim == 1
    z2 = tape.reshape(z, (1, cfg.latent_dim)) if single else z
    batch = z2.shape[0]
    m = cfg.node_count()
    f0 = cfg.decoder_widths[0]
    feats = tape.reshape(tape.affine(z2, weights["dec.init.w"], weights["dec.init.b"]), (batch, m, f0))
    widths = cfg.decoder_widths
    last = len(widths) - 2  # index of the final graph layer
    for j in range(len(widths) - 1):
        if cfg.variant == "skip" and j == last:
            coords_mid = graph_conv(tape, feats, adj, weights["dec.readout.w"], weights["dec.readout.b"])
            sampled = tape.bilinear_sample(fmaps[cfg.skip_stage - 1], coords_mid)
            feats = tape.concat([feats, sampled], axis=-1)
        feats = graph_conv(tape, feats, adj, weights[f"dec.gc{j}.w"], weights[f"dec.gc{j}.b"])
        if j != last:
            feats = tape.relu(feats)
    return tape.reshape(feats, (m, 2)) if single else feats


def decode_plain(
    tape: Tape, z: Tensor, weights: Weights, adj: NormalizedAdjacency, cfg: ModelConfig
) -> Tensor:
    """Landmarks from the latent alone; (M, 2) or (B, M, 2) for batched z."""
    if cfg.variant != "plain":
        raise ConfigError("decode_plain called with a skip-variant config")
    return _decoder_stack(tape, z, weights, adj, cfg, None)


def decode_skip(
    tape: Tape,
    z: Tensor,
    fmaps: list[Tensor],
    weights: Weights,
    adj: NormalizedAdjacency,
    cfg: ModelConfig,
) -> Tensor:
    """Skip-variant decode; fmaps must come from the same encode pass."""
    if cfg.variant != "skip":
        raise ConfigError("decode_skip called with a plain-variant config")
    return _decoder_stack(tape, z, weights, adj, cfg, fmaps)


def decode(tape, z, fmaps, weights, adj, cfg) -> Tensor:
    return (
        decode_plain(tape, z, weights, adj, cfg)
        if cfg.variant == "plain"
        else decode_skip(tape, z, fmaps, weights, adj, cfg)
    )


def sample_predictions(
    image: np.ndarray | Tensor,
    weights: Weights,
    cfg: ModelConfig,
    adj: NormalizedAdjacency,
    n: int,
    rng: np.random.Generator,
) -> tuple[LatentDistribution, PredictionEnsemble]:
    """Encode once, decode n reparameterized draws in one batch."""
    if n < 2:
        raise ConfigError(f"need n >= 2 prediction samples, got {n}")
    if not isinstance(image, Tensor):
        image = Tensor(image)
    tape = Tape()
    dist, fmaps = encode(tape, image, weights, cfg)
    eps = rng.standard_normal((n, cfg.latent_dim)).astype(np.float32)
    z = reparameterize(tape, dist, eps=eps)
    preds = decode(tape, z, fmaps, weights, adj, cfg)
    return dist, PredictionEnsemble.from_samples(preds.data.copy())


def predict_mean(
    image: np.ndarray | Tensor, weights: Weights, cfg: ModelConfig, adj: NormalizedAdjacency
) -> np.ndarray:
    """Deterministic prediction: decode the posterior mean."""
    if not isinstance(image, Tensor):
        image = Tensor(image)
    tape = Tape()
    dist, fmaps = encode(tape, image, weights, cfg)
    return decode(tape, dist.mu, fmaps, weights, adj, cfg).data.copy()


# ---- checkpoints ----


def save_checkpoint(
    directory: Path, weights: Weights, cfg: ModelConfig, seed: int, step: int
) -> None:
    """weights.bin holds concatenated little-endian float32 buffers; the JSON
    manifest records (name, shape, byte offset) plus a config echo."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = []
    entries = []
    offset = 0
    for name in weights.names():
        data = weights[name].data.astype("<f4")
        blobs.append(data.tobytes())
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        offset += data.nbytes
    manifest = {
        "params": entries,
        "total_bytes": offset,
        "config": config_to_dict(cfg),
        "seed": seed,
        "step": step,
    }
    payload = b"".join(blobs)
    tmp = directory / "weights.bin.tmp"
    tmp.write_bytes(payload)
    os.replace(tmp, directory / "weights.bin")
    tmp = directory / "weights.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, directory / "weights.json")


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "variant": cfg.variant,
        "latent_dim": cfg.latent_dim,
        "encoder_channels": list(cfg.encoder_channels),
        "decoder_widths": list(cfg.decoder_widths),
        "skip_stage": cfg.skip_stage,
        "image_hw": list(cfg.image_hw),
        "topology": [[n, c, cl] for n, c, cl in cfg.topology],
    }


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        variant=d["variant"],
        latent_dim=d["latent_dim"],
        encoder_channels=tuple(d["encoder_channels"]),
        decoder_widths=tuple(d["decoder_widths"]),
        skip_stage=d["skip_stage"],
        image_hw=tuple(d["image_hw"]),
        topology=tuple((n, c, cl) for n, c, cl in d["topology"]),
    )


def load_checkpoint(directory: Path) -> tuple[Weights, ModelConfig, dict]:
    directory = Path(directory)
    manifest_path = directory / "weights.json"
    bin_path = directory / "weights.bin"
    if not manifest_path.is_file() or not bin_path.is_file():
        raise DataError(f"no checkpoint (weights.json + weights.bin) in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    raw = bin_path.read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise DataError(
            f"{bin_path}: expected {manifest['total_bytes']} bytes, found {len(raw)}"
        )
    params: dict[str, Tensor] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"])
        params[entry["name"]] = Tensor(data.reshape(shape).copy(), requires_grad=True)
    cfg = config_from_dict(manifest["config"])
    return Weights(params), cfg, manifest
