"""Loss terms, KL-annealed Adam training loop, checkpointing.

Per step the loss is masked landmark MSE plus beta times the KL divergence of
the posterior from the standard normal prior, with beta following a
log-linear warmup from kl_start to kl_end over the first warmup fraction of
total steps. Metrics stream to a CSV; the best-validation and final weights
are checkpointed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ConfigError, ContractError, NumericError
from .graph import normalize_adjacency
from .model import (
    ModelConfig,
    Weights,
    decode,
    encode,
    init_weights,
    predict_mean,
    reparameterize,
    save_checkpoint,
)
from .seeding import rng_from
from .synth import Sample


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    kl_start: float = 1e-5
    kl_end: float = 1e-2
    kl_warmup_fraction: float = 0.5
    seed: int = 0
    max_steps: int = 0  # 0 = no cap; otherwise truncates training (and the schedule)
    val_interval: int = 0  # steps between validation passes; 0 = once per epoch

    def __post_init__(self):
        if not (0 < self.kl_start <= self.kl_end):
            raise ConfigError(f"need 0 < kl_start <= kl_end, got {self.kl_start}, {self.kl_end}")
        if not (0 < self.kl_warmup_fraction <= 1):
            raise ConfigError(f"kl_warmup_fraction must be in (0, 1], got {self.kl_warmup_fraction}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


def masked_mse(tape: Tape, pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared coordinate error over the annotated nodes."""
    target = np.asarray(target, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != (target.shape[0],):
        raise ContractError(
            f"masked_mse shapes: pred {pred.shape}, target {target.shape}, mask {mask.shape}"
        )
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ContractError("masked_mse with an all-false mask")
    diff = tape.sub(pred, Tensor(target))
    sq = tape.mul(diff, diff)
    gated = tape.mul(sq, Tensor(mask.astype(np.float32)[:, None]))
    return tape.scale(tape.sum(gated), 1.0 / (2 * n_masked))


def kl_divergence(tape: Tape, mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1)."""
    sq = tape.mul(mu, mu)
    var = tape.exp(log_var)
    inner = tape.sub(tape.sub(tape.add(sq, var), log_var), Tensor(np.ones(mu.shape, dtype=np.float32)))
    return tape.scale(tape.sum(inner), 0.5)


def kl_weight(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Log-linear interpolation from kl_start to kl_end over the warmup, flat after."""
    warmup = cfg.kl_warmup_fraction * total_steps
    frac = 1.0 if warmup <= 0 else min(1.0, step / warmup)
    return float(math.exp(math.log(cfg.kl_start) + frac * (math.log(cfg.kl_end) - math.log(cfg.kl_start))))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, weights: Weights) -> "AdamState":
        return cls(
            m={n: np.zeros_like(weights[n].data) for n in weights.names()},
            v={n: np.zeros_like(weights[n].data) for n in weights.names()},
        )


def adam_step(
    weights: Weights,
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    step: int,
) -> tuple[Weights, AdamState]:
    """Standard Adam with bias correction; step is 1-based. Mutates in place."""
    if step < 1:
        raise ConfigError("adam step count is 1-based")
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1**step
    correction2 = 1.0 - b2**step
    for name in weights.names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        weights[name].data -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(
            np.float32
        )
    return weights, state


@dataclass
class TrainResult:
    final_dir: Path
    best_dir: Path
    best_val_error_px: float
    metrics_path: Path
    steps: int


def _val_error_px(samples, weights, cfg, adj) -> float:
    """Mean Euclidean landmark error of the deterministic (posterior mean)
    prediction, in pixels of the image width."""
    errs = []
    for s in samples:
        pred = predict_mean(s.image, weights, cfg, adj)
        d = np.sqrt(((pred - s.landmarks) ** 2).sum(axis=1))
        errs.append(d.mean())
    return float(np.mean(errs)) * (cfg.image_hw[1] - 1)


def train_loop(
    train_samples: list[Sample],
    val_samples: list[Sample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: Path,
) -> TrainResult:
    if not train_samples:
        raise ContractError("empty training split")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    adj = normalize_adjacency(model_cfg.build_topology())
    weights = init_weights(model_cfg, train_cfg.seed)
    state = AdamState.zeros(weights)
    shuffle_rng = rng_from(train_cfg.seed, "shuffle")
    noise_rng = rng_from(train_cfg.seed, "reparam")

    steps_per_epoch = max(1, -(-len(train_samples) // train_cfg.batch_size))
    total_steps = train_cfg.epochs * steps_per_epoch
    if train_cfg.max_steps > 0:
        total_steps = min(total_steps, train_cfg.max_steps)
    val_interval = train_cfg.val_interval or steps_per_epoch

    metrics_path = out_dir / "metrics.csv"
    metrics_rows = ["step,split,mse,kl,beta,val_mean_landmark_error_px"]
    best_val = math.inf
    best_dir = out_dir / "best"
    final_dir = out_dir / "final"
    last_good = weights.copy()
    step = 0

    def run_validation(step: int, beta: float):
        nonlocal best_val
        err_px = _val_error_px(val_samples, weights, model_cfg, adj)
        metrics_rows.append(f"{step},val,,,{beta!r},{err_px!r}")
        if err_px < best_val:
            best_val = err_px
            save_checkpoint(best_dir, weights, model_cfg, train_cfg.seed, step)
        atomic_write_lines(metrics_path, metrics_rows)
        return err_px

    done = False
    for epoch in range(train_cfg.epochs):
        if done:
            break
        order = shuffle_rng.permutation(len(train_samples))
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [train_samples[i] for i in order[start : start + train_cfg.batch_size]]
            beta = kl_weight(step, total_steps, train_cfg)
            tape = Tape()
            total = None
            mse_sum = kl_sum = 0.0
            for sample in batch:
                dist, fmaps = encode(tape, Tensor(sample.image), weights, model_cfg)
                kl = kl_divergence(tape, dist.mu, dist.log_var)
                z = reparameterize(tape, dist, rng=noise_rng)
                pred = decode(tape, z, fmaps, weights, adj, model_cfg)
                mse = masked_mse(tape, pred, sample.landmarks, sample.annotation_mask)
                loss = tape.add(mse, tape.scale(kl, beta))
                total = loss if total is None else tape.add(total, loss)
                mse_sum += mse.item()
                kl_sum += kl.item()
            loss = tape.scale(total, 1.0 / len(batch))
            if not math.isfinite(loss.item()):
                save_checkpoint(out_dir / "last_good", last_good, model_cfg, train_cfg.seed, step)
                atomic_write_lines(metrics_path, metrics_rows)
                raise NumericError(f"non-finite loss at step {step}; last-good checkpoint dumped")
            grads_by_tensor = tape.backward(loss, weights.tensors())
            grads = {n: grads_by_tensor[weights[n]] for n in weights.names()}
            last_good = weights.copy()
            step += 1
            adam_step(weights, grads, state, train_cfg, step)
            metrics_rows.append(
                f"{step},train,{mse_sum / len(batch)!r},{kl_sum / len(batch)!r},{beta!r},"
            )
            if step % val_interval == 0 and val_samples:
                run_validation(step, beta)
            if step >= total_steps:
                done = True
                break

    if val_samples and (step % val_interval != 0 or step == 0):
        run_validation(step, kl_weight(step, total_steps, train_cfg))
    if not val_samples:
        save_checkpoint(best_dir, weights, model_cfg, train_cfg.seed, step)
        best_val = math.nan
    save_checkpoint(final_dir, weights, model_cfg, train_cfg.seed, step)
    atomic_write_lines(metrics_path, metrics_rows)
    return TrainResult(
        final_dir=final_dir,
        best_dir=best_dir,
        best_val_error_px=best_val,
        metrics_path=metrics_path,
        steps=step,
    )


def atomic_write_lines(path: Path, rows: list[str]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(rows) + "\n", encoding="utf-8")
    os.replace(tmp, path)
