"""The two uncertainty measures and the statistics relating them to error.

Latent uncertainty is the mean posterior standard deviation across latent
dimensions: one scalar per image straight from the encoder. Predictive
uncertainty is per node: the isotropic spread sqrt(var_x + var_y) of the
decoded ensemble, with the per-image score being its mean across nodes.

Variances are population variances (divisor n); with 50 draws the
distinction from sample variance is negligible and the small-n oracles stay
exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .model import LatentDistribution, PredictionEnsemble


@dataclass
class UncertaintyRecord:
    """Exportable per-image record (one JSON line in the export file)."""

    id: str
    node_mean: np.ndarray  # (M, 2)
    node_std: np.ndarray  # (M,)
    latent_sigma: np.ndarray  # (latent_dim,)
    latent_uncertainty: float
    predictive_score: float


def latent_uncertainty(dist: LatentDistribution) -> float:
    """Mean over latent dimensions of exp(log_var / 2)."""
    return float(np.exp(0.5 * dist.log_var.data).mean())


def nodewise_uncertainty(ens: PredictionEnsemble) -> np.ndarray:
    """Per-node std magnitude sqrt(var_x + var_y) across the ensemble."""
    if ens.n < 2:
        raise ContractError(f"node-wise uncertainty needs n >= 2, got {ens.n}")
    var = ens.samples.var(axis=0)  # population variance, (M, 2)
    return np.sqrt(var.sum(axis=1))


def predictive_score(node_std: np.ndarray) -> float:
    """Per-image score: mean across nodes of the node-wise std."""
    node_std = np.asarray(node_std)
    if node_std.size < 1:
        raise ContractError("predictive score of an empty node list")
    return float(node_std.mean())


def node_error(pred_mean: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-node Euclidean distance in normalized units."""
    pred_mean = np.asarray(pred_mean)
    target = np.asarray(target)
    if pred_mean.shape != target.shape:
        raise ContractError(f"shape mismatch {pred_mean.shape} vs {target.shape}")
    return np.sqrt(((pred_mean - target) ** 2).sum(axis=1))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ContractError(f"pearson needs two equal vectors of length >= 3, got {x.shape}, {y.shape}")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc**2).sum() * (yc**2).sum())
    if denom == 0:
        raise ContractError("pearson undefined for zero-variance input")
    return float((xc * yc).sum() / denom)


def _fractional_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; ties share the average of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of fractional ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ContractError(f"spearman needs two equal vectors of length >= 3, got {x.shape}, {y.shape}")
    return pearson(_fractional_ranks(x), _fractional_ranks(y))


def make_record(
    image_id: str, dist: LatentDistribution, ens: PredictionEnsemble
) -> UncertaintyRecord:
    node_std = nodewise_uncertainty(ens)
    sigma = np.exp(0.5 * dist.log_var.data)
    return UncertaintyRecord(
        id=image_id,
        node_mean=ens.node_mean,
        node_std=node_std,
        latent_sigma=sigma,
        latent_uncertainty=float(sigma.mean()),
        predictive_score=predictive_score(node_std),
    )


def record_to_json(rec: UncertaintyRecord) -> str:
    """One JSON line; field names and order are the export contract."""
    payload = {
        "id": rec.id,
        "node_mean": [float(v) for v in np.asarray(rec.node_mean).reshape(-1)],
        "node_std": [float(v) for v in np.asarray(rec.node_std)],
        "latent_sigma": [float(v) for v in np.asarray(rec.latent_sigma)],
        "latent_uncertainty": float(rec.latent_uncertainty),
        "predictive_score": float(rec.predictive_score),
    }
    return json.dumps(payload)


def record_from_json(line: str) -> UncertaintyRecord:
    d = json.loads(line)
    return UncertaintyRecord(
        id=d["id"],
        node_mean=np.array(d["node_mean"], dtype=np.float64).reshape(-1, 2),
        node_std=np.array(d["node_std"], dtype=np.float64),
        latent_sigma=np.array(d["latent_sigma"], dtype=np.float64),
        latent_uncertainty=d["latent_uncertainty"],
        predictive_score=d["predictive_score"],
    )


def write_records(path: Path, records: list[UncertaintyRecord]) -> None:
    import os

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(record_to_json(r) + "\n" for r in records), encoding="utf-8")
    os.replace(tmp, path)


def read_records(path: Path) -> list[UncertaintyRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [record_from_json(line) for line in lines if line.strip()]
