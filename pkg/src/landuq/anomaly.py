"""Out-of-distribution detection: Isolation Forest, ROC AUC, KDE.

The Isolation Forest follows the original construction: each tree is grown on
a random subsample by splitting a uniformly chosen feature at a uniform point
strictly between that feature's min and max, down to ceil(log2(psi)) depth or
single/duplicate nodes. The anomaly score is 2^(-E[h(x)] / c(psi)) where h
adds the subtree adjustment c(leaf size) at the leaf and c uses the
ln + Euler-Mascheroni harmonic approximation.

ROC AUC is computed exactly from ranks (ties count one half). The KDE is a
Gaussian kernel with Scott's bandwidth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .seeding import rng_from

EULER_GAMMA = 0.5772156649


def harmonic(i: float) -> float:
    return math.log(i) + EULER_GAMMA


def average_path_length(n: int) -> float:
    """Expected search depth c(n) in a binary search tree of n points."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


# tree nodes: ("leaf", size) or ("split", feature, value, left, right)
Node = tuple


@dataclass
class IsolationForest:
    trees: list[Node]
    subsample: int
    n_features: int

    def path_length(self, x: np.ndarray, tree: Node) -> float:
        depth = 0
        node = tree
        while node[0] == "split":
            _, feature, value, left, right = node
            node = left if x[feature] < value else right
            depth += 1
        return depth + average_path_length(node[1])

    def score(self, x: np.ndarray) -> float:
        return iforest_score(self, x)


def _grow_tree(data: np.ndarray, rng: np.random.Generator, depth: int, max_depth: int) -> Node:
    n = data.shape[0]
    if n <= 1 or depth >= max_depth:
        return ("leaf", n)
    spreads = data.max(axis=0) - data.min(axis=0)
    usable = np.flatnonzero(spreads > 0)
    if usable.size == 0:  # all duplicates
        return ("leaf", n)
    feature = int(usable[rng.integers(usable.size)])
    lo = float(data[:, feature].min())
    hi = float(data[:, feature].max())
    value = float(rng.uniform(lo, hi))
    if value <= lo:  # uniform() can land on the closed lower bound
        value = float(np.nextafter(lo, hi))
    mask = data[:, feature] < value
    return (
        "split",
        feature,
        value,
        _grow_tree(data[mask], rng, depth + 1, max_depth),
        _grow_tree(data[~mask], rng, depth + 1, max_depth),
    )


def iforest_fit(
    data, rng: np.random.Generator, n_trees: int = 100, subsample: int = 256
) -> IsolationForest:
    """Grow the forest on psi-point subsamples (psi capped at the data size)."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] < 2:
        raise ContractError(f"isolation forest needs >= 2 points, got {data.shape[0]}")
    psi = min(subsample, data.shape[0])
    max_depth = math.ceil(math.log2(psi)) if psi > 1 else 0
    trees = []
    for _ in range(n_trees):
        idx = rng.choice(data.shape[0], size=psi, replace=False)
        trees.append(_grow_tree(data[idx], rng, 0, max_depth))
    return IsolationForest(trees=trees, subsample=psi, n_features=data.shape[1])


def iforest_score(forest: IsolationForest, x) -> float:
    """s(x) = 2^(-E[h(x)] / c(psi)), in (0, 1); higher is more anomalous."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != forest.n_features:
        raise ContractError(f"expected {forest.n_features} features, got {x.shape[0]}")
    mean_path = float(np.mean([forest.path_length(x, t) for t in forest.trees]))
    denom = average_path_length(forest.subsample)
    if denom == 0:
        return 0.5
    return float(2.0 ** (-mean_path / denom))


def roc_auc(scores_pos, scores_neg) -> float:
    """Probability a random positive outranks a random negative; ties half.

    Exact, via the rank-sum (Mann-Whitney) formula with average ranks.
    """
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ContractError("roc_auc needs non-empty score lists")
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size, dtype=np.float64)
    sorted_vals = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = ranks[: pos.size].sum()
    u = rank_sum_pos - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def kde(scores, grid) -> np.ndarray:
    """Gaussian kernel density with Scott's bandwidth std * n^(-1/5)."""
    scores = np.asarray(scores, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if scores.size < 2:
        raise ContractError("kde needs at least 2 scores")
    spread = float(scores.std())
    if spread == 0:
        raise ContractError("kde undefined for zero-spread scores")
    h = spread * scores.size ** (-0.2)
    z = (grid[:, None] - scores[None, :]) / h
    density = np.exp(-0.5 * z**2).sum(axis=1) / (scores.size * h * math.sqrt(2 * math.pi))
    return density


def kde_grid(all_scores, points: int = 256) -> np.ndarray:
    """Evaluation grid spanning the scores with a 3-bandwidth margin."""
    s = np.asarray(all_scores, dtype=np.float64)
    h = max(s.std() * s.size ** (-0.2), 1e-12)
    return np.linspace(s.min() - 3 * h, s.max() + 3 * h, points)


def kde_or_delta(scores, grid) -> np.ndarray:
    """kde, except zero-spread scores become a discretized delta spike.

    The spike is the h -> 0 limit of the kernel estimate: all mass on the
    grid point nearest the constant value, normalized by the grid spacing so
    it still integrates to one. Plotted, it reads as a vertical marker.
    """
    scores = np.asarray(scores, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if scores.size >= 2 and scores.std() > 0:
        return kde(scores, grid)
    density = np.zeros_like(grid)
    if grid.size >= 2:
        spacing = grid[1] - grid[0]
        density[int(np.abs(grid - scores.mean()).argmin())] = 1.0 / max(spacing, 1e-12)
    return density


@dataclass
class OODReport:
    auc: dict[str, dict[str, float]]  # detector -> {category or "pooled" -> auc}
    chosen_n_trees: int
    kde_curves: dict[str, dict[str, np.ndarray]]  # detector -> {grid, density_id, density_ood}


def _latent_sigma(image, weights, cfg, adj):
    from .autodiff import Tape, Tensor
    from .model import encode

    tape = Tape()
    dist, _ = encode(tape, Tensor(image), weights, cfg)
    return np.exp(0.5 * dist.log_var.data.astype(np.float64))


def _predictive_and_sigma(image, weights, cfg, adj, n_samples, rng):
    from .model import sample_predictions
    from .uncertainty import nodewise_uncertainty, predictive_score

    dist, ens = sample_predictions(image, weights, cfg, adj, n_samples, rng)
    sigma = np.exp(0.5 * dist.log_var.data.astype(np.float64))
    return predictive_score(nodewise_uncertainty(ens)), sigma


def ood_experiment(
    weights,
    cfg,
    adj,
    id_train,
    id_val,
    id_test,
    ood_samples,
    n_samples: int = 50,
    seed: int = 0,
    n_trees_grid: tuple[int, ...] = (50, 100, 200),
) -> OODReport:
    """Both detectors against every OOD category present in ood_samples.

    Detector "predictive": the per-image mean node std. Detector "iforest":
    an Isolation Forest fit on the training split's latent sigma vectors; its
    tree count is selected on a validation half of the OOD set (paired with
    the ID validation split) and reported on the held-out halves.
    """
    # per-category alternating split of the OOD set into val/test halves
    by_cat: dict[str, list] = {}
    for s in ood_samples:
        by_cat.setdefault(s.ood_label.value, []).append(s)
    ood_val = {c: lst[0::2] for c, lst in by_cat.items()}
    ood_test = {c: lst[1::2] for c, lst in by_cat.items()}

    train_sigma = np.stack([_latent_sigma(s.image, weights, cfg, adj) for s in id_train])
    val_sigma = np.stack([_latent_sigma(s.image, weights, cfg, adj) for s in id_val])

    test_pred, test_sigma = [], []
    for s in id_test:
        p, sig = _predictive_and_sigma(
            s.image, weights, cfg, adj, n_samples, rng_from(seed, "ood-pred", s.id)
        )
        test_pred.append(p)
        test_sigma.append(sig)
    test_sigma = np.stack(test_sigma)

    ood_info: dict[str, dict[str, list]] = {}
    for cat, lst in by_cat.items():
        info = {"val_sigma": [], "test_sigma": [], "test_pred": []}
        for s in ood_val[cat]:
            info["val_sigma"].append(_latent_sigma(s.image, weights, cfg, adj))
        for s in ood_test[cat]:
            p, sig = _predictive_and_sigma(
                s.image, weights, cfg, adj, n_samples, rng_from(seed, "ood-pred", s.id)
            )
            info["test_pred"].append(p)
            info["test_sigma"].append(sig)
        ood_info[cat] = info

    # hyperparameter selection on the validation halves, pooled over categories
    best = None
    pooled_val_ood = [sig for info in ood_info.values() for sig in info["val_sigma"]]
    for n_trees in n_trees_grid:
        forest = iforest_fit(train_sigma, rng_from(seed, "forest", n_trees), n_trees=n_trees)
        val_scores_id = [iforest_score(forest, x) for x in val_sigma]
        val_scores_ood = [iforest_score(forest, x) for x in pooled_val_ood]
        auc = roc_auc(val_scores_ood, val_scores_id)
        if best is None or auc > best[0]:
            best = (auc, n_trees, forest)
    _, chosen_n_trees, forest = best

    forest_id_scores = [iforest_score(forest, x) for x in test_sigma]
    auc_table: dict[str, dict[str, float]] = {"predictive": {}, "iforest": {}}
    pooled_pred_ood: list[float] = []
    pooled_forest_ood: list[float] = []
    for cat, info in ood_info.items():
        forest_cat = [iforest_score(forest, x) for x in info["test_sigma"]]
        auc_table["predictive"][cat] = roc_auc(info["test_pred"], test_pred)
        auc_table["iforest"][cat] = roc_auc(forest_cat, forest_id_scores)
        pooled_pred_ood.extend(info["test_pred"])
        pooled_forest_ood.extend(forest_cat)
    auc_table["predictive"]["pooled"] = roc_auc(pooled_pred_ood, test_pred)
    auc_table["iforest"]["pooled"] = roc_auc(pooled_forest_ood, forest_id_scores)

    kde_curves = {}
    for name, id_scores, ood_scores in (
        ("predictive", test_pred, pooled_pred_ood),
        ("iforest", forest_id_scores, pooled_forest_ood),
    ):
        grid = kde_grid(np.concatenate([id_scores, ood_scores]))
        kde_curves[name] = {
            "grid": grid,
            "density_id": kde_or_delta(id_scores, grid),
            "density_ood": kde_or_delta(ood_scores, grid),
        }
    return OODReport(auc=auc_table, chosen_n_trees=chosen_n_trees, kde_curves=kde_curves)
