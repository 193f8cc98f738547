"""Anatomical contour graphs and the graph convolution used by the decoder.

Each structure contributes one connected component: a simple cycle for closed
contours, a chain for open ones. All structures share a single node index
space, and the decoder operates on the symmetric-normalized adjacency of the
whole graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ConfigError, ShapeError

__all__ = ["AnatomyTopology", "NormalizedAdjacency", "build_topology", "normalize_adjacency", "graph_conv"]


@dataclass(frozen=True)
class AnatomyTopology:
    """Fixed node set and edge list over global node indices."""

    structures: tuple[tuple[str, int, bool], ...]  # (name, node_count, closed)
    edges: tuple[tuple[int, int], ...]
    node_count: int

    def node_slices(self) -> dict[str, slice]:
        """Global index range of each structure's nodes."""
        out = {}
        offset = 0
        for name, count, _ in self.structures:
            out[name] = slice(offset, offset + count)
            offset += count
        return out

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count), dtype=np.float32)
        for i, j in self.edges:
            a[i, j] = 1.0
            a[j, i] = 1.0
        return a


@dataclass
class NormalizedAdjacency:
    """Dense symmetric-normalized adjacency with self loops."""

    matrix: np.ndarray
    _tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_tensor(self) -> Tensor:
        if self._tensor is None:
            self._tensor = Tensor(self.matrix)
        return self._tensor


def build_topology(spec: list[tuple[str, int, bool]]) -> AnatomyTopology:
    """Build the landmark graph from (name, node_count, closed) entries.

    Closed structures become cycles (node i joined to (i+1) mod n) and need at
    least 3 nodes; open structures become chains and need at least 2. There
    are no cross-structure edges.
    """
    if not spec:
        raise ConfigError("topology needs at least one structure")
    names = [name for name, _, _ in spec]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate structure names in {names}")
    edges: list[tuple[int, int]] = []
    offset = 0
    for name, count, closed in spec:
        if closed and count < 3:
            raise ConfigError(f"closed contour {name!r} needs >= 3 nodes, got {count}")
        if not closed and count < 2:
            raise ConfigError(f"open contour {name!r} needs >= 2 nodes, got {count}")
        for i in range(count if closed else count - 1):
            edges.append((offset + i, offset + (i + 1) % count))
        offset += count
    return AnatomyTopology(
        structures=tuple((str(n), int(c), bool(cl)) for n, c, cl in spec),
        edges=tuple(edges),
        node_count=offset,
    )


def normalize_adjacency(topology: AnatomyTopology) -> NormalizedAdjacency:
    """Symmetric normalization with self loops: D^-1/2 (A + I) D^-1/2."""
    a_hat = topology.adjacency() + np.eye(topology.node_count, dtype=np.float32)
    inv_sqrt_deg = 1.0 / np.sqrt(a_hat.sum(axis=1))
    matrix = (a_hat * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]).astype(np.float32)
    return NormalizedAdjacency(matrix=matrix)


def graph_conv(tape: Tape, node_feats: Tensor, adj: NormalizedAdjacency, weight: Tensor, bias: Tensor) -> Tensor:
    """One first-order graph convolution: adj @ feats @ weight + bias.

    node_feats is (M, F_in) or batched (B, M, F_in); the adjacency and weight
    are shared across the batch. Recorded on the tape, so gradients flow to
    features, weight, and bias.
    """
    m = adj.matrix.shape[0]
    if node_feats.shape[-2] != m:
        raise ShapeError(f"feature rows {node_feats.shape} do not match {m} graph nodes")
    if weight.ndim != 2 or node_feats.shape[-1] != weight.shape[0]:
        raise ShapeError(f"weight {weight.shape} does not match features {node_feats.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias {bias.shape} does not match weight {weight.shape}")
    mixed = tape.matmul(adj.as_tensor(), node_feats)
    return tape.add(tape.matmul(mixed, weight), bias)
