"""Stochastic turn-graph augmentations.

Each function returns a new graph and leaves the factorization node, its
embedding and its edges to surviving modality nodes untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .graph import TurnGraph

AUGMENTATIONS = ("node_drop", "edge_perturb", "node_mask", "subgraph")


def _floor(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n + 1e-9))


def _ceil(ratio: float, n: int) -> int:
    return int(math.ceil(ratio * n - 1e-9))


def node_drop(g: TurnGraph, ratio: float, rng: np.random.Generator) -> TurnGraph:
    n = g.num_nodes
    k = min(_floor(ratio, n), n - 1)
    if k <= 0:
        return g
    dropped = rng.choice(n, size=k, replace=False)
    keep = np.setdiff1d(np.arange(n), dropped)
    return g.with_nodes(keep)


def edge_perturb(g: TurnGraph, ratio: float, rng: np.random.Generator) -> TurnGraph:
    """Remove floor(ratio * E) modality edges. Turn graphs start complete, so
    there is nothing to add."""
    src, dst = np.nonzero(g.adj)
    k = _floor(ratio, len(src))
    if k <= 0:
        return g
    gone = rng.choice(len(src), size=k, replace=False)
    adj = g.adj.copy()
    adj[src[gone], dst[gone]] = False
    return replace(g, adj=adj)


def node_mask(g: TurnGraph, ratio: float, rng: np.random.Generator) -> TurnGraph:
    n = g.num_nodes
    k = _floor(ratio, n)
    if k <= 0:
        return g
    keep = np.ones((n, 1))
    keep[rng.choice(n, size=k, replace=False)] = 0.0
    return replace(g, x=T.mul(g.x, keep))


def subgraph_sample(g: TurnGraph, ratio: float, rng: np.random.Generator) -> TurnGraph:
    """Random walk over modality edges until ceil(ratio * n) distinct nodes are
    visited or 10 * n steps pass; keep the induced subgraph."""
    n = g.num_nodes
    target = min(n, max(1, _ceil(ratio, n)))
    if target == n:
        return g
    cur = int(rng.integers(n))
    visited = {cur}
    for _ in range(10 * n):
        if len(visited) >= target:
            break
        nbrs = np.flatnonzero(g.adj[cur])
        if len(nbrs):
            cur = int(nbrs[rng.integers(len(nbrs))])
            visited.add(cur)
    return g.with_nodes(np.array(sorted(visited)))


_FUNCS = {
    "node_drop": node_drop,
    "edge_perturb": edge_perturb,
    "node_mask": node_mask,
    "subgraph": subgraph_sample,
}


@dataclass
class AugmentationConfig:
    node_drop: float = 0.5
    edge_perturb: float = 0.5
    node_mask: float = 0.5
    subgraph: float = 0.5
    enabled: tuple[str, ...] = AUGMENTATIONS

    def validate(self) -> None:
        for name in AUGMENTATIONS:
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"aug.{name}: ratio {r} outside [0, 1]")
        unknown = set(self.enabled) - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"aug.enabled: unknown augmentations {sorted(unknown)}")
        if not self.enabled:
            raise ValueError("aug.enabled: at least one augmentation must be enabled")


@dataclass
class AugmentedPair:
    turn_index: int
    first: TurnGraph
    second: TurnGraph


def augment(g: TurnGraph, name: str, ratio: float, rng: np.random.Generator) -> TurnGraph:
    return _FUNCS[name](g, ratio, rng)


def make_views(g: TurnGraph, cfg: AugmentationConfig, rng: np.random.Generator) -> AugmentedPair:
    cfg.validate()
    views = []
    for _ in range(2):
        name = cfg.enabled[int(rng.integers(len(cfg.enabled)))]
        views.append(augment(g, name, getattr(cfg, name), rng))
    return AugmentedPair(g.turn_index, views[0], views[1])
