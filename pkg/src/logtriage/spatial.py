"""Spatial pattern comparison: find nodes whose event-count vectors deviate.

Synchronized training ranks produce near-identical logs, so a node whose
per-template count vector is easy to isolate is suspicious. Scoring uses an
isolation forest built from scratch: random feature, random split between the
feature's min and max over the subsample, score 2^(-E(h)/c(psi)).

Event attribution uses a robust z-score (|count - median| / (MAD + 1)) across
nodes, which is deterministic and independent of forest internals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, TooFewNodesError
from .templates import ParsedBundle

EULER_MASCHERONI = 0.5772156649015329

DEFAULT_TREE_COUNT = 100
DEFAULT_ANOMALY_THRESHOLD = 0.6
DEFAULT_TOP_K = 8


@dataclass
class EventCountVector:
    node_id: str
    counts: np.ndarray  # shared index space across all nodes of one bundle


@dataclass
class NodeAnomalyScore:
    node_id: str
    score: float
    rank: int  # 1-based, descending score, ties by node_id


def vectorize(bundle: ParsedBundle) -> tuple[list[EventCountVector], list[str]]:
    """One count vector per node over the bundle's unified template index.

    The index space is the union of template signatures across nodes, in
    sorted signature order; returns (vectors, index_signatures).
    """
    signatures = sorted({tpl.signature for tpl in bundle.templates.values()})
    index = {sig: i for i, sig in enumerate(signatures)}
    sig_of = {eid: tpl.signature for eid, tpl in bundle.templates.items()}
    vectors = []
    for node_id in bundle.node_ids:
        counts = np.zeros(len(signatures), dtype=np.int64)
        for rec in bundle.nodes[node_id]:
            counts[index[sig_of[rec.event_id]]] += 1
        vectors.append(EventCountVector(node_id=node_id, counts=counts))
    return vectors, signatures


def average_path_length(m: int) -> float:
    """Expected unsuccessful-search path length in a BST of m points.

    Normalizer c(.) of the isolation-forest score; 0 for a single point.
    """
    if m < 1:
        raise DomainError(f"m must be >= 1, got {m}")
    if m <= 1:
        return 0.0
    h = math.log(m - 1) + EULER_MASCHERONI
    return 2.0 * h - 2.0 * (m - 1) / m


class _IsolationTree:
    __slots__ = ("nodes",)

    # flat representation: each entry is either
    #   ("split", feature, value, left_index, right_index) or ("leaf", size)
    def __init__(self, X: np.ndarray, height_limit: int, rng: np.random.Generator):
        self.nodes: list[tuple] = []
        self._build(X, np.arange(X.shape[0]), 0, height_limit, rng)

    def _build(self, X, idx, depth, limit, rng) -> int:
        node_index = len(self.nodes)
        self.nodes.append(None)  # reserve
        sub = X[idx]
        if depth >= limit or len(idx) <= 1:
            self.nodes[node_index] = ("leaf", len(idx))
            return node_index
        mins = sub.min(axis=0)
        maxs = sub.max(axis=0)
        splittable = np.flatnonzero(maxs > mins)
        if splittable.size == 0:
            self.nodes[node_index] = ("leaf", len(idx))
            return node_index
        feature = int(splittable[rng.integers(splittable.size)])
        value = float(rng.uniform(mins[feature], maxs[feature]))
        mask = sub[:, feature] < value
        left = self._build(X, idx[mask], depth + 1, limit, rng)
        right = self._build(X, idx[~mask], depth + 1, limit, rng)
        self.nodes[node_index] = ("split", feature, value, left, right)
        return node_index

    def path_length(self, x: np.ndarray) -> float:
        i, depth = 0, 0
        nodes = self.nodes
        while True:
            node = nodes[i]
            if node[0] == "leaf":
                return depth + average_path_length(max(node[1], 1))
            _, feature, value, left, right = node
            i = left if x[feature] < value else right
            depth += 1


class IsolationForestModel:
    """Reproducible-from-seed forest over node event-count vectors."""

    def __init__(self, tree_count: int = DEFAULT_TREE_COUNT,
                 subsample_size: int | None = None, seed: int = 0):
        self.tree_count = tree_count
        self.subsample_size = subsample_size
        self.seed = seed
        self.trees: list[_IsolationTree] = []
        self._c_norm = 1.0

    def fit(self, X: np.ndarray) -> "IsolationForestModel":
        n = X.shape[0]
        psi = min(self.subsample_size or 256, n)
        height_limit = max(1, math.ceil(math.log2(psi)))
        self._c_norm = average_path_length(psi) or 1.0
        self.trees = []
        for seq in np.random.SeedSequence(self.seed).spawn(self.tree_count):
            rng = np.random.default_rng(seq)
            idx = rng.choice(n, size=psi, replace=False) if psi < n else np.arange(n)
            self.trees.append(_IsolationTree(X[idx], height_limit, rng))
        return self

    def scores(self, X: np.ndarray) -> np.ndarray:
        Xf = X.astype(np.float64, copy=False)
        mean_paths = np.array([
            sum(tree.path_length(x) for tree in self.trees) / len(self.trees)
            for x in Xf
        ])
        return np.power(2.0, -mean_paths / self._c_norm)


def score_nodes(vectors: list[EventCountVector], tree_count: int = DEFAULT_TREE_COUNT,
                subsample_size: int | None = None, seed: int = 0) -> list[NodeAnomalyScore]:
    """Fit a forest on the vectors and rank all nodes by anomaly score."""
    if len(vectors) < 4:
        raise TooFewNodesError(
            f"need at least 4 node vectors, got {len(vectors)}")
    X = np.stack([v.counts for v in vectors]).astype(np.float64)
    model = IsolationForestModel(tree_count=tree_count,
                                 subsample_size=subsample_size, seed=seed).fit(X)
    raw = model.scores(X)
    order = sorted(range(len(vectors)), key=lambda i: (-raw[i], vectors[i].node_id))
    return [
        NodeAnomalyScore(node_id=vectors[i].node_id, score=float(raw[i]), rank=rank)
        for rank, i in enumerate(order, start=1)
    ]


def recommend_nodes(scores: list[NodeAnomalyScore], k: int = DEFAULT_TOP_K,
                    threshold: float = DEFAULT_ANOMALY_THRESHOLD) -> list[NodeAnomalyScore]:
    """At most k ranked nodes whose score clears the anomaly threshold."""
    picked = [s for s in scores if s.score >= threshold]
    return picked[:k]


def attribute_events(vectors: list[EventCountVector], signatures: list[str],
                     recommended: list[NodeAnomalyScore],
                     top: int = 10) -> dict[str, list[tuple[str, float]]]:
    """Per recommended node, the events driving its deviation.

    deviation_i = |c_i - median_i| / (MAD_i + 1), medians across all nodes;
    the +1 keeps constant features finite. Top `top` events per node,
    deviation descending, ties by signature.
    """
    if not recommended:
        return {}
    X = np.stack([v.counts for v in vectors]).astype(np.float64)
    median = np.median(X, axis=0)
    mad = np.median(np.abs(X - median), axis=0)
    by_node = {v.node_id: v.counts for v in vectors}
    out: dict[str, list[tuple[str, float]]] = {}
    for score in recommended:
        counts = by_node[score.node_id]
        deviation = np.abs(counts - median) / (mad + 1.0)
        ranked = sorted(
            ((signatures[i], float(deviation[i])) for i in range(len(signatures))),
            key=lambda item: (-item[1], item[0]),
        )
        out[score.node_id] = ranked[:top]
    return out
