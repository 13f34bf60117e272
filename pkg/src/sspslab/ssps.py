"""Pseudo-positive sampling machinery: memory queues, clustering, selection.

Two stores persist across training steps: a reference queue holding one
un-augmented representation per utterance, and a capacity-bounded FIFO queue
of positive embeddings.  Once enabled, each epoch starts by running spherical
k-means over the reference queue; pseudo-positives are then drawn per anchor
from its own cluster (``n_neighbor_clusters == 0``) or from one of the
nearest neighboring clusters, and served from the positive queue.  Any miss
(singleton cluster, embedding not queued) falls back to the standard
same-utterance positive, which is a normal, counted outcome.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ReferenceQueue",
    "PositiveQueue",
    "ClusterState",
    "SspsConfig",
    "cluster",
    "neighbor_clusters",
    "choose_cluster",
    "sample_pseudo_positive",
    "ssps_epoch_begin",
    "cluster_diagnostics",
]


@dataclass(frozen=True)
class SspsConfig:
    n_clusters: int = 256
    n_neighbor_clusters: int = 1
    kmeans_iterations: int = 10
    enable_epoch: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.n_neighbor_clusters < 0:
            raise ValueError("n_neighbor_clusters must be >= 0")
        if self.kmeans_iterations < 1:
            raise ValueError("kmeans_iterations must be >= 1")
        if self.enable_epoch < 0:
            raise ValueError("enable_epoch must be >= 0")


class ReferenceQueue:
    """One representation per utterance, insertion-ordered, capacity-bounded.

    Re-inserting an id overwrites its vector in place (the slot keeps its
    original position).  Capacity equals the corpus size, so a full pass over
    the data fills the queue exactly.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._store: dict[int, np.ndarray] = {}

    def enqueue(self, utterance_id: int, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise ValueError(f"vector shape {vector.shape} does not match dim {self.dim}")
        key = int(utterance_id)
        if key not in self._store and len(self._store) >= self.capacity:
            raise ValueError(f"reference queue is at capacity {self.capacity}")
        self._store[key] = vector.copy()

    def get(self, utterance_id: int) -> np.ndarray:
        return self._store[int(utterance_id)]

    def ids(self) -> np.ndarray:
        return np.fromiter(self._store.keys(), dtype=np.intp, count=len(self._store))

    def matrix(self) -> np.ndarray:
        if not self._store:
            return np.empty((0, self.dim))
        return np.stack(list(self._store.values()))

    def __contains__(self, utterance_id: int) -> bool:
        return int(utterance_id) in self._store

    def __len__(self) -> int:
        return len(self._store)


class PositiveQueue:
    """FIFO store of positive embeddings keyed by utterance id.

    Re-inserting an id overwrites its vector without changing its queue
    position; inserting a new id beyond capacity evicts the oldest entry.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._store: dict[int, np.ndarray] = {}

    def enqueue(self, utterance_id: int, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise ValueError(f"vector shape {vector.shape} does not match dim {self.dim}")
        key = int(utterance_id)
        self._store[key] = vector.copy()
        if len(self._store) > self.capacity:
            oldest = next(iter(self._store))
            del self._store[oldest]

    def get(self, utterance_id: int) -> np.ndarray | None:
        return self._store.get(int(utterance_id))

    def ids(self) -> np.ndarray:
        return np.fromiter(self._store.keys(), dtype=np.intp, count=len(self._store))

    def clear(self) -> None:
        self._store.clear()

    def __contains__(self, utterance_id: int) -> bool:
        return int(utterance_id) in self._store

    def __len__(self) -> int:
        return len(self._store)


@dataclass
class ClusterState:
    """Published once per epoch; read-only during the epoch."""

    n_clusters: int
    ids: np.ndarray                    # (n,) utterance ids in queue order
    assignments: np.ndarray            # (n,) cluster index per id
    centroids: np.ndarray              # (K, D) unit rows
    members: list[np.ndarray]          # per cluster, sorted utterance ids
    objective_trace: list[float]       # mean cosine to assigned centroid
    neighbors: np.ndarray = field(default_factory=lambda: np.empty((0, 0), dtype=np.intp))
    _cluster_of: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._cluster_of:
            self._cluster_of = {
                int(u): int(c) for u, c in zip(self.ids, self.assignments)
            }

    def cluster_of(self, utterance_id: int) -> int:
        try:
            return self._cluster_of[int(utterance_id)]
        except KeyError:
            raise KeyError(f"utterance {utterance_id} is not assigned") from None


def _fix_empty_clusters(
    x: np.ndarray, assignments: np.ndarray, centroids: np.ndarray
) -> None:
    """Reseed each empty cluster with the farthest point of the largest one."""
    k = centroids.shape[0]
    while True:
        sizes = np.bincount(assignments, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            return
        target = int(empty[0])
        largest = int(np.argmax(sizes))
        member_idx = np.flatnonzero(assignments == largest)
        cos = x[member_idx] @ centroids[largest]
        farthest = int(member_idx[np.argmin(cos)])
        assignments[farthest] = target
        centroids[target] = x[farthest]


def cluster(queue: ReferenceQueue, cfg: SspsConfig) -> ClusterState:
    """Spherical k-means over the reference queue.

    Representations are l2-normalized; assignment is by max cosine and each
    centroid is the l2-normalized mean of its members.  Initialization picks
    ``n_clusters`` distinct stored points with the config seed; empty
    clusters are reseeded from the farthest point of the largest cluster.
    After the fixed iteration count a final assignment pass makes every
    label the argmax against the returned centroids (clusters may end empty
    there; sampling falls back for them).  The recorded objective, mean
    cosine to the assigned centroid, is non-decreasing along the trace.
    """
    n = len(queue)
    if n == 0:
        raise ValueError("reference queue is empty")
    if cfg.n_clusters > n:
        raise ValueError(f"n_clusters={cfg.n_clusters} exceeds stored count {n}")

    ids = queue.ids()
    x = queue.matrix()
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("reference queue holds a zero-norm representation")
    x = x / norms

    rng = np.random.default_rng(cfg.seed)
    init_idx = rng.choice(n, size=cfg.n_clusters, replace=False)
    centroids = x[init_idx].copy()

    trace: list[float] = []
    assignments = np.zeros(n, dtype=np.intp)
    for _ in range(cfg.kmeans_iterations):
        sims = x @ centroids.T
        assignments = np.argmax(sims, axis=1)
        _fix_empty_clusters(x, assignments, centroids)
        for k in range(cfg.n_clusters):
            member_idx = np.flatnonzero(assignments == k)
            mean = x[member_idx].sum(axis=0)
            centroids[k] = mean / np.linalg.norm(mean)
        trace.append(float(np.mean(np.sum(x * centroids[assignments], axis=1))))

    sims = x @ centroids.T
    assignments = np.argmax(sims, axis=1)
    trace.append(float(np.mean(np.sum(x * centroids[assignments], axis=1))))

    members = [
        np.sort(ids[assignments == k]) for k in range(cfg.n_clusters)
    ]
    return ClusterState(
        n_clusters=cfg.n_clusters,
        ids=ids,
        assignments=assignments,
        centroids=centroids,
        members=members,
        objective_trace=trace,
    )


def neighbor_clusters(state: ClusterState, n_neighbors: int) -> np.ndarray:
    """Per-cluster indices of the nearest other centroids by cosine.

    Row k lists the ``n_neighbors`` most similar clusters j != k in
    descending similarity, ties broken by ascending cluster index.
    """
    k = state.n_clusters
    if n_neighbors >= k:
        raise ValueError(f"n_neighbors={n_neighbors} must be < n_clusters={k}")
    if n_neighbors == 0:
        return np.empty((k, 0), dtype=np.intp)
    sims = state.centroids @ state.centroids.T
    out = np.empty((k, n_neighbors), dtype=np.intp)
    idx = np.arange(k)
    for row in range(k):
        order = np.lexsort((idx, -sims[row]))
        order = order[order != row]
        out[row] = order[:n_neighbors]
    return out


def choose_cluster(
    utterance_id: int, state: ClusterState, n_neighbors: int, rng: np.random.Generator
) -> int:
    """Cluster to draw the pseudo-positive from: the anchor's own cluster when
    ``n_neighbors`` is 0, otherwise a uniform pick among the stored neighbors."""
    own = state.cluster_of(utterance_id)
    if n_neighbors == 0:
        return own
    if n_neighbors > state.neighbors.shape[1]:
        raise ValueError(
            f"state holds {state.neighbors.shape[1]} neighbors per cluster, need {n_neighbors}"
        )
    pick = int(rng.integers(n_neighbors))
    return int(state.neighbors[own, pick])


def sample_pseudo_positive(
    utterance_id: int,
    state: ClusterState,
    positive_queue: PositiveQueue,
    n_neighbors: int,
    rng: np.random.Generator,
) -> tuple[int, np.ndarray] | None:
    """Draw pos(i) uniformly from the chosen cluster, excluding the anchor.

    Returns (pos_id, embedding) when the drawn utterance is present in the
    positive queue, else None: the caller reverts to the standard positive.
    One draw per query, no retry.
    """
    chosen = choose_cluster(utterance_id, state, n_neighbors, rng)
    candidates = state.members[chosen]
    candidates = candidates[candidates != int(utterance_id)]
    if candidates.size == 0:
        return None
    pos = int(candidates[rng.integers(candidates.size)])
    emb = positive_queue.get(pos)
    if emb is None:
        return None
    return pos, emb


def ssps_epoch_begin(queue: ReferenceQueue, cfg: SspsConfig) -> ClusterState:
    """Cluster the reference queue and attach neighbor lists atomically."""
    state = cluster(queue, cfg)
    if cfg.n_neighbor_clusters > 0:
        state.neighbors = neighbor_clusters(state, cfg.n_neighbor_clusters)
    return state


def cluster_diagnostics(
    state: ClusterState,
    n_neighbors: int,
    fallback_rate: float | None,
    speaker_lookup=None,
) -> dict:
    """Per-epoch diagnostics record (JSON-serializable).

    ``speaker_lookup`` maps utterance id -> hidden speaker label and must
    only be supplied from evaluation-side code; when present, cluster purity
    (size-weighted majority-speaker fraction) is included.
    """
    sizes = np.array([m.size for m in state.members])
    hist_sizes, hist_counts = np.unique(sizes, return_counts=True)
    record = {
        "n_clusters": state.n_clusters,
        "n_neighbor_clusters": int(n_neighbors),
        "fallback_rate": fallback_rate,
        "cluster_size_hist": {int(s): int(c) for s, c in zip(hist_sizes, hist_counts)},
        "kmeans_objective": state.objective_trace[-1],
    }
    if speaker_lookup is not None:
        majority = 0
        for member_ids in state.members:
            if member_ids.size == 0:
                continue
            speakers = np.array([speaker_lookup(int(u)) for u in member_ids])
            majority += int(np.max(np.bincount(speakers)))
        record["purity"] = majority / max(len(state.ids), 1)
    return record


def append_jsonl(path: str | Path, record: dict) -> None:
    """Append one canonical JSON line (sorted keys) to a diagnostics log."""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
