"""Functional similarity: cluster objects by mixed visual + word-vector representations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .datamodel import DataError, EmbeddingTable, VisualPrototypeTable

KMEANS = "kmeans"
AGGLOMERATIVE = "agglomerative"
ALGORITHMS = (KMEANS, AGGLOMERATIVE)


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class MixedRepresentation:
    object_class: str
    vector: np.ndarray


@dataclass
class ClusterAssignment:
    labels: Dict[str, int]
    K: int
    centroids: np.ndarray
    algorithm: str
    seed: Optional[int] = None
    representations: Dict[str, np.ndarray] = field(default_factory=dict)
    # objective after every update step of the retained k-means run
    objective_trace: List[float] = field(default_factory=list, compare=False)

    def clusters(self) -> List[List[str]]:
        out: List[List[str]] = [[] for _ in range(self.K)]
        for name in sorted(self.labels):
            out[self.labels[name]].append(name)
        return out

    def members(self, object_class: str) -> List[str]:
        if object_class not in self.labels:
            raise ClusteringError(f"object class {object_class!r} is not assigned to any cluster")
        k = self.labels[object_class]
        return [c for c in sorted(self.labels) if self.labels[c] == k]

    def __contains__(self, object_class: object) -> bool:
        return object_class in self.labels

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "seed": self.seed,
            "algorithm": self.algorithm,
            "clusters": self.clusters(),
            "centroids": [row.tolist() for row in self.centroids],
            "representations": {k: self.representations[k].tolist() for k in sorted(self.representations)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClusterAssignment":
        try:
            clusters = obj["clusters"]
            K = int(obj["K"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed clusters file: {exc}") from None
        if len(clusters) != K:
            raise DataError(f"clusters file declares K={K} but lists {len(clusters)} clusters")
        labels: Dict[str, int] = {}
        for k, members in enumerate(clusters):
            if not members:
                raise DataError(f"cluster {k} is empty")
            for name in members:
                if name in labels:
                    raise DataError(f"class {name!r} appears in more than one cluster")
                labels[str(name)] = k
        reps = {str(k): np.asarray(v, dtype=np.float64) for k, v in obj.get("representations", {}).items()}
        centroids = np.asarray(obj.get("centroids", []), dtype=np.float64)
        return cls(labels, K, centroids, str(obj.get("algorithm", "")), obj.get("seed"), reps)


def save_clusters(assignment: ClusterAssignment, path, header: Optional[dict] = None) -> None:
    obj = assignment.to_json()
    if header is not None:
        obj = {"_provenance": header, **obj}
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def load_clusters(path) -> ClusterAssignment:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc.msg}") from None
    return ClusterAssignment.from_json(obj)


def _l2(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def mixed_representation(
    object_class: str,
    visuals: VisualPrototypeTable,
    embeddings: EmbeddingTable,
    norm: bool = True,
) -> MixedRepresentation:
    """Concatenate the class's visual prototype and word vector (each L2-normalized if ``norm``)."""
    if object_class not in visuals:
        raise DataError(f"object class {object_class!r} missing from visual prototype table")
    if object_class not in embeddings:
        raise DataError(f"object class {object_class!r} missing from embedding table")
    f = np.asarray(visuals[object_class], dtype=np.float64)
    w = np.asarray(embeddings[object_class], dtype=np.float64)
    if norm:
        f, w = _l2(f), _l2(w)
    return MixedRepresentation(object_class, np.concatenate([f, w]))


def mixed_representations(classes: Sequence[str], visuals, embeddings, norm: bool = True) -> List[MixedRepresentation]:
    return [mixed_representation(c, visuals, embeddings, norm) for c in classes]


def _prepare(points: Sequence[MixedRepresentation], K: int):
    names = [p.object_class for p in points]
    if len(set(names)) != len(names):
        raise ClusteringError("duplicate object classes among points")
    if K < 1:
        raise ClusteringError(f"K must be >= 1, got {K}")
    if K > len(points):
        raise ClusteringError(f"K={K} exceeds the number of points ({len(points)})")
    # work in name order so results do not depend on input order
    order = sorted(range(len(points)), key=lambda i: names[i])
    names = [names[i] for i in order]
    X = np.stack([np.asarray(points[i].vector, dtype=np.float64) for i in order])
    if not np.all(np.isfinite(X)):
        raise ClusteringError("representations contain non-finite entries")
    return names, X


def _canonical(names: List[str], X: np.ndarray, labels: np.ndarray, K: int):
    """Relabel clusters by first appearance in name order; recompute centroids."""
    remap: Dict[int, int] = {}
    for lab in labels:
        if int(lab) not in remap:
            remap[int(lab)] = len(remap)
    new = np.array([remap[int(lab)] for lab in labels])
    centroids = np.stack([X[new == k].mean(axis=0) for k in range(K)])
    return {n: int(k) for n, k in zip(names, new)}, centroids


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _objective(X: np.ndarray, C: np.ndarray, labels: np.ndarray) -> float:
    return float(((X - C[labels]) ** 2).sum())


def _lloyd(X: np.ndarray, K: int, rng: np.random.Generator, max_iter: int):
    n = X.shape[0]
    C = X[np.sort(rng.choice(n, size=K, replace=False))].copy()
    labels = None
    trace: List[float] = []
    for _ in range(max_iter):
        d = _sq_dists(X, C)
        new = np.argmin(d, axis=1)
        # repair empty clusters from the point farthest from its centroid
        for k in range(K):
            if np.any(new == k):
                continue
            cost = d[np.arange(n), new]
            sizes = np.bincount(new, minlength=K)
            cost = np.where(sizes[new] > 1, cost, -1.0)
            far = int(np.argmax(cost))
            new[far] = k
            d[far, k] = 0.0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = np.stack([X[labels == k].mean(axis=0) for k in range(K)])
        trace.append(_objective(X, C, labels))
    return labels, C, trace


def kmeans(
    points: Sequence[MixedRepresentation],
    K: int,
    seed: int = 0,
    max_iter: int = 300,
    n_init: int = 10,
) -> ClusterAssignment:
    """Lloyd's k-means under squared Euclidean distance.

    Each of ``n_init`` restarts is initialized from K distinct points drawn
    with a generator seeded by ``seed``; the restart with the lowest
    within-cluster sum of squares is kept (first one on ties).
    """
    names, X = _prepare(points, K)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        labels, C, trace = _lloyd(X, K, rng, max_iter)
        obj = _objective(X, C, labels)
        if best is None or obj < best[0]:
            best = (obj, labels, trace)
    _, labels, trace = best
    mapping, centroids = _canonical(names, X, labels, K)
    reps = {n: X[i].copy() for i, n in enumerate(names)}
    return ClusterAssignment(mapping, K, centroids, KMEANS, seed, reps, trace)


def agglomerative(points: Sequence[MixedRepresentation], K: int) -> ClusterAssignment:
    """Average-linkage agglomerative clustering down to K clusters.

    Ties between equally close pairs go to the lowest (i, j) pair in
    class-name order.
    """
    names, X = _prepare(points, K)
    n = X.shape[0]
    D = np.sqrt(_sq_dists(X, X))
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    labels = np.arange(n)
    link = D.copy()
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    for _ in range(n - K):
        valid = upper & active[:, None] & active[None, :]
        masked = np.where(valid, link, np.inf)
        flat = int(np.argmin(masked))
        i, j = divmod(flat, n)
        merged = (sizes[i] * link[i] + sizes[j] * link[j]) / (sizes[i] + sizes[j])
        link[i, :] = merged
        link[:, i] = merged
        link[i, i] = 0.0
        sizes[i] += sizes[j]
        active[j] = False
        labels[labels == j] = i
    mapping, centroids = _canonical(names, X, labels, K)
    reps = {nm: X[idx].copy() for idx, nm in enumerate(names)}
    return ClusterAssignment(mapping, K, centroids, AGGLOMERATIVE, None, reps)


def default_k(n_classes: int) -> int:
    return max(1, math.ceil(n_classes / 6))


def cluster_objects(
    classes: Sequence[str],
    visuals: VisualPrototypeTable,
    embeddings: EmbeddingTable,
    K: Optional[int] = None,
    algorithm: str = KMEANS,
    seed: int = 0,
    norm: bool = True,
    max_iter: int = 300,
    n_init: int = 10,
) -> ClusterAssignment:
    points = mixed_representations(classes, visuals, embeddings, norm)
    if K is None:
        K = default_k(len(points))
    if algorithm == KMEANS:
        return kmeans(points, K, seed=seed, max_iter=max_iter, n_init=n_init)
    if algorithm == AGGLOMERATIVE:
        return agglomerative(points, K)
    raise ClusteringError(f"unknown clustering algorithm {algorithm!r}; expected one of {ALGORITHMS}")


def neighbors(object_class: str, assignment: ClusterAssignment, r: int) -> List[str]:
    """Up to ``r`` other members of the class's cluster, nearest first."""
    members = [m for m in assignment.members(object_class) if m != object_class]
    if r <= 0 or not members:
        return []
    reps = assignment.representations
    if object_class in reps and all(m in reps for m in members):
        q = reps[object_class]
        members.sort(key=lambda m: (float(np.sum((reps[m] - q) ** 2)), m))
    return members[:r]
