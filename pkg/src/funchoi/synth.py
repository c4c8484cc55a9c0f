"""Desk-scale synthetic HOI corpus with planted object clusters and predicate rules.

Each image holds one human and one object. The object sits in one of
``n_buckets`` directions around the human; the predicate is
``(bucket + cluster) % n_predicates``, so geometry alone does not decide the
label and the object's cluster must be known. Visual prototypes carry the
cluster structure. Word vectors are built to mislead on their own: the i-th
object of every cluster shares a "semantic group" direction, so the nearest
word-space neighbour of an object lives in a different cluster.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .datamodel import (
    BoundingBox,
    Dataset,
    Detection,
    EmbeddingTable,
    ImageInfo,
    InteractionTriplet,
    VisualPrototypeTable,
)
from .evaluation import HoiClass

_OBJECT_BANKS = [
    ["cup", "mug", "glass", "bottle", "can", "jug"],
    ["horse", "camel", "zebra", "elephant", "mule", "cattle"],
    ["bicycle", "motorcycle", "scooter", "skateboard", "tricycle", "wagon"],
    ["ball", "frisbee", "kite", "racket", "bat", "glove"],
]
_PREDICATES = ["hold", "ride", "carry", "feed", "wash", "push", "kick", "throw", "inspect", "lift"]


@dataclass(frozen=True)
class SynthConfig:
    n_clusters: int = 2
    objects_per_cluster: int = 3
    n_predicates: int = 4
    n_buckets: Optional[int] = None
    n_train_images: int = 500
    n_test_images: int = 240
    embedding_dim: int = 16
    feature_dim: int = 8
    prototype_dim: int = 8
    # weight of the shared cluster direction in object word vectors
    embedding_cluster_signal: float = 0.0
    # weight of a semantic-group direction shared by the i-th object of every cluster
    embedding_cross_signal: float = 2.0
    prototype_noise: float = 0.1
    box_jitter: float = 2.0
    min_confidence: float = 0.95
    distractor_rate: float = 0.3
    human_token: str = "person"

    def buckets(self) -> int:
        return self.n_buckets if self.n_buckets is not None else self.n_predicates

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticCorpus:
    train: Dataset
    test: Dataset
    detections: Dict[str, List[Detection]]
    embeddings: EmbeddingTable
    prototypes: VisualPrototypeTable
    planted: Dict[str, int]
    predicates: List[str]
    config: SynthConfig
    seed: int
    buckets: Dict[str, int] = field(default_factory=dict)
    semantic_groups: Dict[str, int] = field(default_factory=dict)

    def __iter__(self):
        # unpacks as (dataset, detections, embeddings, prototypes)
        return iter((self.train, self.detections, self.embeddings, self.prototypes))

    def planted_clusters(self) -> List[List[str]]:
        K = max(self.planted.values()) + 1
        return [sorted(o for o, k in self.planted.items() if k == c) for c in range(K)]

    def rule(self, object_class: str, bucket: int) -> str:
        return self.predicates[(bucket + self.planted[object_class]) % len(self.predicates)]


def _names(cfg: SynthConfig) -> Tuple[List[List[str]], List[str]]:
    clusters = []
    for c in range(cfg.n_clusters):
        bank = _OBJECT_BANKS[c] if c < len(_OBJECT_BANKS) else []
        clusters.append(
            [bank[i] if i < len(bank) else f"object{c}_{i}" for i in range(cfg.objects_per_cluster)]
        )
    preds = [_PREDICATES[j] if j < len(_PREDICATES) else f"predicate{j}" for j in range(cfg.n_predicates)]
    return clusters, preds


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _layout(rng: np.random.Generator, bucket: int, n_buckets: int):
    W = float(rng.uniform(480, 560))
    H = float(rng.uniform(480, 560))
    cx, cy = rng.uniform(200, W - 200), rng.uniform(200, H - 200)
    hw, hh = rng.uniform(50, 70), rng.uniform(110, 140)
    human = BoundingBox(cx - hw / 2, cy - hh / 2, cx + hw / 2, cy + hh / 2)
    angle = 2 * math.pi * bucket / n_buckets + rng.uniform(-0.25, 0.25)
    dist = rng.uniform(100, 130)
    ox, oy = cx + dist * math.cos(angle), cy + dist * math.sin(angle)
    ow, oh = rng.uniform(30, 50), rng.uniform(30, 50)
    obj = BoundingBox(ox - ow / 2, oy - oh / 2, ox + ow / 2, oy + oh / 2)
    return ImageInfo("", W, H), human, obj


def _jitter(rng: np.random.Generator, box: BoundingBox, amount: float) -> BoundingBox:
    d = rng.uniform(-amount, amount, size=4)
    x1, y1, x2, y2 = (max(0.0, v) for v in np.array(box.to_list()) + d)
    return BoundingBox(x1, y1, x2, y2)


def _simplex_directions(rng: np.random.Generator, k: int, dim: int) -> List[np.ndarray]:
    """k unit vectors with equal pairwise cosine -1/(k-1), randomly rotated into ``dim``."""
    if k == 1 or dim < k:
        return [_unit(rng, dim) for _ in range(k)]
    verts = np.eye(k) - 1.0 / k
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    q, _ = np.linalg.qr(rng.normal(size=(dim, k)))
    return [q @ v for v in verts]


def generate_synthetic(cfg: SynthConfig = SynthConfig(), seed: int = 0) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    clusters, predicates = _names(cfg)
    n_buckets = cfg.buckets()
    planted = {o: c for c, members in enumerate(clusters) for o in members}
    objects = [o for members in clusters for o in members]

    vis_dirs = _simplex_directions(rng, len(clusters), cfg.prototype_dim)
    emb_dirs = [_unit(rng, cfg.embedding_dim) for _ in clusters]
    group_dirs = [_unit(rng, cfg.embedding_dim) for _ in range(cfg.objects_per_cluster)]
    prototypes = {}
    vectors = {cfg.human_token: _unit(rng, cfg.embedding_dim)}
    for o in objects:
        c = planted[o]
        prototypes[o] = vis_dirs[c] + cfg.prototype_noise * rng.normal(size=cfg.prototype_dim) / math.sqrt(cfg.prototype_dim)
        own = _unit(rng, cfg.embedding_dim)
        group = clusters[c].index(o)
        vectors[o] = cfg.embedding_cluster_signal * emb_dirs[c] + cfg.embedding_cross_signal * group_dirs[group] + own

    bucket_of: Dict[str, int] = {}

    def make_split(prefix: str, n: int, with_detections: bool):
        images, triplets = [], []
        dets: Dict[str, List[Detection]] = {}
        for i in range(n):
            image_id = f"{prefix}{i:05d}"
            obj = objects[int(rng.integers(len(objects)))]
            bucket = int(rng.integers(n_buckets))
            size, human, box = _layout(rng, bucket, n_buckets)
            img = ImageInfo(image_id, size.width, size.height)
            feature = tuple(float(v) for v in rng.normal(size=cfg.feature_dim))
            pred = predicates[(bucket + planted[obj]) % len(predicates)]
            images.append(img)
            triplets.append(InteractionTriplet(image_id, human, box, obj, frozenset({pred}), feature))
            bucket_of[image_id] = bucket
            if with_detections:
                conf = lambda: float(rng.uniform(cfg.min_confidence, 1.0))  # noqa: E731
                group = [
                    Detection(image_id, _jitter(rng, human, cfg.box_jitter), "person", conf(), feature),
                    Detection(image_id, _jitter(rng, box, cfg.box_jitter), obj, conf()),
                ]
                if rng.uniform() < cfg.distractor_rate:
                    other = objects[int(rng.integers(len(objects)))]
                    _, _, far = _layout(rng, int(rng.integers(n_buckets)), n_buckets)
                    group.append(Detection(image_id, far, other, float(rng.uniform(0.3, 0.85))))
                dets[image_id] = group
        ds = Dataset(images, triplets, sorted(objects), list(predicates))
        return ds, dets

    train, _ = make_split("train", cfg.n_train_images, False)
    test, detections = make_split("test", cfg.n_test_images, True)
    return SyntheticCorpus(
        train=train,
        test=test,
        detections=detections,
        embeddings=EmbeddingTable(vectors),
        prototypes=VisualPrototypeTable(prototypes),
        planted=planted,
        predicates=list(predicates),
        config=cfg,
        seed=seed,
        buckets=bucket_of,
        semantic_groups={o: clusters[planted[o]].index(o) for o in objects},
    )


def planted_holdout(corpus: SyntheticCorpus, seed: int = 0) -> List[HoiClass]:
    """One (object, predicate) class per planted cluster, drawn with ``seed``."""
    return holdout_classes(corpus.planted_clusters(), corpus.semantic_groups, corpus.predicates, seed)


def holdout_classes(
    clusters: Sequence[Sequence[str]],
    semantic_groups: Mapping[str, int],
    predicates: Sequence[str],
    seed: int = 0,
) -> List[HoiClass]:
    """Pick one held-out (object, predicate) class per cluster.

    Held-out objects come from distinct semantic groups when there are
    enough groups, so every held-out object keeps a seen word-space
    neighbour in another cluster.
    """
    rng = np.random.default_rng(seed)
    used_groups = set()
    out = []
    for members in clusters:
        free = [o for o in members if semantic_groups.get(o) not in used_groups] or list(members)
        obj = free[int(rng.integers(len(free)))]
        used_groups.add(semantic_groups.get(obj))
        pred = predicates[int(rng.integers(len(predicates)))]
        out.append(HoiClass(obj, pred))
    return out
