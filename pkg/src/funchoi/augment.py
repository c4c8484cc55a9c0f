"""Training-set expansion by swapping in functionally similar objects."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Dict, List

from .datamodel import DataError, Dataset, InteractionTriplet
from .funcsim import ClusterAssignment, neighbors


@dataclass(frozen=True)
class AugmentationConfig:
    clusters: ClusterAssignment
    r: int = 5
    mark_synthetic: bool = True

    def __post_init__(self) -> None:
        if self.r < 0:
            raise ValueError(f"r must be non-negative, got {self.r}")


def augment_dataset(d: Dataset, cfg: AugmentationConfig) -> Dataset:
    """Append, after each triplet, up to ``r`` copies whose object is a cluster neighbor.

    Boxes, human feature, predicates and image are shared with the source
    triplet. Neighbor classes are added to the object vocabulary.
    """
    missing = sorted({t.object_class for t in d.triplets if t.object_class not in cfg.clusters})
    if missing:
        raise DataError(f"object classes not covered by the clustering: {missing}")
    cache: Dict[str, List[str]] = {}
    out: List[InteractionTriplet] = []
    for t in d.triplets:
        out.append(t)
        if cfg.r == 0:
            continue
        if t.object_class not in cache:
            cache[t.object_class] = neighbors(t.object_class, cfg.clusters, cfg.r)
        for obj in cache[t.object_class]:
            out.append(t.with_object(obj, synthetic=cfg.mark_synthetic))
    vocab = list(d.object_vocabulary)
    seen = set(vocab)
    for t in out:
        if t.object_class not in seen:
            seen.add(t.object_class)
            vocab.append(t.object_class)
    return Dataset(list(d.images), out, vocab, list(d.predicate_vocabulary))


def augmentation_summary(original: Dataset, augmented: Dataset, clusters: ClusterAssignment) -> dict:
    """Record counts; synthetic copies per cluster are counted as growth, so
    the summary does not depend on the ``synthetic`` marks."""

    def by_cluster(d: Dataset) -> Counter:
        return Counter(clusters.labels.get(t.object_class, -1) for t in d.triplets)

    grown = by_cluster(augmented)
    grown.subtract(by_cluster(original))
    return {
        "originals": len(original.triplets),
        "total": len(augmented.triplets),
        "synthetic": len(augmented.triplets) - len(original.triplets),
        "synthetic_per_cluster": {str(k): grown[k] for k in sorted(grown) if grown[k]},
    }
