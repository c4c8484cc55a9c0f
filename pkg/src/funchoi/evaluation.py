"""HOI mAP, rare/zero-shot splits and verb-object bias metrics."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .datamodel import DataError, Dataset, InteractionTriplet
from .geometry import iou
from .pipeline import HoiDetection

MATCH_IOU = 0.5


class SplitInfeasibleError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class HoiClass:
    object_class: str
    predicate: str

    def to_json(self) -> List[str]:
        return [self.object_class, self.predicate]

    @classmethod
    def from_json(cls, obj) -> "HoiClass":
        if isinstance(obj, Mapping):
            return cls(str(obj["object_class"]), str(obj["predicate"]))
        obj, pred = obj
        return cls(str(obj), str(pred))

    def __str__(self) -> str:
        return f"{self.predicate} {self.object_class}"


def triplet_classes(t: InteractionTriplet) -> List[HoiClass]:
    return [HoiClass(t.object_class, p) for p in sorted(t.predicates)]


def dataset_classes(d: Dataset) -> List[HoiClass]:
    return sorted({c for t in d.triplets for c in triplet_classes(t)})


def class_counts(d: Dataset) -> Counter:
    return Counter(c for t in d.triplets for c in triplet_classes(t))


@dataclass
class SplitSpec:
    name: str
    buckets: Dict[str, List[HoiClass]]
    seed: Optional[int] = None
    params: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.buckets = {k: sorted(set(v)) for k, v in self.buckets.items()}

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "params": self.params,
            "buckets": {k: [c.to_json() for c in v] for k, v in self.buckets.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SplitSpec":
        try:
            buckets = {str(k): [HoiClass.from_json(c) for c in v] for k, v in obj["buckets"].items()}
            return cls(str(obj["name"]), buckets, obj.get("seed"), dict(obj.get("params", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed split: {exc}") from None


def save_split(split: SplitSpec, path, header: Optional[dict] = None) -> None:
    obj = split.to_json()
    if header is not None:
        obj = {"_provenance": header, **obj}
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def load_split(path) -> SplitSpec:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc.msg}") from None
    return SplitSpec.from_json(obj)


# --- average precision ------------------------------------------------------


def _common_class(dets: Sequence[HoiDetection], gts: Sequence[InteractionTriplet], hoi_class: Optional[HoiClass]):
    classes = {HoiClass(d.object_class, d.predicate) for d in dets}
    if hoi_class is not None:
        classes.add(hoi_class)
    if len(classes) > 1:
        raise ValueError(f"detections span several HOI classes: {sorted(map(str, classes))}")
    cls = next(iter(classes), None)
    for g in gts:
        if cls is None:
            if len(g.predicates) != 1:
                raise ValueError("cannot infer the HOI class from multi-label ground truth; pass hoi_class")
            cls = HoiClass(g.object_class, next(iter(g.predicates)))
        if g.object_class != cls.object_class or cls.predicate not in g.predicates:
            raise ValueError(f"ground truth {g.object_class!r}/{sorted(g.predicates)} does not belong to class {cls}")
    return cls


def match_detections(
    dets: Sequence[HoiDetection],
    gts: Sequence[InteractionTriplet],
    iou_threshold: float = MATCH_IOU,
) -> Tuple[List[int], List[int]]:
    """Greedy score-ordered matching of one class's detections to its ground truth.

    Returns the detection order (score descending, stable) and, per ranked
    detection, the index of the matched GT or -1. A detection matches the
    still-unmatched GT of its image with the highest min(IoU_h, IoU_o)
    (lowest GT index on ties) when that value exceeds ``iou_threshold``.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    by_image: Dict[str, List[int]] = {}
    for gi, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(gi)
    used = [False] * len(gts)
    matched: List[int] = []
    for di in order:
        d = dets[di]
        best, best_ov = -1, -1.0
        for gi in by_image.get(d.image_id, ()):
            if used[gi]:
                continue
            g = gts[gi]
            ov = min(iou(d.human_box, g.human_box), iou(d.object_box, g.object_box))
            if ov > best_ov:
                best, best_ov = gi, ov
        if best >= 0 and best_ov > iou_threshold:
            used[best] = True
            matched.append(best)
        else:
            matched.append(-1)
    return order, matched


def ap_from_matches(is_tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0 or len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(is_tp, dtype=np.float64))
    ranks = np.arange(1, len(is_tp) + 1, dtype=np.float64)
    recall = tp / n_gt
    precision = tp / ranks
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(
    dets: Sequence[HoiDetection],
    gts: Sequence[InteractionTriplet],
    hoi_class: Optional[HoiClass] = None,
    iou_threshold: float = MATCH_IOU,
) -> float:
    _common_class(dets, gts, hoi_class)
    _, matched = match_detections(dets, gts, iou_threshold)
    return ap_from_matches([m >= 0 for m in matched], len(gts))


@dataclass
class EvaluationResult:
    ap: Dict[HoiClass, float]
    n_gt: Dict[HoiClass, int]
    n_det: Dict[HoiClass, int]

    def gt_classes(self) -> List[HoiClass]:
        return sorted(c for c, n in self.n_gt.items() if n > 0)


def evaluate(dets: Iterable[HoiDetection], gt: Dataset, iou_threshold: float = MATCH_IOU) -> EvaluationResult:
    """Per-class AP of ``dets`` against every triplet label of ``gt``."""
    gts_by_class: Dict[HoiClass, List[InteractionTriplet]] = {}
    for t in gt.triplets:
        for c in triplet_classes(t):
            gts_by_class.setdefault(c, []).append(t)
    dets_by_class: Dict[HoiClass, List[HoiDetection]] = {}
    for d in dets:
        dets_by_class.setdefault(HoiClass(d.object_class, d.predicate), []).append(d)
    ap: Dict[HoiClass, float] = {}
    for c in sorted(set(gts_by_class) | set(dets_by_class)):
        ap[c] = average_precision(dets_by_class.get(c, []), gts_by_class.get(c, []), c, iou_threshold)
    return EvaluationResult(
        ap,
        {c: len(gts_by_class.get(c, [])) for c in ap},
        {c: len(dets_by_class.get(c, [])) for c in ap},
    )


def mean_ap(
    per_class: Mapping[HoiClass, float],
    split: SplitSpec,
    gt_classes: Optional[Iterable[HoiClass]] = None,
) -> Dict[str, float]:
    """Arithmetic mean AP per bucket; NaN for a bucket with no evaluable class.

    With ``gt_classes``, bucket members without ground truth are skipped and
    members with ground truth but no AP entry count as 0.
    """
    allowed = None if gt_classes is None else set(gt_classes)
    out: Dict[str, float] = {}
    for name, classes in split.buckets.items():
        members = [c for c in classes if allowed is None or c in allowed]
        if not members:
            out[name] = math.nan
            continue
        out[name] = float(np.mean([per_class.get(c, 0.0) for c in members]))
    return out


def single_bucket_split(classes: Iterable[HoiClass], name: str = "full") -> SplitSpec:
    return SplitSpec(name, {"full": list(classes)})


# --- splits -----------------------------------------------------------------


def make_rare_split(train: Dataset, threshold: int = 10, classes: Optional[Iterable[HoiClass]] = None) -> SplitSpec:
    """Classes with fewer than ``threshold`` training samples are rare."""
    counts = class_counts(train)
    universe = set(counts) | set(classes or ())
    rare = [c for c in universe if counts[c] < threshold]
    non_rare = [c for c in universe if counts[c] >= threshold]
    return SplitSpec("rare", {"full": list(universe), "rare": rare, "non_rare": non_rare}, params={"threshold": threshold})


def _seen_object_ok(unseen: Sequence[HoiClass], seen: Sequence[HoiClass]) -> bool:
    seen_objects = {c.object_class for c in seen}
    return all(c.object_class in seen_objects for c in unseen)


def make_seen_object_split(
    classes: Sequence[HoiClass],
    n_unseen: int = 120,
    seed: int = 0,
    max_tries: int = 10000,
) -> SplitSpec:
    """Hold out ``n_unseen`` classes whose objects all remain in some seen class.

    Seeded rejection sampling over uniform draws without replacement.
    """
    pool = sorted(set(classes))
    n_objects = len({c.object_class for c in pool})
    if n_unseen < 0 or n_unseen > len(pool) - n_objects:
        raise SplitInfeasibleError(
            f"cannot hold out {n_unseen} of {len(pool)} classes while keeping all {n_objects} objects seen"
        )
    rng = np.random.default_rng(seed)
    for attempt in range(1, max_tries + 1):
        pick = set(rng.choice(len(pool), size=n_unseen, replace=False).tolist())
        unseen = [pool[i] for i in sorted(pick)]
        seen = [pool[i] for i in range(len(pool)) if i not in pick]
        if _seen_object_ok(unseen, seen):
            return SplitSpec(
                "seen_object",
                {"full": pool, "unseen": unseen, "seen": seen},
                seed=seed,
                params={"n_unseen": n_unseen, "attempts": attempt},
            )
    raise SplitInfeasibleError(f"no valid seen-object split found in {max_tries} draws (seed {seed})")


def make_unseen_object_split(
    classes: Sequence[HoiClass],
    objects: Sequence[str],
    n_objects: int = 12,
    seed: int = 0,
) -> SplitSpec:
    """All classes of ``n_objects`` randomly drawn objects become unseen."""
    vocab = sorted(set(objects))
    if n_objects < 0 or n_objects > len(vocab):
        raise SplitInfeasibleError(f"cannot draw {n_objects} objects from a vocabulary of {len(vocab)}")
    rng = np.random.default_rng(seed)
    held = {vocab[i] for i in rng.choice(len(vocab), size=n_objects, replace=False).tolist()}
    pool = sorted(set(classes))
    return SplitSpec(
        "unseen_object",
        {
            "full": pool,
            "unseen": [c for c in pool if c.object_class in held],
            "seen": [c for c in pool if c.object_class not in held],
        },
        seed=seed,
        params={"n_objects": n_objects, "objects": sorted(held)},
    )


def exclude_classes(d: Dataset, classes: Iterable[HoiClass]) -> Dataset:
    """Drop every triplet carrying any of ``classes`` (zero-shot training set)."""
    banned = set(classes)
    return d.replace_triplets(t for t in d.triplets if not any(c in banned for c in triplet_classes(t)))


# --- bias -------------------------------------------------------------------


class BiasCounts(Counter):
    """Instance counts keyed by (predicate, object)."""

    @classmethod
    def from_dataset(cls, d: Dataset) -> "BiasCounts":
        return cls((p, t.object_class) for t in d.triplets for p in t.predicates)

    @classmethod
    def from_detections(cls, dets: Iterable[HoiDetection]) -> "BiasCounts":
        return cls((d.predicate, d.object_class) for d in dets)


def bias(counts: Mapping[Tuple[str, str], int], pair: Tuple[str, str]) -> float:
    """Share of the object's instances that carry the predicate."""
    predicate, obj = pair
    total = sum(n for (p, o), n in counts.items() if o == obj)
    if total <= 0:
        raise ValueError(f"object {obj!r} has no instances; bias is undefined")
    return counts.get((predicate, obj), 0) / total


AGAINST = "against"
TOWARDS = "towards"


def make_bias_scenario(d: Dataset, pair: Tuple[str, str], scenario: str) -> Dataset:
    """Training set heavily biased against or towards a (predicate, object) pair.

    ``against`` drops every triplet labeled with the pair. ``towards`` drops
    the object's other triplets and keeps only the pair's predicate on the
    ones that carry it. Triplets of other objects are untouched.
    """
    predicate, obj = pair
    if not any(t.object_class == obj and predicate in t.predicates for t in d.triplets):
        raise DataError(f"pair ({predicate}, {obj}) does not occur in the dataset")
    if scenario == AGAINST:
        kept = [t for t in d.triplets if not (t.object_class == obj and predicate in t.predicates)]
    elif scenario == TOWARDS:
        kept = []
        for t in d.triplets:
            if t.object_class != obj:
                kept.append(t)
            elif predicate in t.predicates:
                kept.append(
                    InteractionTriplet(
                        t.image_id, t.human_box, t.object_box, obj, frozenset({predicate}), t.human_feature, t.synthetic
                    )
                )
    else:
        raise ValueError(f"unknown bias scenario {scenario!r}; expected {AGAINST!r} or {TOWARDS!r}")
    return d.replace_triplets(kept)


def generate_synthetic(config=None, seed: int = 0):
    """Seeded toy corpus with planted clusters; see :mod:`funchoi.synth`."""
    from .synth import SynthConfig, generate_synthetic as _generate

    return _generate(config if config is not None else SynthConfig(), seed)
