"""Inference: pair detections, score predicates, suppress duplicates class-wise."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .datamodel import (
    DEFAULT_HUMAN_CLASSES,
    BoundingBox,
    DataError,
    Detection,
    EmbeddingTable,
    ImageInfo,
    dump_jsonl,
    iter_records,
)
from .geometry import pairwise_iou, union_box
from .nn import PredicateModel, assemble_batch, forward


@dataclass(frozen=True)
class HoiDetection:
    image_id: str
    human_box: BoundingBox
    object_box: BoundingBox
    object_class: str
    predicate: str
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"detection score must lie in [0, 1], got {self.score}")

    @property
    def union_box(self) -> BoundingBox:
        return union_box(self.human_box, self.object_box)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "human_box": self.human_box.to_list(),
            "object_box": self.object_box.to_list(),
            "object_class": self.object_class,
            "predicate": self.predicate,
            "score": self.score,
        }

    @classmethod
    def from_json(cls, rec: Mapping) -> "HoiDetection":
        return cls(
            str(rec["image_id"]),
            BoundingBox.from_list(rec["human_box"]),
            BoundingBox.from_list(rec["object_box"]),
            str(rec["object_class"]),
            str(rec["predicate"]),
            float(rec["score"]),
        )


@dataclass(frozen=True)
class InferenceConfig:
    det_threshold: float = 0.9
    predicate_threshold: float = 0.5
    nms_iou: float = 0.5
    human_token: str = "person"
    human_classes: Tuple[str, ...] = tuple(sorted(DEFAULT_HUMAN_CLASSES))
    # None: every non-human detection is a candidate object
    object_vocabulary: Optional[Tuple[str, ...]] = None
    include_confidence: bool = True

    def __post_init__(self) -> None:
        for name in ("det_threshold", "predicate_threshold", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["human_classes"] = list(self.human_classes)
        if self.object_vocabulary is not None:
            obj["object_vocabulary"] = list(self.object_vocabulary)
        return obj

    @classmethod
    def from_json(cls, obj: Mapping) -> "InferenceConfig":
        obj = dict(obj)
        if "human_classes" in obj:
            obj["human_classes"] = tuple(obj["human_classes"])
        if obj.get("object_vocabulary") is not None:
            obj["object_vocabulary"] = tuple(obj["object_vocabulary"])
        return cls(**obj)


Pair = Tuple[Detection, Detection]


def build_pairs(dets: Sequence[Detection], cfg: InferenceConfig = InferenceConfig()) -> List[Pair]:
    """All (human, object) pairs with both confidences above ``det_threshold``.

    A human detection is also a candidate object when its class is in the
    object vocabulary.
    """
    humans_set = set(cfg.human_classes)
    vocab = None if cfg.object_vocabulary is None else set(cfg.object_vocabulary)
    kept = [d for d in dets if d.confidence > cfg.det_threshold]
    humans = [d for d in kept if d.class_name in humans_set]
    if vocab is None:
        objects = [d for d in kept if d.class_name not in humans_set]
    else:
        objects = [d for d in kept if d.class_name in vocab]
    return [(h, o) for h in humans for o in objects if h is not o]


def score_pairs(
    m: PredicateModel,
    pairs: Sequence[Pair],
    embeddings: EmbeddingTable,
    img: ImageInfo,
    cfg: InferenceConfig = InferenceConfig(),
) -> List[HoiDetection]:
    if not pairs:
        return []
    for h, _ in pairs:
        if h.feature is None:
            raise DataError(f"human detection in image {h.image_id!r} has no feature")
    hb = np.array([h.box.to_list() for h, _ in pairs])
    ob = np.array([o.box.to_list() for _, o in pairs])
    sizes = np.tile([img.width, img.height], (len(pairs), 1))
    feats = np.array([h.feature for h, _ in pairs], dtype=np.float64)
    X = assemble_batch(hb, ob, [o.class_name for _, o in pairs], sizes, feats, embeddings, cfg.human_token, m.ablate)
    probs = forward(m, X)
    out: List[HoiDetection] = []
    for (h, o), row in zip(pairs, probs):
        conf = h.confidence * o.confidence if cfg.include_confidence else 1.0
        for j in np.flatnonzero(row >= cfg.predicate_threshold):
            out.append(HoiDetection(img.image_id, h.box, o.box, o.class_name, m.predicates[j], float(row[j] * conf)))
    return out


def score_pair(m, pair: Pair, embeddings, img, cfg: InferenceConfig = InferenceConfig()) -> List[HoiDetection]:
    return score_pairs(m, [pair], embeddings, img, cfg)


def _union_array(cands: Sequence[HoiDetection]) -> np.ndarray:
    return np.array([c.union_box.to_list() for c in cands]).reshape(-1, 4)


def nms(cands: Sequence[HoiDetection], nms_iou: float = 0.5) -> List[HoiDetection]:
    """Greedy NMS over union boxes, run separately per (object_class, predicate).

    Returns kept detections in input order.
    """
    groups: Dict[Tuple[str, str], List[int]] = {}
    for i, c in enumerate(cands):
        groups.setdefault((c.object_class, c.predicate), []).append(i)
    keep = np.zeros(len(cands), dtype=bool)
    for idx in groups.values():
        idx = np.array(idx)
        scores = np.array([cands[i].score for i in idx])
        # stable sort on -score keeps input order among equal scores
        order = idx[np.argsort(-scores, kind="stable")]
        boxes = _union_array([cands[i] for i in order])
        overlap = pairwise_iou(boxes, boxes)
        alive = np.ones(len(order), dtype=bool)
        for r in range(len(order)):
            if not alive[r]:
                continue
            keep[order[r]] = True
            alive[r + 1 :] &= overlap[r, r + 1 :] <= nms_iou
    return [c for i, c in enumerate(cands) if keep[i]]


def _sort_key(d: HoiDetection):
    return (-d.score, d.predicate, d.object_class, tuple(d.human_box.to_list()), tuple(d.object_box.to_list()))


def detect_image(
    dets: Sequence[Detection],
    m: PredicateModel,
    embeddings: EmbeddingTable,
    img: ImageInfo,
    cfg: InferenceConfig = InferenceConfig(),
) -> List[HoiDetection]:
    pairs = build_pairs(dets, cfg)
    cands = score_pairs(m, pairs, embeddings, img, cfg)
    # canonical candidate order makes NMS ties independent of detection order
    cands.sort(key=_sort_key)
    return sorted(nms(cands, cfg.nms_iou), key=_sort_key)


def detect_all(
    detections: Mapping[str, Sequence[Detection]],
    images: Mapping[str, ImageInfo],
    m: PredicateModel,
    embeddings: EmbeddingTable,
    cfg: InferenceConfig = InferenceConfig(),
) -> List[HoiDetection]:
    out: List[HoiDetection] = []
    for image_id in sorted(detections):
        if image_id not in images:
            raise DataError(f"detections reference unknown image {image_id!r}")
        out.extend(detect_image(detections[image_id], m, embeddings, images[image_id], cfg))
    return out


def save_hoi_detections(dets: Iterable[HoiDetection], path, header: Optional[dict] = None) -> None:
    dump_jsonl((d.to_json() for d in dets), path, header)


def load_hoi_detections(path) -> List[HoiDetection]:
    out = []
    for lineno, rec in iter_records(path):
        try:
            out.append(HoiDetection.from_json(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed HOI detection: {exc}", line=lineno, path=str(path)) from None
    return out
