"""Domain types and JSONL ingestion for annotations, detections and embeddings."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

DEFAULT_FEATURE_DIM = 2048
DEFAULT_EMBEDDING_DIM = 300
DEFAULT_HUMAN_CLASSES = frozenset({"person"})

PROVENANCE_KEY = "_provenance"
VOCABULARY_KEY = "vocabulary"


class DataError(ValueError):
    """Raised when an input record is malformed or violates an invariant."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class InvalidBoxError(DataError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in xyxy pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"box {coords} has non-finite coordinates")
        if min(coords) < 0:
            raise InvalidBoxError(f"box {coords} has negative coordinates")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError(f"box {coords} is degenerate (need x1 < x2 and y1 < y2)")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BoundingBox":
        if len(values) != 4:
            raise InvalidBoxError(f"box must have 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class ImageInfo:
    image_id: str
    width: float
    height: float

    def __post_init__(self) -> None:
        for name in ("width", "height"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DataError(f"image {self.image_id!r}: {name} must be finite and > 0, got {v}")

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BoundingBox
    class_name: str
    confidence: float
    feature: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise DataError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class InteractionTriplet:
    image_id: str
    human_box: BoundingBox
    object_box: BoundingBox
    object_class: str
    predicates: frozenset
    human_feature: Tuple[float, ...]
    synthetic: bool = False

    def __post_init__(self) -> None:
        if not self.predicates:
            raise DataError(f"triplet in image {self.image_id!r} has no predicates")

    def with_object(self, object_class: str, synthetic: bool = False) -> "InteractionTriplet":
        return InteractionTriplet(
            self.image_id,
            self.human_box,
            self.object_box,
            object_class,
            self.predicates,
            self.human_feature,
            synthetic,
        )


class VectorTable:
    """Token -> fixed-dimension vector mapping, read-only after construction."""

    kind = "vector"

    def __init__(self, vectors: Mapping[str, Sequence[float]], dim: Optional[int] = None):
        table: Dict[str, np.ndarray] = {}
        for token, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1:
                raise DataError(f"{self.kind} for {token!r} must be one-dimensional")
            if dim is None:
                dim = arr.shape[0]
            if arr.shape[0] != dim:
                raise DataError(f"{self.kind} for {token!r} has dimension {arr.shape[0]}, expected {dim}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{self.kind} for {token!r} contains NaN or infinite entries")
            arr.setflags(write=False)
            table[token] = arr
        self._table = table
        self.dim = 0 if dim is None else int(dim)

    def __getitem__(self, token: str) -> np.ndarray:
        try:
            return self._table[token]
        except KeyError:
            raise KeyError(f"{token!r} not found in {self.kind} table") from None

    def __contains__(self, token: object) -> bool:
        return token in self._table

    def __len__(self) -> int:
        return len(self._table)

    def __iter__(self) -> Iterator[str]:
        return iter(self._table)

    def tokens(self) -> List[str]:
        return list(self._table)


class EmbeddingTable(VectorTable):
    kind = "embedding"


class VisualPrototypeTable(VectorTable):
    kind = "visual prototype"


@dataclass
class Dataset:
    images: List[ImageInfo] = field(default_factory=list)
    triplets: List[InteractionTriplet] = field(default_factory=list)
    object_vocabulary: List[str] = field(default_factory=list)
    predicate_vocabulary: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("object_vocabulary", "predicate_vocabulary"):
            vocab = getattr(self, name)
            if len(set(vocab)) != len(vocab):
                raise DataError(f"{name} contains duplicates")
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise DataError("image ids are not unique")
        known = set(ids)
        objects = set(self.object_vocabulary)
        predicates = set(self.predicate_vocabulary)
        for i, t in enumerate(self.triplets):
            if t.image_id not in known:
                raise DataError(f"triplet {i}: image {t.image_id!r} is not listed")
            if t.object_class not in objects:
                raise DataError(f"triplet {i}: object {t.object_class!r} outside object vocabulary")
            extra = set(t.predicates) - predicates
            if extra:
                raise DataError(f"triplet {i}: predicates {sorted(extra)} outside predicate vocabulary")

    def image(self, image_id: str) -> ImageInfo:
        return self.image_index()[image_id]

    def image_index(self) -> Dict[str, ImageInfo]:
        return {im.image_id: im for im in self.images}

    def image_predicates(self) -> Dict[str, frozenset]:
        """Union of predicate labels over all triplets of each image."""
        out: Dict[str, set] = {}
        for t in self.triplets:
            out.setdefault(t.image_id, set()).update(t.predicates)
        return {k: frozenset(v) for k, v in out.items()}

    def replace_triplets(self, triplets: Iterable[InteractionTriplet]) -> "Dataset":
        """Copy with new triplets; images without triplets are dropped, vocabularies kept."""
        triplets = list(triplets)
        used = {t.image_id for t in triplets}
        return Dataset(
            images=[im for im in self.images if im.image_id in used],
            triplets=triplets,
            object_vocabulary=list(self.object_vocabulary),
            predicate_vocabulary=list(self.predicate_vocabulary),
        )


def iter_records(path: Path) -> Iterator[Tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc.msg}", line=lineno, path=str(path)) from None
            if not isinstance(rec, dict):
                raise DataError("record must be a JSON object", line=lineno, path=str(path))
            if PROVENANCE_KEY in rec:
                continue
            yield lineno, rec


def _require(rec: dict, key: str):
    if key not in rec:
        raise DataError(f"missing field {key!r}")
    return rec[key]


def _vector(values, dim: Optional[int], what: str) -> Tuple[float, ...]:
    if not isinstance(values, list):
        raise DataError(f"{what} must be a list of numbers")
    try:
        vec = tuple(float(v) for v in values)
    except (TypeError, ValueError):
        raise DataError(f"{what} must contain only numbers") from None
    if dim is not None and len(vec) != dim:
        raise DataError(f"{what} has dimension {len(vec)}, expected {dim}")
    if not all(math.isfinite(v) for v in vec):
        raise DataError(f"{what} contains non-finite entries")
    return vec


def _parse_triplet(rec: dict, feature_dim: Optional[int]) -> Tuple[ImageInfo, InteractionTriplet]:
    image_id = str(_require(rec, "image_id"))
    image = ImageInfo(image_id, float(_require(rec, "width")), float(_require(rec, "height")))
    predicates = _require(rec, "predicates")
    if not isinstance(predicates, list) or not predicates:
        raise DataError("predicates must be a non-empty list")
    triplet = InteractionTriplet(
        image_id=image_id,
        human_box=BoundingBox.from_list(_require(rec, "human_box")),
        object_box=BoundingBox.from_list(_require(rec, "object_box")),
        object_class=str(_require(rec, "object_class")),
        predicates=frozenset(str(p) for p in predicates),
        human_feature=_vector(_require(rec, "human_feature"), feature_dim, "human_feature"),
        synthetic=bool(rec.get("synthetic", False)),
    )
    return image, triplet


def load_dataset(path, feature_dim: Optional[int] = DEFAULT_FEATURE_DIM) -> Dataset:
    """Read an ``annotations.jsonl`` file.

    An optional ``{"vocabulary": {"objects": [...], "predicates": [...]}}``
    record fixes the vocabularies; otherwise they are the sorted sets of
    classes and predicates seen in the triplets. ``feature_dim=None`` only
    enforces a uniform human-feature dimension.
    """
    path = Path(path)
    images: Dict[str, ImageInfo] = {}
    triplets: List[InteractionTriplet] = []
    declared: Optional[dict] = None
    for lineno, rec in iter_records(path):
        try:
            if VOCABULARY_KEY in rec:
                declared = rec[VOCABULARY_KEY]
                if not isinstance(declared, dict):
                    raise DataError("vocabulary record must be an object")
                continue
            image, triplet = _parse_triplet(rec, feature_dim)
            if feature_dim is None and triplets:
                feature_dim = len(triplets[0].human_feature)
                if len(triplet.human_feature) != feature_dim:
                    raise DataError(
                        f"human_feature has dimension {len(triplet.human_feature)}, expected {feature_dim}"
                    )
            prev = images.get(image.image_id)
            if prev is not None and prev != image:
                raise DataError(f"image {image.image_id!r} has inconsistent width/height")
            images[image.image_id] = image
            triplets.append(triplet)
        except DataError as exc:
            raise DataError(f"{exc} (record: image_id={rec.get('image_id')!r})", line=lineno, path=str(path)) from None
        except (TypeError, ValueError) as exc:
            raise DataError(str(exc), line=lineno, path=str(path)) from None

    if declared is not None:
        objects = [str(o) for o in declared.get("objects", [])]
        predicates = [str(p) for p in declared.get("predicates", [])]
    else:
        objects = sorted({t.object_class for t in triplets})
        predicates = sorted({p for t in triplets for p in t.predicates})
    try:
        return Dataset(list(images.values()), triplets, objects, predicates)
    except DataError as exc:
        raise DataError(str(exc), path=str(path)) from None


def triplet_record(t: InteractionTriplet, image: ImageInfo) -> dict:
    rec = {
        "image_id": t.image_id,
        "width": image.width,
        "height": image.height,
        "human_box": t.human_box.to_list(),
        "object_box": t.object_box.to_list(),
        "object_class": t.object_class,
        "predicates": sorted(t.predicates),
        "human_feature": list(t.human_feature),
    }
    if t.synthetic:
        rec["synthetic"] = True
    return rec


def dump_jsonl(records: Iterable[dict], path, header: Optional[dict] = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header is not None:
            f.write(json.dumps({PROVENANCE_KEY: header}, sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def save_dataset(d: Dataset, path, header: Optional[dict] = None) -> None:
    images = d.image_index()
    records: List[dict] = [
        {VOCABULARY_KEY: {"objects": list(d.object_vocabulary), "predicates": list(d.predicate_vocabulary)}}
    ]
    records.extend(triplet_record(t, images[t.image_id]) for t in d.triplets)
    dump_jsonl(records, path, header)


def load_detections(
    path,
    feature_dim: Optional[int] = DEFAULT_FEATURE_DIM,
    human_classes: Iterable[str] = DEFAULT_HUMAN_CLASSES,
) -> Dict[str, List[Detection]]:
    """Read ``detections.jsonl`` into per-image lists, preserving file order."""
    path = Path(path)
    human_classes = frozenset(human_classes)
    groups: Dict[str, List[Detection]] = {}
    for lineno, rec in iter_records(path):
        try:
            feature = rec.get("feature")
            class_name = str(_require(rec, "class_name"))
            if feature is not None:
                feature = _vector(feature, feature_dim, "feature")
            elif class_name in human_classes:
                raise DataError(f"human detection ({class_name!r}) must carry a feature")
            conf = _require(rec, "confidence")
            if isinstance(conf, bool) or not isinstance(conf, (int, float)):
                raise DataError(f"confidence must be a number, got {conf!r}")
            det = Detection(
                image_id=str(_require(rec, "image_id")),
                box=BoundingBox.from_list(_require(rec, "box")),
                class_name=class_name,
                confidence=float(conf),
                feature=feature,
            )
        except DataError as exc:
            raise DataError(str(exc), line=lineno, path=str(path)) from None
        except (TypeError, ValueError) as exc:
            raise DataError(str(exc), line=lineno, path=str(path)) from None
        groups.setdefault(det.image_id, []).append(det)
    return groups


def detection_record(det: Detection) -> dict:
    rec = {
        "image_id": det.image_id,
        "box": det.box.to_list(),
        "class_name": det.class_name,
        "confidence": det.confidence,
    }
    if det.feature is not None:
        rec["feature"] = list(det.feature)
    return rec


def save_detections(groups: Mapping[str, Sequence[Detection]], path, header: Optional[dict] = None) -> None:
    dump_jsonl((detection_record(d) for dets in groups.values() for d in dets), path, header)


def _load_table(path, token_key: str, cls, dim: Optional[int]):
    path = Path(path)
    vectors: Dict[str, List[float]] = {}
    for lineno, rec in iter_records(path):
        try:
            token = str(_require(rec, token_key))
            if token in vectors:
                raise DataError(f"duplicate token {token!r}")
            vec = rec.get("vector")
            if not isinstance(vec, list):
                raise DataError("vector must be a list of numbers")
            if any(v is None for v in vec):
                raise DataError(f"vector for {token!r} contains NaN")
            arr = [float(v) for v in vec]
            if any(math.isnan(v) for v in arr):
                raise DataError(f"vector for {token!r} contains NaN")
            if dim is None and vectors:
                dim = len(next(iter(vectors.values())))
            if dim is not None and len(arr) != dim:
                raise DataError(f"vector for {token!r} has dimension {len(arr)}, expected {dim}")
            vectors[token] = arr
        except DataError as exc:
            raise DataError(str(exc), line=lineno, path=str(path)) from None
        except (TypeError, ValueError) as exc:
            raise DataError(str(exc), line=lineno, path=str(path)) from None
    try:
        return cls(vectors, dim)
    except DataError as exc:
        raise DataError(str(exc), path=str(path)) from None


def load_embeddings(path, dim: Optional[int] = None) -> EmbeddingTable:
    """Read ``embeddings.jsonl`` ({token, vector}). ``dim`` pins d_w when given."""
    return _load_table(path, "token", EmbeddingTable, dim)


def load_visual_prototypes(path, dim: Optional[int] = None) -> VisualPrototypeTable:
    return _load_table(path, "class_name", VisualPrototypeTable, dim)


def save_table(table: VectorTable, path, token_key: str = "token", header: Optional[dict] = None) -> None:
    dump_jsonl(({token_key: k, "vector": table[k].tolist()} for k in table), path, header)


def load_images(path) -> Dict[str, ImageInfo]:
    """Read ``images.jsonl`` ({image_id, width, height}) used to size detections at inference."""
    path = Path(path)
    images: Dict[str, ImageInfo] = {}
    for lineno, rec in iter_records(path):
        try:
            im = ImageInfo(str(_require(rec, "image_id")), float(_require(rec, "width")), float(_require(rec, "height")))
        except DataError as exc:
            raise DataError(str(exc), line=lineno, path=str(path)) from None
        except (TypeError, ValueError) as exc:
            raise DataError(str(exc), line=lineno, path=str(path)) from None
        if im.image_id in images:
            raise DataError(f"duplicate image {im.image_id!r}", line=lineno, path=str(path))
        images[im.image_id] = im
    return images


def save_images(images: Iterable[ImageInfo], path, header: Optional[dict] = None) -> None:
    dump_jsonl(({"image_id": im.image_id, "width": im.width, "height": im.height} for im in images), path, header)
