"""Box arithmetic and the 14-d human/object geometric relationship feature."""

from __future__ import annotations

import math

import numpy as np

from .datamodel import BoundingBox, ImageInfo, InvalidBoxError

GEOMETRIC_FEATURE_DIM = 14


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def union_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    return BoundingBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def pairwise_iou(boxes: np.ndarray, others: np.ndarray) -> np.ndarray:
    """IoU matrix between two (n, 4) and (m, 4) xyxy arrays."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    others = np.asarray(others, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(boxes[:, None, 2], others[None, :, 2]) - np.maximum(boxes[:, None, 0], others[None, :, 0])
    ih = np.minimum(boxes[:, None, 3], others[None, :, 3]) - np.maximum(boxes[:, None, 1], others[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    area_b = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def geometric_feature(h: BoundingBox, o: BoundingBox, img: ImageInfo) -> np.ndarray:
    """Relationship feature of a human box ``h`` and object box ``o`` in ``img``.

    Layout: normalized human corners and area ratio (5), the same for the
    object (5), the human's top-left offset in object-size units (2), and
    the log width/height ratios human/object (2).
    """
    for name, box in (("human", h), ("object", o)):
        if box.width <= 0 or box.height <= 0:
            raise InvalidBoxError(f"{name} box {box.to_list()} has non-positive width or height")
    W, H = img.width, img.height
    image_area = W * H
    ow, oh = o.x2 - o.x1, o.y2 - o.y1
    hw, hh = h.x2 - h.x1, h.y2 - h.y1
    return np.array(
        [
            h.x1 / W,
            h.y1 / H,
            h.x2 / W,
            h.y2 / H,
            (hw * hh) / image_area,
            o.x1 / W,
            o.y1 / H,
            o.x2 / W,
            o.y2 / H,
            (ow * oh) / image_area,
            (h.x1 - o.x1) / ow,
            (h.y1 - o.y1) / oh,
            math.log(hw / ow),
            math.log(hh / oh),
        ],
        dtype=np.float64,
    )


def geometric_features(human: np.ndarray, obj: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Batched :func:`geometric_feature` over (n, 4) boxes and (n, 2) image (W, H)."""
    human = np.asarray(human, dtype=np.float64).reshape(-1, 4)
    obj = np.asarray(obj, dtype=np.float64).reshape(-1, 4)
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 2)
    W, H = sizes[:, 0:1], sizes[:, 1:2]
    hw = human[:, 2] - human[:, 0]
    hh = human[:, 3] - human[:, 1]
    ow = obj[:, 2] - obj[:, 0]
    oh = obj[:, 3] - obj[:, 1]
    if np.any(hw <= 0) or np.any(hh <= 0) or np.any(ow <= 0) or np.any(oh <= 0):
        raise InvalidBoxError("boxes must have positive width and height")
    image_area = (W * H)[:, 0]
    scale = np.concatenate([W, H, W, H], axis=1)
    return np.column_stack(
        [
            human / scale,
            (hw * hh) / image_area,
            obj / scale,
            (ow * oh) / image_area,
            (human[:, 0] - obj[:, 0]) / ow,
            (human[:, 1] - obj[:, 1]) / oh,
            np.log(hw / ow),
            np.log(hh / oh),
        ]
    )
