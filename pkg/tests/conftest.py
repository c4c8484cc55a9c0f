import json

import pytest

from funchoi.datamodel import BoundingBox, Dataset, EmbeddingTable, ImageInfo, InteractionTriplet


def box(x1, y1, x2, y2):
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def triplet(image_id="img0", obj="cup", preds=("hold",), h=(10, 20, 30, 60), o=(20, 20, 40, 60), feature=(0.5, -0.5)):
    return InteractionTriplet(image_id, box(*h), box(*o), obj, frozenset(preds), tuple(feature))


def dataset(triplets, objects=None, predicates=None, size=(100.0, 100.0)):
    ids = []
    for t in triplets:
        if t.image_id not in ids:
            ids.append(t.image_id)
    images = [ImageInfo(i, *size) for i in ids]
    objects = objects if objects is not None else sorted({t.object_class for t in triplets})
    predicates = predicates if predicates is not None else sorted({p for t in triplets for p in t.predicates})
    return Dataset(images, list(triplets), list(objects), list(predicates))


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


@pytest.fixture
def toy_embeddings():
    return EmbeddingTable(
        {
            "person": [1.0, 0.0],
            "cup": [0.0, 1.0],
            "mug": [0.1, 0.9],
            "glass": [0.2, 0.8],
            "horse": [-1.0, 0.0],
        }
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
