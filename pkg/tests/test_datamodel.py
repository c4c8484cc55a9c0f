import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funchoi.datamodel import (
    BoundingBox,
    DataError,
    Detection,
    ImageInfo,
    InvalidBoxError,
    load_dataset,
    load_detections,
    load_embeddings,
    load_images,
    load_visual_prototypes,
    save_dataset,
    save_detections,
    save_images,
    save_table,
)

from conftest import box, dataset, triplet, write_jsonl


def ann(image_id="a", obj="cup", preds=("hold",), h=(10, 20, 30, 60), o=(20, 20, 40, 60), feat=(1.0, 2.0)):
    return {
        "image_id": image_id,
        "width": 100,
        "height": 100,
        "human_box": list(h),
        "object_box": list(o),
        "object_class": obj,
        "predicates": list(preds),
        "human_feature": list(feat),
    }


class TestBoundingBox:
    def test_valid(self):
        b = BoundingBox(0, 0, 10, 5)
        assert b.width == 10 and b.height == 5 and b.area == 50

    @pytest.mark.parametrize("coords", [(5, 0, 5, 10), (0, 3, 10, 2), (-1, 0, 1, 1), (0, 0, math.inf, 1), (0, 0, math.nan, 1)])
    def test_rejects(self, coords):
        with pytest.raises(InvalidBoxError):
            BoundingBox(*coords)

    def test_image_info_positive(self):
        with pytest.raises(DataError):
            ImageInfo("x", 0.0, 10.0)


class TestLoadDataset:
    def test_empty(self, tmp_path):
        d = load_dataset(write_jsonl(tmp_path / "a.jsonl", []), feature_dim=2)
        assert d.triplets == [] and d.images == []

    def test_singleton(self, tmp_path):
        d = load_dataset(write_jsonl(tmp_path / "a.jsonl", [ann(preds=("hold", "wash"))]), feature_dim=2)
        assert len(d.triplets) == 1
        assert d.object_vocabulary == ["cup"]
        assert set(d.predicate_vocabulary) == {"hold", "wash"}

    def test_degenerate_box_names_record(self, tmp_path):
        p = write_jsonl(tmp_path / "a.jsonl", [ann(), ann(image_id="bad", o=(20, 20, 20, 60))])
        with pytest.raises(DataError) as info:
            load_dataset(p, feature_dim=2)
        assert info.value.line == 2
        assert "bad" in str(info.value) and "degenerate" in str(info.value)

    def test_malformed_json_reports_line(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text('{"image_id": "a"\n')
        with pytest.raises(DataError) as info:
            load_dataset(p, feature_dim=2)
        assert info.value.line == 1

    def test_feature_dim_checked(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(write_jsonl(tmp_path / "a.jsonl", [ann()]), feature_dim=3)

    def test_unknown_fields_and_provenance_ignored(self, tmp_path):
        rec = ann()
        rec["extra"] = 1
        p = write_jsonl(tmp_path / "a.jsonl", [{"_provenance": {"tool": "x"}}, rec])
        assert len(load_dataset(p, feature_dim=2).triplets) == 1

    def test_declared_vocabulary(self, tmp_path):
        p = write_jsonl(tmp_path / "a.jsonl", [{"vocabulary": {"objects": ["mug", "cup"], "predicates": ["wash", "hold"]}}, ann()])
        d = load_dataset(p, feature_dim=2)
        assert d.object_vocabulary == ["mug", "cup"] and d.predicate_vocabulary == ["wash", "hold"]

    def test_predicate_outside_declared_vocabulary(self, tmp_path):
        p = write_jsonl(tmp_path / "a.jsonl", [{"vocabulary": {"objects": ["cup"], "predicates": ["wash"]}}, ann()])
        with pytest.raises(DataError):
            load_dataset(p, feature_dim=2)

    def test_inconsistent_image_size(self, tmp_path):
        other = ann()
        other["width"] = 50
        with pytest.raises(DataError):
            load_dataset(write_jsonl(tmp_path / "a.jsonl", [ann(), other]), feature_dim=2)

    def test_round_trip(self, tmp_path):
        d = dataset([triplet(), triplet("img1", "mug", ("hold", "wash")), triplet("img1", "cup", ("wash",))])
        save_dataset(d, tmp_path / "a.jsonl")
        assert load_dataset(tmp_path / "a.jsonl", feature_dim=2) == d

    def test_deterministic(self, tmp_path):
        p = write_jsonl(tmp_path / "a.jsonl", [ann(), ann(image_id="b", obj="mug")])
        assert load_dataset(p, 2) == load_dataset(p, 2)


class TestLoadDetections:
    def rec(self, image_id="a", cls="cup", conf=0.9, feature=None):
        r = {"image_id": image_id, "box": [0, 0, 10, 10], "class_name": cls, "confidence": conf}
        if feature is not None:
            r["feature"] = feature
        return r

    def test_confidence_range(self, tmp_path):
        with pytest.raises(DataError):
            load_detections(write_jsonl(tmp_path / "d.jsonl", [self.rec(conf=1.01)]), feature_dim=2)

    def test_grouping(self, tmp_path):
        p = write_jsonl(tmp_path / "d.jsonl", [self.rec(), self.rec(cls="mug"), self.rec("b")])
        groups = load_detections(p, feature_dim=2)
        assert [len(v) for v in groups.values()] == [2, 1]
        assert [d.class_name for d in groups["a"]] == ["cup", "mug"]

    def test_human_needs_feature(self, tmp_path):
        with pytest.raises(DataError):
            load_detections(write_jsonl(tmp_path / "d.jsonl", [self.rec(cls="person")]), feature_dim=2)

    def test_human_synonyms(self, tmp_path):
        p = write_jsonl(tmp_path / "d.jsonl", [self.rec(cls="man")])
        load_detections(p, feature_dim=2)
        with pytest.raises(DataError):
            load_detections(p, feature_dim=2, human_classes={"person", "man"})

    def test_feature_dimension(self, tmp_path):
        with pytest.raises(DataError):
            load_detections(write_jsonl(tmp_path / "d.jsonl", [self.rec(cls="person", feature=[1.0])]), feature_dim=2)

    def test_round_trip(self, tmp_path):
        groups = {"a": [Detection("a", box(0, 0, 5, 5), "person", 0.95, (1.0, 2.0)), Detection("a", box(1, 1, 4, 4), "cup", 0.5)]}
        save_detections(groups, tmp_path / "d.jsonl")
        assert load_detections(tmp_path / "d.jsonl", feature_dim=2) == groups


class TestTables:
    def test_shape(self, tmp_path):
        recs = [{"token": t, "vector": list(np.arange(300.0) + i)} for i, t in enumerate(["a", "b", "c"])]
        table = load_embeddings(write_jsonl(tmp_path / "e.jsonl", recs))
        assert len(table) == 3 and table.dim == 300

    def test_duplicate(self, tmp_path):
        recs = [{"token": "a", "vector": [1.0]}, {"token": "a", "vector": [2.0]}]
        with pytest.raises(DataError):
            load_embeddings(write_jsonl(tmp_path / "e.jsonl", recs))

    def test_nan(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text('{"token": "a", "vector": [1.0, NaN]}\n')
        with pytest.raises(DataError):
            load_embeddings(p)

    def test_ragged(self, tmp_path):
        recs = [{"token": "a", "vector": [1.0]}, {"token": "b", "vector": [2.0, 3.0]}]
        with pytest.raises(DataError):
            load_embeddings(write_jsonl(tmp_path / "e.jsonl", recs))

    def test_declared_dim(self, tmp_path):
        with pytest.raises(DataError):
            load_embeddings(write_jsonl(tmp_path / "e.jsonl", [{"token": "a", "vector": [1.0]}]), dim=300)

    def test_prototypes_round_trip(self, tmp_path):
        recs = [{"class_name": "cup", "vector": [1.0, 2.0]}, {"class_name": "mug", "vector": [0.5, 0.25]}]
        table = load_visual_prototypes(write_jsonl(tmp_path / "v.jsonl", recs))
        save_table(table, tmp_path / "w.jsonl", "class_name")
        again = load_visual_prototypes(tmp_path / "w.jsonl")
        assert again.tokens() == table.tokens()
        np.testing.assert_array_equal(again["mug"], [0.5, 0.25])

    def test_vectors_read_only(self, tmp_path):
        table = load_embeddings(write_jsonl(tmp_path / "e.jsonl", [{"token": "a", "vector": [1.0]}]))
        with pytest.raises(ValueError):
            table["a"][0] = 3.0


def test_images_round_trip(tmp_path):
    imgs = [ImageInfo("a", 640.0, 480.0), ImageInfo("b", 10.5, 20.0)]
    save_images(imgs, tmp_path / "images.jsonl")
    assert list(load_images(tmp_path / "images.jsonl").values()) == imgs


coord = st.floats(0, 500, allow_nan=False)


@st.composite
def boxes(draw):
    x1, y1 = draw(coord), draw(coord)
    return BoundingBox(x1, y1, x1 + draw(st.floats(1, 100)), y1 + draw(st.floats(1, 100)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(boxes(), boxes(), st.sampled_from(["cup", "mug"]), st.sets(st.sampled_from(["hold", "wash"]), min_size=1)), max_size=6))
def test_round_trip_property(tmp_path_factory, rows):
    d = dataset([triplet(f"i{k % 3}", o, p, h.to_list(), ob.to_list()) for k, (h, ob, o, p) in enumerate(rows)])
    path = tmp_path_factory.mktemp("rt") / "a.jsonl"
    save_dataset(d, path)
    again = load_dataset(path, feature_dim=2)
    assert again == d
    for t in again.triplets:
        assert t.predicates <= set(again.predicate_vocabulary)
