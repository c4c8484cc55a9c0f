import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funchoi.datamodel import DataError
from funchoi.nn import (
    TrainConfig,
    assemble_input,
    backward,
    checkpoint_metadata,
    class_weights,
    feature_slices,
    forward,
    init_model,
    load_model,
    save_model,
    train,
    weighted_bce,
    zero_model,
)

from conftest import dataset, triplet


def random_model(rng, d_w=2, d_f=2, P=3, hidden=(5, 4)):
    m = init_model([f"p{j}" for j in range(P)], d_w, d_f, hidden, rng=rng)
    for k, v in m.params().items():
        if k.startswith("b"):
            v[...] = rng.normal(scale=0.3, size=v.shape)
    return m


def loss_of(m, X, Y, W):
    return weighted_bce(forward(m, X), Y, W)


def finite_difference(m, X, Y, W, eps=1e-6):
    out = {}
    for name, arr in m.params().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = loss_of(m, X, Y, W)
            arr[idx] = old - eps
            down = loss_of(m, X, Y, W)
            arr[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def assert_gradients_match(m, X, Y, W):
    analytic = backward(m, X, Y, W)
    numeric = finite_difference(m, X, Y, W)
    for name in analytic:
        np.testing.assert_allclose(analytic[name], numeric[name], rtol=1e-4, atol=1e-6, err_msg=name)


class TestGradients:
    def test_smallest_input_p3(self):
        # the 14 geometric entries put a floor under d_in: d_w=1, d_f=0 gives 16
        rng = np.random.default_rng(0)
        m = random_model(rng, d_w=1, d_f=0, P=3)
        assert m.d_in == 16
        X = rng.normal(size=(4, m.d_in))
        Y = rng.integers(0, 2, size=(4, 3)).astype(float)
        W = rng.choice([0.0, 1.0, 10.0], size=(4, 3))
        assert_gradients_match(m, X, Y, W)

    def test_zero_weights_zero_gradients(self):
        rng = np.random.default_rng(1)
        m = random_model(rng)
        X = rng.normal(size=(3, m.d_in))
        grads = backward(m, X, np.ones((3, 3)), np.zeros((3, 3)))
        assert all(np.all(g == 0) for g in grads.values())

    def test_unused_predicate_row_zero(self):
        rng = np.random.default_rng(2)
        m = random_model(rng)
        X = rng.normal(size=(3, m.d_in))
        W = np.ones((3, 3))
        W[:, 1] = 0.0
        grads = backward(m, X, rng.integers(0, 2, (3, 3)).astype(float), W)
        assert np.all(grads["W3"][1] == 0) and grads["b3"][1] == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_gradient_property(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, d_w=1, d_f=int(rng.integers(0, 1)) + 1, P=int(rng.integers(1, 4)), hidden=(4, 3))
    n = int(rng.integers(1, 4))
    X = rng.normal(size=(n, m.d_in))
    Y = rng.integers(0, 2, size=(n, len(m.predicates))).astype(float)
    W = rng.uniform(0, 10, size=Y.shape)
    assert_gradients_match(m, X, Y, W)


class TestWeights:
    def test_ride_example(self):
        t = triplet(preds=("ride",))
        w = class_weights(t, {"ride", "sit_on"}, ["ride", "sit_on", "hold"])
        assert w.tolist() == [10.0, 0.0, 1.0]

    def test_all_labels(self):
        t = triplet(preds=("ride", "sit_on", "hold"))
        assert class_weights(t, {"ride", "sit_on", "hold"}, ["ride", "sit_on", "hold"]).tolist() == [10.0] * 3

    def test_only_own_label(self):
        assert class_weights(triplet(preds=("hold",)), {"hold"}, ["ride", "hold"]).tolist() == [1.0, 10.0]

    def test_outside_vocabulary(self):
        with pytest.raises(DataError):
            class_weights(triplet(preds=("kick",)), {"kick"}, ["ride"])


class TestLoss:
    def test_exact(self):
        assert weighted_bce([1.0, 0.0], [1, 0], [1, 1]) == pytest.approx(0.0, abs=1e-6)

    def test_zero_weights(self):
        assert weighted_bce([0.3, 0.9], [1, 0], [0, 0]) == 0.0

    def test_hand_value(self):
        assert weighted_bce([0.5, 0.5], [1, 0], [10, 1]) == pytest.approx(11 * math.log(2) / 2, rel=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            weighted_bce([0.5], [1, 0], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1), st.floats(0, 10)), min_size=1, max_size=6))
def test_loss_non_negative(rows):
    p, y, w = map(np.array, zip(*rows))
    assert weighted_bce(p, y, w) >= 0.0


class TestForward:
    def test_zero_model_half(self):
        m = zero_model(["a", "b", "c"], 2, 2)
        assert forward(m, np.ones(m.d_in)).tolist() == [0.5, 0.5, 0.5]

    def test_bias_asymptote(self):
        m = zero_model(["a", "b"], 2, 2)
        m.b3[1] = 50.0
        assert forward(m, np.ones(m.d_in))[1] > 1 - 1e-12

    def test_deterministic_init(self):
        x = np.linspace(-1, 1, 20)
        a = init_model(["a", "b"], 2, 2, (8, 4), seed=3)
        b = init_model(["a", "b"], 2, 2, (8, 4), seed=3)
        assert forward(a, x).tobytes() == forward(b, x).tobytes()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward(zero_model(["a"], 2, 2), np.ones(5))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 5))
def test_output_bias_monotone(seed, delta):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    X = rng.normal(size=(5, m.d_in))
    before = forward(m, X)[:, 0]
    m.b3[0] += delta
    assert np.all(forward(m, X)[:, 0] >= before)


class TestAssemble:
    def test_layout(self, toy_embeddings):
        from funchoi.datamodel import ImageInfo

        x = assemble_input(triplet(), toy_embeddings, ImageInfo("img0", 100.0, 100.0))
        assert len(x) == 2 + 2 + 14 + 2
        s = feature_slices(2, 2)
        assert x[s["w_h"]].tolist() == [1.0, 0.0] and x[s["w_o"]].tolist() == [0.0, 1.0]
        assert x[s["f_g"]][10] == -0.5 and x[s["f_h"]].tolist() == [0.5, -0.5]

    def test_substitution_changes_only_w_o(self, toy_embeddings):
        from funchoi.datamodel import ImageInfo

        img = ImageInfo("img0", 100.0, 100.0)
        t = triplet()
        a, b = assemble_input(t, toy_embeddings, img), assemble_input(t.with_object("mug"), toy_embeddings, img)
        changed = np.flatnonzero(a != b)
        assert set(changed) <= set(range(2, 4)) and len(changed) > 0

    def test_unknown_token(self, toy_embeddings):
        from funchoi.datamodel import ImageInfo

        with pytest.raises(DataError):
            assemble_input(triplet(obj="zebra"), toy_embeddings, ImageInfo("img0", 100.0, 100.0))

    def test_ablation_zeroes_slice(self, toy_embeddings):
        from funchoi.datamodel import ImageInfo

        x = assemble_input(triplet(), toy_embeddings, ImageInfo("img0", 100.0, 100.0), ablate=("f_g",))
        assert np.all(x[feature_slices(2, 2)["f_g"]] == 0) and x[0] == 1.0


def side_dataset(n=200, seed=0):
    """'left' when the human is left of the object, 'right' otherwise."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        ox = rng.uniform(100, 200)
        hx = ox + rng.choice([-1, 1]) * rng.uniform(10, 60)
        pred = "left" if hx < ox else "right"
        rows.append(triplet(f"i{i:03d}", "cup", (pred,), (hx, 50, hx + 30, 110), (ox, 60, ox + 30, 90), rng.normal(size=2)))
    return dataset(rows, predicates=["left", "right"], size=(300.0, 200.0))


class TestTrain:
    def test_lr_zero_keeps_init(self, toy_embeddings):
        d = dataset([triplet()])
        cfg = TrainConfig(epochs=1, lr0=0.0, hidden=(8, 4), seed=5)
        m, _ = train(d, toy_embeddings, cfg)
        m0, _ = train(d, toy_embeddings, TrainConfig(epochs=0, hidden=(8, 4), seed=5))
        for k in m.params():
            assert np.array_equal(m.params()[k], m0.params()[k])

    def test_separable_toy(self, toy_embeddings):
        d = side_dataset()
        # plain SGD: momentum 0.9 overshoots once on this tiny problem before converging
        m, log = train(d, toy_embeddings, TrainConfig(epochs=25, momentum=0.0))
        losses = [log.initial_loss] + log.epoch_losses
        assert all(b < a for a, b in zip(losses[:5], losses[1:6]))
        from funchoi.nn import dataset_inputs

        P = forward(m, dataset_inputs(d, toy_embeddings))
        truth = np.array([[p in t.predicates for p in d.predicate_vocabulary] for t in d.triplets])
        accuracy = np.mean(np.all((P >= 0.5) == truth, axis=1))
        assert accuracy >= 0.95

    def test_deterministic(self, toy_embeddings, tmp_path):
        d = side_dataset(40)
        cfg = TrainConfig(epochs=3, hidden=(16, 8), seed=9)
        for name in ("a", "b"):
            m, _ = train(d, toy_embeddings, cfg)
            save_model(m, tmp_path / name, cfg.to_json())
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_schedule(self):
        cfg = TrainConfig()
        assert [cfg.learning_rate(e) for e in (0, 9, 10, 19, 20, 24)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])

    def test_empty_dataset(self, toy_embeddings):
        with pytest.raises(DataError):
            train(dataset([]), toy_embeddings, TrainConfig(epochs=1))

    @pytest.mark.parametrize("bad", [dict(epochs=-1), dict(batch_size=0), dict(ablate=("f_x",)), dict(hidden=(4,))])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_config_json_round_trip(self):
        cfg = TrainConfig(epochs=3, hidden=(8, 4), ablate=("f_g",))
        assert TrainConfig.from_json(cfg.to_json()) == cfg


def test_checkpoint_round_trip(tmp_path):
    m = random_model(np.random.default_rng(4))
    m = type(m)(**{**m.params(), "predicates": m.predicates, "embedding_dim": 2, "feature_dim": 2, "human_token": "man", "ablate": ("f_h",)})
    save_model(m, tmp_path / "m.bin", {"epochs": 1}, {"seed": 4})
    back = load_model(tmp_path / "m.bin")
    for k, v in m.params().items():
        assert back.params()[k].tobytes() == v.tobytes()
    assert (back.predicates, back.human_token, back.ablate) == (m.predicates, "man", ("f_h",))
    assert checkpoint_metadata(tmp_path / "m.bin")["train_config"] == {"epochs": 1}


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(DataError):
        load_model(tmp_path / "x")
