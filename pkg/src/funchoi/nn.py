"""Two-hidden-layer predicate classifier in plain numpy.

Input is ``[w_h; w_o; f_g; f_h]``: human word vector, object word vector,
the 14-d geometric feature and the human appearance feature. Each predicate
gets an independent sigmoid output trained with a per-triplet weighted BCE.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .datamodel import DataError, Dataset, EmbeddingTable, ImageInfo, InteractionTriplet
from .geometry import GEOMETRIC_FEATURE_DIM, geometric_feature, geometric_features

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
FEATURE_SLOTS = ("w_h", "w_o", "f_g", "f_h")
PROB_EPS = 1e-7

CHECKPOINT_MAGIC = b"FUNCHOI-MLP\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    lr0: float = 0.1
    decay: float = 0.1
    decay_every: int = 10
    batch_size: int = 128
    momentum: float = 0.9
    seed: int = 0
    hidden: Tuple[int, int] = (1024, 512)
    human_token: str = "person"
    ablate: Tuple[str, ...] = ()
    positive_weight: float = 10.0
    other_in_image_weight: float = 0.0
    rest_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.decay_every <= 0:
            raise ValueError("decay_every must be positive")
        if len(self.hidden) != 2 or min(self.hidden) <= 0:
            raise ValueError("hidden must be two positive layer sizes")
        bad = set(self.ablate) - set(FEATURE_SLOTS)
        if bad:
            raise ValueError(f"unknown feature slots to ablate: {sorted(bad)}")

    def learning_rate(self, epoch: int) -> float:
        return self.lr0 * self.decay ** (epoch // self.decay_every)

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["hidden"] = list(self.hidden)
        obj["ablate"] = list(self.ablate)
        return obj

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrainConfig":
        obj = dict(obj)
        if "hidden" in obj:
            obj["hidden"] = tuple(obj["hidden"])
        if "ablate" in obj:
            obj["ablate"] = tuple(obj["ablate"])
        return cls(**obj)


@dataclass
class PredicateModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    predicates: List[str]
    embedding_dim: int
    feature_dim: int
    human_token: str = "person"
    ablate: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        h1, h2, P = self.W1.shape[0], self.W2.shape[0], self.W3.shape[0]
        expected = {
            "W1": (h1, self.d_in),
            "b1": (h1,),
            "W2": (h2, h1),
            "b2": (h2,),
            "W3": (P, h2),
            "b3": (P,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if P != len(self.predicates):
            raise ValueError("output layer size does not match predicate vocabulary")

    @property
    def d_in(self) -> int:
        return 2 * self.embedding_dim + GEOMETRIC_FEATURE_DIM + self.feature_dim

    @property
    def dims(self) -> Dict[str, int]:
        return {"d_in": self.d_in, "h1": self.W1.shape[0], "h2": self.W2.shape[0], "P": len(self.predicates)}

    def params(self) -> Dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "PredicateModel":
        return PredicateModel(
            **{k: v.copy() for k, v in self.params().items()},
            predicates=list(self.predicates),
            embedding_dim=self.embedding_dim,
            feature_dim=self.feature_dim,
            human_token=self.human_token,
            ablate=tuple(self.ablate),
        )

    def slices(self) -> Dict[str, slice]:
        return feature_slices(self.embedding_dim, self.feature_dim)


def feature_slices(embedding_dim: int, feature_dim: int) -> Dict[str, slice]:
    a = embedding_dim
    b = 2 * embedding_dim
    c = b + GEOMETRIC_FEATURE_DIM
    return {"w_h": slice(0, a), "w_o": slice(a, b), "f_g": slice(b, c), "f_h": slice(c, c + feature_dim)}


def init_model(
    predicates: Sequence[str],
    embedding_dim: int,
    feature_dim: int,
    hidden: Tuple[int, int] = (1024, 512),
    seed: int = 0,
    human_token: str = "person",
    ablate: Iterable[str] = (),
    rng: Optional[np.random.Generator] = None,
) -> PredicateModel:
    """Glorot-uniform weights, zero biases."""
    if rng is None:
        rng = np.random.default_rng(seed)
    d_in = 2 * embedding_dim + GEOMETRIC_FEATURE_DIM + feature_dim
    sizes = [d_in, hidden[0], hidden[1], len(predicates)]
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{i}"] = rng.uniform(-a, a, size=(fan_out, fan_in))
        params[f"b{i}"] = np.zeros(fan_out)
    return PredicateModel(
        **params,
        predicates=list(predicates),
        embedding_dim=embedding_dim,
        feature_dim=feature_dim,
        human_token=human_token,
        ablate=tuple(ablate),
    )


def zero_model(predicates: Sequence[str], embedding_dim: int, feature_dim: int, hidden=(4, 4), **kw) -> PredicateModel:
    m = init_model(predicates, embedding_dim, feature_dim, hidden, **kw)
    for v in m.params().values():
        v[...] = 0.0
    return m


def _embedding(embeddings: EmbeddingTable, token: str) -> np.ndarray:
    if token not in embeddings:
        raise DataError(f"no word embedding for {token!r}")
    return embeddings[token]


def _apply_ablation(x: np.ndarray, slices: Mapping[str, slice], ablate: Iterable[str]) -> np.ndarray:
    for name in ablate:
        x[..., slices[name]] = 0.0
    return x


def assemble_input(
    t: InteractionTriplet,
    embeddings: EmbeddingTable,
    img: ImageInfo,
    human_token: str = "person",
    ablate: Iterable[str] = (),
) -> np.ndarray:
    w_h = _embedding(embeddings, human_token)
    w_o = _embedding(embeddings, t.object_class)
    f_g = geometric_feature(t.human_box, t.object_box, img)
    f_h = np.asarray(t.human_feature, dtype=np.float64)
    x = np.concatenate([w_h, w_o, f_g, f_h])
    return _apply_ablation(x, feature_slices(len(w_h), len(f_h)), ablate)


def assemble_batch(
    human_boxes: np.ndarray,
    object_boxes: np.ndarray,
    object_classes: Sequence[str],
    image_sizes: np.ndarray,
    human_features: np.ndarray,
    embeddings: EmbeddingTable,
    human_token: str = "person",
    ablate: Iterable[str] = (),
) -> np.ndarray:
    """Row-wise :func:`assemble_input` over arrays of boxes and features."""
    n = len(object_classes)
    w_h = _embedding(embeddings, human_token)
    human_features = np.asarray(human_features, dtype=np.float64).reshape(n, -1)
    d_w, d_f = len(w_h), human_features.shape[1]
    x = np.empty((n, 2 * d_w + GEOMETRIC_FEATURE_DIM + d_f))
    s = feature_slices(d_w, d_f)
    x[:, s["w_h"]] = w_h
    for i, obj in enumerate(object_classes):
        x[i, s["w_o"]] = _embedding(embeddings, obj)
    if n:
        x[:, s["f_g"]] = geometric_features(human_boxes, object_boxes, image_sizes)
    x[:, s["f_h"]] = human_features
    return _apply_ablation(x, s, ablate)


def dataset_inputs(
    d: Dataset, embeddings: EmbeddingTable, human_token: str = "person", ablate: Iterable[str] = ()
) -> np.ndarray:
    images = d.image_index()
    n = len(d.triplets)
    hb = np.array([t.human_box.to_list() for t in d.triplets]).reshape(n, 4)
    ob = np.array([t.object_box.to_list() for t in d.triplets]).reshape(n, 4)
    sizes = np.array([[images[t.image_id].width, images[t.image_id].height] for t in d.triplets]).reshape(n, 2)
    feats = np.array([t.human_feature for t in d.triplets], dtype=np.float64)
    if n == 0:
        feats = feats.reshape(0, 0)
    return assemble_batch(hb, ob, [t.object_class for t in d.triplets], sizes, feats, embeddings, human_token, ablate)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cache(m: PredicateModel, X: np.ndarray):
    z1 = X @ m.W1.T + m.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ m.W2.T + m.b2
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ m.W3.T + m.b3
    return z1, a1, z2, a2, _sigmoid(z3)


def forward(m: PredicateModel, x: np.ndarray) -> np.ndarray:
    """Predicate probabilities for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.d_in:
        raise ValueError(f"input has dimension {x.shape[-1]}, model expects {m.d_in}")
    single = x.ndim == 1
    X = x[None, :] if single else x
    p = _forward_cache(m, X)[-1]
    return p[0] if single else p


def class_weights(
    t: InteractionTriplet,
    image_predicates: Iterable[str],
    predicates: Sequence[str],
    positive: float = 10.0,
    other_in_image: float = 0.0,
    rest: float = 1.0,
) -> np.ndarray:
    """Per-predicate loss weights for one training triplet.

    The triplet's own labels get ``positive``; predicates labeled elsewhere
    in the same image get ``other_in_image``; everything else ``rest``.
    """
    index = {p: i for i, p in enumerate(predicates)}
    image_predicates = set(image_predicates) | set(t.predicates)
    unknown = sorted(p for p in image_predicates if p not in index)
    if unknown:
        raise DataError(f"predicates outside vocabulary: {unknown}")
    w = np.full(len(predicates), rest, dtype=np.float64)
    for p in image_predicates:
        w[index[p]] = other_in_image
    for p in t.predicates:
        w[index[p]] = positive
    return w


def targets_for(t: InteractionTriplet, predicates: Sequence[str]) -> np.ndarray:
    return np.array([1.0 if p in t.predicates else 0.0 for p in predicates])


def weighted_bce(probabilities, targets, weights) -> float:
    """Weighted BCE averaged over predicates (and over rows for a batch)."""
    p = np.clip(np.asarray(probabilities, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if not (p.shape == y.shape == w.shape):
        raise ValueError("probabilities, targets and weights must have equal shapes")
    ll = w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    per_row = -ll.sum(axis=-1) / p.shape[-1]
    return float(np.mean(per_row))


def backward(m: PredicateModel, x, targets, weights) -> Dict[str, np.ndarray]:
    """Gradients of ``weighted_bce(forward(m, x), targets, weights)`` w.r.t. every parameter.

    The probability clamp in the loss is treated as the identity.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    Wt = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    n, P = Y.shape
    z1, a1, z2, a2, p = _forward_cache(m, X)
    dz3 = Wt * (p - Y) / (P * n)
    grads = {"W3": dz3.T @ a2, "b3": dz3.sum(axis=0)}
    da2 = dz3 @ m.W3
    dz2 = da2 * (z2 > 0)
    grads["W2"] = dz2.T @ a1
    grads["b2"] = dz2.sum(axis=0)
    da1 = dz2 @ m.W2
    dz1 = da1 * (z1 > 0)
    grads["W1"] = dz1.T @ X
    grads["b1"] = dz1.sum(axis=0)
    return grads


@dataclass
class TrainLog:
    initial_loss: float
    epoch_losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def training_arrays(d: Dataset, embeddings: EmbeddingTable, cfg: TrainConfig):
    predicates = list(d.predicate_vocabulary)
    X = dataset_inputs(d, embeddings, cfg.human_token, cfg.ablate)
    image_preds = d.image_predicates()
    Y = np.array([targets_for(t, predicates) for t in d.triplets]).reshape(len(d.triplets), len(predicates))
    Wt = np.array(
        [
            class_weights(
                t,
                image_preds[t.image_id],
                predicates,
                cfg.positive_weight,
                cfg.other_in_image_weight,
                cfg.rest_weight,
            )
            for t in d.triplets
        ]
    ).reshape(len(d.triplets), len(predicates))
    return X, Y, Wt


def train(d: Dataset, embeddings: EmbeddingTable, cfg: TrainConfig = TrainConfig()) -> Tuple[PredicateModel, TrainLog]:
    """Minibatch SGD with momentum and step-decayed learning rate."""
    if not d.triplets:
        raise DataError("cannot train on an empty dataset")
    X, Y, Wt = training_arrays(d, embeddings, cfg)
    init_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    model = init_model(
        d.predicate_vocabulary,
        embeddings.dim,
        len(d.triplets[0].human_feature),
        cfg.hidden,
        human_token=cfg.human_token,
        ablate=cfg.ablate,
        rng=np.random.default_rng(init_ss),
    )
    shuffle_rng = np.random.default_rng(shuffle_ss)
    velocity = {k: np.zeros_like(v) for k, v in model.params().items()}
    log = TrainLog(initial_loss=weighted_bce(forward(model, X), Y, Wt))
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads = backward(model, X[idx], Y[idx], Wt[idx])
            for k, g in grads.items():
                v = velocity[k]
                v *= cfg.momentum
                v += g
                getattr(model, k)[...] -= lr * v
        log.learning_rates.append(lr)
        log.epoch_losses.append(weighted_bce(forward(model, X), Y, Wt))
    return model, log


def save_model(m: PredicateModel, path, config: Optional[dict] = None, header: Optional[dict] = None) -> None:
    """Write a checkpoint: magic, JSON header length, JSON header, raw float64 arrays."""
    arrays = []
    offset = 0
    for name in PARAM_NAMES:
        arr = getattr(m, name)
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    meta = {
        "version": CHECKPOINT_VERSION,
        "dims": m.dims,
        "predicates": list(m.predicates),
        "embedding_dim": m.embedding_dim,
        "feature_dim": m.feature_dim,
        "human_token": m.human_token,
        "ablate": list(m.ablate),
        "arrays": arrays,
        "train_config": config,
        "provenance": header,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in PARAM_NAMES:
            f.write(np.ascontiguousarray(getattr(m, name), dtype="<f8").tobytes())


def load_model(path) -> PredicateModel:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a model checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    meta = json.loads(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    params = {}
    for spec in meta["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        start = pos + spec["offset"]
        params[spec["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(spec["shape"]).copy()
    return PredicateModel(
        **params,
        predicates=list(meta["predicates"]),
        embedding_dim=int(meta["embedding_dim"]),
        feature_dim=int(meta["feature_dim"]),
        human_token=meta["human_token"],
        ablate=tuple(meta["ablate"]),
    )


def checkpoint_metadata(path) -> dict:
    data = Path(path).read_bytes()
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos : pos + 8])
    return json.loads(data[pos + 8 : pos + 8 + hlen].decode("utf-8"))
