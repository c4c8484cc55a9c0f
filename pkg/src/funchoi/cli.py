"""Command-line entry point: ``funchoi <command> --config run.json [--seed N] [--out DIR]``.

Every command reads one JSON config (paths resolved relative to the config
file), accepts ``--set section.key=value`` overrides, and writes outputs that
carry a provenance header (tool version, command, seed, config hash).

Exit codes: 0 success, 2 config error, 3 data validation error, 4 infeasible split.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import __version__
from .augment import AugmentationConfig, augment_dataset, augmentation_summary
from .datamodel import (
    DataError,
    Dataset,
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
from .evaluation import (
    BiasCounts,
    HoiClass,
    SplitInfeasibleError,
    bias,
    dataset_classes,
    evaluate,
    load_split,
    make_bias_scenario,
    make_rare_split,
    make_seen_object_split,
    make_unseen_object_split,
    mean_ap,
    save_split,
    single_bucket_split,
)
from .funcsim import ClusteringError, cluster_objects, load_clusters, save_clusters
from .nn import TrainConfig, save_model, train
from .pipeline import InferenceConfig, detect_all, load_hoi_detections, save_hoi_detections
from .synth import SynthConfig, generate_synthetic

log = logging.getLogger("funchoi")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INFEASIBLE = 4

DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "paths": {},
    "data": {"feature_dim": 2048, "embedding_dim": 300, "human_classes": ["person"]},
    "funcsim": {"K": None, "normalize": True, "algorithm": "kmeans", "max_iter": 300, "n_init": 10},
    "augment": {"r": 5, "mark_synthetic": True},
    "train": {},
    "inference": {},
    "eval": {"iou": 0.5},
    "split": {"kind": "rare", "threshold": 10, "n_unseen": 120, "n_objects": 12},
    "bias": {"pair": None, "scenario": "against"},
    "synth": {},
}

OUTPUT_NAMES = {
    "clusters": "clusters.json",
    "augmented": "annotations.augmented.jsonl",
    "augment_summary": "augment-summary.json",
    "model": "model.bin",
    "train_log": "train-log.json",
    "hoi_detections": "hoi_detections.jsonl",
    "report": "report.json",
    "split": "split.json",
    "bias_report": "bias-report.json",
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.split("."), parsed


class RunConfig:
    """Effective configuration of one command invocation."""

    def __init__(self, raw: dict, base_dir: Path):
        self.raw = raw
        self.base_dir = base_dir

    @classmethod
    def load(cls, path: Optional[str], overrides: List[str] = (), seed: Optional[int] = None) -> "RunConfig":
        user: dict = {}
        base_dir = Path.cwd()
        if path is not None:
            p = Path(path)
            try:
                user = json.loads(p.read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config file {path} not found") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from None
            if not isinstance(user, dict):
                raise ConfigError("config file must contain a JSON object")
            base_dir = p.resolve().parent
        raw = _merge(DEFAULT_CONFIG, user)
        for text in overrides:
            keys, value = _parse_override(text)
            node = raw
            for k in keys[:-1]:
                node = node.setdefault(k, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"override {text!r} descends into a non-section")
            node[keys[-1]] = value
        if seed is not None:
            raw["seed"] = seed
        return cls(raw, base_dir)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name) or {})

    def path(self, name: str, required: bool = True) -> Optional[Path]:
        value = self.raw["paths"].get(name)
        if value is None:
            if required:
                raise ConfigError(f"config is missing paths.{name}")
            return None
        p = Path(value)
        if not p.is_absolute():
            p = self.base_dir / p
        if not p.exists():
            if required:
                raise ConfigError(f"paths.{name} = {value} does not exist")
            return None
        return p

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def provenance(self, command: str) -> dict:
        return {"tool": "funchoi", "version": __version__, "command": command, "seed": self.seed, "config_hash": self.config_hash()}

    @property
    def feature_dim(self) -> Optional[int]:
        return self.raw["data"].get("feature_dim")

    @property
    def embedding_dim(self) -> Optional[int]:
        return self.raw["data"].get("embedding_dim")

    @property
    def human_classes(self) -> List[str]:
        return list(self.raw["data"].get("human_classes", ["person"]))

    def train_config(self) -> TrainConfig:
        obj = self.section("train")
        obj.setdefault("seed", self.seed)
        try:
            return TrainConfig.from_json(obj)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train config: {exc}") from None

    def inference_config(self) -> InferenceConfig:
        obj = self.section("inference")
        obj.setdefault("human_classes", self.human_classes)
        try:
            return InferenceConfig.from_json(obj)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid inference config: {exc}") from None


def _write_json(obj: dict, path: Path, header: dict) -> None:
    path.write_text(json.dumps({"_provenance": header, **obj}, indent=1, sort_keys=False) + "\n", encoding="utf-8")


def _load_train(cfg: RunConfig) -> Dataset:
    return load_dataset(cfg.path("train_annotations"), cfg.feature_dim)


def _load_test(cfg: RunConfig) -> Dataset:
    return load_dataset(cfg.path("test_annotations"), cfg.feature_dim)


def _embeddings(cfg: RunConfig):
    return load_embeddings(cfg.path("embeddings"), cfg.embedding_dim)


def cmd_cluster(cfg: RunConfig, out: Path) -> Path:
    fs = cfg.section("funcsim")
    visuals = load_visual_prototypes(cfg.path("visual_prototypes"))
    embeddings = _embeddings(cfg)
    classes = sorted(visuals.tokens())
    try:
        assignment = cluster_objects(
            classes,
            visuals,
            embeddings,
            K=fs.get("K"),
            algorithm=fs.get("algorithm", "kmeans"),
            seed=int(fs.get("seed", cfg.seed)),
            norm=bool(fs.get("normalize", True)),
            max_iter=int(fs.get("max_iter", 300)),
            n_init=int(fs.get("n_init", 10)),
        )
    except ClusteringError as exc:
        raise ConfigError(str(exc)) from None
    target = out / OUTPUT_NAMES["clusters"]
    save_clusters(assignment, target, cfg.provenance("cluster"))
    log.info("wrote %d clusters over %d classes to %s", assignment.K, len(classes), target)
    return target


def cmd_augment(cfg: RunConfig, out: Path) -> Path:
    aug = cfg.section("augment")
    clusters = load_clusters(cfg.path("clusters"))
    d = _load_train(cfg)
    try:
        acfg = AugmentationConfig(clusters, r=int(aug.get("r", 5)), mark_synthetic=bool(aug.get("mark_synthetic", True)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    augmented = augment_dataset(d, acfg)
    header = cfg.provenance("augment")
    target = out / OUTPUT_NAMES["augmented"]
    save_dataset(augmented, target, header)
    summary = augmentation_summary(d, augmented, clusters)
    _write_json(summary, out / OUTPUT_NAMES["augment_summary"], header)
    log.info("augmented %d -> %d triplets", summary["originals"], summary["total"])
    return target


def cmd_train(cfg: RunConfig, out: Path) -> Path:
    tcfg = cfg.train_config()
    d = _load_train(cfg)
    embeddings = _embeddings(cfg)
    header = cfg.provenance("train")
    target = out / OUTPUT_NAMES["model"]
    model, train_log = train(d, embeddings, tcfg)
    save_model(model, target, tcfg.to_json(), header)
    _write_json(train_log.to_json(), out / OUTPUT_NAMES["train_log"], header)
    log.info("trained %d epochs; loss %.5f -> %.5f", tcfg.epochs, train_log.initial_loss,
             train_log.epoch_losses[-1] if train_log.epoch_losses else train_log.initial_loss)
    return target


def _image_sizes(cfg: RunConfig):
    images = cfg.path("images", required=False)
    if images is not None:
        return load_images(images)
    if cfg.path("test_annotations", required=False) is not None:
        return _load_test(cfg).image_index()
    raise ConfigError("inference needs image sizes: set paths.images or paths.test_annotations")


def cmd_infer(cfg: RunConfig, out: Path) -> Path:
    from .nn import load_model

    icfg = cfg.inference_config()
    model = load_model(cfg.path("model"))
    embeddings = _embeddings(cfg)
    detections = load_detections(cfg.path("detections"), cfg.feature_dim, icfg.human_classes)
    images = _image_sizes(cfg) if detections else {}
    dets = detect_all(detections, images, model, embeddings, icfg)
    target = out / OUTPUT_NAMES["hoi_detections"]
    save_hoi_detections(dets, target, cfg.provenance("infer"))
    log.info("wrote %d HOI detections for %d images", len(dets), len(detections))
    return target


def _report_number(x: float):
    return None if x != x else x


def cmd_eval(cfg: RunConfig, out: Path) -> Path:
    gt = _load_test(cfg)
    dets = load_hoi_detections(cfg.path("hoi_detections"))
    result = evaluate(dets, gt, float(cfg.section("eval").get("iou", 0.5)))
    split_path = cfg.path("split", required=False)
    split = load_split(split_path) if split_path is not None else single_bucket_split(result.gt_classes())
    buckets = mean_ap(result.ap, split, result.gt_classes())
    report = {
        "split": split.name,
        "mAP": {k: _report_number(v) for k, v in buckets.items()},
        "bucket_sizes": {k: sum(1 for c in v if result.n_gt.get(c, 0) > 0) for k, v in split.buckets.items()},
        "per_class": [
            {"object_class": c.object_class, "predicate": c.predicate, "ap": result.ap[c],
             "n_gt": result.n_gt[c], "n_det": result.n_det[c]}
            for c in sorted(result.ap)
        ],
    }
    target = out / OUTPUT_NAMES["report"]
    _write_json(report, target, cfg.provenance("eval"))
    log.info("mAP %s", report["mAP"])
    return target


def _split_classes(cfg: RunConfig) -> List[HoiClass]:
    classes = set()
    for name in ("train_annotations", "test_annotations"):
        p = cfg.path(name, required=False)
        if p is not None:
            classes.update(dataset_classes(load_dataset(p, cfg.feature_dim)))
    if not classes and cfg.raw["paths"].get("train_annotations") is None and cfg.raw["paths"].get("test_annotations") is None:
        raise ConfigError("split needs paths.train_annotations or paths.test_annotations")
    return sorted(classes)


def cmd_split(cfg: RunConfig, out: Path) -> Path:
    sp = cfg.section("split")
    kind = sp.get("kind", "rare")
    seed = int(sp.get("seed", cfg.seed))
    if kind == "rare":
        train_set = _load_train(cfg)
        split = make_rare_split(train_set, int(sp.get("threshold", 10)), _split_classes(cfg))
    elif kind == "seen_object":
        split = make_seen_object_split(_split_classes(cfg), int(sp.get("n_unseen", 120)), seed)
    elif kind == "unseen_object":
        classes = _split_classes(cfg)
        objects = sp.get("objects") or sorted({c.object_class for c in classes})
        split = make_unseen_object_split(classes, objects, int(sp.get("n_objects", 12)), seed)
    else:
        raise ConfigError(f"unknown split kind {kind!r}")
    target = out / OUTPUT_NAMES["split"]
    save_split(split, target, cfg.provenance("split"))
    log.info("split %s: %s", split.name, {k: len(v) for k, v in split.buckets.items()})
    return target


def cmd_bias(cfg: RunConfig, out: Path) -> Path:
    b = cfg.section("bias")
    pair = b.get("pair")
    if not (isinstance(pair, list) and len(pair) == 2):
        raise ConfigError("bias.pair must be [predicate, object]")
    pair = (str(pair[0]), str(pair[1]))
    scenario = b.get("scenario", "against")
    if scenario not in ("against", "towards"):
        raise ConfigError(f"bias.scenario must be 'against' or 'towards', got {scenario!r}")
    d = _load_train(cfg)
    biased = make_bias_scenario(d, pair, scenario)
    header = cfg.provenance("bias")
    data_path = out / f"annotations.bias-{scenario}.jsonl"
    save_dataset(biased, data_path, header)
    report: Dict[str, Any] = {
        "pair": {"predicate": pair[0], "object": pair[1]},
        "scenario": scenario,
        "train_bias": bias(BiasCounts.from_dataset(d), pair),
        "scenario_bias": _safe_bias(BiasCounts.from_dataset(biased), pair),
        "scenario_dataset": data_path.name,
    }
    test_path = cfg.path("test_annotations", required=False)
    if test_path is not None:
        report["test_bias"] = _safe_bias(BiasCounts.from_dataset(load_dataset(test_path, cfg.feature_dim)), pair)
    det_path = cfg.path("hoi_detections", required=False)
    if det_path is not None:
        report["model_bias"] = _safe_bias(BiasCounts.from_detections(load_hoi_detections(det_path)), pair)
    target = out / OUTPUT_NAMES["bias_report"]
    _write_json(report, target, header)
    log.info("bias report: %s", report)
    return target


def _safe_bias(counts, pair):
    try:
        return bias(counts, pair)
    except ValueError:
        return None


def cmd_synth(cfg: RunConfig, out: Path) -> Path:
    try:
        scfg = SynthConfig(**cfg.section("synth"))
    except TypeError as exc:
        raise ConfigError(f"invalid synth config: {exc}") from None
    corpus = generate_synthetic(scfg, cfg.seed)
    header = cfg.provenance("synth")
    save_dataset(corpus.train, out / "train_annotations.jsonl", header)
    save_dataset(corpus.test, out / "test_annotations.jsonl", header)
    save_detections(corpus.detections, out / "detections.jsonl", header)
    save_images(corpus.test.images, out / "images.jsonl", header)
    save_table(corpus.embeddings, out / "embeddings.jsonl", "token", header)
    save_table(corpus.prototypes, out / "visual_prototypes.jsonl", "class_name", header)
    _write_json(
        {
            "clusters": corpus.planted_clusters(),
            "semantic_groups": corpus.semantic_groups,
            "predicates": corpus.predicates,
            "config": scfg.to_json(),
        },
        out / "planted.json",
        header,
    )
    run_config = {
        "_provenance": header,
        "seed": cfg.seed,
        "paths": {
            "train_annotations": "train_annotations.jsonl",
            "test_annotations": "test_annotations.jsonl",
            "detections": "detections.jsonl",
            "images": "images.jsonl",
            "embeddings": "embeddings.jsonl",
            "visual_prototypes": "visual_prototypes.jsonl",
            "clusters": OUTPUT_NAMES["clusters"],
            "model": OUTPUT_NAMES["model"],
            "hoi_detections": OUTPUT_NAMES["hoi_detections"],
        },
        "data": {"feature_dim": scfg.feature_dim, "embedding_dim": scfg.embedding_dim, "human_classes": ["person"]},
        "funcsim": {"K": scfg.n_clusters},
    }
    target = out / "config.json"
    target.write_text(json.dumps(run_config, indent=1) + "\n", encoding="utf-8")
    log.info("wrote synthetic corpus (%d train / %d test triplets) to %s", len(corpus.train.triplets),
             len(corpus.test.triplets), out)
    return target


COMMANDS = {
    "cluster": cmd_cluster,
    "augment": cmd_augment,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "split": cmd_split,
    "bias": cmd_bias,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funchoi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"funchoi {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set augment.r=3 (value parsed as JSON)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.overrides, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SplitInfeasibleError as exc:
        print(f"infeasible split: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DataError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
