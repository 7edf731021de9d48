"""End-to-end orchestration: run config, checkpoints, the three training
stages and evaluation.

Checkpoint layout (all integers little-endian)::

    b"GZMO" | u32 version | u64 n | n bytes UTF-8 JSON header
    then per block: u64 n | n bytes UTF-8 name | u64 rows | u64 cols | rows*cols float64

The JSON header holds the stage name, a snapshot of the run config and the
architecture metadata needed to rebuild the parameter containers.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import (BackboneConfig, BackboneParams, FeatureBatch, extract_features,
                       train_backbone)
from .classifier import GZSL, ZSL, ClassifierConfig, ClassifierParams, infer_frame, train_classifier
from .data import (BACKBONE_TRAINING, CLASS_NAMES, PointFrame, SceneSpec, SplitConfig,
                   generate_scene, load_frames, split_frames)
from .generator import (GeneratorConfig, GeneratorHistory, GeneratorParams, synthesize_unseen,
                        train_generator)
from .metrics import ConfusionMatrix, MetricsReport, build_report
from .prototypes import ClassPrototypeTable, load_prototypes, synthesize_prototypes
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

MAGIC = b"GZMO"
FORMAT_VERSION = 1

BACKBONE, GENERATOR, CLASSIFIER = "backbone", "generator", "classifier"
STAGES = (BACKBONE, GENERATOR, CLASSIFIER)
CKPT_FILES = {s: f"{s}.gzmo" for s in STAGES}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class MissingCheckpointError(CheckpointError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class DataConfig:
    """Synthetic scenes unless ``train_path`` / ``eval_path`` point at frames."""

    scale: float = 1.0
    train_frames: int = 4
    eval_frames: int = 2
    extents: Tuple[float, float, float] = (6.0, 4.0, 3.0)
    sigma: float = 0.01
    train_path: Optional[str] = None
    eval_path: Optional[str] = None

    def __post_init__(self):
        self.extents = tuple(float(e) for e in self.extents)
        if not self.scale > 0:
            raise ValueError("data.scale must be positive")
        if self.train_frames < 0 or self.eval_frames < 0:
            raise ValueError("frame counts must be >= 0")


@dataclass
class OptimizerConfig:
    lr: float = 0.0005
    beta1: float = 0.92
    beta2: float = 0.98
    weight_decay: float = 0.0001
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("optimizer needs lr > 0 and betas in (0, 1)")
        if self.weight_decay < 0 or not self.eps > 0:
            raise ValueError("optimizer needs weight_decay >= 0 and eps > 0")


@dataclass
class PrototypeConfig:
    """``source`` is ``"synthesize"`` (uses ``dim`` and ``seed``) or ``"file"``
    (uses ``path``). A missing synthesis seed falls back to the run seed."""

    source: str = "synthesize"
    dim: int = 64
    seed: Optional[int] = None
    path: Optional[str] = None

    def __post_init__(self):
        if self.source == "synthesize":
            if self.path is not None:
                raise ValueError("prototypes: give a path only with source 'file'")
            if self.dim < 2:
                raise ValueError("prototypes: dim must be >= 2")
        elif self.source == "file":
            if not self.path:
                raise ValueError("prototypes: source 'file' needs a path")
        else:
            raise ValueError(f"prototypes: unknown source {self.source!r}")


_SECTIONS = {
    "data": DataConfig,
    "backbone": BackboneConfig,
    "generator": GeneratorConfig,
    "classifier": ClassifierConfig,
    "optimizer": OptimizerConfig,
    "prototypes": PrototypeConfig,
}


@dataclass
class RunConfig:
    seed: int = 42
    split: SplitConfig = field(default_factory=SplitConfig)
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    prototypes: PrototypeConfig = field(default_factory=PrototypeConfig)

    @classmethod
    def desk_scale(cls, seed: int = 42) -> "RunConfig":
        """Reference run: 4 training and 2 evaluation scenes at 10% density."""
        return cls(seed=seed, data=DataConfig(scale=0.1))

    def to_dict(self) -> dict:
        out = {"seed": int(self.seed),
               "split": {"seen": sorted(self.split.seen), "unseen": sorted(self.split.unseen)}}
        for name in _SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {"seed", "split", *_SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kwargs = {}
            if "seed" in d:
                if not isinstance(d["seed"], int) or isinstance(d["seed"], bool) or d["seed"] < 0:
                    raise ValueError("seed must be a nonnegative integer")
                kwargs["seed"] = d["seed"]
            if "split" in d:
                sp = d["split"]
                extra = set(sp) - {"seen", "unseen"}
                if extra:
                    raise ValueError(f"unknown split keys: {sorted(extra)}")
                kwargs["split"] = SplitConfig(frozenset(sp.get("seen", SplitConfig.seen)),
                                              frozenset(sp.get("unseen", SplitConfig.unseen)))
            for name, section in _SECTIONS.items():
                if name in d:
                    if not isinstance(d[name], dict):
                        raise ValueError(f"section {name!r} must be an object")
                    kwargs[name] = section(**d[name])
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(d)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed))

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    stage: str
    config: dict
    meta: dict
    blocks: Dict[str, np.ndarray]


def _u64(n):
    return struct.pack("<Q", n)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u64(len(b)) + b


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"stage": ckpt.stage, "config": ckpt.config, "meta": ckpt.meta},
                        sort_keys=True, separators=(",", ":"))
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(header)]
    for name, arr in ckpt.blocks.items():
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"block {name} must be 2-D")
        parts += [_pack_str(name), _u64(a.shape[0]), _u64(a.shape[1]),
                  np.ascontiguousarray(a).astype("<f8", copy=False).tobytes()]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def string(self):
        try:
            return self.take(self.u64()).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{self.path}: bad UTF-8 in checkpoint") from None

    @property
    def done(self):
        return self.pos == len(self.data)


def load_checkpoint(path, stage: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"missing {stage or 'stage'} checkpoint: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", r.take(4))[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} not supported "
                              f"(expected {FORMAT_VERSION})")
    try:
        header = json.loads(r.string())
        stage_name, cfg, meta = header["stage"], header["config"], header["meta"]
    except (json.JSONDecodeError, KeyError, TypeError):
        raise CheckpointError(f"{path}: malformed checkpoint header") from None
    blocks: Dict[str, np.ndarray] = {}
    while not r.done:
        name = r.string()
        rows, cols = r.u64(), r.u64()
        raw = r.take(8 * rows * cols)
        blocks[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)
    ckpt = Checkpoint(stage_name, cfg, meta, blocks)
    if stage is not None and ckpt.stage != stage:
        raise CheckpointError(f"{path}: holds stage {ckpt.stage!r}, expected {stage!r}")
    return ckpt


def _fill(named_arrays, blocks: Dict[str, np.ndarray], skip_prefix=()):
    expected = set()
    for name, arr in named_arrays:
        expected.add(name)
        if name not in blocks:
            raise CheckpointError(f"checkpoint lacks block {name}")
        if blocks[name].shape != arr.shape:
            raise CheckpointError(f"block {name}: shape {blocks[name].shape}, expected {arr.shape}")
        arr[...] = blocks[name]
    extra = [n for n in blocks if n not in expected and not n.startswith(tuple(skip_prefix))]
    if extra:
        raise CheckpointError(f"unexpected checkpoint blocks: {extra[:5]}")


def backbone_checkpoint(params: BackboneParams, config: RunConfig) -> Checkpoint:
    widths = [s.d_out for s in params.layers[:-1] if not isinstance(s, str)]
    meta = {"k": params.k, "widths": widths, "feature_dim": params.feature_dim}
    return Checkpoint(BACKBONE, config.to_dict(), meta, dict(params.named_arrays()))


def backbone_from_checkpoint(ckpt: Checkpoint) -> BackboneParams:
    m = ckpt.meta
    params = BackboneParams.init(np.random.default_rng(0), m["k"], tuple(m["widths"]), m["feature_dim"])
    _fill(params.named_arrays(), ckpt.blocks)
    return params


def _moe_meta(layer, expert_hidden) -> dict:
    # expert_hidden stays None when each layer uses its own 4 * d_in default
    return {"n_experts": layer.n_experts, "top_k": layer.k, "expert_hidden": expert_hidden}


def generator_checkpoint(params: GeneratorParams, prototypes: ClassPrototypeTable,
                         sigmas, config: RunConfig) -> Checkpoint:
    moe = [s for s in params.layers if not isinstance(s, str) and hasattr(s, "Wg")]
    meta = {"noise_dim": params.noise_dim, "proto_dim": params.proto_dim,
            "feature_dim": params.feature_dim, "hidden": params.layers[0].d_out,
            "depth": len(moe), "sigmas": list(sigmas),
            "seen": sorted(prototypes.seen), "unseen": sorted(prototypes.unseen),
            "names": {str(c): n for c, n in sorted(prototypes.names.items())}}
    meta.update(_moe_meta(moe[0], config.generator.expert_hidden) if moe
                else {"n_experts": 1, "top_k": 1, "expert_hidden": None})
    blocks = dict(params.named_arrays())
    for c in sorted(prototypes.entries):
        blocks[f"prototype.{c}"] = prototypes.entries[c][None, :]
    return Checkpoint(GENERATOR, config.to_dict(), meta, blocks)


def generator_from_checkpoint(ckpt: Checkpoint) -> Tuple[GeneratorParams, ClassPrototypeTable]:
    m = ckpt.meta
    params = GeneratorParams.init(np.random.default_rng(0), m["noise_dim"], m["proto_dim"],
                                  m["feature_dim"], m["hidden"], m["depth"], m["n_experts"],
                                  m["top_k"], m["expert_hidden"])
    _fill(params.named_arrays(), ckpt.blocks, skip_prefix=("prototype.",))
    entries = {int(n.split(".", 1)[1]): b[0].copy() for n, b in ckpt.blocks.items()
               if n.startswith("prototype.")}
    names = {int(c): n for c, n in m["names"].items()}
    table = ClassPrototypeTable(m["proto_dim"], entries, names, frozenset(m["seen"]),
                                frozenset(m["unseen"]))
    return params, table


def classifier_checkpoint(params: ClassifierParams, mode: str, config: RunConfig) -> Checkpoint:
    first = params.layers[0]
    meta = {"classes": list(params.classes), "feature_dim": params.feature_dim, "mode": mode,
            "hidden": first.d_out}
    meta.update(_moe_meta(first, config.classifier.expert_hidden))
    return Checkpoint(CLASSIFIER, config.to_dict(), meta, dict(params.named_arrays()))


def classifier_from_checkpoint(ckpt: Checkpoint) -> ClassifierParams:
    m = ckpt.meta
    params = ClassifierParams.init(np.random.default_rng(0), m["feature_dim"], m["classes"],
                                   m["hidden"], m["n_experts"], m["top_k"], m["expert_hidden"])
    _fill(params.named_arrays(), ckpt.blocks)
    return params


def load_stage(ckpt_dir, stage: str) -> Checkpoint:
    return load_checkpoint(Path(ckpt_dir) / CKPT_FILES[stage], stage)


def load_backbone(ckpt_dir) -> BackboneParams:
    return backbone_from_checkpoint(load_stage(ckpt_dir, BACKBONE))


def load_generator(ckpt_dir):
    return generator_from_checkpoint(load_stage(ckpt_dir, GENERATOR))


def load_classifier(ckpt_dir) -> ClassifierParams:
    return classifier_from_checkpoint(load_stage(ckpt_dir, CLASSIFIER))


# ---------------------------------------------------------------- data

def _scene_frames(config: RunConfig, kind: str, count: int) -> List[PointFrame]:
    d = config.data
    frames = []
    for i in range(count):
        spec = SceneSpec(extents=d.extents, sigma=d.sigma,
                         seed=derive_seed(config.seed, f"{kind}-frame", i)).scaled(d.scale)
        frames.append(generate_scene(spec, frame_id=f"{kind}-{i:03d}"))
    return frames


def training_frames(config: RunConfig) -> List[PointFrame]:
    if config.data.train_path:
        return load_frames(config.data.train_path)
    return _scene_frames(config, "train", config.data.train_frames)


def evaluation_frames(config: RunConfig) -> List[PointFrame]:
    if config.data.eval_path:
        return load_frames(config.data.eval_path)
    return _scene_frames(config, "eval", config.data.eval_frames)


def prototype_table(config: RunConfig) -> ClassPrototypeTable:
    split = config.split
    p = config.prototypes
    if p.source == "file":
        return load_prototypes(p.path, split.seen, split.unseen)
    names = {c: CLASS_NAMES.get(c, f"class{c}") for c in split.classes}
    seed = config.seed if p.seed is None else p.seed
    return synthesize_prototypes(names, p.dim, seed, split.seen, split.unseen)


def real_seen_features(backbone: BackboneParams, frames: Sequence[PointFrame],
                       split: SplitConfig) -> FeatureBatch:
    """Backbone features of seen points, neighborhoods restricted to seen
    points exactly as during backbone training."""
    parts = [p.frame for p in split_frames(frames, split, BACKBONE_TRAINING) if len(p.frame)]
    if not parts:
        raise ValueError("no seen points")
    return FeatureBatch.concat([extract_features(backbone, f) for f in parts])


def mean_seen_count(frames: Sequence[PointFrame], split: SplitConfig) -> int:
    labels = np.concatenate([f.labels for f in frames]) if frames else np.empty(0, np.int64)
    counts = [int(np.sum(labels == c)) for c in sorted(split.seen)]
    present = [n for n in counts if n > 0]
    return int(round(sum(present) / len(present))) if present else 0


# ---------------------------------------------------------------- stages

def _write_history(path, values):
    rows = ["epoch,loss"] + [f"{i},{float(v)!r}" for i, v in enumerate(values, start=1)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def _write_mmd_history(path, history: GeneratorHistory):
    classes = sorted(history.eval_mmd[0]) if history.eval_mmd else []
    rows = ["epoch," + ",".join(f"class_{c}" for c in classes)]
    for i, d in enumerate(history.eval_mmd):
        rows.append(f"{i}," + ",".join(repr(float(d[c])) for c in classes))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def _optimizer(config: RunConfig) -> dict:
    return dataclasses.asdict(config.optimizer)


def run_stage1(config: RunConfig, out_dir, frames: Optional[Sequence[PointFrame]] = None):
    """Backbone on seen classes. Returns ``(params, history)``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = training_frames(config) if frames is None else frames
    params, history = train_backbone(frames, config.split, config.backbone,
                                     seed=config.stage_seed(BACKBONE), optimizer=_optimizer(config))
    save_checkpoint(backbone_checkpoint(params, config), out / CKPT_FILES[BACKBONE])
    _write_history(out / "backbone_history.csv", history)
    return params, history


def run_stage2(config: RunConfig, out_dir, frames: Optional[Sequence[PointFrame]] = None):
    """Generator against real seen features. Needs the stage-1 checkpoint.
    Returns ``(params, history)``."""
    out = Path(out_dir)
    backbone = load_backbone(out)
    frames = training_frames(config) if frames is None else frames
    protos = prototype_table(config)
    real = real_seen_features(backbone, frames, config.split)
    g = config.generator
    seed = config.stage_seed(GENERATOR)
    params = GeneratorParams.init(rng_for(seed, "init"), g.noise_dim, protos.dim, backbone.feature_dim,
                                  g.hidden, g.depth, g.n_experts, g.top_k, g.expert_hidden)
    params, history = train_generator(params, real, protos, g, seed=seed, optimizer=_optimizer(config))
    save_checkpoint(generator_checkpoint(params, protos, history.sigmas, config), out / CKPT_FILES[GENERATOR])
    _write_history(out / "generator_history.csv", history.loss)
    _write_mmd_history(out / "generator_mmd.csv", history)
    return params, history


def run_stage3(config: RunConfig, out_dir, frames: Optional[Sequence[PointFrame]] = None):
    """Classifier on real seen plus fake unseen features (GZSL) or fake
    unseen only (ZSL). Returns ``(params, history)``."""
    out = Path(out_dir)
    c = config.classifier
    generator, protos = load_generator(out)
    frames = training_frames(config) if frames is None else frames
    seed = config.stage_seed(CLASSIFIER)
    if c.mode == GZSL:
        backbone = load_backbone(out)
        real = real_seen_features(backbone, frames, config.split)
        classes = config.split.classes
    else:
        real = None
        classes = tuple(sorted(config.split.unseen))
    n = c.n_per_class if c.n_per_class is not None else mean_seen_count(frames, config.split)
    fake = synthesize_unseen(generator, protos, n, seed=derive_seed(seed, "synthesize"),
                             classes=sorted(config.split.unseen))
    params = ClassifierParams.init(rng_for(seed, "init"), generator.feature_dim, classes,
                                   c.hidden, c.n_experts, c.top_k, c.expert_hidden)
    params, history = train_classifier(params, real, fake, c, seed=seed, optimizer=_optimizer(config))
    save_checkpoint(classifier_checkpoint(params, c.mode, config), out / CKPT_FILES[CLASSIFIER])
    _write_history(out / "classifier_history.csv", history)
    return params, history


# ---------------------------------------------------------------- evaluation

def evaluate_frames(backbone: BackboneParams, classifier: ClassifierParams,
                    frames: Sequence[PointFrame], split: SplitConfig) -> ConfusionMatrix:
    """Confusion matrix over labeled points of ``frames``. Neighborhoods use
    every point of the frame; unlabeled points are not scored."""
    cm = ConfusionMatrix(split.classes)
    known = np.array(split.classes)
    for f in frames:
        pred = infer_frame(backbone, classifier, f)
        keep = np.isin(f.labels, known)
        cm.accumulate(f.labels[keep], pred[keep])
    return cm


def run_eval(config: RunConfig, ckpt_dir, frames: Optional[Sequence[PointFrame]] = None):
    """Returns ``(report, confusion matrix)``."""
    backbone = load_backbone(ckpt_dir)
    classifier = load_classifier(ckpt_dir)
    frames = evaluation_frames(config) if frames is None else frames
    cm = evaluate_frames(backbone, classifier, frames, config.split)
    if cm.total == 0:
        raise ValueError("no evaluation points")
    return build_report(cm, config.split), cm


def write_report(report: MetricsReport, cm: ConfusionMatrix, path) -> List[Path]:
    """Text report at ``path``, ``metric,value`` CSV next to it and the
    confusion matrix CSV as ``<stem>_confusion.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = path.with_suffix(".csv") if path.suffix != ".csv" else path.with_name(path.stem + "_metrics.csv")
    cm_path = path.with_name(path.stem + "_confusion.csv")
    path.write_text(report.to_text(), encoding="utf-8")
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    cm_path.write_text(cm.to_csv(), encoding="utf-8")
    return [path, csv_path, cm_path]


@dataclass
class RunResult:
    report: MetricsReport
    confusion: ConfusionMatrix
    backbone_history: List[float]
    generator_history: GeneratorHistory
    classifier_history: List[float]
    seconds: Dict[str, float]


def run_all(config: RunConfig, out_dir) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json(), encoding="utf-8")
    seconds = {}
    t = time.perf_counter()
    frames = training_frames(config)
    _, bh = run_stage1(config, out, frames)
    seconds[BACKBONE] = time.perf_counter() - t
    log.info("backbone done in %.1fs", seconds[BACKBONE])
    t = time.perf_counter()
    _, gh = run_stage2(config, out, frames)
    seconds[GENERATOR] = time.perf_counter() - t
    log.info("generator done in %.1fs", seconds[GENERATOR])
    t = time.perf_counter()
    _, ch = run_stage3(config, out, frames)
    seconds[CLASSIFIER] = time.perf_counter() - t
    log.info("classifier done in %.1fs", seconds[CLASSIFIER])
    t = time.perf_counter()
    report, cm = run_eval(config, out)
    write_report(report, cm, out / "report.txt")
    seconds["eval"] = time.perf_counter() - t
    return RunResult(report, cm, bh, gh, ch, seconds)
