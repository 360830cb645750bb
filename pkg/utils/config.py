#!/usr/bin/env python3
"""
Configuration Management for BTSeg

Experiment settings live in dataclasses loaded from a JSON run-config file;
runtime knobs (device, threads, log level) come from the environment / .env.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from dotenv import load_dotenv

from utils.errors import ConfigError

CORRUPTIONS = ("darken", "fog_blend", "noise", "desaturate")
POOLING_MODES = ("avg", "segm", "conf", "segconf")
MASK_SOURCES = ("source", "per_path")
LAMBDA_RULES = ("inverse_dim", "exact_ratio")
DTYPES = ("float64", "float32")


def _require(condition, message, key=None):
    if not condition:
        raise ConfigError(message, key=key)


@dataclass
class SceneSpec:
    """Synthetic paired-domain scene parameters"""
    image_size: tuple = (64, 64)
    num_classes: int = 6
    class_names: tuple = ("road", "building", "vegetation", "sky", "car", "person")
    mobile_class_ids: tuple = (4, 5)
    textureless_class_ids: tuple = (0, 3)
    corruption: str = "fog_blend"
    strength: float = 0.6
    max_shift_px: int = 4
    mobile_object_count: int = 3
    textureless_confidence: float = 1.0
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        _require(h >= 8 and w >= 8, "scene.image_size must be at least 8x8", "scene.image_size")
        _require(self.num_classes >= 2, "scene.num_classes must be >= 2", "scene.num_classes")
        _require(len(self.class_names) == self.num_classes,
                 "scene.class_names must name every class", "scene.class_names")
        for key in ("mobile_class_ids", "textureless_class_ids"):
            ids = getattr(self, key)
            _require(all(0 <= c < self.num_classes for c in ids),
                     f"scene.{key} holds an unknown class id", f"scene.{key}")
        static = [c for c in range(self.num_classes) if c not in self.mobile_class_ids]
        _require(len(static) >= 2, "a scene needs at least two static classes", "scene.mobile_class_ids")
        _require(self.corruption in CORRUPTIONS,
                 f"scene.corruption must be one of {CORRUPTIONS}", "scene.corruption")
        _require(0.0 <= self.strength <= 1.0, "scene.strength must lie in [0, 1]", "scene.strength")
        _require(0.0 <= self.textureless_confidence <= 1.0,
                 "scene.textureless_confidence must lie in [0, 1]", "scene.textureless_confidence")
        _require(0 <= self.max_shift_px < min(h, w) / 4,
                 "scene.max_shift_px must be below min(h, w) / 4", "scene.max_shift_px")
        _require(self.mobile_object_count >= 0, "scene.mobile_object_count must be >= 0",
                 "scene.mobile_object_count")

    @property
    def static_class_ids(self):
        return tuple(c for c in range(self.num_classes) if c not in self.mobile_class_ids)


@dataclass
class DatasetOptions:
    count: int = 80
    train_fraction: float = 0.8

    def __post_init__(self):
        _require(self.count >= 0, "dataset.count must be >= 0", "dataset.count")
        _require(0.0 <= self.train_fraction <= 1.0, "dataset.train_fraction must lie in [0, 1]",
                 "dataset.train_fraction")


@dataclass
class TrainConfig:
    """Every training hyperparameter plus the ablation switches"""
    total_steps: int = 2000
    effective_batch: int = 16
    micro_batch: int = 4
    alpha: float = 0.1
    lambda_bt: float = None
    lambda_rule: str = "inverse_dim"
    bn_epsilon: float = 1e-5
    pool_epsilon: float = 1e-6
    warmup_steps: int = 300
    stopgrad_steps: int = 500
    segm_guidance_delay: int = None
    lr_encoder: float = 1.6e-3
    lr_decoder: float = 1.6e-3
    lr_projector: float = 1.6e-2
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    crop_size: tuple = (64, 64)
    flip_prob: float = 0.5
    resize_after_crop: bool = True
    use_bt: bool = True
    use_warp: bool = True
    use_crop: bool = True
    pooling: str = "segconf"
    mask_source: str = "source"
    min_valid_fraction: float = 0.3
    min_rect_side: int = 32
    ignore_index: int = 255
    stage_channels: tuple = (16, 32)
    stage_strides: tuple = (4, 8)
    decoder_hidden: int = 32
    projector_dims: tuple = None
    checkpoint_every: int = 500
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        _require(self.total_steps >= 0, "train.total_steps must be >= 0", "train.total_steps")
        _require(0 <= self.warmup_steps <= self.total_steps or self.total_steps == 0,
                 "train.warmup_steps must not exceed train.total_steps", "train.warmup_steps")
        _require(self.effective_batch >= 2, "train.effective_batch must be >= 2", "train.effective_batch")
        _require(self.micro_batch >= 1 and self.effective_batch % self.micro_batch == 0,
                 "train.micro_batch must divide train.effective_batch", "train.micro_batch")
        _require(not self.use_bt or self.micro_batch >= 2,
                 "train.micro_batch must be >= 2 when the Barlow Twins term is active",
                 "train.micro_batch")
        for key in ("lr_encoder", "lr_decoder", "lr_projector"):
            _require(getattr(self, key) > 0, f"train.{key} must be > 0", f"train.{key}")
        _require(self.alpha >= 0, "train.alpha must be >= 0", "train.alpha")
        _require(self.lambda_bt is None or self.lambda_bt > 0, "train.lambda_bt must be > 0",
                 "train.lambda_bt")
        _require(self.lambda_rule in LAMBDA_RULES, f"train.lambda_rule must be one of {LAMBDA_RULES}",
                 "train.lambda_rule")
        _require(self.bn_epsilon > 0 and self.pool_epsilon > 0, "epsilons must be > 0", "train.bn_epsilon")
        _require(0.0 <= self.flip_prob <= 1.0, "train.flip_prob must lie in [0, 1]", "train.flip_prob")
        _require(self.pooling in POOLING_MODES, f"train.pooling must be one of {POOLING_MODES}",
                 "train.pooling")
        _require(self.mask_source in MASK_SOURCES, f"train.mask_source must be one of {MASK_SOURCES}",
                 "train.mask_source")
        _require(self.dtype in DTYPES, f"train.dtype must be one of {DTYPES}", "train.dtype")
        _require(len(self.stage_channels) == len(self.stage_strides) >= 1,
                 "train.stage_channels and train.stage_strides must pair up", "train.stage_strides")
        _require(self.checkpoint_every >= 1, "train.checkpoint_every must be >= 1", "train.checkpoint_every")

    @property
    def accumulation_steps(self):
        return self.effective_batch // self.micro_batch

    @property
    def guidance_delay(self):
        return self.stopgrad_steps if self.segm_guidance_delay is None else self.segm_guidance_delay

    @classmethod
    def full_scale_preset(cls, **overrides):
        """Full-scale schedule (10k steps, batch 32, 768 crops, per-group published lrs)"""
        values = dict(total_steps=10000, warmup_steps=1500, stopgrad_steps=2500,
                      effective_batch=32, crop_size=(768, 768), lr_encoder=1.6e-4,
                      lr_decoder=1.6e-5, lr_projector=1.6e-3)
        values.update(overrides)
        return cls(**values)


@dataclass
class EvalOptions:
    split: str = "val"
    domain: str = "target"
    batch_size: int = 8

    def __post_init__(self):
        _require(self.split in ("train", "val"), "eval.split must be train or val", "eval.split")
        _require(self.domain in ("target", "source"), "eval.domain must be target or source", "eval.domain")
        _require(self.batch_size >= 1, "eval.batch_size must be >= 1", "eval.batch_size")


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    dataset: DatasetOptions = field(default_factory=DatasetOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        stride = max(self.train.stage_strides)
        check_stride_fit(self.scene.image_size, stride, "scene.image_size")
        check_stride_fit(self.train.crop_size, stride, "train.crop_size")

    def experiment_dict(self):
        """Everything that changes results; paths are excluded"""
        data = to_dict(self)
        data.pop("paths")
        return data

    def fingerprint(self):
        return fingerprint(self.experiment_dict())


def check_stride_fit(size, stride, key):
    """Network inputs must tile exactly into the encoder's coarsest grid"""
    h, w = size
    _require(h % stride == 0 and w % stride == 0,
             f"{key} {h}x{w} is not divisible by the encoder stride {stride}", key)


def to_dict(record):
    return json.loads(json.dumps(asdict(record)))


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix}' must be a mapping", key=prefix)
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"unknown configuration key '{dotted}'", key=dotted)
        default = known[key].default_factory() if callable(known[key].default_factory) else known[key].default
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, dotted)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            if default is not None and value is not None:
                if isinstance(default, bool):
                    ok = isinstance(value, bool)
                elif isinstance(default, int):
                    ok = isinstance(value, int) and not isinstance(value, bool)
                elif isinstance(default, float):
                    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
                else:
                    ok = isinstance(value, type(default))
                if not ok:
                    raise ConfigError(f"'{dotted}' has the wrong type ({type(value).__name__})", key=dotted)
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid '{prefix or 'config'}' section: {e}", key=prefix) from e


def run_config_from_dict(data):
    return _build(RunConfig, data, "")


def load_run_config(path=None, overrides=None):
    """Load a run-config file (or defaults) and layer flag overrides on top.

    ``overrides`` maps dotted keys ("train.seed") to values; they win over the file.
    """
    data = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}", key=str(path)) from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return run_config_from_dict(data)


def fingerprint(data):
    if is_dataclass(data):
        data = to_dict(data)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def config_diff(a, b, prefix=""):
    """Dotted keys whose values differ between two config records or dicts"""
    a = to_dict(a) if is_dataclass(a) else a
    b = to_dict(b) if is_dataclass(b) else b
    diff = []
    for key in sorted(set(a) | set(b)):
        dotted = f"{prefix}{key}"
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            diff.extend(config_diff(va, vb, prefix=dotted + "."))
        elif va != vb:
            diff.append(dotted)
    return diff


class Config:
    """Runtime environment settings (never part of the experiment fingerprint)"""

    def __init__(self):
        load_dotenv()

        self.DEVICE = os.getenv('BTSEG_DEVICE', 'cpu')
        self.LOG_LEVEL = os.getenv('BTSEG_LOG_LEVEL', 'INFO')
        threads = os.getenv('BTSEG_NUM_THREADS')
        self.NUM_THREADS = int(threads) if threads else None
        self.DETERMINISTIC = os.getenv('BTSEG_DETERMINISTIC', '1') not in ('0', 'false', 'False')

    def apply(self):
        """Push the settings into torch"""
        import torch

        if self.NUM_THREADS:
            torch.set_num_threads(self.NUM_THREADS)
        if self.DETERMINISTIC:
            torch.use_deterministic_algorithms(True, warn_only=True)
        return self

    def as_dict(self):
        return {
            "device": self.DEVICE,
            "log_level": self.LOG_LEVEL,
            "num_threads": self.NUM_THREADS,
            "deterministic": self.DETERMINISTIC,
        }
