"""Run configuration: a versioned JSON tree with one section per module.

Every section mirrors a dataclass; unknown keys are rejected so typos fail
loudly. The hash of the canonical JSON form is stamped into every output.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .assign import SamplerConfig
from .heads import HeadConfig
from .pyramid import PyramidConfig
from .train import TrainerConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelExtras:
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    seed: int = 7


@dataclass
class AnchorConfig:
    mode: str = ""  # "" derives window/gridN from head.position_sensitive
    decode_clamp: float = 8.0  # max |t_w|, |t_h| before exp


@dataclass
class EvalConfig:
    nms_iou: float | None = 0.7
    top_n: int = 1000
    pre_nms_top_n: int | None = None
    budgets: tuple = (10, 100, 1000)
    batch: int = 20


@dataclass
class DataConfig:
    kind: str = "synth"  # "synth" or "dir" (a saved dataset directory)
    path: str = ""
    train_count: int = 1000
    val_count: int = 200
    size: int = 128
    seed: int = 7


# desk-scale defaults used by the synthetic experiments
DESK_PYRAMID = dict(channels=48, widths=[16, 32, 64, 128])
DESK_HEAD = dict(variant="gcn-ns", position_sensitive=True, gcn_mid=8, in_channels=48)
# two images per step: the schedule decays per epoch, so small data needs many steps
DESK_SAMPLER = dict(anchors_per_image=256, images_per_batch=2)

SECTIONS = {
    "pyramid": PyramidConfig,
    "head": HeadConfig,
    "model": ModelExtras,
    "anchors": AnchorConfig,
    "sampler": SamplerConfig,
    "trainer": TrainerConfig,
    "eval": EvalConfig,
    "data": DataConfig,
}


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


@dataclass
class RunConfig:
    pyramid: PyramidConfig = field(default_factory=lambda: PyramidConfig(**DESK_PYRAMID))
    head: HeadConfig = field(default_factory=lambda: HeadConfig(**DESK_HEAD))
    model: ModelExtras = field(default_factory=ModelExtras)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(**DESK_SAMPLER))
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    version: int = CONFIG_VERSION

    def to_dict(self):
        out = {"version": self.version}
        for name in SECTIONS:
            out[name] = _jsonable(asdict(getattr(self, name)))
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, tree):
        if not isinstance(tree, dict):
            raise ConfigError("config root must be an object")
        unknown = set(tree) - set(SECTIONS) - {"version"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        version = tree.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}; expected {CONFIG_VERSION}")
        base = cls()
        kwargs = {}
        for name, klass in SECTIONS.items():
            section = tree.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            merged = asdict(getattr(base, name))
            merged.update(copy.deepcopy(section))
            try:
                kwargs[name] = klass(**{k: tuple(v) if isinstance(v, list) else v for k, v in merged.items()})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        cfg = cls(**kwargs, version=version)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text):
        try:
            tree = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid config JSON: {exc}") from exc
        return cls.from_dict(tree)

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        with open(path) as fh:
            return cls.from_json(fh.read())

    def validate(self):
        if self.head.in_channels != self.pyramid.channels:
            raise ConfigError("head.in_channels must equal pyramid.channels")
        if self.pyramid.encoder != "toy":
            raise ConfigError("only the toy encoder is trainable; resnet50-graph is for parameter counting")
        if self.anchors.mode and self.anchors.mode not in ("window", "grid3", "grid5"):
            raise ConfigError(f"anchors.mode must be window, grid3 or grid5, got {self.anchors.mode!r}")
        return self

    def model_config(self):
        from .model import ModelConfig

        try:
            return ModelConfig(self.pyramid, self.head, self.anchors.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def build_model(cfg: RunConfig, seed=None):
    """Instantiate a ``ProposalNet`` honouring the model and anchor sections."""
    from .model import ProposalNet

    net = ProposalNet(cfg.model_config(), seed=cfg.model.seed if seed is None else seed,
                      decode_clamp=cfg.anchors.decode_clamp)
    for _, mod in net._walk():
        if hasattr(mod, "running_var"):
            mod.momentum = cfg.model.bn_momentum
            mod.eps = cfg.model.bn_eps
    return net
