"""Run configuration: presets, the ``key = value`` config file, digests."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from ..attack import AttackConfig
from ..model import ModelConfig
from ..objective import LossWeights

PAPER_EPSILONS = (0.01, 0.03, 0.1, 0.5)
MODES = ("pretrain", "adapter-finetune")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs_total: int = 200
    warmup_epochs: int = 20
    lr_peak: float = 1e-3
    lr_final: float = 1e-5
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_d: float = 1.5
    lambda_ce: float = 1.0
    smooth: float = 1.0
    seed: int = 0
    mode: str = "pretrain"

    def __post_init__(self):
        if not 0 < self.warmup_epochs < self.epochs_total:
            raise ConfigError("need 0 < warmup_epochs < epochs_total")
        if not 0 < self.lr_final <= self.lr_peak:
            raise ConfigError("need 0 < lr_final <= lr_peak")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        self.loss_weights  # validates the weights

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_d, self.lambda_ce, self.smooth)


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    noise_level: float = 0.1
    contrast: float = 0.35
    distractor_prob: float = 0.0
    # adapter fine-tuning data: same generator, noisier and lower contrast
    shift_noise_level: float = 0.3
    shift_contrast: float = 0.25
    shift_invert: bool = False
    shift_n_train: int = 100


@dataclass(frozen=True)
class SweepConfig:
    epsilons: tuple = PAPER_EPSILONS
    attacks: tuple = ("fgsm", "pgd")
    steps: int = 40
    alpha: Optional[float] = None
    random_start: bool = False
    dump_images: int = 2
    batch_size: int = 25

    def attack_config(self, kind: str, epsilon: float, seed: int) -> AttackConfig:
        return AttackConfig(kind=kind, epsilon=epsilon, alpha=self.alpha, steps=self.steps,
                            random_start=self.random_start, seed=seed)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    attack: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "data": dataclasses.asdict(self.data),
            "attack": {**dataclasses.asdict(self.attack), "epsilons": list(self.attack.epsilons),
                       "attacks": list(self.attack.attacks)},
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            seed=seed,
            model=dataclasses.replace(self.model, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig(
            model=ModelConfig.preset("desk", dtype="float32"),
            train=TrainConfig(epochs_total=20, warmup_epochs=2),
        )
    if name == "paper":
        return RunConfig(model=ModelConfig.preset("paper"), train=TrainConfig())
    raise ConfigError(f"unknown preset {name!r}")


# -- config file --------------------------------------------------------------

_SECTIONS = {"model": "model", "train": "train", "data": "data", "attack": "attack"}


def _convert(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError
            return low in ("true", "yes", "1", "on")
        if isinstance(current, tuple):
            kind = type(current[0]) if current else str
            return tuple(kind(item) for item in raw.replace(",", " ").split())
        if current is None:  # optional float such as alpha
            return None if raw.lower() in ("", "none") else float(raw)
        if isinstance(current, (int, float)):
            return type(current)(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str, base: RunConfig) -> RunConfig:
    """Overlay ``[section]`` / ``key = value`` settings onto ``base``.

    Unknown sections or keys are errors.
    """
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = base
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        attr = _SECTIONS[section]
        current = getattr(cfg, attr)
        known = {f.name: getattr(current, f.name) for f in dataclasses.fields(current)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            updates[key] = _convert(raw, known[key], key)
        try:
            cfg = dataclasses.replace(cfg, **{attr: dataclasses.replace(current, **updates)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    # the run seed follows the training seed
    return dataclasses.replace(cfg, seed=cfg.train.seed)


def load_config_file(path, base: RunConfig) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def dump_config_text(cfg: RunConfig) -> str:
    """Config-file text that reproduces ``cfg`` when parsed over any base."""
    lines = [f"# advseg run configuration (seed {cfg.seed})"]
    d = cfg.to_dict()
    for section in ("model", "train", "data", "attack"):
        lines.append(f"[{section}]")
        for key, value in d[section].items():
            if isinstance(value, (list, tuple)):
                value = " ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
