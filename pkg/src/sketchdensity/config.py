"""INI run configuration with sections run, model, losses, curriculum, data.

Every key is optional; missing keys take the defaults below. Unknown sections
or keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError

PHASES = ("pretrain_mdtn", "train_mdsg", "joint_finetune")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    batch_size: int = 4
    learning_rate: float = 2e-4
    epochs_mdtn: int = 10
    epochs_mdsg: int = 10
    epochs_finetune: int = 10
    train_limit: int = 0          # 0 = whole split
    eval_limit: int = 0
    output_dir: str = "runs"


@dataclass(frozen=True)
class ModelSection:
    resolution: int = 64
    mdtn_widths: str = "16,32,64,128,512"
    merge_widths: str = "16,32,64,128,256"
    n_style: int = 2
    residual_blocks: int = 4
    n_disc_scales: int = 2
    disc_channels: int = 32
    variant: str = "full"
    mdsg_base_channels: int = 32
    mdsg_bottleneck_channels: int = 256
    phi_seed: int = 1234


@dataclass(frozen=True)
class LossSection:
    lambda_recon: float = 10.0
    lambda_feat: float = 1.0
    lambda_adv: float = 1.0
    lambda_sketch: float = 10.0
    lambda_scale: float = 5.0
    lambda_afd: float = 1.0
    sketch_ink_weight: float = 8.0   # ink pixels count this much more in the MDSG sketch term
    use_scale: bool = True
    use_afd: bool = True


@dataclass(frozen=True)
class CurriculumSection:
    max_middle_probability: float = 0.7
    ramp_fraction: float = 0.5


@dataclass(frozen=True)
class DataSection:
    root: str = "data"
    source: str = "synthetic"     # or a directory with images/ and annotations/
    num_train: int = 512
    num_eval: int = 64
    seed: int = 0
    texture_min: float = 0.5
    texture_max: float = 1.0


@dataclass(frozen=True)
class Config:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    losses: LossSection = field(default_factory=LossSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    data: DataSection = field(default_factory=DataSection)

    def validate(self):
        r, c = self.run, self.curriculum
        if r.batch_size < 1:
            raise ConfigurationError("run.batch_size must be >= 1")
        if r.learning_rate <= 0:
            raise ConfigurationError("run.learning_rate must be positive")
        if min(r.epochs_mdtn, r.epochs_mdsg, r.epochs_finetune) < 1:
            raise ConfigurationError("epoch counts must be >= 1")
        if not 0.0 <= c.max_middle_probability <= 1.0:
            raise ConfigurationError("curriculum.max_middle_probability must lie in [0, 1]")
        if not 0.0 < c.ramp_fraction <= 1.0:
            raise ConfigurationError("curriculum.ramp_fraction must lie in (0, 1]")
        L = self.losses
        if min(L.lambda_recon, L.lambda_feat, L.lambda_adv, L.lambda_sketch,
               L.lambda_scale, L.lambda_afd) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if L.sketch_ink_weight < 1.0:
            raise ConfigurationError("losses.sketch_ink_weight must be >= 1")
        if self.model.variant not in ("full", "no_skip", "no_multi_style"):
            raise ConfigurationError(f"unknown model.variant {self.model.variant!r}")
        if not 0.0 <= self.data.texture_min <= self.data.texture_max <= 1.0:
            raise ConfigurationError("data texture range must satisfy 0 <= min <= max <= 1")
        return self

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **sections):
        """``cfg.with_overrides(run={"seed": 3})`` returns an updated copy."""
        out = self
        for name, values in sections.items():
            out = replace(out, **{name: replace(getattr(out, name), **values)})
        return out.validate()

    def to_ini(self):
        parser = configparser.ConfigParser()
        for f in fields(self):
            parser[f.name] = {k: str(v) for k, v in asdict(getattr(self, f.name)).items()}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)


def _coerce(section, key, raw, default):
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        return type(default)(raw.strip())
    except (KeyError, ValueError):
        raise ConfigurationError(
            f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text):
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    cfg = Config()
    known = {f.name: f for f in fields(Config)}
    for section in parser.sections():
        if section not in known:
            raise ConfigurationError(f"unknown config section [{section}]")
        current = getattr(cfg, section)
        defaults = asdict(current)
        updates = {}
        for key, raw in parser[section].items():
            if key not in defaults:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            updates[key] = _coerce(section, key, raw, defaults[key])
        cfg = replace(cfg, **{section: replace(current, **updates)})
    return cfg.validate()


def load_config(path):
    if path is None:
        return Config().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(path.read_text())


def parse_widths(text):
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise ConfigurationError(f"bad width list {text!r}") from None
