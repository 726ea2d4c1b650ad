"""Flat key-value run configuration with section prefixes.

Config files are plain text: one ``section.key = value`` per line, ``#``
comments, blank lines ignored. Sections are ``model.``, ``train.`` and
``data.``. Unknown keys are rejected; values are converted to the
declared field types. Example::

    model.layers = 3
    model.branch = 8
    train.learning_rate = 0.0003
    data.root = /data/frames
"""

import dataclasses
import math
from dataclasses import dataclass, field

from .pipeline import ModelConfig, TrainingConfig


class ConfigError(Exception):
    """Malformed or unknown configuration input (CLI exit code 2)."""


@dataclass
class DataConfig:
    """Dataset selection, prediction window, corruption and output knobs."""

    root: str = ""  # frame-directory dataset; empty selects synthetic scenes
    checkpoint: str = ""  # input checkpoint for commands that need one
    context: int = 4  # T
    horizon: int = 4  # S
    sequence_index: int = 0  # which sequence predict/export commands visualize
    decode_mode: str = "greedy"
    temperature: float = 1.0
    # synthetic scene parameters
    synth_sequences: int = 20
    synth_holdout: int = 5
    height: int = 64
    width: int = 64
    channels: int = 1
    num_shapes: int = 1
    shape_kind: str = "disc"
    radius_min: int = 5
    radius_max: int = 9
    velocity_min: int = 1
    velocity_max: int = 2
    intensity_min: float = 0.6
    intensity_max: float = 1.0
    length: int = 8
    scene_seed: int = 100
    # corruption parameters (corrupt-eval)
    corruption: str = "additive_noise"
    corruption_sigma: float = 2.0
    corruption_fragments: int = 4
    corruption_fragment_size: int = 16
    corruption_snr_db: float = 20.0
    corruption_quality: int = 50

    def __post_init__(self):
        if self.context < 1 or self.horizon < 1:
            raise ConfigError("data.context and data.horizon must be >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)


_SECTIONS = {"model": ModelConfig, "train": TrainingConfig, "data": DataConfig}


def _convert(raw, ftype, key):
    raw = raw.strip()
    try:
        if ftype is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype is int:
            return int(raw)
        if ftype is float:
            if raw.lower() in ("inf", "+inf", "infinity"):
                return math.inf
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


def parse_config(text):
    """Parse config text into a :class:`RunConfig`; unknown keys raise."""
    values = {"model": {}, "train": {}, "data": {}}
    fields = {
        name: {f.name: f.type for f in dataclasses.fields(cls)}
        for name, cls in _SECTIONS.items()
    }
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        ftypes = fields[section]
        if name not in ftypes:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        ftype = ftypes[name]
        if isinstance(ftype, str):  # dataclass stores annotations as strings
            ftype = {"int": int, "float": float, "str": str, "bool": bool}.get(ftype, str)
        values[section][name] = _convert(raw, ftype, key)
    try:
        return RunConfig(
            model=ModelConfig(**values["model"]),
            train=TrainingConfig(**values["train"]),
            data=DataConfig(**values["data"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)
