"""Flat ``key = value`` configuration files.

One key per line; ``#`` starts a comment. Keys are the field names of
:class:`~nvrc.model.ModelConfig`, :class:`~nvrc.hierarchy.CodecOptions` and
:class:`~nvrc.trainer.TrainConfig` (all distinct). Tuples are written as
comma-separated values and booleans as ``true``/``false``. Unknown keys and
malformed values are configuration errors.
"""

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigurationError
from .hierarchy import CodecOptions
from .model import ModelConfig
from .trainer import TrainConfig

SECTIONS = (("model", ModelConfig), ("codec", CodecOptions), ("train", TrainConfig))

# ablation variants as option overrides
ABLATIONS = {
    "v1": {"layer_em": "per_tensor"},
    "v2": {"grid_em": "per_tensor"},
    "v3": {"layer_em": "per_tensor", "grid_em": "per_tensor"},
    "v4": {"level2_coding": False},
    "v5": {"grid_step": "fixed"},
}


@dataclass
class FullConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    codec: CodecOptions = field(default_factory=CodecOptions)
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_overrides(self, **kv):
        return apply_overrides(self, kv)

    def to_text(self):
        lines = []
        for name, _ in SECTIONS:
            lines.append(f"# {name}")
            obj = getattr(self, name)
            for f in fields(obj):
                lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _owner(key):
    for name, cls in SECTIONS:
        for f in fields(cls):
            if f.name == key:
                return name, f
    raise ConfigurationError(f"unknown configuration key {key!r}")


def _convert(f, default, text):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(float(p)) if kind is int and float(p).is_integer() else kind(p) for p in parts)
        if isinstance(default, int):
            value = float(text)
            if not value.is_integer():
                raise ValueError(text)
            return int(value)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"invalid value {text!r} for {f.name}") from exc


def apply_overrides(base, overrides):
    """New FullConfig with ``overrides`` (key -> python value or text) applied."""
    parts = {name: {} for name, _ in SECTIONS}
    for key, value in overrides.items():
        section, f = _owner(key)
        default = getattr(getattr(base, section), key)
        parts[section][key] = _convert(f, default, value) if isinstance(value, str) and not isinstance(default, str) else value
    out = {}
    for name, _ in SECTIONS:
        try:
            out[name] = replace(getattr(base, name), **parts[name])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc
    return FullConfig(**out)


def parse_text(text, base=None):
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in overrides:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        overrides[key] = value
    return apply_overrides(base or FullConfig(), overrides)


def load(path, base=None):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, base)


def ablation(name):
    try:
        return dict(ABLATIONS[name])
    except KeyError:
        raise ConfigurationError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None
