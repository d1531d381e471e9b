"""Model configuration and the flat ``section.key=value`` config format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

MAX_POSITIONS = 512


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_size: int
    filter_size: int
    num_heads: int
    input_vocab_size: int
    output_vocab_size: int
    max_positions: int = MAX_POSITIONS
    share_encoder_decoder: bool = False
    tie_output_to_embedding: bool = True
    decoder_only: bool = False
    # one embedding block serves both sides; False gives two matrices even
    # when the vocabularies coincide
    share_embeddings: bool = True
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        if self.num_heads < 1 or self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if not 1 <= self.max_positions <= MAX_POSITIONS:
            raise ConfigError(f"max_positions must be in 1..{MAX_POSITIONS}, got {self.max_positions}")
        if min(self.num_layers, self.hidden_size, self.filter_size,
               self.input_vocab_size, self.output_vocab_size) < 1:
            raise ConfigError("layer count, sizes and vocabularies must be positive")
        same_vocab = self.input_vocab_size == self.output_vocab_size
        if self.share_encoder_decoder and not same_vocab:
            raise ConfigError("share_encoder_decoder requires one vocabulary")
        if self.share_embeddings and not same_vocab:
            raise ConfigError("share_embeddings requires equal input and output vocabularies")
        if self.decoder_only and not same_vocab:
            raise ConfigError("decoder_only models read and write one vocabulary")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_size(self):
        return self.hidden_size // self.num_heads

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_flat(self, prefix="model."):
        return {prefix + f.name: _format(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_flat(cls, values, prefix="model."):
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if not key.startswith(prefix):
                continue
            name = key[len(prefix):]
            name = _MODEL_ALIASES.get(name, name)
            if name not in types:
                raise ConfigError(f"unknown model key {key!r}", getattr(values, "lines", {}).get(key))
            kwargs[name] = _parse(raw, types[name], key, values)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"incomplete model configuration: {exc}") from None


_MODEL_ALIASES = {
    "layers": "num_layers",
    "hidden": "hidden_size",
    "filter": "filter_size",
    "heads": "num_heads",
    "input_vocab": "input_vocab_size",
    "output_vocab": "output_vocab_size",
    "vocab": "input_vocab_size",
}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(raw, kind, key, values):
    line = getattr(values, "lines", {}).get(key)
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            return parse_bool(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}", line) from None
    return raw


def parse_bool(raw):
    lowered = str(raw).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


class FlatConfig(dict):
    """``dict`` of raw string values that remembers the source line of each key."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.lines = {}

    def get_int(self, key, default=None):
        return self._typed(key, default, int)

    def get_float(self, key, default=None):
        return self._typed(key, default, float)

    def get_bool(self, key, default=None):
        return self._typed(key, default, parse_bool)

    def get_str(self, key, default=None):
        return self._typed(key, default, str)

    def require(self, key):
        if key not in self:
            raise ConfigError(f"missing required key {key!r}")
        return self[key]

    def _typed(self, key, default, convert):
        if key not in self:
            if default is None:
                raise ConfigError(f"missing required key {key!r}")
            return default
        try:
            return convert(self[key])
        except ValueError:
            raise ConfigError(f"bad value {self[key]!r} for {key}", self.lines.get(key)) from None

    def digest(self):
        text = "\n".join(f"{k}={self[k]}" for k in sorted(self))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def parse_flat_config(text):
    config = FlatConfig()
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key=value, got {stripped!r}", number)
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key or any(c.isspace() for c in key):
            raise ConfigError(f"bad key {key!r}", number)
        if key in config:
            raise ConfigError(f"duplicate key {key!r}", number)
        config[key] = value.strip()
        config.lines[key] = number
    return config


def load_flat_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_flat_config(text)
