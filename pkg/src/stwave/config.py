"""Flat ``section.key=value`` run configuration.

Resolution order is override > file > default.  Values are typed after the
default they replace; ``auto`` stands for a derived value (``None``).
Overrides may name a key by its full dotted path or by any unique suffix,
so ``lr_decay=1.0`` resolves to ``train.lr_decay``.
"""

from __future__ import annotations

import difflib
import hashlib
import json
from pathlib import Path

from stwave.errors import ConfigError, ParseError

# type tags for keys whose default is None
_OPTIONAL_INT = "optional-int"

DEFAULTS: dict[str, object] = {
    # data source: "synthetic" or "csv"
    "data.source": "synthetic",
    "data.speeds": "",
    "data.distances": "",
    "data.synthetic_nodes": 10,
    "data.synthetic_days": 14,
    "data.synthetic_seed": 0,
    "data.zero_rate": 0.05,
    "data.t_in": 12,
    "data.t_out": 12,
    "data.history": 12,
    "data.zero_replacement": True,
    "adjacency.threshold_k": 0.1,
    "adjacency.exponent": "squared_ratio",
    "adjacency.threshold_mode": "subtract",
    "model.nhid": 40,
    "model.n_blocks": 4,
    "model.layers_per_block": 2,
    "model.kernel_size": 2,
    "model.dilations": (1, 2),
    "model.skip_channels": None,
    "model.end_channels": None,
    "model.diffusion_order": 2,
    "model.supports_mode": "forward+backward+adaptive",
    "model.embed_dim": 10,
    "model.gcn_bypass_skip": True,
    "model.dropout": 0.3,
    "model.batch_norm": False,
    "model.precision": "float32",
    "train.mode": "scratch",
    "train.base_lr": 1e-3,
    "train.lr_decay": 0.97,
    "train.clip_norm": 3.0,
    "train.weight_decay": 1e-4,
    "train.batch_size": 64,
    "train.max_epochs": 100,
    "train.patience": 15,
    "train.horizons": 12,
    "train.horizon_start": 1,
    "train.pretrain_horizons": 6,
    "train.seed": 0,
}

_TYPES = {"model.skip_channels": _OPTIONAL_INT, "model.end_channels": _OPTIONAL_INT}

CHOICES = {
    "data.source": ("synthetic", "csv"),
    "adjacency.exponent": ("squared_ratio", "ratio_squared_sigma"),
    "adjacency.threshold_mode": ("subtract", "cutoff"),
    "model.supports_mode": ("forward+backward+adaptive", "forward_backward", "adaptive_only", "none"),
    "model.precision": ("float32", "float64"),
    "train.mode": ("scratch", "pretrain_finetune"),
}

# the four architecture/schedule reversions of the ablation, as (key, modified, default)
MODIFICATIONS = {
    "wide_filters": ("model.nhid", 40, 32),
    "gcn_bypass_skip": ("model.gcn_bypass_skip", True, False),
    "zero_replacement": ("data.zero_replacement", True, False),
    "clip3": ("train.clip_norm", 3.0, 5.0),
    "lr_decay_on": ("train.lr_decay", 0.97, 1.0),
}


def nearest_key(key: str) -> str | None:
    names = list(DEFAULTS)
    match = difflib.get_close_matches(key, names, n=1, cutoff=0.0)
    tails = [n for n in names if n.split(".", 1)[1] == key.split(".")[-1]]
    if tails:
        return tails[0]
    return match[0] if match else None


def resolve_key(key: str) -> str:
    key = key.strip().lstrip("-").replace("-", "_")
    if key in DEFAULTS:
        return key
    hits = [n for n in DEFAULTS if n.endswith("." + key)]
    if len(hits) == 1:
        return hits[0]
    if len(hits) > 1:
        raise ConfigError(f"ambiguous key {key!r}: matches {', '.join(hits)}")
    hint = nearest_key(key)
    raise ConfigError(f"unknown config key {key!r}" + (f"; did you mean {hint!r}?" if hint else ""))


def _bool(text: str, key: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def coerce(key: str, value) -> object:
    """Convert ``value`` (string or native) to the type of ``key``'s default."""
    default = DEFAULTS[key]
    kind = _TYPES.get(key)
    try:
        if kind == _OPTIONAL_INT:
            if value is None or (isinstance(value, str) and value.strip().lower() in ("auto", "none", "")):
                return None
            return int(value)
        if isinstance(default, bool):
            return value if isinstance(value, bool) else _bool(str(value), key)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = value if isinstance(value, (list, tuple)) else str(value).replace(" ", "").split(",")
            return tuple(int(v) for v in items if str(v) != "")
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type(default).__name__}") from None
    text = str(value).strip()
    if key in CHOICES and text not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {', '.join(CHOICES[key])}; got {text!r}")
    return text


def parse_text(text: str, path="<config>") -> dict[str, object]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw.strip()!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            full = resolve_key(key)
            out[full] = coerce(full, value)
        except ConfigError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return out


def parse_overrides(items) -> dict[str, object]:
    """``["--lr_decay=1.0", "model.nhid=32"]`` -> typed dict."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like --key=value")
        key, value = item.split("=", 1)
        full = resolve_key(key)
        out[full] = coerce(full, value)
    return out


class RunConfig:
    """Fully materialized configuration with a stable content hash."""

    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            full = resolve_key(key)
            self.values[full] = coerce(full, value)

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        values = {}
        if path is not None:
            path = Path(path)
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config file {path}: {exc}") from exc
            values.update(parse_text(text, path))
        if isinstance(overrides, dict):
            values.update({resolve_key(k): v for k, v in overrides.items()})
        elif overrides:
            values.update(parse_overrides(overrides))
        return cls(values)

    def __getitem__(self, key):
        return self.values[resolve_key(key)]

    def replace(self, **changes) -> "RunConfig":
        """Copy with changes; keys may use ``__`` for dots (``train__seed=1``)."""
        values = dict(self.values)
        for key, value in changes.items():
            full = resolve_key(key.replace("__", "."))
            values[full] = coerce(full, value)
        return RunConfig(values)

    def section(self, name: str) -> dict[str, object]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def to_dict(self) -> dict[str, object]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}

    def to_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if value is None:
                text = "auto"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value).lower() if isinstance(value, bool) else str(value)
            lines.append(f"{key}={text}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    @property
    def modifications(self) -> dict[str, bool]:
        """Which of the five modifications this config has switched on."""
        flags = {}
        for flag, (key, on, off) in MODIFICATIONS.items():
            value = self.values[key]
            if flag == "wide_filters":
                flags[flag] = value >= on
            elif flag == "clip3":
                flags[flag] = value <= on
            elif flag == "lr_decay_on":
                flags[flag] = value != 1.0
            else:
                flags[flag] = bool(value) == on
        return flags

    def with_modifications(self, **flags: bool) -> "RunConfig":
        changes = {}
        for flag, enabled in flags.items():
            if flag not in MODIFICATIONS:
                raise ConfigError(f"unknown modification {flag!r}; expected one of {sorted(MODIFICATIONS)}")
            key, on, off = MODIFICATIONS[flag]
            changes[key.replace(".", "__")] = on if enabled else off
        return self.replace(**changes)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def __repr__(self):
        return f"RunConfig({self.hash()})"


def gwnv2() -> RunConfig:
    """All modifications on (the defaults)."""
    return RunConfig()


def baseline() -> RunConfig:
    return RunConfig().with_modifications(**{flag: False for flag in MODIFICATIONS})
