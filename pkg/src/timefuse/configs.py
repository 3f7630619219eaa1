"""Application config: one nested dataclass tree, a JSON file format, and
dotted-path overrides.

The tree composes the per-module configs so that a single file (plus
command-line ``section.key=value`` overrides) pins an entire run. The
canonical JSON form is hashed and embedded in every artifact, which is what
makes runs reproducible and comparable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence, Union, get_type_hints

from .codec import CodecConfig, CodecOptConfig
from .errors import ValidationError
from .fusion import FusionConfig
from .lm import LMConfig
from .training import LossWeights, TrainConfig


class ConfigError(ValidationError):
    """Bad config file, unknown key, type mismatch, or cross-field clash."""


@dataclass(frozen=True)
class DataConfig:
    """Synthetic corpus sizing and the text/ts mixture."""

    n_train: int = 2000
    n_val: int = 200
    text_fraction: float = 0.15
    min_length: int = 64
    max_length: int = 160
    horizon: int = 32
    noise: float = 0.05
    anomaly_amplitude: float = 5.0

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("corpus sizes must be >= 1")
        if not (0.0 <= self.text_fraction < 1.0):
            raise ConfigError("text_fraction must be in [0, 1)")


@dataclass(frozen=True)
class BudgetConfig:
    """Per-stage training token budgets."""

    align: int = 200_000
    pretrain: int = 2_000_000
    sft: int = 2_000_000

    def __post_init__(self):
        for stage in ("align", "pretrain", "sft"):
            if getattr(self, stage) < 1:
                raise ConfigError(f"{stage} budget must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation knobs shared by the eval and detect commands."""

    threshold_sigma: float = 4.0
    season_override: int = 0   # 0 = derive from the frequency tag
    max_examples: int = 0      # 0 = evaluate the whole file

    def __post_init__(self):
        if self.threshold_sigma <= 0:
            raise ConfigError("threshold_sigma must be positive")
        if self.season_override < 0 or self.max_examples < 0:
            raise ConfigError("season_override and max_examples must be >= 0")


@dataclass(frozen=True)
class AppConfig:
    """Everything a run needs, from data synthesis to evaluation."""

    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    codec_opt: CodecOptConfig = field(default_factory=CodecOptConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        # Widths must agree across module boundaries or the adapters cannot
        # be wired; catching it here beats a shape error mid-run.
        if self.fusion.d_latent != self.codec.d_latent:
            raise ConfigError(
                f"fusion.d_latent {self.fusion.d_latent} != "
                f"codec.d_latent {self.codec.d_latent}"
            )
        if self.lm.d_lm != self.fusion.d_lm:
            raise ConfigError(
                f"lm.d_lm {self.lm.d_lm} != fusion.d_lm {self.fusion.d_lm}"
            )


_SECTIONS = {
    "data": DataConfig,
    "codec": CodecConfig,
    "codec_opt": CodecOptConfig,
    "fusion": FusionConfig,
    "lm": LMConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "budget": BudgetConfig,
    "eval": EvalConfig,
}


def config_schema() -> dict[str, tuple[type, Any]]:
    """Dotted key -> (type, default) for every tunable field.

    Derived from the dataclasses themselves so help text can never drift
    from the code.
    """
    schema: dict[str, tuple[type, Any]] = {"seed": (int, AppConfig().seed)}
    for section, cls in _SECTIONS.items():
        hints = get_type_hints(cls)
        defaults = cls()
        for f in fields(cls):
            schema[f"{section}.{f.name}"] = (
                hints[f.name], getattr(defaults, f.name)
            )
    return schema


def config_to_dict(cfg: AppConfig) -> dict:
    d = dataclasses.asdict(cfg)
    # Tuples (vocab pools etc.) would round-trip as lists; keep JSON types.
    return json.loads(json.dumps(d))


def _coerce(section: str, name: str, want: type, value: Any) -> Any:
    # bool is a subclass of int, so check it first and keep it strict.
    if want is bool:
        if isinstance(value, bool):
            return value
    elif want is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif want is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(value, want):
        return value
    key = f"{section}.{name}" if section else name
    raise ConfigError(
        f"{key}: expected {want.__name__}, got {type(value).__name__}"
    )


def config_from_dict(d: dict) -> AppConfig:
    """Build an AppConfig from plain nested dicts, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    known = {"seed", *_SECTIONS}
    for key in d:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    kwargs: dict[str, Any] = {}
    if "seed" in d:
        kwargs["seed"] = _coerce("", "seed", int, d["seed"])
    for section, cls in _SECTIONS.items():
        if section not in d:
            continue
        sub = d[section]
        if not isinstance(sub, dict):
            raise ConfigError(f"{section}: expected an object")
        hints = get_type_hints(cls)
        names = {f.name for f in fields(cls)}
        sub_kwargs = {}
        for name, value in sub.items():
            if name not in names:
                raise ConfigError(f"unknown config key {section}.{name!r}")
            sub_kwargs[name] = _coerce(section, name, hints[name], value)
        try:
            kwargs[section] = cls(**sub_kwargs)
        except ValidationError as exc:
            raise ConfigError(f"{section}: {exc}") from exc
    return AppConfig(**kwargs)


def load_config_file(path: Union[str, Path]) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: config root must be an object")
    return d


def parse_override(item: str) -> tuple[str, Any]:
    """Parse ``section.key=value``; the value is JSON, else a bare string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, _, raw = item.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    if len(parts) == 1:
        d[key] = value
        return
    if len(parts) != 2:
        raise ConfigError(f"override key {key!r} nests too deep")
    section, name = parts
    d.setdefault(section, {})
    if not isinstance(d[section], dict):
        raise ConfigError(f"{section}: expected an object")
    d[section][name] = value


def resolve_config(
    config_path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
) -> AppConfig:
    """File plus overrides, overrides winning; one master seed by default.

    Unless set explicitly, ``codec_opt.seed`` and ``train.seed`` follow the
    top-level seed so a single number pins the whole run.
    """
    d: dict = {}
    provided: set[str] = set()
    if config_path is not None:
        file_dict = load_config_file(config_path)
        d.update(file_dict)
        for section, sub in file_dict.items():
            if isinstance(sub, dict):
                provided.update(f"{section}.{k}" for k in sub)
            else:
                provided.add(section)
    for item in overrides:
        key, value = parse_override(item)
        _set_dotted(d, key, value)
        provided.add(key)
    seed = d.get("seed", AppConfig().seed)
    if "codec_opt.seed" not in provided:
        _set_dotted(d, "codec_opt.seed", seed)
    if "train.seed" not in provided:
        _set_dotted(d, "train.seed", seed)
    return config_from_dict(d)


def canonical_config_json(cfg: AppConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True,
                      separators=(",", ":"))


def config_hash(cfg: AppConfig) -> str:
    """Stable content address for a resolved config."""
    return hashlib.sha256(canonical_config_json(cfg).encode()).hexdigest()


def write_resolved_config(cfg: AppConfig, out_dir: Union[str, Path]) -> Path:
    """Echo the fully resolved config next to the artifacts it produced."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved-config.json"
    payload = dict(config_to_dict(cfg), config_hash=config_hash(cfg))
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path
