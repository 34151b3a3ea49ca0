"""INI run configuration.

One section per dataclass. Keys not present fall back to the dataclass
defaults, and unknown sections or keys are rejected so typos surface early.

    [backbone]  layers dim heads patches classes seed
    [stream]    id_classes ood_classes ood_ratio shift_strength batches
                batch_size seed sample_noise source_per_class
    [adapt]     rho objective entropy_source predict_from differentiate_weights
                predict_after_update adapt_norm use_aan use_hln momentum weight_decay
    [lr]        norm aan psi ladder
    [loss]      beta1 beta2 lambda1 lambda2
    [fusion]    alpha threshold   (threshold "auto" = 0.5 ln C)
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .adapt import AdaptConfig, LearningRates
from .backbone import BackboneConfig
from .hln import FusionConfig
from .losses import LossWeights
from .stream import StreamConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Reseed both the backbone and the stream."""
        return replace(self, backbone=replace(self.backbone, seed=seed), stream=replace(self.stream, seed=seed))

    def with_batches(self, batches: int) -> "RunConfig":
        return replace(self, stream=replace(self.stream, batches=batches))

    def with_adapt(self, **changes) -> "RunConfig":
        return replace(self, adapt=replace(self.adapt, **changes))


def _coerce(raw: str, kind, where: str):
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None
    return text


def _scalar_fields(cls) -> dict[str, type]:
    types = {"int": int, "float": float, "bool": bool, "str": str}
    out = {}
    for f in fields(cls):
        name = f.type if isinstance(f.type, str) else f.type.__name__
        if name in types:
            out[f.name] = types[name]
    return out


def _section(cp: configparser.ConfigParser, name: str, cls, base):
    if not cp.has_section(name):
        return base
    allowed = _scalar_fields(cls)
    kw = {}
    for key, raw in cp.items(name):
        if name == "fusion" and key == "threshold":
            kw[key] = None if raw.strip().lower() in ("auto", "none", "") else _coerce(raw, float, f"[{name}] {key}")
            continue
        if key not in allowed:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        kw[key] = _coerce(raw, allowed[key], f"[{name}] {key}")
    try:
        return replace(base, **kw)
    except ValueError as err:
        raise ConfigError(f"[{name}] {err}") from err


SECTIONS = ("backbone", "stream", "adapt", "lr", "loss", "fusion")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from err
    extra = set(cp.sections()) - set(SECTIONS)
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(extra))}")
    a = base.adapt
    try:
        adapt = replace(
            _section(cp, "adapt", AdaptConfig, a),
            lr=_section(cp, "lr", LearningRates, a.lr),
            weights=_section(cp, "loss", LossWeights, a.weights),
            fusion=_section(cp, "fusion", FusionConfig, a.fusion),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err
    cfg = RunConfig(
        backbone=_section(cp, "backbone", BackboneConfig, base.backbone),
        stream=_section(cp, "stream", StreamConfig, base.stream),
        adapt=adapt,
    )
    if cfg.stream.id_classes != cfg.backbone.classes:
        raise ConfigError(f"stream.id_classes {cfg.stream.id_classes} != backbone.classes {cfg.backbone.classes}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        return parse_config(text)
    except ConfigError as err:
        raise ConfigError(f"{path}: {err}") from err


def _flat(obj) -> dict[str, object]:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if not dataclasses.is_dataclass(getattr(obj, f.name))}


def config_dict(cfg: RunConfig) -> dict[str, dict[str, object]]:
    """Nested plain-dict view, section by section (JSON friendly)."""
    a = cfg.adapt
    return {
        "backbone": _flat(cfg.backbone),
        "stream": _flat(cfg.stream),
        "adapt": _flat(a),
        "lr": _flat(a.lr),
        "loss": _flat(a.weights),
        "fusion": _flat(a.fusion),
    }


def dump_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for sec, values in config_dict(cfg).items():
        cp[sec] = {k: ("auto" if v is None else repr(v) if isinstance(v, float) else str(v)) for k, v in values.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
