"""Flat pipeline configuration: parsing, validation, shipped profiles.

Files are either a JSON object or ``key = value`` lines (``#`` comments).
Unknown keys are rejected. Prune parameters left unset follow the mode.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .evaluation import SCALE_RULES
from .geometry import RatioKind
from .voxel_ops import DIFFERENTIAL_PRUNE, SIMPLE_PRUNE, FillStrategy, PruneConfig, max_neighbors

MODES = ("simple", "differential")
PROFILES = ("simple", "differential")

# accepted spellings that map onto a field
ALIASES = {"range": "neighbor_range"}


@dataclass
class PipelineConfig:
    mode: str = "simple"
    inputs: list[str] = field(default_factory=list)
    output_dir: str = "recon_out"
    seed: int = 0

    # trace column names
    laser_column: str = "laser"
    galvo_x_column: str = "galvo_x"
    galvo_y_column: str = "galvo_y"

    threshold_on: float = 2.2
    threshold_off: float = 1.1
    apply_lpf: bool = True
    lpf_order: int = 4
    lpf_cutoff_hz: float = 6000.0
    off_run_threshold: int = 1000

    calibrate: bool = False
    calibration_layer: int | None = None
    calibration_lpf_cutoff_hz: float = 1000.0

    raster_size: float = 0.0025
    min_hit: int | None = None
    neighbor_range: int | None = None
    min_neighbors: int | None = None
    fill_strategy: str = "gear_up"
    projection_min_hit: int = 20
    middle_layer: int | None = None

    distortion_model: str | None = None
    fit_distortion: bool = False
    reference_radius: float = 100.0
    z_factor: float | None = None
    fit_z_factor: bool = False
    cloud_subdivisions: int = 1

    proportion_ratio: float | None = None
    proportion_kind: str = "diameter_over_height"

    reference_stl: str | None = None
    eval_grid: float = 0.25
    scale_rule: str = "astm_mean_axis"

    def prune_config(self) -> PruneConfig:
        base = DIFFERENTIAL_PRUNE if self.mode == "differential" else SIMPLE_PRUNE
        return PruneConfig(
            base.min_hit if self.min_hit is None else self.min_hit,
            base.neighbor_range if self.neighbor_range is None else self.neighbor_range,
            base.min_neighbors if self.min_neighbors is None else self.min_neighbors,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _to_bool(key, v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _coerce(key: str, value):
    ftype = str(_FIELDS[key].type)
    optional = "None" in ftype
    if value is None or (optional and isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
        if not optional:
            raise ConfigError(f"{key}: a value is required")
        return None
    try:
        if ftype.startswith("list"):
            if isinstance(value, str):
                return [p.strip() for p in value.split(",") if p.strip()]
            return [str(p) for p in value]
        if ftype.startswith("bool"):
            return _to_bool(key, value)
        if ftype.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(str(value).strip()) if isinstance(value, str) else int(value)
        if ftype.startswith("float"):
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {ftype}") from None


def parse_config_text(text: str) -> dict:
    """Raw key/value document from JSON or ``key = value`` text."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("JSON config must be an object")
        return doc
    doc = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in doc:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        doc[key] = value
    return doc


def config_from_dict(doc: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Apply ``doc`` on top of ``base`` (defaults when omitted); unknown keys raise."""
    values = dataclasses.asdict(base) if base is not None else {}
    unknown = []
    for raw_key, value in doc.items():
        key = ALIASES.get(raw_key, raw_key)
        if key not in _FIELDS:
            unknown.append(raw_key)
            continue
        values[key] = _coerce(key, value)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    return PipelineConfig(**values)


def parse_overrides(pairs) -> dict:
    doc = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        doc[k.strip()] = v.strip()
    return doc


def profile_text(name: str) -> str:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; shipped profiles: {', '.join(PROFILES)}")
    return resources.files("pbf_recon").joinpath("profiles", f"{name}.cfg").read_text(encoding="utf-8")


def load_config(path=None, profile: str | None = None, overrides=None) -> PipelineConfig:
    """Profile, then file, then ``--set`` overrides; raises on any violation."""
    cfg = PipelineConfig()
    if profile:
        cfg = config_from_dict(parse_config_text(profile_text(profile)), cfg)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = config_from_dict(parse_config_text(text), cfg)
    if overrides:
        cfg = config_from_dict(overrides if isinstance(overrides, dict) else parse_overrides(overrides), cfg)
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def validate_config(config) -> list[str]:
    """Every violated constraint as a message naming the key; empty when valid."""
    if isinstance(config, dict):
        try:
            config = config_from_dict(config)
        except ConfigError as exc:
            return [str(exc)]
    c = config
    out = []
    if c.mode not in MODES:
        out.append(f"mode must be one of {MODES}, got {c.mode!r}")
    if not c.threshold_on > c.threshold_off:
        out.append(f"threshold_on > threshold_off violated: {c.threshold_on} <= {c.threshold_off}")
    if c.lpf_order < 1:
        out.append(f"lpf_order must be >= 1, got {c.lpf_order}")
    for key in ("lpf_cutoff_hz", "calibration_lpf_cutoff_hz", "raster_size", "reference_radius", "eval_grid"):
        if not getattr(c, key) > 0:
            out.append(f"{key} must be > 0, got {getattr(c, key)}")
    if c.off_run_threshold < 1:
        out.append(f"off_run_threshold must be >= 1, got {c.off_run_threshold}")
    for key in ("min_hit", "neighbor_range"):
        v = getattr(c, key)
        if v is not None and v < 1:
            out.append(f"{key} must be >= 1, got {v}")
    if c.min_neighbors is not None:
        default = DIFFERENTIAL_PRUNE if c.mode == "differential" else SIMPLE_PRUNE
        r = c.neighbor_range if c.neighbor_range is not None else default.neighbor_range
        if c.min_neighbors < 0:
            out.append(f"min_neighbors must be >= 0, got {c.min_neighbors}")
        elif r >= 1 and c.min_neighbors > max_neighbors(r):
            out.append(f"min_neighbors {c.min_neighbors} exceeds (2r+1)^2-1 = {max_neighbors(r)} for range {r}")
    if c.fill_strategy not in {s.value for s in FillStrategy}:
        out.append(f"fill_strategy must be one of {[s.value for s in FillStrategy]}, got {c.fill_strategy!r}")
    if c.projection_min_hit < 1:
        out.append(f"projection_min_hit must be >= 1, got {c.projection_min_hit}")
    for key in ("middle_layer", "calibration_layer"):
        v = getattr(c, key)
        if v is not None and v < 0:
            out.append(f"{key} must be >= 0, got {v}")
    if c.z_factor is not None and not c.z_factor > 0:
        out.append(f"z_factor must be > 0, got {c.z_factor}")
    if c.proportion_ratio is not None and not c.proportion_ratio > 0:
        out.append(f"proportion_ratio must be > 0, got {c.proportion_ratio}")
    if c.proportion_kind not in {k.value for k in RatioKind}:
        out.append(f"proportion_kind must be one of {[k.value for k in RatioKind]}, got {c.proportion_kind!r}")
    if c.scale_rule not in SCALE_RULES:
        out.append(f"scale_rule must be one of {SCALE_RULES}, got {c.scale_rule!r}")
    if c.cloud_subdivisions < 1:
        out.append(f"cloud_subdivisions must be >= 1, got {c.cloud_subdivisions}")
    if c.mode == "differential" and 0 < len(c.inputs) < 2:
        out.append("differential mode needs at least two inputs")
    return out


def config_to_text(config: PipelineConfig) -> str:
    """``key = value`` lines that :func:`parse_config_text` reads back to the same config."""
    lines = []
    for key, value in config.to_dict().items():
        if value is None:
            text = "none"
        elif isinstance(value, list):
            text = ",".join(value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
