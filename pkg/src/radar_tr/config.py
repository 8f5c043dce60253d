"""Pipeline configuration and its plain-text ``key=value`` file format.

Example file::

    # teach run on the old-firmware sensor
    k = 40
    z_min = 60
    gamma = 0.0596
    s_m = 5
    doppler = false
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # peak extraction
    k: int = 40
    z_min: float = 60.0
    # polar-to-cartesian
    gamma: float = 0.0596
    beta: float = 0.0
    dr_r: float = -0.31
    # surface points
    grid_res: float = 1.5
    min_points: int = 6
    # registration windows
    s_o: int = 3
    s_m: int = 5
    s_l: int = 3
    # keyframe policy
    kf_dist: float = 1.5
    kf_rot: float = math.radians(5.0)
    # solver
    cauchy_c: float = 1.0
    max_iters: int = 50
    conv_tol: float = 1e-7
    r_max: float | None = None  # None -> 2 * grid_res
    velocity_passes: int = 1  # re-preprocess with the refined velocity this many times
    velocity_window: int = 2  # scan intervals the constant-velocity estimate spans
    # preprocessing stages (ablation switches)
    doppler: bool = True
    range_offset: bool = True
    encoder: bool = True
    motion_comp: bool = True

    def __post_init__(self):
        problems = []
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.s_m < 1 or self.s_m % 2 == 0:
            problems.append("s_m must be odd and >= 1")
        # s_l = 0 is the map-only diagnostic mode
        if self.s_l < 0:
            problems.append("s_l must be >= 0")
        if self.s_o < 1:
            problems.append("s_o must be >= 1")
        if self.gamma <= 0:
            problems.append("gamma must be > 0")
        if self.grid_res <= 0:
            problems.append("grid_res must be > 0")
        if self.kf_dist <= 0:
            problems.append("kf_dist must be > 0")
        if self.min_points < 3:
            problems.append("min_points must be >= 3")
        if self.cauchy_c <= 0:
            problems.append("cauchy_c must be > 0")
        if self.max_iters < 1:
            problems.append("max_iters must be >= 1")
        if self.velocity_passes < 0:
            problems.append("velocity_passes must be >= 0")
        if self.velocity_window < 1:
            problems.append("velocity_window must be >= 1")
        if self.r_max is not None and self.r_max <= 0:
            problems.append("r_max must be > 0")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def correspondence_radius(self) -> float:
        return self.r_max if self.r_max is not None else 2.0 * self.grid_res

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif value is None:
                value = "none"
            lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def _field_kind(name: str) -> str:
    ann = {f.name: f.type for f in fields(PipelineConfig)}[name]
    ann = ann if isinstance(ann, str) else getattr(ann, "__name__", str(ann))
    if "bool" in ann:
        return "bool"
    if ann.startswith("int"):
        return "int"
    if "None" in ann:
        return "optional_float"
    return "float"


FIELD_NAMES = tuple(f.name for f in fields(PipelineConfig))


def coerce_value(name: str, raw: str):
    if name not in FIELD_NAMES:
        raise ConfigError(f"unknown configuration key {name!r}")
    kind = _field_kind(name)
    text = raw.strip()
    try:
        if kind == "bool":
            return _BOOL_WORDS[text.lower()]
        if kind == "int":
            return int(text)
        if kind == "optional_float" and text.lower() in ("none", ""):
            return None
        return float(text)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, base: PipelineConfig | None = None, source: str = "<string>") -> PipelineConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        try:
            values[key] = coerce_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return dataclasses.replace(base or PipelineConfig(), **values)


def load_config(path: str | Path, base: PipelineConfig | None = None) -> PipelineConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base=base, source=str(path))
