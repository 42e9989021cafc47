"""Pipeline configuration: a TOML file whose sections mirror the module configs.

Every key is optional; missing keys take the defaults shown by
``mvboot --dump-defaults``. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .detector import DetectorModel, SaturatingRule
from .geometry import Capsule, LMOptions
from .pipeline import FilterConfig
from .scene import SceneConfig, default_occluders
from .triangulation import RansacConfig


class ConfigError(ValueError):
    """Malformed configuration (exit code 2)."""


class ConfigInvariantError(ValueError):
    """Well-formed configuration whose values break an invariant (exit code 3)."""


@dataclass(frozen=True)
class PathsConfig:
    calibration: Path | None = None
    detections: Path | None = None
    output_dir: Path = Path("out")


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 3


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig = PathsConfig()
    run: RunConfig = RunConfig()
    scene: SceneConfig = field(default_factory=SceneConfig)
    ransac: RansacConfig = RansacConfig()
    # the demo selects 60 frames per iteration
    filters: FilterConfig = field(default_factory=lambda: FilterConfig(n_best=60, occluders=default_occluders()))
    detector: DetectorModel = DetectorModel()
    trainer: SaturatingRule = SaturatingRule()


def _occluders(value, where: str) -> tuple[Capsule, ...]:
    if value == "default":
        return default_occluders()
    if value == "none":
        return ()
    if not isinstance(value, list):
        raise ConfigError(f"{where}: expected 'default', 'none' or a list of {{a, b, radius}} tables")
    out = []
    for i, c in enumerate(value):
        if not isinstance(c, dict) or set(c) != {"a", "b", "radius"}:
            raise ConfigError(f"{where}[{i}]: capsule needs exactly a, b, radius")
        out.append(Capsule(c["a"], c["b"], c["radius"]))
    return tuple(out)


def _section(cls, defaults, table: dict, where: str, special: dict | None = None):
    special = special or {}
    names = {f.name for f in fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"[{where}]: unknown key(s) {', '.join(sorted(unknown))}")
    kwargs: dict[str, Any] = {}
    for key, value in table.items():
        kwargs[key] = special[key](value, f"{where}.{key}") if key in special else value
    return replace(defaults, **kwargs)


def _tuple(value, where):
    if not isinstance(value, list):
        raise ConfigError(f"{where}: expected an array")
    return tuple(value)


def _path(value, where):
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string path")
    return Path(value)


def _pck(value, where):
    return tuple(value) if isinstance(value, list) else value


def _refine(value, where):
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a table")
    return _section(LMOptions, LMOptions(), value, where)


def parse_config(data: dict, base: Path | None = None) -> PipelineConfig:
    """Build a config from parsed TOML; relative paths resolve against ``base``."""
    sections = {f.name for f in fields(PipelineConfig)}
    unknown = set(data) - sections
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(sorted(unknown))}")
    for name, table in data.items():
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
    d = PipelineConfig()
    try:
        paths = _section(PathsConfig, d.paths, data.get("paths", {}), "paths", dict.fromkeys(("calibration", "detections", "output_dir"), _path))
        run = _section(RunConfig, d.run, data.get("run", {}), "run")
        scene = _section(SceneConfig, d.scene, data.get("scene", {}), "scene", {"occluders": _occluders})
        filters = _section(
            FilterConfig,
            d.filters,
            data.get("filters", {}),
            "filters",
            {"occluders": _occluders, "bone_length_max": lambda v, w: dict(v)},
        )
        ransac = _section(RansacConfig, d.ransac, data.get("ransac", {}), "ransac", {"refine": _refine})
        detector = _section(
            DetectorModel,
            d.detector,
            data.get("detector", {}),
            "detector",
            {"pck": _pck, "confidence_correct": _tuple, "confidence_wrong": _tuple},
        )
        trainer = _section(SaturatingRule, d.trainer, data.get("trainer", {}), "trainer")
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigInvariantError(str(e)) from e
    if run.iterations < 1:
        raise ConfigInvariantError("run.iterations must be at least 1")
    if base is not None:
        resolve = lambda p: p if p is None or p.is_absolute() else base / p
        paths = PathsConfig(resolve(paths.calibration), resolve(paths.detections), resolve(paths.output_dir))
    for name in ("calibration", "detections"):
        p = getattr(paths, name)
        if p is not None and not p.exists():
            raise ConfigInvariantError(f"paths.{name}: {p} does not exist")
    return PipelineConfig(paths, run, scene, ransac, filters, detector, trainer)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return parse_config(data, path.parent)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (str, Path)):
        return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dump_defaults() -> str:
    """Default configuration as TOML text; loading it back yields the defaults."""
    d = PipelineConfig()
    lines = ["[paths]", '# calibration = "cameras.json"', '# detections = "detections.csv"']
    lines.append(f"output_dir = {_toml_value(d.paths.output_dir)}")
    lines += ["", "[run]"] + [f"{f.name} = {_toml_value(getattr(d.run, f.name))}" for f in fields(RunConfig)]
    lines += ["", "[scene]"]
    for f in fields(SceneConfig):
        if f.name != "occluders":
            lines.append(f"{f.name} = {_toml_value(getattr(d.scene, f.name))}")
    lines.append('occluders = "default"  # "default", "none" or [{a = [x, y, z], b = [x, y, z], radius = r}, ...]')
    lines += ["", "[ransac]"]
    for f in fields(RansacConfig):
        if f.name != "refine":
            lines.append(f"{f.name} = {_toml_value(getattr(d.ransac, f.name))}")
    lines += ["", "[ransac.refine]"] + [f"{f.name} = {_toml_value(getattr(d.ransac.refine, f.name))}" for f in fields(LMOptions)]
    lines += ["", "[filters]"]
    for f in fields(FilterConfig):
        if f.name not in ("bone_length_max", "occluders"):
            lines.append(f"{f.name} = {_toml_value(getattr(d.filters, f.name))}")
    lines.append('occluders = "default"')
    lines += ["", "[filters.bone_length_max]"] + [f"{k} = {_toml_value(v)}" for k, v in d.filters.bone_length_max.items()]
    lines += ["", "# pck is the starting quality for bootstrap: one value or one per keypoint", "[detector]"] + [f"{f.name} = {_toml_value(getattr(d.detector, f.name))}" for f in fields(DetectorModel)]
    lines += ["", "[trainer]"] + [f"{f.name} = {_toml_value(getattr(d.trainer, f.name))}" for f in fields(SaturatingRule)]
    return "\n".join(lines) + "\n"
