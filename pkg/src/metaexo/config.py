"""Flat ``key = value`` run configuration.

Values come from built-in defaults, then the config file, then
``METAEXO_<KEY>`` environment variables, then explicit overrides (command
line flags). Unknown keys are rejected; path-valued keys must exist.
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .tasknet import MetaConfig

ENV_PREFIX = "METAEXO_"
SECTION = "run"

# key -> (type, default); "path" values are checked for existence when set
SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "workers": ("int", 1),
    "out": ("str", "runs/demo"),
    # inputs
    "data_dir": ("path", ""),
    "checkpoint": ("path", ""),
    "demo": ("path", ""),
    "motion": ("path", ""),
    # synthetic corpus
    "n_train_tasks": ("int", 8),
    "n_held_tasks": ("int", 3),
    "n_traj": ("int", 8),
    "n_subjects": ("int", 5),
    "synth_noise": ("float", 0.005),
    "dt": ("float", 0.01),
    # meta-training
    "iterations": ("int", 300),
    "max_windows": ("int", 128),
    "checkpoint_every": ("int", 0),
    "baseline_seed": ("int", 12345),
    # retargeting
    "side": ("str", "r"),
    "task_id": ("str", "retargeted"),
    "subject_id": ("str", ""),
    # plant / controller
    "a0": ("float", 0.06),
    "a1": ("float", 0.0),
    "m_load": ("float", 1.0),
    "l_m": ("float", 0.3),
    "m_link": ("float", 0.0),
    "l_c": ("float", 0.12),
    "m_hat": ("float", 1.0),
    "kp": ("float", 150.0),
    "kd": ("float", 3.0),
    "tau_max": ("float", 9.0),
    "velocity_error": ("str", "setpoint"),
    "hold": ("str", "stage"),
    "sim_dt": ("float", 0.001),
    "rms_bound": ("float", 0.1),
}

_META_DEFAULTS = MetaConfig().to_dict()
for _k, _v in _META_DEFAULTS.items():
    if isinstance(_v, bool):
        SCHEMA[_k] = ("bool", _v)
    elif isinstance(_v, int):
        SCHEMA[_k] = ("int", _v)
    elif isinstance(_v, float):
        SCHEMA[_k] = ("float", _v)
    else:
        SCHEMA[_k] = ("floats" if isinstance(_v[0], float) else "ints", tuple(_v))

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw, source: str):
    kind, _ = SCHEMA[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind in ("ints", "floats"):
            cast = int if kind == "ints" else float
            return tuple(cast(x) for x in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from exc
    return text


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})
    base_dir: Path = field(default_factory=Path.cwd)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def path(self, key: str) -> Path | None:
        value = self.values[key]
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def meta_config(self) -> MetaConfig:
        return MetaConfig.from_dict({k: self.values[k] for k in _META_DEFAULTS})

    def as_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}

    def check_paths(self):
        for key, (kind, _) in SCHEMA.items():
            if kind == "path" and self.values[key]:
                p = self.path(key)
                if not p.exists():
                    raise ConfigError(f"{key} = {self.values[key]!r}: path does not exist")


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines (``#``/``;`` comments, optional ``[run]`` header)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    has_header = re.search(r"^\s*\[", text, re.MULTILINE) is not None
    body = text if has_header else f"[{SECTION}]\n{text}"
    try:
        parser.read_string(body, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    extra = [s for s in parser.sections() if s != SECTION]
    if extra:
        raise ConfigError(f"{source}: unknown section(s) {extra}; use a flat key = value file")
    out = {}
    for key, raw in parser.items(SECTION) if parser.has_section(SECTION) else []:
        if key not in SCHEMA:
            raise ConfigError(f"{source}: unknown key {key!r}")
        out[key] = _convert(key, raw, source)
    return out


def load_config(path=None, env=None, overrides: dict | None = None, check_paths: bool = True) -> RunConfig:
    """Layer defaults, file, environment and overrides into a RunConfig.

    Relative paths in a config file resolve against the file's directory.
    """
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cfg.values.update(parse_text(path.read_text(), str(path)))
        cfg.base_dir = path.resolve().parent
    env = os.environ if env is None else env
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in SCHEMA:
            raise ConfigError(f"environment variable {name} names unknown key {key!r}")
        cfg.values[key] = _convert(key, raw, name)
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        if value is not None:
            cfg.values[key] = _convert(key, value, "command line")
    try:
        cfg.meta_config()
    except ValueError as exc:
        raise ConfigError(f"invalid network settings: {exc}") from exc
    if cfg.velocity_error not in ("setpoint", "reference"):
        raise ConfigError(f"velocity_error must be 'setpoint' or 'reference', got {cfg.velocity_error!r}")
    if cfg.side not in ("r", "l"):
        raise ConfigError(f"side must be 'r' or 'l', got {cfg.side!r}")
    if check_paths:
        cfg.check_paths()
    return cfg
