"""Run configuration: key-value files, environment and flag overrides.

Precedence, lowest first: built-in defaults, config file, ``REGDIT_SEED``
(seed only), command-line flags.
"""
from __future__ import annotations

import os

from .checkpoint import config_text, parse_config_text
from .exceptions import ConfigError

SEED_ENV = "REGDIT_SEED"


def read_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc


def effective_config(defaults: dict, path: str | None, overrides: dict,
                     environ=None) -> dict:
    """Merge the layers; values are kept as strings except untouched defaults."""
    environ = os.environ if environ is None else environ
    cfg = dict(defaults)
    from_file = read_config_file(path)
    unknown = sorted(set(from_file) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    cfg.update(from_file)
    if environ.get(SEED_ENV, "").strip():
        cfg["seed"] = environ[SEED_ENV].strip()
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def echo_text(cfg: dict) -> str:
    return config_text(cfg)


def get_float(cfg: dict, key: str) -> float:
    try:
        return float(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"config key {key} is not a number: {cfg[key]!r}") from exc


def get_int(cfg: dict, key: str) -> int:
    try:
        return int(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"config key {key} is not an integer: {cfg[key]!r}") from exc


def get_opt_float(cfg: dict, key: str):
    v = str(cfg.get(key, "none")).strip().lower()
    if v in ("", "none"):
        return None
    return get_float(cfg, key)


def get_bool(cfg: dict, key: str) -> bool:
    v = str(cfg[key]).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"config key {key} is not a boolean: {cfg[key]!r}")
