"""TOML run configuration: bundled defaults merged with a user file."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .cuk import CukAbstraction, CukParams, build_cuk


class ConfigError(ValueError):
    pass


def default_config_text() -> str:
    return resources.files("ashc").joinpath("data/cuk.toml").read_text()


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


@dataclass
class Config:
    data: dict
    source: str

    def get(self, dotted: str):
        node = self.data
        for part in dotted.split("."):
            try:
                node = node[part]
            except (KeyError, TypeError):
                raise ConfigError(f"missing configuration key {dotted!r}") from None
        return node

    def number(self, dotted: str) -> float:
        v = self.get(dotted)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{dotted!r} must be a number, got {v!r}")
        return float(v)

    def integer(self, dotted: str) -> int:
        v = self.get(dotted)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{dotted!r} must be an integer, got {v!r}")
        return v

    def choice(self, dotted: str, options) -> str:
        v = self.get(dotted)
        if v not in options:
            raise ConfigError(f"{dotted!r} must be one of {tuple(options)}, got {v!r}")
        return v

    def vector(self, dotted: str, length=None) -> list:
        v = self.get(dotted)
        if not isinstance(v, list) or not all(isinstance(e, (int, float)) and not isinstance(e, bool) for e in v):
            raise ConfigError(f"{dotted!r} must be a list of numbers")
        if length is not None and len(v) != length:
            raise ConfigError(f"{dotted!r} must have {length} entries")
        return [float(e) for e in v]

    @property
    def digest(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, overrides: dict) -> "Config":
        data = copy.deepcopy(self.data)
        _merge(data, overrides)
        return Config(data, self.source + " (overridden)")


def parse_config(text: str, source: str = "<string>") -> Config:
    try:
        user = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    data = tomllib.loads(default_config_text())
    _merge(data, user)
    return Config(data, source)


def load_config(path=None) -> Config:
    if path is None:
        return parse_config("", "<bundled defaults>")
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config(text, str(p))


def cuk_params(cfg: Config) -> CukParams:
    try:
        return CukParams(**{k: cfg.number(f"plant.{k}") for k in ("R_i", "L1", "L3", "C2", "C4", "G_L", "E")})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cuk_from_config(cfg: Config, delta_variant: str | None = None) -> CukAbstraction:
    """Build the converter abstraction without construction-time validation.

    Checks are left to the verify suite so that faulted configurations can be
    built and then reported on.
    """
    M = cfg.get("certificate.M")
    if not (isinstance(M, list) and len(M) == 4 and all(isinstance(r, list) and len(r) == 4 for r in M)):
        raise ConfigError("certificate.M must be a 4x4 array")
    variant = delta_variant or cfg.choice("abstraction.delta", ("unit", "redesigned"))
    try:
        return build_cuk(
            cuk_params(cfg),
            variant,
            M=[[float(v) for v in row] for row in M],
            lam=cfg.number("certificate.lambda"),
            epsilon=cfg.number("bound.epsilon"),
            domain=tuple(cfg.vector("abstraction.domain", 2)),
            output_box=tuple(cfg.vector("abstraction.output_box", 2)),
            p4_offset=cfg.number("faults.p4_offset"),
            m_root=cfg.choice("faults.m_root", ("principal", "other")),
            validate=False,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid model configuration: {exc}") from None
