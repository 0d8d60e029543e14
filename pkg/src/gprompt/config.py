"""Flat ``key = value`` run configuration.

Plain keys set :class:`TrainConfig` fields; ``generator.*`` and ``pretrain.*``
keys set the graph generator and masked-edge pretraining,
``node_generator.*`` the node-task graph; ``gin_hidden``, ``gin_layers``,
``hops``, ``data_seed`` and ``split_ratios`` set the rest. Values are
Python literals (``0.5``, ``None``, ``(0.8, 0.1, 0.1)``); bare words are
strings. Unknown keys are rejected.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import typing

from .errors import ConfigError
from .gnn import PretrainConfig
from .graph import GeneratorSpec, NodeGeneratorSpec
from .trainer import ExperimentConfig, TrainConfig

_SECTION = "run"
_TOP = ("gin_hidden", "gin_layers", "hops", "data_seed", "split_ratios")


def _fields(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name != "history"}


_GROUPS = {
    "": _fields(TrainConfig),
    "generator.": _fields(GeneratorSpec),
    "node_generator.": _fields(NodeGeneratorSpec),
    "pretrain.": _fields(PretrainConfig),
}


def known_keys():
    keys = [p + k for p, fs in _GROUPS.items() for k in fs]
    return sorted(keys + list(_TOP))


def parse_value(raw: str):
    raw = raw.strip()
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def _coerce(key, value, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if hint is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if hint is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if hint is str and isinstance(value, str):
        return value
    if hint is bool and isinstance(value, bool):
        return value
    raise ConfigError(f"{key}: cannot use {value!r} as {getattr(hint, '__name__', hint)}")


def apply(exp: ExperimentConfig, values: dict) -> ExperimentConfig:
    """New config with ``values`` (flat keys) applied; raises ConfigError naming the bad key."""
    groups = {p: {} for p in _GROUPS}
    top = {}
    for key, value in values.items():
        if key in _TOP:
            if key == "split_ratios":
                if not isinstance(value, (tuple, list)) or len(value) != 3:
                    raise ConfigError(f"{key}: expected three ratios, got {value!r}")
                top[key] = tuple(_coerce(key, x, float) for x in value)
            elif key in ("data_seed", "gin_layers"):
                top[key] = None if value is None else _coerce(key, value, int)
            else:
                top[key] = _coerce(key, value, int)
            continue
        prefix = next((p for p in _GROUPS if p and key.startswith(p)), "")
        name = key[len(prefix):]
        if name not in _GROUPS[prefix]:
            raise ConfigError(f"unknown config key {key!r}")
        groups[prefix][name] = _coerce(key, value, _GROUPS[prefix][name])
    out = dataclasses.replace(
        exp,
        train=dataclasses.replace(exp.train, **groups[""]),
        generator=dataclasses.replace(exp.generator, **groups["generator."]),
        node_generator=dataclasses.replace(exp.node_generator, **groups["node_generator."]),
        pretrain=dataclasses.replace(exp.pretrain, history=[], **groups["pretrain."]),
        **top,
    )
    out.train.validate()
    out.generator.validate()
    out.node_generator.validate()
    if out.hops < 1:
        raise ConfigError(f"hops: must be >= 1, got {out.hops}")
    return out


def parse_text(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return {k: parse_value(v) for k, v in cp[_SECTION].items()}


def load(path=None, overrides=(), base: ExperimentConfig = None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    exp = base or ExperimentConfig()
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_text(fh.read()))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        values[key.strip()] = parse_value(raw)
    return apply(exp, values)


def resolved_dict(exp: ExperimentConfig) -> dict:
    """Flat dict of every setting, with trainer defaults resolved."""
    out = dict(exp.train.resolved().to_dict())
    out.update({f"generator.{k}": v for k, v in dataclasses.asdict(exp.generator).items()})
    out.update({f"node_generator.{k}": v for k, v in dataclasses.asdict(exp.node_generator).items()})
    out.update({f"pretrain.{k}": v for k, v in dataclasses.asdict(exp.pretrain).items() if k != "history"})
    out.update(gin_hidden=exp.gin_hidden, gin_layers=exp.resolved_gin_layers, hops=exp.hops,
               data_seed=exp.data_seed, split_ratios=list(exp.split_ratios))
    return out


def dumps(exp: ExperimentConfig) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in sorted(resolved_dict(exp).items()))
