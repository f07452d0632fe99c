"""Sectioned ``key = value`` run configuration.

Sections: ``model``, ``train``, ``pun``, ``pan``, ``sweep``, ``io``. Every key
has a default; unknown sections or keys are rejected and every value is range
checked while parsing. Errors name the source line, section and key.
"""

from __future__ import annotations

import configparser
import math
import re
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from promptnorm.harness import (DEFAULT_FACTORS, DEFAULT_VARIANCES, ModelConfig, SweepGrid,
                                TrainConfig)
from promptnorm.losses import BetaMix, OmegaSchedule, PANConfig, PUNConfig


class ConfigError(ValueError):
    def __init__(self, source: str, line: int | None, section: str, key: str | None,
                 reason: str):
        where = source if line is None else f"{source}:{line}"
        what = f"[{section}]" if key is None else f"[{section}] {key}"
        super().__init__(f"{where}: {what}: {reason}")
        self.source, self.line, self.section, self.key, self.reason = (
            source, line, section, key, reason)


# --------------------------------------------------------------------------
# value parsers; each raises ValueError with a human-readable reason

def _int(lo: int | None = None, hi: int | None = None) -> Callable[[str], int]:
    def parse(s: str) -> int:
        try:
            v = int(s)
        except ValueError:
            raise ValueError(f"expected an integer, got {s!r}") from None
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}, got {v}")
        return v
    return parse


def _float(lo: float | None = None, hi: float | None = None, *, lo_open: bool = False,
           hi_open: bool = False) -> Callable[[str], float]:
    def parse(s: str) -> float:
        try:
            v = float(s)
        except ValueError:
            raise ValueError(f"expected a number, got {s!r}") from None
        if not math.isfinite(v):
            raise ValueError(f"must be finite, got {s!r}")
        if lo is not None and (v <= lo if lo_open else v < lo):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}, got {v}")
        if hi is not None and (v >= hi if hi_open else v > hi):
            raise ValueError(f"must be {'<' if hi_open else '<='} {hi}, got {v}")
        return v
    return parse


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        v = s.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {s!r}")
        return v
    return parse


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _list(item: Callable[[str], Any], *, nonempty: bool = True) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        parts = [p.strip() for p in s.split(",") if p.strip()]
        if nonempty and not parts:
            raise ValueError("expected a non-empty comma-separated list")
        return tuple(item(p) for p in parts)
    return parse


def _str(s: str) -> str:
    if not s.strip():
        raise ValueError("must not be empty")
    return s.strip()


_norm = _choice("one", "two", "inf")

SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "model": {
        "length": (_int(1), 16),
        "dim": (_int(1), 32),
        "image_dim": (_int(1), 24),
        "feature_dim": (_int(1), 48),
        "classes": (_int(2), 8),
        "shots": (_int(1), 8),
        "test_per_class": (_int(1), 32),
        "noise": (_float(0.0), 0.3),
        "task_seed": (_int(0), 0),
        "encoder_seed": (_int(0), 0),
        "temperature": (_float(0.0, lo_open=True), 0.07),
    },
    "train": {
        "seed": (_int(0), 0),
        "epochs": (_int(1), 200),
        "batch_size": (_int(1), 16),
        "lr": (_float(0.0), 0.01),
        "optimizer": (_choice("sgd", "momentum"), "momentum"),
        "momentum": (_float(0.0, 1.0, hi_open=True), 0.9),
        "init_std": (_float(0.0), 0.02),
        "mode": (_choice("ce", "pun", "pan", "both"), "ce"),
        "beta": (_float(0.0, 1.0), 0.5),
        "omega_schedule": (_bool, False),
        "schedule_k": (_float(0.0, lo_open=True), 0.2),
    },
    "pun": {
        "omega": (_float(0.0), 1.0),
        "norm": (_norm, "two"),
    },
    "pan": {
        "omega": (_float(0.0), 1.0),
        "tau": (_float(0.0, 1.0, lo_open=True, hi_open=True), 0.5),
        "n": (_int(1), 1),
        "norm": (_norm, "two"),
    },
    "sweep": {
        "arms": (_list(_choice("replace", "rescale")), ("replace", "rescale")),
        "variances": (_list(_float(0.0)), DEFAULT_VARIANCES),
        "factors": (_list(_float()), DEFAULT_FACTORS),
        "mean": (_float(), 0.0),
        "seeds": (_list(_int(0)), (0, 1, 2, 3, 4)),
    },
    "io": {
        "out_dir": (_str, "out"),
        "workers": (_int(1), 1),
    },
}


@dataclass(frozen=True)
class RunSettings:
    train: TrainConfig
    sweep_grids: tuple[SweepGrid, ...]
    sweep_seeds: tuple[int, ...]
    out_dir: str
    workers: int
    values: dict = field(default_factory=dict, compare=False)


def defaults() -> dict[str, dict[str, Any]]:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines: dict[tuple[str, str], int] = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            lines[(section, "")] = n
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip()), n)
    return lines


def parse_config(text: str, source: str = "<config>",
                 overrides: Iterable[str] = ()) -> RunSettings:
    """Parse a config document, then apply ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   default_section="__defaults__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(source, exc.lineno, exc.section, exc.option, "duplicate key") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(source, exc.lineno, exc.section, None, "duplicate section") from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(source, exc.lineno, "?", None, "key outside any section") from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(source, line, "?", None, "malformed line") from None

    lines = _key_lines(text)
    values = defaults()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(source, lines.get((section, "")), section, None,
                              f"unknown section; expected one of {', '.join(SCHEMA)}")
        for key, raw in cp.items(section):
            values[section][key] = _convert(source, lines.get((section, key)), section, key, raw)

    for item in overrides:
        target, sep, raw = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot:
            raise ConfigError("<command line>", None, section or "?", key or None,
                              f"override {item!r} must look like section.key=value")
        if section not in SCHEMA:
            raise ConfigError("<command line>", None, section, None, "unknown section")
        values[section][key] = _convert("<command line>", None, section, key, raw)

    return _settings(values, source, lines)


def _convert(source: str, line: int | None, section: str, key: str, raw: str) -> Any:
    spec = SCHEMA[section].get(key)
    if spec is None:
        raise ConfigError(source, line, section, key,
                          f"unknown key; expected one of {', '.join(SCHEMA[section])}")
    try:
        return spec[0](raw)
    except ValueError as exc:
        raise ConfigError(source, line, section, key, str(exc)) from None


def _settings(v: dict, source: str, lines: dict) -> RunSettings:
    m, t, s = v["model"], v["train"], v["sweep"]
    if v["pan"]["n"] > m["length"]:
        raise ConfigError(source, lines.get(("pan", "n")), "pan", "n",
                          f"must be <= model.length ({m['length']}), got {v['pan']['n']}")
    model = ModelConfig(**m)
    train = TrainConfig(
        model=model, seed=t["seed"], epochs=t["epochs"], batch_size=t["batch_size"],
        lr=t["lr"], optimizer=t["optimizer"], momentum=t["momentum"], init_std=t["init_std"],
        mode=t["mode"],
        pun=PUNConfig(v["pun"]["omega"], v["pun"]["norm"]),
        pan=PANConfig(v["pan"]["omega"], v["pan"]["tau"], v["pan"]["n"], v["pan"]["norm"]),
        schedule=OmegaSchedule(t["schedule_k"], t["epochs"], t["omega_schedule"]),
        beta=BetaMix(t["beta"]),
    )
    grids = []
    for arm in dict.fromkeys(s["arms"]):
        params = s["variances"] if arm == "replace" else s["factors"]
        grids.append(SweepGrid(arm, tuple(params), s["mean"]))
    return RunSettings(train, tuple(grids), tuple(s["seeds"]), v["io"]["out_dir"],
                       v["io"]["workers"], values=v)


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> RunSettings:
    if path is None:
        return parse_config("", "<defaults>", overrides)
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(str(p), None, "io", None, "config file not found") from None
    return parse_config(text, str(p), overrides)
