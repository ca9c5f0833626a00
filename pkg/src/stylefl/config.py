"""Experiment specs: TOML (or JSON) files resolved against documented defaults.

Layout::

    seed = 0                 # required; or `seeds = [0, 1, 2]`
    out = "runs/demo"        # output directory
    methods = ["full", "uniform_average"]   # used by `compare`

    [federation]             # any FederationConfig field
    rounds = 40

    [scenario]               # any ScenarioConfig field
    classes = 8

    [output]
    dump_embeddings = false
    dump_attention = false

Unknown keys and ill-typed values are rejected with a :class:`ConfigError`
that names the offending field.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .federation import METHODS, FederationConfig, ScenarioConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

# keys that live at the top level of the spec rather than in a section
_TOP_LEVEL = {"seed", "seeds", "out", "methods", "federation", "scenario", "output"}
# `seed` is supplied at the top level, never inside [federation]
_FEDERATION_RESERVED = {"seed"}


@dataclass(frozen=True)
class OutputOptions:
    dump_embeddings: bool = False
    dump_attention: bool = False


@dataclass(frozen=True)
class ExperimentSpec:
    federation: FederationConfig
    scenario: ScenarioConfig
    seeds: tuple[int, ...]
    out_dir: Path
    methods: tuple[str, ...] = ()
    output: OutputOptions = OutputOptions()

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def for_seed(self, seed: int, method: str | None = None) -> FederationConfig:
        cfg = replace(self.federation, seed=seed)
        return replace(cfg, method=method) if method else cfg

    def resolved(self) -> dict[str, Any]:
        """Every field with its effective value, for provenance."""
        fed = dataclasses.asdict(self.federation)
        fed.pop("seed")
        return {
            "seeds": list(self.seeds),
            "out": str(self.out_dir),
            "methods": list(self.methods),
            "federation": fed,
            "scenario": dataclasses.asdict(self.scenario),
            "output": dataclasses.asdict(self.output),
        }


def _coerce(section: str, name: str, value: Any, default: Any, annotation: str) -> Any:
    where = f"{section}.{name}" if section else name
    if isinstance(default, bool) or annotation == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}", field=where)
        return value
    if isinstance(default, tuple) or annotation.startswith("tuple"):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a list of integers, got {value!r}", field=where)
        return tuple(value)
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(f"{where} may not be null", field=where)
    if "int" in annotation and "float" not in annotation:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where} must be an integer, got {value!r}", field=where)
        return value
    if "float" in annotation:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where} must be a number, got {value!r}", field=where)
        return float(value)
    if "str" in annotation:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}", field=where)
        return value
    return value


def _build(cls, section: str, raw: Any, reserved: set[str] = frozenset()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table", field=section)
    known = {f.name: f for f in fields(cls)}
    values = {}
    for key, value in raw.items():
        if key not in known or key in reserved:
            raise ConfigError(f"unknown field {section}.{key}", field=f"{section}.{key}")
        f = known[key]
        values[key] = _coerce(section, key, value, f.default, str(f.type))
    return cls(**values)


def parse_spec(raw: dict[str, Any], out_override: str | Path | None = None, seed_override: int | None = None) -> ExperimentSpec:
    unknown = sorted(set(raw) - _TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown field {unknown[0]}", field=unknown[0])
    if seed_override is not None:
        seeds: tuple[int, ...] = (seed_override,)
    elif "seeds" in raw:
        seeds = _coerce("", "seeds", raw["seeds"], (), "tuple")
        if not seeds:
            raise ConfigError("seeds must not be empty", field="seeds")
    elif "seed" in raw:
        seeds = (_coerce("", "seed", raw["seed"], 0, "int"),)
    else:
        raise ConfigError("seed is required (set `seed` or `seeds`, or pass --seed)", field="seed")
    if any(s < 0 for s in seeds):
        raise ConfigError("seeds must be non-negative", field="seed")

    federation = _build(FederationConfig, "federation", raw.get("federation"), _FEDERATION_RESERVED)
    federation = replace(federation, seed=seeds[0])
    federation.validate()
    scenario = _build(ScenarioConfig, "scenario", raw.get("scenario"))
    _validate_scenario(scenario)
    output = _build(OutputOptions, "output", raw.get("output"))

    methods = raw.get("methods", [])
    if not isinstance(methods, list) or not all(isinstance(m, str) for m in methods):
        raise ConfigError("methods must be a list of strings", field="methods")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}", field="methods")

    out = out_override if out_override is not None else raw.get("out", "runs/default")
    if not isinstance(out, (str, Path)):
        raise ConfigError("out must be a path string", field="out")
    return ExperimentSpec(federation, scenario, seeds, Path(out), tuple(methods), output)


def _validate_scenario(s: ScenarioConfig) -> None:
    checks = [
        (s.classes >= 2, "classes", "must be >= 2"),
        (s.input_dim >= 1, "input_dim", "must be >= 1"),
        (s.per_class >= 2, "per_class", "must be >= 2"),
        (s.separation > 0, "separation", "must be > 0"),
        (s.scale_spread >= 0, "scale_spread", "must be >= 0"),
        (s.offset_std >= 0, "offset_std", "must be >= 0"),
        (s.style_noise >= 0, "style_noise", "must be >= 0"),
        (0 < s.test_fraction < 1, "test_fraction", "must lie in (0, 1)"),
    ]
    for ok, name, msg in checks:
        if not ok:
            raise ConfigError(f"scenario.{name} {msg}", field=f"scenario.{name}")


def load_spec(path: str | Path, out_override=None, seed_override=None) -> ExperimentSpec:
    """Read a ``.toml`` or ``.json`` spec file."""
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc.strerror}", field="spec") from exc
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse spec {path}: {exc}", field="spec") from exc
    if not isinstance(raw, dict):
        raise ConfigError("spec must be a table at the top level", field="spec")
    return parse_spec(raw, out_override, seed_override)
