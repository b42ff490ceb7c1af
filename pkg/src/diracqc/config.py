"""Run configuration: YAML in, validated dataclasses out, canonical YAML echo back."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import yaml

from .constraints import ConstraintSet, constraint_gallery
from .errors import ConfigError
from .propagator import IntegratorConfig
from .quantum import DiabaticModel, model_gallery


@dataclass(frozen=True)
class GallerySpec:
    name: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Constants:
    hbar: float = 1.0
    beta: float = 1.0


@dataclass(frozen=True)
class TimeGrid:
    stop: float = 1.0
    every: float = 0.1

    def times(self) -> np.ndarray:
        n = int(round(self.stop / self.every))
        return np.round(np.arange(n + 1) * self.every, 12)


@dataclass(frozen=True)
class EnsembleSpec:
    size: int = 256
    pair: Optional[list] = None      # None: diagonal pair from the sampled surface
    hopping: bool = True


@dataclass(frozen=True)
class SamplerSpec:
    chains: int = 32
    burn_in: int = 200
    thin: int = 5
    step: float = 0.5
    xi_width: float = 1e-3


@dataclass(frozen=True)
class PropagateSpec:
    times: TimeGrid = TimeGrid()
    observable: str = "population"


@dataclass(frozen=True)
class SampleSpec:
    count: int = 2000
    fredholm: bool = True


@dataclass(frozen=True)
class RespondSpec:
    times: TimeGrid = TimeGrid()
    samples: int = 500
    A: dict = field(default_factory=lambda: {"kind": "position", "coord": 0})
    B: str = "identity"
    force: dict = field(default_factory=lambda: {"kind": "zero"})
    include_rho1: bool = True


@dataclass(frozen=True)
class CheckSpec:
    points: int = 20
    fredholm_samples: int = 2000
    corrupt_gradient: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: GallerySpec = GallerySpec("two-level-linear", {"coupling": 0.5, "delta": 0.5})
    constraints: GallerySpec = GallerySpec("dimer-bond", {})
    constants: Constants = Constants()
    integrator: IntegratorConfig = IntegratorConfig()
    ensemble: EnsembleSpec = EnsembleSpec()
    sampler: SamplerSpec = SamplerSpec()
    propagate: PropagateSpec = PropagateSpec()
    sample: SampleSpec = SampleSpec()
    respond: RespondSpec = RespondSpec()
    check: CheckSpec = CheckSpec()
    seed: int = 0
    threads: int = 1
    out: str = "out"

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    def build(self) -> tuple[ConstraintSet, DiabaticModel]:
        """Constraint set and quantum model named by the config."""
        try:
            cset = constraint_gallery(self.constraints.name, **self.constraints.params)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "constraints") from exc
        try:
            model = model_gallery(self.model.name, cset.N, **self.model.params)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "model") from exc
        return cset, model


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


# ------------------------------------------------------------ parsing


def _line_index(node, prefix="", out=None):
    """Map dotted key paths to 1-based source lines."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _line_index(v, path, out)
    return out


_NESTED = {
    "model": GallerySpec, "constraints": GallerySpec, "constants": Constants, "integrator": IntegratorConfig,
    "ensemble": EnsembleSpec, "sampler": SamplerSpec, "propagate": PropagateSpec, "sample": SampleSpec,
    "respond": RespondSpec, "check": CheckSpec,
}
_GRIDS = {"propagate.times", "respond.times"}
_FREE = {"model.params", "constraints.params", "respond.A", "respond.force"}


def _coerce(value, default, path, lines):
    """Check a scalar against the type of its default value."""
    line = lines.get(path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path, line)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path, line)
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path, line)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path, line)
        return value
    return value


def _build(cls, data, path, lines):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", path, lines.get(path))
    proto = cls() if cls is not GallerySpec else GallerySpec("", {})
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(f"unknown key '{key}'", sub, lines.get(sub))
        default = getattr(proto, key)
        if sub in _GRIDS:
            kwargs[key] = _build(TimeGrid, value, sub, lines)
        elif sub in _FREE:
            if not isinstance(value, dict):
                raise ConfigError("expected a mapping", sub, lines.get(sub))
            kwargs[key] = value
        elif not path and key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, sub, lines)
        elif key == "pair":
            if value is not None and not (isinstance(value, list) and len(value) == 2
                                          and all(isinstance(v, int) for v in value)):
                raise ConfigError("pair must be null or two integers", sub, lines.get(sub))
            kwargs[key] = value
        elif default is None:
            kwargs[key] = value
        else:
            kwargs[key] = _coerce(value, default, sub, lines)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), path or None, lines.get(path)) from exc


def parse_config(text: str) -> RunConfig:
    """Parse YAML text into a validated :class:`RunConfig`."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", None,
                          None if mark is None else mark.line + 1) from exc
    lines = _line_index(node) if node is not None else {}
    cfg = _build(RunConfig, data or {}, "", lines)
    _validate(cfg, lines)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc


def _validate(cfg: RunConfig, lines):
    def bad(msg, path):
        raise ConfigError(msg, path, lines.get(path))

    if not (cfg.constants.hbar > 0):
        bad("hbar must be positive", "constants.hbar")
    if not (cfg.constants.beta > 0):
        bad("beta must be positive", "constants.beta")
    if not 0 <= cfg.seed < 2**64:
        bad("seed must fit in an unsigned 64-bit integer", "seed")
    if cfg.threads < 1:
        bad("threads must be >= 1", "threads")
    if cfg.ensemble.size < 1:
        bad("ensemble size must be positive", "ensemble.size")
    for name in ("propagate", "respond"):
        g = getattr(cfg, name).times
        if not (g.every > 0 and g.stop >= 0):
            bad("time grid needs every > 0 and stop >= 0", f"{name}.times")
        ratio = g.every / cfg.integrator.dt
        if abs(ratio - round(ratio)) > 1e-9 * ratio or abs(g.stop / g.every - round(g.stop / g.every)) > 1e-9:
            bad("time grid spacing must be a multiple of dt and divide stop", f"{name}.times")
    if cfg.respond.force.get("kind", "zero") not in ("zero", "step", "impulse", "cosine"):
        bad("force kind must be zero, step, impulse or cosine", "respond.force")
    if cfg.respond.A.get("kind", "position") not in ("position", "momentum", "coupling"):
        bad("A kind must be position, momentum or coupling", "respond.A")


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    """Copy with top-level fields replaced (None values are ignored)."""
    from dataclasses import replace

    kw = {k: v for k, v in kw.items() if v is not None}
    out = replace(cfg, **kw)
    _validate(out, {})
    return out
