"""File-backed run configuration (TOML) with dotted-path overrides."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import tomli

from .atlas import Discretization, GeometryError, SurfaceSpec, check_layout
from .flow import Bump, EndPerturbation, FlowConfig


class ConfigError(ValueError):
    """Configuration that fails to parse or validate; carries a field path and line."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path:
            where += f"[{path}] "
        if line:
            where += f"(line {line}) "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class InitialBlock:
    base: str = "kappa"
    end_amplitude: tuple[float, ...] = ()
    end_k: tuple[int, ...] = ()
    bumps: tuple[Bump, ...] = ()

    def end_perturbations(self, n_ends: int):
        out = []
        for j in range(n_ends):
            a = self.end_amplitude[j] if j < len(self.end_amplitude) else 0.0
            k = self.end_k[j] if j < len(self.end_k) else 1
            out.append(EndPerturbation(float(a), int(k)))
        return out


@dataclass(frozen=True)
class OutputBlock:
    directory: str = "runs/default"
    formats: tuple[str, ...] = ("csv", "json", "svg", "checkpoint")
    field_dump: bool = False


@dataclass(frozen=True)
class RunConfig:
    surface: SurfaceSpec
    discretization: Discretization
    initial: InitialBlock
    flow: FlowConfig
    output: OutputBlock
    source: str = field(default="", compare=False)

    def to_dict(self) -> dict:
        init = asdict(self.initial)
        init["bumps"] = [asdict(b) for b in self.initial.bumps]
        return {
            "surface": asdict(self.surface),
            "discretization": asdict(self.discretization),
            "initial": init,
            "flow": asdict(self.flow),
            "output": asdict(self.output),
        }


FORMATS = ("csv", "json", "svg", "checkpoint")
BASES = ("kappa", "uniformized")


def default_config_text() -> str:
    return resources.files("cuspflow").joinpath("default.toml").read_text()


def _locate(text: str, path: str) -> int | None:
    """Line number of ``key = ...`` for a dotted path, if present in the text."""
    parts = path.split(".")
    table, key = ".".join(parts[:-1]), parts[-1]
    current = ""
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[\[?\s*([A-Za-z0-9_.]+)\s*\]\]?", line)
        if m:
            current = m.group(1)
            if current == path:
                return i
            continue
        if current == table and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return i
    return None


def parse_override(item: str) -> tuple[str, Any]:
    """``key.path=value`` with the value read as a TOML literal (bare strings allowed)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not re.fullmatch(r"[A-Za-z0-9_]+(\.[A-Za-z0-9_]+)+", key):
        raise ConfigError(f"override key {key!r} must be a dotted path like flow.rho")
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return key, value


def apply_override(data: dict, key: str, value) -> None:
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError("cannot override inside a non-table value", key)
    node[parts[-1]] = value


_SCHEMA = {
    "surface": {"punctures", "sigma", "mu"},
    "discretization": {f.name for f in fields(Discretization)},
    "initial": {"base", "end_amplitude", "end_k", "bumps"},
    "flow": {f.name for f in fields(FlowConfig)},
    "output": {"directory", "formats", "field_dump", "cadence"},
}


def _num(v, path, text, kind=float):
    line = _locate(text, path)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}", path, line)
    if kind is int:
        if isinstance(v, float) and not v.is_integer():
            raise ConfigError(f"expected an integer, got {v!r}", path, line)
        return int(v)
    if not np.isfinite(v):
        raise ConfigError("value must be finite", path, line)
    return float(v)


def build_config(data: dict, text: str = "") -> RunConfig:
    """Validate a parsed TOML document and assemble a :class:`RunConfig`.

    Every range is checked against the module invariants before any grid is
    allocated.
    """
    for section, keys in data.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section {section!r}", section, _locate(text, section))
        if not isinstance(keys, dict):
            raise ConfigError("section must be a table", section)
        for k in keys:
            if k not in _SCHEMA[section]:
                p = f"{section}.{k}"
                raise ConfigError(f"unknown key {k!r}", p, _locate(text, p))

    s = data.get("surface", {})
    if "punctures" not in s or "sigma" not in s:
        raise ConfigError("surface needs punctures and sigma", "surface")
    try:
        pts = tuple(
            (_num(p[0], "surface.punctures", text), _num(p[1], "surface.punctures", text))
            for p in s["punctures"]
        )
        sig = tuple(_num(x, "surface.sigma", text) for x in s["sigma"])
    except (TypeError, IndexError) as exc:
        raise ConfigError(f"malformed list: {exc}", "surface") from exc
    mu = _num(s.get("mu", 2.0), "surface.mu", text)
    try:
        spec = SurfaceSpec(pts, sig, mu)
    except GeometryError as exc:
        key = "surface.mu" if "mu" in str(exc) else "surface.sigma" if "sigma" in str(exc) else "surface.punctures"
        raise ConfigError(str(exc), key, _locate(text, key)) from exc

    d = dict(data.get("discretization", {}))
    kw = {}
    for f in fields(Discretization):
        if f.name in d:
            p = f"discretization.{f.name}"
            kind = int if f.name in ("n_core", "n_s", "n_theta") else float
            kw[f.name] = _num(d[f.name], p, text, kind)
    disc = Discretization(**kw)
    _check_discretization(spec, disc, text)

    ini = data.get("initial", {})
    base = ini.get("base", "kappa")
    if base not in BASES:
        raise ConfigError(f"base must be one of {BASES}", "initial.base", _locate(text, "initial.base"))
    amps = tuple(_num(a, "initial.end_amplitude", text) for a in ini.get("end_amplitude", []))
    ks = tuple(_num(k, "initial.end_k", text, int) for k in ini.get("end_k", []))
    if len(amps) > spec.n_ends or len(ks) > spec.n_ends:
        raise ConfigError("more end perturbations than punctures", "initial.end_amplitude",
                          _locate(text, "initial.end_amplitude"))
    if any(k < 1 or k >= disc.n_theta // 2 for k in ks):
        raise ConfigError("end wavenumbers must satisfy 1 <= k < n_theta/2", "initial.end_k",
                          _locate(text, "initial.end_k"))
    bumps = []
    for i, b in enumerate(ini.get("bumps", [])):
        p = f"initial.bumps[{i}]"
        try:
            c = (_num(b["center"][0], p, text), _num(b["center"][1], p, text))
            r = _num(b["radius"], p, text)
            a = _num(b["amplitude"], p, text)
        except (KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"bump needs center, radius, amplitude ({exc})", p) from exc
        if not 0 < r <= 0.5:
            raise ConfigError("bump radius must lie in (0, 0.5]", p)
        if not a > -1:
            raise ConfigError("bump amplitude must exceed -1 to keep u positive", p)
        bumps.append(Bump(c, r, a))
    initial = InitialBlock(base, amps, ks, tuple(bumps))

    fl = dict(data.get("flow", {}))
    out = data.get("output", {})
    if "cadence" in out:
        # record cadence lives in the output block; it feeds FlowConfig.cadence
        fl["cadence"] = out["cadence"]
    fkw = {}
    for f in fields(FlowConfig):
        if f.name not in fl:
            continue
        v = fl[f.name]
        p = f"flow.{f.name}"
        if f.name in ("rho_mode", "end_bc"):
            if not isinstance(v, str):
                raise ConfigError("expected a string", p, _locate(text, p))
            fkw[f.name] = v
        elif f.name in ("adaptive", "extrapolate", "co_evolve", "short_time"):
            if not isinstance(v, bool):
                raise ConfigError("expected true or false", p, _locate(text, p))
            fkw[f.name] = v
        elif f.name in ("newton_maxit", "cadence"):
            if f.name == "cadence" and "cadence" in out:
                p = "output.cadence"
            fkw[f.name] = _num(v, p, text, int)
        else:
            fkw[f.name] = _num(v, p, text)
    try:
        flow = FlowConfig(**fkw)
    except ValueError as exc:
        raise ConfigError(str(exc), "flow", _locate(text, "flow")) from exc

    formats = tuple(out.get("formats", OutputBlock.formats))
    bad = [x for x in formats if x not in FORMATS]
    if bad:
        raise ConfigError(f"unknown output formats {bad}", "output.formats",
                          _locate(text, "output.formats"))
    directory = out.get("directory", OutputBlock.directory)
    if not isinstance(directory, str) or not directory:
        raise ConfigError("directory must be a non-empty string", "output.directory")
    dump = out.get("field_dump", False)
    if not isinstance(dump, bool):
        raise ConfigError("expected true or false", "output.field_dump")
    output = OutputBlock(directory, formats, dump)
    return RunConfig(spec, disc, initial, flow, output, text)


def _check_discretization(spec: SurfaceSpec, disc: Discretization, text: str) -> None:
    def fail(msg, key):
        p = f"discretization.{key}"
        raise ConfigError(msg, p, _locate(text, p))

    if disc.n_core < 16:
        fail("n_core must be at least 16", "n_core")
    if disc.n_s < 8:
        fail("n_s must be at least 8", "n_s")
    nt = disc.n_theta
    if nt < 4 or nt & (nt - 1):
        fail("n_theta must be a power of two >= 4", "n_theta")
    if not 0 <= disc.s_lo < disc.s_hi:
        fail("need 0 <= s_lo < s_hi", "s_lo")
    try:
        check_layout(spec, disc)
    except GeometryError as exc:
        key = "surface.punctures" if "overlap:" in str(exc) else "discretization"
        raise ConfigError(str(exc), key, _locate(text, key)) from exc


def load_config(path: str | Path | None = None, overrides=()) -> RunConfig:
    """Read, override and validate a configuration; ``None`` loads the shipped default."""
    if path is None:
        text = default_config_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}", line=getattr(exc, "lineno", None)) from exc
    for item in overrides:
        apply_override(data, *parse_override(item))
    return build_config(data, text)


def output_directory(cfg: RunConfig, env: dict | None = None) -> Path:
    """Resolve the output directory; relative paths sit under ``$CUSPFLOW_OUTPUT_ROOT`` if set."""
    import os

    env = os.environ if env is None else env
    p = Path(cfg.output.directory)
    root = env.get("CUSPFLOW_OUTPUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p
