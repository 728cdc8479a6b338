"""Experiment configuration: TOML files with environment overrides.

Environment variables ``DNFLOW_<SECTION>_<KEY>`` override ``[section] key``
(keys match case-insensitively); ``DNFLOW_SEED``, ``DNFLOW_OUT`` and
``DNFLOW_THREADS`` override top-level keys.  Values are parsed as TOML
literals, falling back to plain strings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .diagnostics import Profile
from .discretization import Grid, VectorField, read_snapshot
from .potentials import integrand_preset, potential_preset
from .scheme import SchemeConfig, sine_mode

__all__ = [
    "ConfigError",
    "GridSpec",
    "ConvexSpec",
    "InitialSpec",
    "DiagnosticsSpec",
    "ExperimentConfig",
    "load_config",
    "preset_names",
    "PRESET_DIR",
]

PRESET_DIR = Path(__file__).parent / "presets"
ENV_PREFIX = "DNFLOW_"


class ConfigError(ValueError):
    pass


@dataclass
class GridSpec:
    n: int = 1
    m: int = 1
    extents: List[float] = field(default_factory=lambda: [1.0])
    cells: List[int] = field(default_factory=lambda: [64])
    origin: Optional[List[float]] = None

    def build(self) -> Grid:
        if self.n not in (1, 2):
            raise ConfigError("grid.n must be 1 or 2")
        ext = self.extents if len(self.extents) == self.n else self.extents[:1] * self.n
        cells = self.cells if len(self.cells) == self.n else self.cells[:1] * self.n
        return Grid(tuple(ext), tuple(cells), None if self.origin is None else tuple(self.origin))


@dataclass
class ConvexSpec:
    key: str = "quadratic"
    constants: Optional[List[float]] = None


@dataclass
class InitialSpec:
    """kind: zero | eigenmode | bump | random | file."""

    kind: str = "eigenmode"
    modes: List[List[int]] = field(default_factory=lambda: [[1]])
    amplitudes: List[float] = field(default_factory=lambda: [1.0])
    components: Optional[List[float]] = None
    radius: float = 0.4
    path: str = ""


@dataclass
class DiagnosticsSpec:
    cutoff: str = "tent"
    plateau: float = 0.0
    collar: float = 0.0
    cylinders: List[List[float]] = field(default_factory=list)  # [x..., t, r]
    decay_theta: float = 0.5
    radii: List[float] = field(default_factory=list)
    fit_center: List[float] = field(default_factory=list)  # [x..., t]
    offsets: List[int] = field(default_factory=lambda: [1, 2, 4, 8])  # multiples of tau
    frac_window: List[List[float]] = field(default_factory=list)  # [lo..., hi...]
    frac_times: List[float] = field(default_factory=list)  # [t0, t1]
    p: Optional[float] = None
    fit_margin: float = 0.1
    bad_radius: float = 0.1
    bad_threshold: float = 1e-3
    bad_stride: int = 1
    beta: Optional[float] = None
    s_values: List[float] = field(default_factory=lambda: [2.0, 3.0])
    rescale: List[float] = field(default_factory=list)  # [x..., t, r]
    plots: bool = True


@dataclass
class ExperimentConfig:
    name: str = "custom"
    seed: int = 0
    threads: Optional[int] = None
    out: Optional[str] = None
    grid: GridSpec = field(default_factory=GridSpec)
    potential: ConvexSpec = field(default_factory=ConvexSpec)
    integrand: ConvexSpec = field(default_factory=ConvexSpec)
    initial: InitialSpec = field(default_factory=InitialSpec)
    scheme: dict = field(default_factory=lambda: {"T": 0.1, "N": 100})
    diagnostics: DiagnosticsSpec = field(default_factory=DiagnosticsSpec)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: Path = Path(".")) -> "ExperimentConfig":
        data = dict(data)
        sections = {
            "grid": GridSpec, "potential": ConvexSpec, "integrand": ConvexSpec,
            "initial": InitialSpec, "diagnostics": DiagnosticsSpec,
        }
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                kwargs[key] = _build(sections[key], value, key)
            elif key == "scheme":
                if not isinstance(value, Mapping):
                    raise ConfigError("[scheme] must be a table")
                kwargs[key] = dict(value)
            elif key in ("name", "seed", "threads", "out"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown top-level key {key!r}")
        cfg = cls(**kwargs, base_dir=base_dir)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return {k: v for k, v in d.items() if v is not None}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def apply_env(self, environ: Mapping[str, str]) -> "ExperimentConfig":
        data = self.to_dict()
        for var in sorted(environ):
            if not var.startswith(ENV_PREFIX):
                continue
            rest = var[len(ENV_PREFIX):].lower()
            value = _parse_literal(environ[var])
            if rest in ("seed", "out", "threads", "name"):
                data[rest] = value
                continue
            section, _, key = rest.partition("_")
            if section not in ("grid", "potential", "integrand", "initial", "scheme", "diagnostics"):
                raise ConfigError(f"{var}: unknown section {section!r}")
            table = data.setdefault(section, {})
            names = list(table) + _field_names(section)
            match = [nm for nm in names if nm.lower() == key]
            if not match:
                raise ConfigError(f"{var}: unknown key {key!r} in [{section}]")
            table[match[0]] = value
        return ExperimentConfig.from_dict(data, self.base_dir)

    def validate(self) -> None:
        try:
            grid = self.grid.build()
        except ValueError as exc:
            raise ConfigError(f"[grid]: {exc}") from exc
        if self.initial.kind not in ("zero", "eigenmode", "bump", "random", "file"):
            raise ConfigError(f"unknown initial datum kind {self.initial.kind!r}")
        if self.initial.kind == "file" and not self.initial_path().is_file():
            raise ConfigError(f"initial datum file {self.initial_path()} not found")
        if self.initial.kind == "eigenmode":
            if len(self.initial.modes) != len(self.initial.amplitudes):
                raise ConfigError("initial.modes and initial.amplitudes differ in length")
            if any(len(mo) != grid.n for mo in self.initial.modes):
                raise ConfigError("each eigenmode needs one index per axis")
        if self.initial.components is not None and len(self.initial.components) != self.grid.m:
            raise ConfigError("initial.components needs one weight per component")
        for row in self.diagnostics.cylinders:
            if len(row) != grid.n + 2:
                raise ConfigError("each cylinder is [x..., t, r]")
        try:
            self.scheme_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[scheme]: {exc}") from exc
        for spec, kind in ((self.potential, "potential"), (self.integrand, "integrand")):
            head = spec.key.split(":")[0]
            if head not in ("quadratic", "scaled", "perturbed"):
                raise ConfigError(f"unknown {kind} preset {spec.key!r}")

    # -- builders ---------------------------------------------------------

    def initial_path(self) -> Path:
        p = Path(self.initial.path)
        return p if p.is_absolute() else self.base_dir / p

    def build_grid(self) -> Grid:
        return self.grid.build()

    def scheme_config(self) -> SchemeConfig:
        return SchemeConfig(**self.scheme)

    def build_potential(self):
        c = self.potential.constants
        return potential_preset(self.potential.key, self.grid.m, None if c is None else tuple(c))

    def build_integrand(self):
        c = self.integrand.constants
        return integrand_preset(self.integrand.key, self.grid.m, self.grid.n,
                                None if c is None else tuple(c))

    def build_initial(self, grid: Optional[Grid] = None) -> VectorField:
        grid = grid or self.build_grid()
        spec = self.initial
        m = self.grid.m
        if spec.kind == "file":
            f = read_snapshot(self.initial_path(), grid)
            if f.m != m:
                raise ConfigError("initial datum file has the wrong number of components")
            return f
        if spec.kind == "zero":
            base = np.zeros(grid.interior_shape)
        elif spec.kind == "eigenmode":
            base = sum(a * sine_mode(grid, mo) for mo, a in zip(spec.modes, spec.amplitudes))
        elif spec.kind == "bump":
            c = [o + 0.5 * e for o, e in zip(grid.origin, grid.extents)]
            R = spec.radius * min(grid.extents)
            base = spec.amplitudes[0] * Profile("bump", c, 0.0, R).evaluate(grid.node_coords())[0]
        else:
            rng = np.random.default_rng(self.seed)
            vals = spec.amplitudes[0] * rng.standard_normal(grid.interior_shape + (m,))
            return VectorField(grid, vals)
        weights = np.ones(m) if spec.components is None else np.asarray(spec.components, float)
        return VectorField(grid, base[..., None] * weights)


def _field_names(section: str) -> list:
    cls = {"grid": GridSpec, "potential": ConvexSpec, "integrand": ConvexSpec,
           "initial": InitialSpec, "diagnostics": DiagnosticsSpec}.get(section)
    if cls is None:
        return [f.name for f in dataclasses.fields(SchemeConfig)]
    return [f.name for f in dataclasses.fields(cls)]


def _build(cls, value, section):
    if not isinstance(value, Mapping):
        raise ConfigError(f"[{section}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")
    return cls(**value)


def _parse_literal(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def preset_names() -> list:
    return sorted(p.stem for p in PRESET_DIR.glob("*.toml"))


def load_config(source, environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Load a config from a TOML path or a shipped preset name."""
    path = Path(source)
    if not path.is_file():
        candidate = PRESET_DIR / f"{source}.toml"
        if not candidate.is_file():
            raise ConfigError(f"no config file or preset named {source!r} "
                              f"(presets: {', '.join(preset_names())})")
        path = candidate
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    data.setdefault("name", path.stem)
    cfg = ExperimentConfig.from_dict(data, path.parent)
    env = os.environ if environ is None else environ
    return cfg.apply_env(env)
