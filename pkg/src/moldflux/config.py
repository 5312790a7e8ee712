"""YAML run configuration with strict section and key checking.

Every section is optional except where a command needs it; unknown
sections or keys are rejected so that a typo cannot silently fall back to
a default.  Example::

    geometry: {L: 2.0, W: 0.1, H: 1.2}
    physics: {k_s: 383, rho: 8940, C_p: 390, h: 5.66e4, T_f: 350, T_0: 350}
    time: {t_f: 50, dt: 0.5, f_samp: 1}
    mesh: {ladder: 5}            # or {counts: [25, 6, 10]}
    sensors: {n_x: 10, n_z: 10, depth: 0.02, probe: cell}
    basis: {eta: 3.0, time_basis: linear}
    inverse: {p_g: 0.0, regularizer: LU}
    benchmark: {id: 1}
    seed: 0
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from . import __version__
from .benchmark import NOISE_LEVELS, NoiseSpec, SweepSpec, TruthFlux
from .errors import ConfigError, MoldFluxError
from .fvm import DEFAULT_PROBE_MODE, PROBE_MODES, PhysicalParams, TimeGrid
from .mesh import MESH_LADDER, Geometry, Mesh, build_structured_mesh, ladder_mesh
from .online import LU, TSVD, InverseConfig
from .rbf import LINEAR, TIME_BASES, SensorArray, uniform_sensor_grid


@dataclass
class MeshSection:
    ladder: int | None = None
    counts: list | None = None


@dataclass
class SensorSection:
    n_x: int = 10
    n_z: int = 10
    depth: float = 0.02
    points: list | None = None
    probe: str = DEFAULT_PROBE_MODE


@dataclass
class BasisSection:
    eta: float | None = None
    time_basis: str = LINEAR
    w0: list | None = None


@dataclass
class InverseSection:
    p_g: float = 0.0
    regularizer: str = LU
    alpha: int | None = None
    on_ill_conditioned: str = "warn"


@dataclass
class BenchmarkSection:
    id: int = 1
    a: float = 1100.0
    b: float = 1200.0
    c: float = 3000.0
    f_max: float = 0.1


@dataclass
class NoiseSection:
    omega: float = 0.0
    samples: int = 1


@dataclass
class DirectSection:
    flux: float | None = None   # uniform outward flux [W/m^2]; benchmark flux when null
    write_fields: bool = False


@dataclass
class SweepSection:
    meshes: list = field(default_factory=lambda: [5])
    dts: list = field(default_factory=lambda: [0.5])
    p_gs: list = field(default_factory=lambda: [0.0])
    bases: list = field(default_factory=lambda: [LINEAR])
    regularizers: list = field(default_factory=lambda: [[LU, None]])
    omegas: list = field(default_factory=lambda: list(NOISE_LEVELS))
    samples: int = 1
    same_grid_data: bool = False
    data_mesh: int | None = None
    data_dt: float | None = None


@dataclass
class SelectionSection:
    meshes: list = field(default_factory=lambda: [3, 4, 5])
    dts: list = field(default_factory=lambda: [0.1, 0.2, 0.25, 0.5])
    p_g0: float = 1e-7
    max_outer: int = 10
    data_mesh: int | None = None
    data_dt: float | None = None


@dataclass
class PathsSection:
    measurements: str | None = None
    offline_cache: str | None = None


_SECTIONS = {
    "geometry": Geometry,
    "physics": PhysicalParams,
    "time": TimeGrid,
    "mesh": MeshSection,
    "sensors": SensorSection,
    "basis": BasisSection,
    "inverse": InverseSection,
    "benchmark": BenchmarkSection,
    "noise": NoiseSection,
    "direct": DirectSection,
    "sweep": SweepSection,
    "selection": SelectionSection,
    "paths": PathsSection,
}
_SCALARS = {"seed"}


@dataclass
class RunConfig:
    geometry: Geometry = field(default_factory=Geometry)
    physics: PhysicalParams | None = None
    time: TimeGrid = field(default_factory=TimeGrid)
    mesh: MeshSection = field(default_factory=MeshSection)
    sensors: SensorSection = field(default_factory=SensorSection)
    basis: BasisSection = field(default_factory=BasisSection)
    inverse: InverseSection = field(default_factory=InverseSection)
    benchmark: BenchmarkSection | None = None
    noise: NoiseSection = field(default_factory=NoiseSection)
    direct: DirectSection = field(default_factory=DirectSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    # -- derived objects

    def require(self, *names) -> None:
        for n in names:
            if getattr(self, n) is None:
                raise ConfigError(f"missing required section '{n}'")

    def build_mesh(self) -> Mesh:
        m = self.mesh
        if (m.ladder is None) == (m.counts is None):
            raise ConfigError("mesh: give exactly one of 'ladder' or 'counts'")
        if m.ladder is not None:
            return ladder_mesh(int(m.ladder), self.geometry)
        if len(m.counts) != 3:
            raise ConfigError("mesh.counts must list nx, ny, nz")
        return build_structured_mesh(self.geometry, *m.counts, name="custom")

    def build_sensors(self) -> SensorArray:
        s = self.sensors
        if s.points is not None:
            return SensorArray(s.points)
        return uniform_sensor_grid(self.geometry, s.n_x, s.n_z, s.depth)

    def inverse_config(self) -> InverseConfig:
        i = self.inverse
        return InverseConfig(time_basis=self.basis.time_basis, p_g=i.p_g, regularizer=i.regularizer,
                             alpha=i.alpha, w0=self.basis.w0, on_ill_conditioned=i.on_ill_conditioned)

    def truth_flux(self) -> TruthFlux:
        self.require("benchmark", "physics")
        b = self.benchmark
        return TruthFlux(b.id, a=b.a, b=b.b, c=b.c, f_max=b.f_max, t_f=self.time.t_f, k_s=self.physics.k_s)

    def noise_spec(self, seed: int) -> NoiseSpec:
        return NoiseSpec(self.noise.omega, seed, self.noise.samples)

    def sweep_spec(self) -> SweepSpec:
        self.require("benchmark", "physics")
        s = self.sweep
        return SweepSpec(benchmark=self.benchmark.id, meshes=tuple(s.meshes), dts=tuple(s.dts),
                         p_gs=tuple(s.p_gs), bases=tuple(s.bases),
                         regularizers=tuple((r, a) for r, a in s.regularizers), omegas=tuple(s.omegas),
                         samples=s.samples, seed=self.seed, eta=self.basis.eta, t_f=self.time.t_f,
                         f_samp=self.time.f_samp, same_grid_data=s.same_grid_data, data_mesh=s.data_mesh,
                         data_dt=s.data_dt, geometry=self.geometry, params=self.physics,
                         sensor_grid=(self.sensors.n_x, self.sensors.n_z, self.sensors.depth),
                         probe_mode=self.sensors.probe)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    # -- identity

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            out[f.name] = asdict(v) if hasattr(v, "__dataclass_fields__") else v
        return out

    def fingerprint(self) -> str:
        text = json.dumps(self.as_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def header(self, command: str, extra: dict | None = None) -> str:
        lines = [f"moldflux {__version__}", f"command {command}", f"config_fingerprint {self.fingerprint()}",
                 f"seed {self.seed}"]
        for k, v in (extra or {}).items():
            lines.append(f"{k} {v}")
        return "\n".join(lines)


def _section(name, cls, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    try:
        return cls(**raw)
    except MoldFluxError as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def _validate(cfg: RunConfig) -> None:
    if cfg.sensors.probe not in PROBE_MODES:
        raise ConfigError(f"sensors.probe must be one of {PROBE_MODES}")
    if cfg.basis.time_basis not in TIME_BASES:
        raise ConfigError(f"basis.time_basis must be one of {TIME_BASES}")
    if cfg.inverse.regularizer not in (LU, TSVD):
        raise ConfigError(f"inverse.regularizer must be {LU} or {TSVD}")
    if cfg.inverse.on_ill_conditioned not in ("warn", "raise", "ignore"):
        raise ConfigError("inverse.on_ill_conditioned must be warn, raise or ignore")
    if cfg.basis.eta is not None and not cfg.basis.eta > 0:
        raise ConfigError("basis.eta must be > 0")
    for m in list(cfg.sweep.meshes) + list(cfg.selection.meshes):
        if m not in MESH_LADDER:
            raise ConfigError(f"unknown ladder mesh {m}; choose from {sorted(MESH_LADDER)}")
    for r in cfg.sweep.regularizers:
        if not isinstance(r, (list, tuple)) or len(r) != 2 or r[0] not in (LU, TSVD):
            raise ConfigError("sweep.regularizers entries must be [LU|TSVD, alpha-or-null]")
    if cfg.benchmark is not None and cfg.benchmark.id not in (0, 1, 2):
        raise ConfigError("benchmark.id must be 0, 1 or 2")
    if cfg.noise.omega < 0 or cfg.noise.samples < 1:
        raise ConfigError("noise needs omega >= 0 and samples >= 1")


def parse_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = sorted(set(data) - set(_SECTIONS) - _SCALARS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    kw = {name: _section(name, cls, data[name]) for name, cls in _SECTIONS.items() if name in data}
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigError("seed must be an integer")
        kw["seed"] = data["seed"]
    cfg = RunConfig(**kw, base_dir=base_dir or Path.cwd())
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return parse_config(data, base_dir=path.parent.resolve())
