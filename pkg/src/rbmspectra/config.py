"""Run configuration: INI-style sections with flat keys."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .cvsolver import CvSettings
from .groundstate import SrSettings
from .hamiltonian import ModelSpec
from .sampler import SamplerPlan

REQUIRED = object()


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    length: int = REQUIRED
    j1: float = 1.0
    j2: float = 0.0
    periodic: bool = True


@dataclass
class RbmSection:
    n_hidden: int = 0  # 0 means 4 * length
    init_scale: float = 0.01
    seed: int = 0


@dataclass
class SamplerSection:
    mode: str = "mc"
    chains: int = 16
    samples: int = 1250
    thinning: int = 100
    burn_in: int = 1000
    seed: int = 0


@dataclass
class SrSection:
    tau: float = 0.01
    shift_initial: float = 100.0
    shift_decay: float = 0.9
    shift_floor: float = 1e-4
    cg_tol: float = 1e-6
    cg_max_iters: int = 1000
    max_steps: int = 1000
    energy_tol: float = 1e-5
    window: int = 50


@dataclass
class CvSection:
    # "lambda" in the file
    learning_rate: float = 0.02
    shift_initial: float = 100.0
    shift_decay: float = 0.9
    shift_floor: float = 1e-4
    cg_tol: float = 1e-6
    cg_max_iters: int = 1000
    cv_tol: float = 1e-4
    cv_max_iters: int = 500
    patience: int = 100
    warm_start: bool = True
    overlap_samples: int = 1_000_000


@dataclass
class SweepSection:
    omega_min: float = 0.0
    omega_max: float = 3.0
    omega_step: float = 0.05
    eta: float = 0.1
    source_site: int = 0
    k_list: str = "all"
    block_size: int = 8


@dataclass
class OutputSection:
    dir: str = "."
    checkpoint: str = "ground_state.rbm"
    spectrum: str = "spectrum.csv"
    oracle: str = "oracle.csv"
    report: str = "compare.json"


@dataclass
class CompareSection:
    rel_l2_tol: float = 0.15
    peak_tol: float = 0.05
    peak_fraction: float = 0.1
    sum_rule_allowance: float = 0.05


_ALIASES = {("cv", "lambda"): "learning_rate"}
_SECTIONS = {
    "model": ModelSection, "rbm": RbmSection, "sampler": SamplerSection, "sr": SrSection,
    "cv": CvSection, "sweep": SweepSection, "output": OutputSection, "compare": CompareSection,
}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    rbm: RbmSection = field(default_factory=RbmSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    sr: SrSection = field(default_factory=SrSection)
    cv: CvSection = field(default_factory=CvSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)
    compare: CompareSection = field(default_factory=CompareSection)

    # construction ---------------------------------------------------------

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section: {sorted(unknown)[0]}")
        sections = {}
        for name, kind in _SECTIONS.items():
            raw = {_ALIASES.get((name, k), k): v for k, v in data.get(name, {}).items()}
            fields = {f.name: f for f in dataclasses.fields(kind)}
            values = {}
            for key, value in raw.items():
                if key not in fields:
                    raise ConfigError(f"unknown config key: {name}.{key}")
                values[key] = _coerce(f"{name}.{key}", fields[key].type, value)
            for fname, f in fields.items():
                if fname not in values and f.default is REQUIRED:
                    raise ConfigError(f"missing config key: {name}.{fname}")
            sections[name] = kind(**values)
        cfg = cls(**sections)
        if cfg.rbm.n_hidden == 0:
            cfg.rbm.n_hidden = 4 * cfg.model.length
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        return cls.from_mapping({s: dict(parser[s]) for s in parser.sections()})

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        reverse = {(s, v): k for (s, k), v in _ALIASES.items()}
        for name in _SECTIONS:
            section = getattr(self, name)
            parser[name] = {reverse.get((name, f.name), f.name): _render(getattr(section, f.name))
                            for f in dataclasses.fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def validate(self):
        sw = self.sweep
        if sw.omega_step <= 0:
            raise ConfigError("sweep.omega_step must be positive")
        if sw.eta <= 0:
            raise ConfigError("sweep.eta must be positive")
        if sw.omega_max < sw.omega_min:
            raise ConfigError("sweep.omega_max is below sweep.omega_min")
        if sw.block_size < 1:
            raise ConfigError("sweep.block_size must be >= 1")
        if not 0 <= sw.source_site < self.model.length:
            raise ConfigError("sweep.source_site is outside the chain")
        if self.sampler.mode not in ("mc", "exact"):
            raise ConfigError("sampler.mode must be 'mc' or 'exact'")
        try:
            self.model_spec()
            self.plan()
            self.sr_settings()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.k_indices()

    # derived objects ------------------------------------------------------

    def model_spec(self) -> ModelSpec:
        m = self.model
        return ModelSpec(m.length, m.j1, m.j2, m.periodic)

    def plan(self) -> SamplerPlan | None:
        """Sampler plan, or None in exact-enumeration mode."""
        s = self.sampler
        if s.mode == "exact":
            return None
        return SamplerPlan(s.chains, s.samples, s.thinning, s.burn_in, s.seed, 0.0)

    def overlap_plan(self) -> SamplerPlan | None:
        s = self.sampler
        if s.mode == "exact":
            return None
        per_chain = max(1, -(-self.cv.overlap_samples // s.chains))
        return SamplerPlan(s.chains, per_chain, s.thinning, s.burn_in, s.seed, 0.0)

    def sr_settings(self) -> SrSettings:
        s = self.sr
        return SrSettings(s.tau, s.shift_initial, s.shift_decay, s.shift_floor, s.cg_tol,
                          s.cg_max_iters, s.max_steps, s.window, s.energy_tol)

    def cv_settings(self) -> CvSettings:
        c = self.cv
        return CvSettings(c.learning_rate, c.shift_initial, c.shift_decay, c.shift_floor,
                          c.cg_tol, c.cg_max_iters, c.cv_tol, c.cv_max_iters, c.patience)

    def omegas(self):
        import numpy as np
        sw = self.sweep
        n = int(np.floor((sw.omega_max - sw.omega_min) / sw.omega_step + 1e-9)) + 1
        return sw.omega_min + sw.omega_step * np.arange(n)

    def k_indices(self):
        L = self.model.length
        text = self.sweep.k_list.strip()
        if text == "all":
            return list(range(L))
        try:
            idx = [int(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise ConfigError(f"sweep.k_list: {exc}") from exc
        if not idx or any(not 0 <= i < L for i in idx):
            raise ConfigError("sweep.k_list entries must be momentum indices in [0, L)")
        return idx

    def with_seed(self, seed: int) -> "RunConfig":
        cfg = RunConfig.from_text(self.to_text())
        cfg.rbm.seed = seed
        cfg.sampler.seed = seed
        return cfg


def _coerce(key, kind, value):
    if isinstance(value, str):
        value = value.strip()
    try:
        if kind in (bool, "bool"):
            if isinstance(value, bool):
                return value
            lowered = str(value).lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
        return str(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
