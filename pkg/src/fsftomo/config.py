"""Flat ``key = value`` run configuration.

Every key is optional; defaults are the experimental FSF parameters.

    # model
    R = 0.5                  beam-splitter reflectivity
    eta_h = 0.45             ancilla heralding efficiency into the input mode
    M = 0.73                 multimode parameter eta_h / eta_h'
    eta_det = 0.45           herald detector efficiency (attenuation branch)
    eta_apd = 0.45           click-detector efficiency in the herald POVM
    povm = click             click | number-resolving-1 | ideal-click
    n_max = 6
    # simulation
    amplitudes = 0.1, ...    comma-separated probe amplitudes (real or complex, e.g. 0.5+0.1j)
    samples_per_probe = 20000
    phase_grid = 30
    seed = 0
    # reconstruction
    mu = 0.5
    max_iters = 150
    ll_tol = 1e-12
    phase_covariant = true
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .homodyne import REFERENCE_AMPLITUDES, ProbePlan
from .model import FsfParams, PovmKind, herald_povm, compose_fsf_tensor
from .tomography import ReconConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _amplitudes(s: str) -> tuple:
    out = []
    for tok in s.split(","):
        tok = tok.strip()
        if not tok:
            continue
        z = complex(tok)
        out.append(z.real if z.imag == 0 else z)
    return tuple(out)


_FIELDS = {
    "R": float,
    "eta_h": float,
    "M": float,
    "eta_det": float,
    "eta_apd": float,
    "povm": str,
    "n_max": int,
    "amplitudes": _amplitudes,
    "samples_per_probe": int,
    "phase_grid": int,
    "seed": int,
    "mu": float,
    "max_iters": int,
    "ll_tol": float,
    "phase_covariant": _bool,
}


@dataclass
class RunConfig:
    R: float = 0.5
    eta_h: float = 0.45
    M: float = 0.73
    eta_det: float = 0.45
    eta_apd: float = 0.45
    povm: str = "click"
    n_max: int = 6
    amplitudes: tuple = field(default=REFERENCE_AMPLITUDES)
    samples_per_probe: int = 20_000
    phase_grid: int = 30
    seed: int = 0
    mu: float = 0.5
    max_iters: int = 150
    ll_tol: float = 1e-12
    phase_covariant: bool = True

    def __post_init__(self):
        try:
            PovmKind(self.povm)
            self.params()
            self.plan()
            self.recon()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def params(self) -> FsfParams:
        return FsfParams(R=self.R, eta_h=self.eta_h, M=self.M, eta_det=self.eta_det, n_max=self.n_max)

    def povm_element(self):
        return herald_povm(self.eta_apd, self.n_max + 1, self.povm)

    def model_tensor(self):
        return compose_fsf_tensor(self.params(), self.povm_element())

    def plan(self) -> ProbePlan:
        return ProbePlan(tuple(self.amplitudes), self.samples_per_probe, self.phase_grid, self.seed, self.n_max)

    def recon(self) -> ReconConfig:
        return ReconConfig(n_max=self.n_max, mu=self.mu, max_iters=self.max_iters, ll_tol=self.ll_tol,
                           phase_covariant=self.phase_covariant)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "amplitudes":
                v = ", ".join(repr(a) if isinstance(a, float) else str(complex(a)) for a in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> RunConfig:
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, val = (t.strip() for t in line.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _FIELDS[key](val)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path | None) -> RunConfig:
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path))
