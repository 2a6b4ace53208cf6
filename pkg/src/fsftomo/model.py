"""Realistic Fock-state-filtration process model.

Process tensors are stored as ``elems[j, k, m, n]`` so that an input density
matrix rho maps to ``rho_out[j, k] = sum_mn elems[j, k, m, n] * rho[m, n]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import comb

from .fock import PureState, check_density_matrix

CP_TOL = 1e-8
TRACE_TOL = 1e-10
LAYOUT = "row-major j,k,m,n"


class PovmKind(str, Enum):
    CLICK = "click"
    NUMBER_RESOLVING_1 = "number-resolving-1"
    IDEAL_CLICK = "ideal-click"


@dataclass(frozen=True)
class HeraldPovm:
    """Diagonal herald POVM element sum_g theta_g |g><g|, g >= 1.

    ``thetas[g - 1]`` is the click probability given g photons; there is no
    g = 0 entry (no dark counts).
    """

    thetas: np.ndarray
    eta_apd: float
    kind: PovmKind

    def theta(self, g: int) -> float:
        if g < 1 or g > len(self.thetas):
            return 0.0
        return float(self.thetas[g - 1])


def herald_povm(eta_apd: float, g_max: int, kind: PovmKind | str = PovmKind.CLICK) -> HeraldPovm:
    kind = PovmKind(kind)
    if not 0 <= eta_apd <= 1:
        raise ValueError(f"detector efficiency must lie in [0, 1], got {eta_apd}")
    if g_max < 1:
        raise ValueError("g_max must be >= 1")
    g = np.arange(1, g_max + 1)
    if kind is PovmKind.CLICK:
        thetas = 1.0 - (1.0 - eta_apd) ** g
    elif kind is PovmKind.IDEAL_CLICK:
        thetas = np.ones(g_max)
    else:
        thetas = (g == 1).astype(float)
    return HeraldPovm(thetas, float(eta_apd), kind)


@dataclass(frozen=True)
class FsfParams:
    """Model parameters; ``M`` is the ratio eta_h / eta_h_prime.

    eta_h_prime is derived from eta_h and M rather than stored, so parameter
    scans at fixed M stay consistent by construction.
    """

    R: float = 0.5
    eta_h: float = 0.45
    M: float = 0.73
    eta_det: float = 0.45
    n_max: int = 6

    def __post_init__(self):
        for name in ("R", "eta_h", "M", "eta_det"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError(f"n_max must be an integer >= 1, got {self.n_max}")

    @property
    def eta_h_prime(self) -> float:
        return self.eta_h / self.M if self.M > 0 else math.inf


@dataclass(frozen=True)
class ProcessTensor:
    elems: np.ndarray
    label: str = "model"
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def dim(self) -> int:
        return self.elems.shape[0]

    @property
    def n_max(self) -> int:
        return self.dim - 1

    def choi_matrix(self) -> np.ndarray:
        """Choi operator with <j,m|C|k,n> = E_jk^mn (output index first)."""
        d = self.dim
        return self.elems.transpose(0, 2, 1, 3).reshape(d * d, d * d)

    def layer_success(self) -> np.ndarray:
        """s_n = sum_k E_kk^nn for each input Fock layer n."""
        diag = np.einsum("kknn->kn", self.elems).real
        return diag.sum(axis=0)

    def diagonal(self) -> np.ndarray:
        """Array P[k, n] = E_kk^nn."""
        return np.einsum("kknn->kn", self.elems).real.copy()

    def check(self) -> None:
        """Raise ValueError if Hermiticity, complete positivity or trace bound fails."""
        e = self.elems
        if np.max(np.abs(e - e.transpose(1, 0, 3, 2).conj())) > TRACE_TOL:
            raise ValueError(f"{self.label} tensor is not Hermitian")
        c = self.choi_matrix()
        c = (c + c.conj().T) / 2
        if np.linalg.eigvalsh(c)[0] < -CP_TOL:
            raise ValueError(f"{self.label} tensor is not completely positive")
        s = self.layer_success()
        if np.any(s < -TRACE_TOL) or np.any(s > 1 + TRACE_TOL):
            raise ValueError(f"{self.label} tensor violates the trace bound: {s}")

    def __add__(self, other: ProcessTensor) -> ProcessTensor:
        return ProcessTensor(self.elems + other.elems, self.label)

    def scaled(self, c: float) -> ProcessTensor:
        return ProcessTensor(c * self.elems, self.label)


def identity_tensor(n_max: int) -> ProcessTensor:
    d = n_max + 1
    eye = np.eye(d)
    return ProcessTensor(np.einsum("jm,kn->jkmn", eye, eye).astype(complex), "identity")


def amp_single_ancilla(m: int, g: int, R: float) -> complex:
    """<m+1-g, g| U |m, 1>: m input photons plus one ancilla, g photons at the herald."""
    if g < 0 or g > m + 1:
        return 0j
    pref = math.sqrt(math.factorial(m - g + 1) * math.factorial(g) / math.factorial(m))
    if g == 0:
        # the (1 - R) bracket cancels the negative phase power, finite at R = 1
        return math.sqrt(m + 1) * R ** (m / 2) * 1j * math.sqrt(1 - R)
    if g == m + 1:
        # R^{-1/2} * R, finite at R = 0
        scaled = math.sqrt(R)
    else:
        bracket = comb(m, g - 1, exact=True) * R - (1 - R) * comb(m, g, exact=True)
        scaled = R ** ((m - g) / 2) * bracket
    return pref * scaled * (1j * math.sqrt(1 - R)) ** (g - 1)


def amp_vacuum_ancilla(m: int, g: int, R: float) -> complex:
    """<m-g, g| U |m, 0>: vacuum ancilla, g photons at the herald."""
    if g < 0 or g > m:
        return 0j
    return math.sqrt(comb(m, g, exact=True)) * R ** ((m - g) / 2) * (1j * math.sqrt(1 - R)) ** g


def _herald_tensor(amp, R: float, povm: HeraldPovm, n_max: int, shift: int, label: str) -> ProcessTensor:
    # output photon number j = m + shift - g
    d = n_max + 1
    e = np.zeros((d, d, d, d), dtype=complex)
    for g in range(1, n_max + shift + 1):
        th = povm.theta(g)
        if th == 0:
            continue
        a = np.array([amp(m, g, R) for m in range(d)])
        for m in range(d):
            j = m + shift - g
            if j < 0 or a[m] == 0:
                continue
            for n in range(d):
                k = n + shift - g
                if k < 0:
                    continue
                e[j, k, m, n] += th * a[m] * np.conj(a[n])
    return ProcessTensor(e, label)


def build_tensor_e1(R: float, povm: HeraldPovm, n_max: int) -> ProcessTensor:
    """Single-photon ancilla with the herald POVM; g summed exactly to n_max + 1."""
    return _herald_tensor(amp_single_ancilla, R, povm, n_max, 1, "e1")


def build_tensor_e0(R: float, povm: HeraldPovm, n_max: int) -> ProcessTensor:
    """Vacuum ancilla with the herald POVM (false heralds from input photons)."""
    return _herald_tensor(amp_vacuum_ancilla, R, povm, n_max, 0, "e0")


def build_tensor_attenuation(eta: float, n_max: int) -> ProcessTensor:
    if not 0 <= eta <= 1:
        raise ValueError(f"transmissivity must lie in [0, 1], got {eta}")
    d = n_max + 1
    e = np.zeros((d, d, d, d), dtype=complex)
    f = [math.factorial(i) for i in range(d)]
    for m in range(d):
        for j in range(m + 1):
            lost = m - j
            for k in range(d - lost):
                n = k + lost
                e[j, k, m, n] = (
                    math.sqrt(f[m] * f[n] / (f[j] * f[k]))
                    * eta ** ((j + k) / 2)
                    * (1 - eta) ** lost
                    / f[lost]
                )
    return ProcessTensor(e, "attenuation")


def compose_fsf_tensor(params: FsfParams, povm: HeraldPovm) -> ProcessTensor:
    """M (eta_h E1 + (1 - eta_h) E0) + (1 - M) eta_det R E_att(R)."""
    p = params
    e1 = build_tensor_e1(p.R, povm, p.n_max).elems
    e0 = build_tensor_e0(p.R, povm, p.n_max).elems
    att = build_tensor_attenuation(p.R, p.n_max).elems
    e = p.M * (p.eta_h * e1 + (1 - p.eta_h) * e0) + (1 - p.M) * p.eta_det * p.R * att
    out = ProcessTensor(e, "model")
    try:
        out.check()
    except ValueError as exc:
        raise RuntimeError(f"composed FSF tensor is unphysical: {exc}") from exc
    return out


def reference_model(n_max: int = 6, povm_kind: PovmKind | str = PovmKind.CLICK, eta_apd: float = 0.45,
                **overrides) -> ProcessTensor:
    params = FsfParams(n_max=n_max, **overrides)
    return compose_fsf_tensor(params, herald_povm(eta_apd, n_max + 1, povm_kind))


def ideal_filter_apply(psi: PureState | np.ndarray, R: float) -> tuple[np.ndarray, float]:
    """Ideal filter C_n -> R^{(n-1)/2} [R - n (1 - R)] C_n.

    Returns the un-normalized output and the renormalization factor N such
    that N * output has unit norm. Raises ZeroDivisionError when the output
    vanishes (zero-probability event).
    """
    c = psi.coeffs if isinstance(psi, PureState) else np.asarray(psi)
    n = np.arange(len(c))
    factor = np.array([math.sqrt(R) if k == 0 else R ** ((k - 1) / 2) * (R - k * (1 - R)) for k in n])
    out = factor * c
    norm = float(np.linalg.norm(out))
    if norm < 1e-15:
        raise ZeroDivisionError("filter output vanishes: zero-probability event")
    return out, 1.0 / norm


def apply_process(E: ProcessTensor, rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho)
    if rho.shape != E.elems.shape[2:]:
        raise ValueError(f"state shape {rho.shape} does not match tensor input {E.elems.shape[2:]}")
    return np.einsum("jkmn,mn->jk", E.elems, rho)


def success_probability(E: ProcessTensor, rho: np.ndarray) -> float:
    check_density_matrix(rho, normalized=True)
    return float(np.trace(apply_process(E, rho)).real)


@dataclass(frozen=True)
class ConditionalStats:
    unnormalized: np.ndarray  # P~[k, n] = E_kk^nn
    success: np.ndarray  # s_n
    normalized: np.ndarray  # P[k, n], NaN column where s_n == 0
    defined: np.ndarray  # bool per input layer n

    def p(self, k: int, n: int) -> float | None:
        if not self.defined[n]:
            return None
        return float(self.normalized[k, n])

    def survival(self) -> np.ndarray:
        """P(n|n) for each input layer (NaN where undefined)."""
        return np.diagonal(self.normalized).copy()


def conditional_stats(E: ProcessTensor, zero_tol: float = 1e-14) -> ConditionalStats:
    pt = E.diagonal()
    s = pt.sum(axis=0)
    defined = s > zero_tol
    norm = np.full_like(pt, np.nan)
    norm[:, defined] = pt[:, defined] / s[defined]
    return ConditionalStats(pt, s, norm, defined)


def linear_loss_prediction(p11: float, n: int) -> float:
    if not 0 <= p11 <= 1:
        raise ValueError(f"P(1|1) must lie in [0, 1], got {p11}")
    return p11**n


# -- serialization -----------------------------------------------------------

def tensor_to_dict(E: ProcessTensor) -> dict:
    flat = E.elems.ravel(order="C")
    return {
        "label": E.label,
        "n_max": E.n_max,
        "layout": LAYOUT,
        "entries": [[float(z.real), float(z.imag)] for z in flat],
    }


def tensor_from_dict(doc: dict) -> ProcessTensor:
    try:
        if doc["layout"] != LAYOUT:
            raise ValueError(f"unsupported layout {doc['layout']!r}")
        d = int(doc["n_max"]) + 1
        entries = np.asarray(doc["entries"], dtype=float)
        if entries.shape != (d**4, 2):
            raise ValueError(f"expected {d**4} (re, im) pairs, got shape {entries.shape}")
        elems = (entries[:, 0] + 1j * entries[:, 1]).reshape(d, d, d, d)
        return ProcessTensor(elems, str(doc["label"]))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed tensor document: {exc}") from exc


def save_tensor(E: ProcessTensor, path: str | Path) -> None:
    # json writes floats with repr, which round-trips bit-exactly
    Path(path).write_text(json.dumps(tensor_to_dict(E)) + "\n")


def load_tensor(path: str | Path) -> ProcessTensor:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a tensor file ({exc})") from exc
    return tensor_from_dict(doc)
