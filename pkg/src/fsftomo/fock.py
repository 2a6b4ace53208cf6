"""Truncated single-mode Fock-space numerics.

Quadrature convention: X_theta = (a e^{i theta} + a^dag e^{-i theta}) / sqrt(2),
vacuum variance 1/2, and <n|x; theta> = e^{-i n theta} psi_n(x).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

HERM_TOL = 1e-12
PSD_TOL = 1e-10
MAX_DEFICIT = 0.01


class TruncationError(ValueError):
    """Coherent amplitude too large for the truncated space."""


@dataclass(frozen=True)
class PureState:
    coeffs: np.ndarray
    norm_deficit: float = 0.0

    @property
    def n_max(self) -> int:
        return len(self.coeffs) - 1

    def density_matrix(self) -> np.ndarray:
        return np.outer(self.coeffs, self.coeffs.conj())


def _check_nmax(n_max: int) -> None:
    if int(n_max) != n_max or n_max < 1:
        raise ValueError(f"n_max must be an integer >= 1, got {n_max!r}")


def coherent_state(alpha: complex, n_max: int) -> PureState:
    """Truncated coherent state, renormalized on {|0>, ..., |n_max>}.

    The discarded Poisson tail is kept in ``norm_deficit``; amplitudes whose
    tail reaches 1% are rejected.
    """
    _check_nmax(n_max)
    if abs(alpha) > 2:
        raise TruncationError(f"|alpha| = {abs(alpha):.4g} exceeds the supported range (<= 2)")
    c = np.empty(n_max + 1, dtype=complex)
    c[0] = math.exp(-abs(alpha) ** 2 / 2)
    for n in range(1, n_max + 1):
        c[n] = c[n - 1] * alpha / math.sqrt(n)
    kept = float(np.sum(np.abs(c) ** 2))
    deficit = max(0.0, 1.0 - kept)
    if deficit >= MAX_DEFICIT:
        raise TruncationError(
            f"coherent state alpha={alpha} loses {deficit:.3%} of its norm above n_max={n_max}"
        )
    return PureState(c / math.sqrt(kept), deficit)


def fock_state(n: int, n_max: int) -> np.ndarray:
    v = np.zeros(n_max + 1, dtype=complex)
    v[n] = 1.0
    return v


def quadrature_wavefunction(n: int, x):
    """Oscillator eigenfunction psi_n(x), evaluated by the normalized recurrence."""
    x = np.asarray(x, dtype=float)
    psi_prev = np.zeros_like(x)
    psi = np.pi ** -0.25 * np.exp(-x**2 / 2)
    for k in range(1, n + 1):
        psi, psi_prev = math.sqrt(2 / k) * x * psi - math.sqrt((k - 1) / k) * psi_prev, psi
    return psi


def wavefunction_table(n_max: int, x) -> np.ndarray:
    """psi_n(x) for n = 0..n_max stacked along the last axis."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (n_max + 1,))
    psi_prev = np.zeros_like(x)
    psi = np.pi ** -0.25 * np.exp(-x**2 / 2)
    out[..., 0] = psi
    for k in range(1, n_max + 1):
        psi, psi_prev = math.sqrt(2 / k) * x * psi - math.sqrt((k - 1) / k) * psi_prev, psi
        out[..., k] = psi
    return out


def check_density_matrix(rho: np.ndarray, normalized: bool = False) -> None:
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"density matrix must be square, got shape {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > HERM_TOL * max(1.0, np.max(np.abs(rho))):
        raise ValueError("density matrix is not Hermitian")
    if np.linalg.eigvalsh(rho)[0] < -PSD_TOL:
        raise ValueError("density matrix is not positive semidefinite")
    tr = np.trace(rho).real
    if normalized and abs(tr - 1) > 1e-9:
        raise ValueError(f"density matrix must be normalized (trace {tr:.12g}); normalize first")
    if not normalized and not 0 < tr <= 1 + HERM_TOL:
        raise ValueError(f"density matrix trace {tr:.12g} outside (0, 1]")


def quadrature_pdf(rho: np.ndarray, theta: float, x) -> np.ndarray:
    """Homodyne marginal pr(x | theta) of a normalized state, clamped at zero."""
    rho = np.asarray(rho)
    tr = np.trace(rho).real
    if abs(tr - 1) > 1e-9:
        raise ValueError(f"quadrature_pdf needs a normalized state (trace {tr:.12g})")
    n_max = rho.shape[0] - 1
    psi = wavefunction_table(n_max, x)
    u = psi * np.exp(-1j * np.arange(n_max + 1) * theta)
    # <x;theta| rho |x;theta> with u_n = <n|x;theta>
    pdf = np.einsum("...m,mn,...n->...", u.conj(), rho, u).real
    return np.where(pdf < 0, 0.0, pdf)


def bs_unitary(R: float, total_cutoff: int) -> np.ndarray:
    """Two-mode beam-splitter unitary exp(i phi (a^dag b + a b^dag)), cos(phi) = sqrt(R).

    Returned on the product basis |p, q> (index p * (total_cutoff + 1) + q, first
    mode = target/output, second = ancilla/herald) restricted to p + q <= total_cutoff;
    states with more photons are left untouched (the generator conserves total
    photon number, so the restriction is exact).
    """
    if not 0 <= R <= 1:
        raise ValueError(f"reflectivity must lie in [0, 1], got {R}")
    dim = total_cutoff + 1
    a = np.diag(np.sqrt(np.arange(1, dim)), k=1)
    eye = np.eye(dim)
    A = np.kron(a, eye)
    B = np.kron(eye, a)
    phi = math.atan2(math.sqrt(1 - R), math.sqrt(R))  # acos loses precision near R = 1
    gen = A.conj().T @ B + A @ B.conj().T
    total = np.add.outer(np.arange(dim), np.arange(dim)).ravel()
    keep = total <= total_cutoff
    U = np.eye(dim * dim, dtype=complex)
    # the ladder operators are truncated per mode, so exponentiate only the
    # photon-number sectors that fit entirely inside the cutoff
    U[np.ix_(keep, keep)] = expm(1j * phi * gen[np.ix_(keep, keep)])
    return U


def bs_element(U: np.ndarray, total_cutoff: int, out: tuple[int, int], inp: tuple[int, int]) -> complex:
    """Matrix element <out|U|inp> of a ``bs_unitary`` result."""
    dim = total_cutoff + 1
    return U[out[0] * dim + out[1], inp[0] * dim + inp[1]]


def photon_number_blocks(U: np.ndarray, total_cutoff: int) -> list[np.ndarray]:
    dim = total_cutoff + 1
    total = np.add.outer(np.arange(dim), np.arange(dim)).ravel()
    return [U[np.ix_(total == N, total == N)] for N in range(total_cutoff + 1)]


def random_density_matrix(n_max: int, rng: np.random.Generator) -> np.ndarray:
    """Hilbert-Schmidt random state: G G^dag / Tr, G square Ginibre."""
    d = n_max + 1
    g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    rho = g @ g.conj().T
    rho = (rho + rho.conj().T) / 2
    return rho / np.trace(rho).real


def _psd_sqrt(rho: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(rho)
    if np.any(w < -PSD_TOL * max(1.0, w[..., -1:].max())):
        raise ValueError("fidelity input is not positive semidefinite")
    w = np.sqrt(np.clip(w, 0, None))
    return (v * w[..., None, :]) @ np.swapaxes(v.conj(), -1, -2)


def state_fidelity(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Uhlmann fidelity (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2."""
    return float(batch_fidelity(np.asarray(rho)[None], np.asarray(sigma)[None])[0])


def batch_fidelity(rhos: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Fidelity of stacked pairs, shape (..., d, d) each."""
    s = _psd_sqrt(rhos)
    inner = s @ sigmas @ s
    inner = (inner + np.swapaxes(inner.conj(), -1, -2)) / 2
    w = np.linalg.eigvalsh(inner)
    if np.any(w < -PSD_TOL * max(1.0, np.abs(w).max())):
        raise ValueError("fidelity input is not positive semidefinite")
    f = np.sum(np.sqrt(np.clip(w, 0, None)), axis=-1) ** 2
    return np.clip(f, 0.0, 1.0)
