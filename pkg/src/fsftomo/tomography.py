"""Maximum-likelihood coherent-state process tomography and comparison metrics.

The heralded (trace non-increasing) process is embedded in a trace-preserving
map by adding one extra output level, the fail sink, that collects every
trial without a herald. Extended Choi matrices are indexed as
``C[(j, m), (k, n)]`` with output index j, k in 0..d (d = sink) and input
index m, n in 0..d-1.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fock import batch_fidelity, coherent_state, random_density_matrix, wavefunction_table
from .homodyne import PHASE_BINS, QUAD_BINS, X_WINDOW, BinnedHistogram, bin_centers
from .model import FsfParams, ProcessTensor, apply_process, compose_fsf_tensor, herald_povm

log = logging.getLogger(__name__)

P_FLOOR = 1e-300
PSD_FLOOR = -1e-10


class ReconstructionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReconConfig:
    n_max: int = 6
    mu: float = 0.5
    max_iters: int = 150
    ll_tol: float = 1e-12
    grid: tuple = (PHASE_BINS, QUAD_BINS, -X_WINDOW, X_WINDOW)
    phase_covariant: bool = True

    def __post_init__(self):
        if not 0 < self.mu <= 1:
            raise ValueError(f"dilution mu must lie in (0, 1], got {self.mu}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")


@dataclass(frozen=True)
class ChoiOperator:
    """Extended Choi matrix of shape ((d+1) d, (d+1) d)."""

    matrix: np.ndarray
    d: int

    @property
    def blocks(self) -> np.ndarray:
        """View as [j, m, k, n]."""
        d = self.d
        return self.matrix.reshape(d + 1, d, d + 1, d)

    def partial_trace_out(self) -> np.ndarray:
        return np.einsum("jmjn->mn", self.blocks)

    def physical(self) -> np.ndarray:
        """Physical (non-sink) block as a d^2 x d^2 matrix."""
        d = self.d
        return self.blocks[:d, :, :d, :].reshape(d * d, d * d)


def choi_from_tensor(E: ProcessTensor) -> ChoiOperator:
    """Extended Choi of a trace non-increasing tensor; the sink takes I - S."""
    d = E.dim
    e = E.elems
    if np.max(np.abs(e - e.transpose(1, 0, 3, 2).conj())) > 1e-10:
        raise ValueError("process tensor is not Hermitian")
    c = np.zeros((d + 1, d, d + 1, d), dtype=complex)
    c[:d, :, :d, :] = e.transpose(0, 2, 1, 3)
    S = np.einsum("jjmn->mn", e)
    c[d, :, d, :] = np.eye(d) - S
    return ChoiOperator(c.reshape((d + 1) * d, (d + 1) * d), d)


def tensor_from_choi(C: ChoiOperator, label: str = "reconstructed") -> ProcessTensor:
    m = C.matrix
    if np.max(np.abs(m - m.conj().T)) > 1e-10:
        raise ValueError("Choi matrix is not Hermitian")
    d = C.d
    return ProcessTensor(C.blocks[:d, :, :d, :].transpose(0, 2, 1, 3).copy(), label)


def maximally_mixed(d: int) -> ChoiOperator:
    """Initializer: identity on the extended space divided by d + 1 output levels."""
    n = (d + 1) * d
    return ChoiOperator(np.eye(n, dtype=complex) / (d + 1), d)


def charge_mask(d: int) -> np.ndarray:
    """Entries of an extended Choi matrix allowed by phase covariance.

    Entry ((j, m), (k, n)) survives when j - m == k - n. The sink carries a
    charge no physical pair can reach, so it only couples to itself with
    m == n.
    """
    sink = 3 * d
    q = np.array([(j - m if j < d else sink - m) for j in range(d + 1) for m in range(d)])
    return q[:, None] == q[None, :]


def quadrature_outcomes(cfg: ReconConfig):
    """Outcome vectors u[o, n] = <n|x_q; theta_p> (o = p * n_q + q), their
    weight (bin width / n_phase) and the out-of-window operator."""
    n_ph, n_q, lo, hi = cfg.grid
    d = cfg.n_max + 1
    ph, xq = bin_centers(cfg.grid)
    psi = wavefunction_table(cfg.n_max, xq)
    phase = np.exp(-1j * np.outer(ph, np.arange(d)))
    u = (phase[:, None, :] * psi[None, :, :]).reshape(n_ph * n_q, d)
    weight = (hi - lo) / n_q / n_ph
    window = weight * (u.T @ u.conj())
    outside = np.eye(d) - (window + window.conj().T) / 2
    return u, weight, outside


class MeasurementModel:
    """Probe states and binned quadrature projectors for a set of histograms.

    Outcomes of one trial: every (phase bin, quadrature bin), one
    out-of-window outcome, and fail. Phase bins are equiprobable; a
    quadrature outcome is the bin-centre projector |x; theta><x; theta| times
    bin width / n_phase. The out-of-window operator is whatever the bins
    leave of the identity, so the outcome set is exactly complete.
    """

    def __init__(self, histograms: list[BinnedHistogram], cfg: ReconConfig):
        if len({complex(h.probe) for h in histograms}) < 2:
            raise ValueError("need at least two distinct probe amplitudes")
        for h in histograms:
            if tuple(h.grid) != tuple(cfg.grid):
                raise ValueError(f"histogram grid {h.grid} does not match reconstruction grid {cfg.grid}")
        self.cfg = cfg
        self.d = d = cfg.n_max + 1
        self.u, self.weight, self.outside = quadrature_outcomes(cfg)
        self.rhos = np.array([coherent_state(complex(h.probe), cfg.n_max).density_matrix() for h in histograms])
        self.counts = [np.asarray(h.counts, dtype=float).ravel() for h in histograms]
        self.nonzero = [np.flatnonzero(c) for c in self.counts]
        self.outside_counts = np.array([h.underflow + h.overflow for h in histograms], dtype=float)
        self.fails = np.array([h.fails for h in histograms], dtype=float)
        self.trials = np.array([h.trials_total for h in histograms], dtype=float)
        # constant rescaling of R; Tr_out R = sum_i rho_i^T (trace = #probes) at the optimum
        self.scale = len(histograms) / self.trials.sum()
        self.mask = charge_mask(d) if cfg.phase_covariant else None
        # R at a noiseless optimum equals I (x) A
        A = self.scale * np.einsum("i,inm->mn", self.trials, self.rhos)
        if self.mask is not None:
            A = np.diag(np.diag(A).real)
        w, v = np.linalg.eigh(A)
        if w[0] <= 0:
            raise ValueError("probe set leaves part of the input space unexplored")
        self.precond = np.kron(np.eye(d + 1), (v / np.sqrt(w)) @ v.conj().T)
        self.precond_inv = np.kron(np.eye(d + 1), (v * np.sqrt(w)) @ v.conj().T)

    def output_states(self, C: ChoiOperator) -> np.ndarray:
        """Extended output state for every probe, shape (probes, d+1, d+1)."""
        return np.einsum("jmkn,imn->ijk", C.blocks, self.rhos)

    def _bin_probs(self, out: np.ndarray, sel=None) -> np.ndarray:
        u = self.u if sel is None else self.u[sel]
        phys = out[: self.d, : self.d]
        return self.weight * np.einsum("om,mn,on->o", u.conj(), phys, u).real

    def probabilities(self, C: ChoiOperator, i: int) -> tuple[np.ndarray, float, float]:
        """(bin probabilities, out-of-window probability, fail probability) for probe i."""
        out = np.einsum("jmkn,mn->jk", C.blocks, self.rhos[i])
        d = self.d
        p_out = float(np.trace(self.outside @ out[:d, :d]).real)
        return self._bin_probs(out), p_out, float(out[d, d].real)

    def log_likelihood_and_R(self, C: ChoiOperator, with_R: bool = True):
        d = self.d
        outs = self.output_states(C)
        ll = 0.0
        floored = 0
        R = np.zeros((d + 1, d, d + 1, d), dtype=complex) if with_R else None

        def floor(p):
            nonlocal floored
            if p < P_FLOOR:
                floored += 1
                return P_FLOOR
            return p

        for i, out in enumerate(outs):
            sel = self.nonzero[i]
            n = self.counts[i][sel]
            p = self._bin_probs(out, sel)
            bad = p < P_FLOOR
            if np.any(bad):
                floored += int(bad.sum())
                p = np.where(bad, P_FLOOR, p)
            ll += float(np.sum(n * np.log(p)))
            K = np.zeros((d + 1, d + 1), dtype=complex)
            if with_R:
                u = self.u[sel]
                K[:d, :d] = (u.T * (self.weight * n / p)) @ u.conj()
            if self.outside_counts[i] > 0:
                p_out = floor(float(np.trace(self.outside @ out[:d, :d]).real))
                ll += self.outside_counts[i] * np.log(p_out)
                K[:d, :d] += self.outside_counts[i] / p_out * self.outside
            if self.fails[i] > 0:
                p_fail = floor(float(out[d, d].real))
                ll += self.fails[i] * np.log(p_fail)
                K[d, d] = self.fails[i] / p_fail
            if with_R:
                # R[j, m, k, n] += K[j, k] * rho_i^T[m, n]
                R += np.einsum("jk,nm->jmkn", K, self.rhos[i])
        if floored:
            warnings.warn(f"{floored} observed outcomes had zero predicted probability; floored at {P_FLOOR}")
        if with_R:
            n_ = (d + 1) * d
            R = self.scale * R.reshape(n_, n_)
            if self.mask is not None:
                R = R * self.mask
        return ll, R

    def log_likelihood(self, C: ChoiOperator) -> float:
        return self.log_likelihood_and_R(C, with_R=False)[0]


def _inv_sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.conj().T) / 2)
    if w[0] <= 0:
        raise ReconstructionError("normalization matrix is singular")
    return (v / np.sqrt(w)) @ v.conj().T


def normalize_extended(X: np.ndarray, d: int) -> np.ndarray:
    """Lagrange normalization: (I (x) L) X (I (x) L) with L = (Tr_out X)^{-1/2}."""
    blocks = X.reshape(d + 1, d, d + 1, d)
    L = _inv_sqrt_psd(np.einsum("jmjn->mn", blocks))
    big = np.kron(np.eye(d + 1), L)
    return big @ X @ big


def _reproject(M: np.ndarray) -> np.ndarray:
    M = (M + M.conj().T) / 2
    w, v = np.linalg.eigh(M)
    if w[0] < PSD_FLOOR:
        warnings.warn(f"Choi iterate drifted non-PSD (min eigenvalue {w[0]:.3g}); re-projecting")
        w = np.clip(w, 0, None)
        M = (v * w) @ v.conj().T
    return M


def rrr_step(C: ChoiOperator, R: np.ndarray, mu: float, model: MeasurementModel) -> ChoiOperator:
    """One diluted step in preconditioned coordinates.

    With P = I (x) A^{-1/2}, the rescaled R~ = P R P is the identity at a
    noiseless optimum, and the step is
    C <- N[(I + mu R~) P^{-1} C P^{-1} (I + mu R~)] / (1 + mu)^2.
    """
    n = R.shape[0]
    Rmu = (np.eye(n) + mu * (model.precond @ R @ model.precond)) / (1 + mu)
    G = Rmu @ model.precond_inv
    X = G @ C.matrix @ G.conj().T
    X = normalize_extended(_reproject(X), C.d)
    if model.mask is not None:
        X = X * model.mask
    return ChoiOperator((X + X.conj().T) / 2, C.d)


@dataclass
class ReconResult:
    tensor: ProcessTensor
    choi: ChoiOperator
    log_likelihoods: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return max(len(self.log_likelihoods) - 1, 0)


MONOTONE_SLACK = 1e-9


def mlr_reconstruct(histograms: list[BinnedHistogram], cfg: ReconConfig = ReconConfig(),
                    init: ChoiOperator | None = None, callback=None) -> ReconResult:
    """Diluted R rho R fixed-point reconstruction of the extended Choi operator.

    ``log_likelihoods[0]`` is the initializer's value, then one entry per
    iteration. A step that lowers the log-likelihood by more than the
    relative slack raises ReconstructionError.
    """
    if any(h.heralds <= 0 for h in histograms):
        raise ValueError("every histogram needs heralded counts")
    model = MeasurementModel(histograms, cfg)
    C = init if init is not None else maximally_mixed(model.d)
    ll, R = model.log_likelihood_and_R(C)
    lls = [ll]
    converged = False
    for it in range(cfg.max_iters):
        C = rrr_step(C, R, cfg.mu, model)
        ll_new, R = model.log_likelihood_and_R(C)
        if ll_new < ll - MONOTONE_SLACK * abs(ll):
            raise ReconstructionError(f"log-likelihood decreased at iteration {it + 1}: {ll!r} -> {ll_new!r}")
        lls.append(ll_new)
        if callback is not None:
            callback(it + 1, ll_new)
        rel = abs(ll_new - ll) / max(abs(ll), 1e-300)
        ll = ll_new
        if rel < cfg.ll_tol:
            converged = True
            break
    return ReconResult(tensor_from_choi(C), C, lls, converged)


def predicted_probability(C: ChoiOperator, probe: complex, outcome, cfg: ReconConfig = ReconConfig()) -> float:
    """Probability of one trial outcome for a coherent probe.

    ``outcome`` is a (phase_bin, quad_bin) pair, "outside" (heralded but out
    of the quadrature window) or "fail".
    """
    d = C.d
    rho = coherent_state(complex(probe), d - 1).density_matrix()
    out = np.einsum("jmkn,mn->jk", C.blocks, rho)
    if outcome == "fail":
        return float(out[d, d].real)
    u, weight, outside = quadrature_outcomes(cfg)
    if outcome == "outside":
        return float(np.trace(outside @ out[:d, :d]).real)
    p, q = outcome
    v = u[p * cfg.grid[1] + q]
    return float(weight * np.real(v.conj() @ out[:d, :d] @ v))


def expected_histograms(E: ProcessTensor, probes, trials: float = 1.0,
                        cfg: ReconConfig = ReconConfig()) -> list[BinnedHistogram]:
    """Noiseless histograms: every count is trials x predicted probability (floats)."""
    C = choi_from_tensor(E)
    u, weight, outside = quadrature_outcomes(cfg)
    d = E.dim
    hists = []
    for a in probes:
        rho = coherent_state(complex(a), E.n_max).density_matrix()
        st = np.einsum("jmkn,mn->jk", C.blocks, rho)
        p = weight * np.einsum("om,mn,on->o", u.conj(), st[:d, :d], u).real
        p_out = float(np.trace(outside @ st[:d, :d]).real)
        p_fail = float(st[d, d].real)
        counts = (trials * p).reshape(cfg.grid[0], cfg.grid[1])
        hists.append(BinnedHistogram(a, counts, trials, trials * (1 - p_fail), 0, trials * p_out, cfg.grid))
    return hists


# -- comparison metrics ------------------------------------------------------

def _normalized_choi(E: ProcessTensor) -> np.ndarray:
    c = E.choi_matrix()
    c = (c + c.conj().T) / 2
    tr = np.trace(c).real
    if tr <= 0:
        raise ValueError(f"{E.label} Choi operator has zero trace")
    return c / tr


def choi_fidelity(Ea: ProcessTensor, Eb: ProcessTensor) -> float:
    if Ea.elems.shape != Eb.elems.shape:
        raise ValueError(f"dimension mismatch: {Ea.elems.shape} vs {Eb.elems.shape}")
    return float(batch_fidelity(_normalized_choi(Ea)[None], _normalized_choi(Eb)[None])[0])


@dataclass
class ScanResult:
    x_name: str
    y_name: str
    xs: np.ndarray
    ys: np.ndarray
    fidelity: np.ndarray  # shape (len(xs), len(ys))

    @property
    def argmax(self) -> tuple[float, float]:
        i, j = np.unravel_index(np.argmax(self.fidelity), self.fidelity.shape)
        return float(self.xs[i]), float(self.ys[j])

    @property
    def argmax_index(self) -> tuple[int, int]:
        i, j = np.unravel_index(np.argmax(self.fidelity), self.fidelity.shape)
        return int(i), int(j)

    def to_csv(self) -> str:
        lines = [f"{self.x_name},{self.y_name},fidelity"]
        for i, x in enumerate(self.xs):
            for j, y in enumerate(self.ys):
                lines.append(f"{x:.6g},{y:.6g},{self.fidelity[i, j]:.10g}")
        return "\n".join(lines) + "\n"


def fidelity_scan(recon: ProcessTensor, x_name: str, xs, y_name: str, ys, base: FsfParams | None = None,
                  eta_apd: float = 0.45, povm_kind="click") -> ScanResult:
    """Choi fidelity of ``recon`` against the model over a 2-D parameter grid.

    Axis names are FsfParams fields (R, eta_h, M, eta_det) or "eta_apd".
    """
    base = base or FsfParams(n_max=recon.n_max)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    ref = _normalized_choi(recon)
    models = []
    for x in xs:
        for y in ys:
            kw = {"R": base.R, "eta_h": base.eta_h, "M": base.M, "eta_det": base.eta_det, "eta_apd": eta_apd}
            kw[x_name] = float(x)
            kw[y_name] = float(y)
            apd = kw.pop("eta_apd")
            params = FsfParams(n_max=base.n_max, **kw)
            models.append(_normalized_choi(compose_fsf_tensor(params, herald_povm(apd, base.n_max + 1, povm_kind))))
    f = batch_fidelity(np.broadcast_to(ref, (len(models),) + ref.shape), np.array(models))
    return ScanResult(x_name, y_name, xs, ys, f.reshape(len(xs), len(ys)))


@dataclass
class StateFidelityStats:
    n_max: int
    mean: float
    std: float
    used: int
    skipped: int


def random_state_fidelity_study(Ea: ProcessTensor, Eb: ProcessTensor, n_max_list, count: int,
                                rng: np.random.Generator, zero_tol: float = 1e-14) -> list[StateFidelityStats]:
    """Fidelity between normalized outputs of two processes on random input states.

    Input states are Hilbert-Schmidt random on |0>..|n_max>, embedded in the
    tensors' space.
    """
    if count < 1000:
        raise ValueError("count must be >= 1000")
    d = Ea.dim
    results = []
    for nm in n_max_list:
        if nm > Ea.n_max:
            raise ValueError(f"n_max {nm} exceeds tensor truncation {Ea.n_max}")
        rhos = np.zeros((count, d, d), dtype=complex)
        for s in range(count):
            rhos[s, : nm + 1, : nm + 1] = random_density_matrix(nm, rng)
        outs = []
        for E in (Ea, Eb):
            o = np.einsum("jkmn,smn->sjk", E.elems, rhos)
            outs.append(o)
        ta = np.einsum("sjj->s", outs[0]).real
        tb = np.einsum("sjj->s", outs[1]).real
        ok = (ta > zero_tol) & (tb > zero_tol)
        a = outs[0][ok] / ta[ok, None, None]
        b = outs[1][ok] / tb[ok, None, None]
        a = (a + np.swapaxes(a.conj(), -1, -2)) / 2
        b = (b + np.swapaxes(b.conj(), -1, -2)) / 2
        f = batch_fidelity(a, b)
        results.append(StateFidelityStats(nm, float(f.mean()), float(f.std()), int(ok.sum()), int((~ok).sum())))
    return results


def success_curve(E: ProcessTensor, amplitudes) -> np.ndarray:
    return np.array([
        np.trace(apply_process(E, coherent_state(complex(a), E.n_max).density_matrix())).real
        for a in amplitudes
    ])
