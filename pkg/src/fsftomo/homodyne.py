"""Synthetic heralded homodyne data: sampling, binning and dataset files."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fock import coherent_state, quadrature_pdf
from .model import ProcessTensor, apply_process

log = logging.getLogger(__name__)

X_WINDOW = 5.0
SAMPLER_POINTS = 2401
MIN_SUCCESS = 1e-6
PHASE_BINS = 30
QUAD_BINS = 601

REFERENCE_AMPLITUDES = tuple(float(a) for a in np.linspace(0.1, 1.5, 20))


class HeraldStarvation(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class ProbePlan:
    amplitudes: tuple = REFERENCE_AMPLITUDES
    samples_per_probe: int = 20_000
    phase_grid: int = PHASE_BINS
    seed: int = 0
    n_max: int = 6

    def __post_init__(self):
        if not self.amplitudes:
            raise ValueError("probe plan needs at least one amplitude")
        if self.samples_per_probe < 1000:
            raise ValueError("samples_per_probe must be >= 1000")
        if self.phase_grid < 1:
            raise ValueError("phase_grid must be >= 1")
        for a in self.amplitudes:
            coherent_state(complex(a), self.n_max)

    def phases(self) -> np.ndarray:
        """Grid phases at the centres of phase_grid equal cells of [0, pi)."""
        return (np.arange(self.phase_grid) + 0.5) * np.pi / self.phase_grid

    def to_dict(self) -> dict:
        return {
            "amplitudes": [[complex(a).real, complex(a).imag] for a in self.amplitudes],
            "samples_per_probe": self.samples_per_probe,
            "phase_grid": self.phase_grid,
            "seed": self.seed,
            "n_max": self.n_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ProbePlan:
        amps = tuple(complex(re, im) if im else float(re) for re, im in d["amplitudes"])
        return cls(amps, int(d["samples_per_probe"]), int(d["phase_grid"]), int(d["seed"]), int(d["n_max"]))


def probe_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for probe ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


@dataclass
class QuadratureDataset:
    probe: complex
    thetas: np.ndarray
    xs: np.ndarray
    trials_total: int
    heralds: int
    seed: int = 0
    index: int = 0

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=float)
        self.xs = np.asarray(self.xs, dtype=float)
        if len(self.thetas) != len(self.xs) or len(self.xs) != self.heralds:
            raise ValueError("records length must equal heralds")
        if not 0 < self.heralds <= self.trials_total:
            raise ValueError("need 0 < heralds <= trials_total")

    @property
    def success_measured(self) -> float:
        return self.heralds / self.trials_total

    def __eq__(self, other):
        if not isinstance(other, QuadratureDataset):
            return NotImplemented
        return (
            complex(self.probe) == complex(other.probe)
            and self.trials_total == other.trials_total
            and self.heralds == other.heralds
            and self.seed == other.seed
            and self.index == other.index
            and np.array_equal(self.thetas, other.thetas)
            and np.array_equal(self.xs, other.xs)
        )


def _round9(v: np.ndarray) -> np.ndarray:
    # quantize to what the dataset file stores so round trips are exact
    return np.array([float(f"{x:.9g}") for x in v])


def inverse_cdf_sampler(pdf: np.ndarray, grid: np.ndarray):
    """Return u -> x for a density tabulated on ``grid`` (linear CDF interpolation)."""
    cdf = np.concatenate([[0.0], np.cumsum((pdf[1:] + pdf[:-1]) / 2 * np.diff(grid))])
    cdf /= cdf[-1]
    return lambda u: np.interp(u, cdf, grid)


def simulate_probe(E: ProcessTensor, alpha: complex, plan: ProbePlan, rng: np.random.Generator,
                   index: int = 0) -> QuadratureDataset:
    psi = coherent_state(complex(alpha), E.n_max)
    rho_out = apply_process(E, psi.density_matrix())
    rho_out = (rho_out + rho_out.conj().T) / 2
    p = min(float(np.trace(rho_out).real), 1.0)  # trace-preserving maps round to 1 + eps
    if p < MIN_SUCCESS:
        raise HeraldStarvation(f"probe alpha={alpha}: success probability {p:.3g} below {MIN_SUCCESS}")
    trials = math.ceil(plan.samples_per_probe / p)
    heralds = int(rng.binomial(trials, p))
    if heralds == 0:
        raise HeraldStarvation(f"probe alpha={alpha}: no heralds in {trials} trials")
    rho_n = rho_out / p
    phases = plan.phases()
    grid = np.linspace(-X_WINDOW, X_WINDOW, SAMPLER_POINTS)
    idx = rng.integers(0, len(phases), size=heralds)
    u = rng.random(heralds)
    xs = np.empty(heralds)
    for k, th in enumerate(phases):
        sel = idx == k
        if np.any(sel):
            xs[sel] = inverse_cdf_sampler(quadrature_pdf(rho_n, th, grid), grid)(u[sel])
    return QuadratureDataset(alpha, _round9(phases[idx]), _round9(xs), trials, heralds, plan.seed, index)


@dataclass
class BinnedHistogram:
    probe: complex
    counts: np.ndarray  # (phase_bins, quad_bins)
    trials_total: int
    heralds: int
    underflow: int = 0
    overflow: int = 0
    grid: tuple = (PHASE_BINS, QUAD_BINS, -X_WINDOW, X_WINDOW)

    @property
    def success_measured(self) -> float:
        return self.heralds / self.trials_total

    @property
    def fails(self) -> int:
        return self.trials_total - self.heralds


def bin_edges(grid=(PHASE_BINS, QUAD_BINS, -X_WINDOW, X_WINDOW)) -> tuple[np.ndarray, np.ndarray]:
    n_ph, n_q, lo, hi = grid
    return np.linspace(0.0, np.pi, n_ph + 1), np.linspace(lo, hi, n_q + 1)


def bin_centers(grid=(PHASE_BINS, QUAD_BINS, -X_WINDOW, X_WINDOW)) -> tuple[np.ndarray, np.ndarray]:
    pe, qe = bin_edges(grid)
    return (pe[1:] + pe[:-1]) / 2, (qe[1:] + qe[:-1]) / 2


def _bin_index(v: np.ndarray, lo: float, hi: float, n: int) -> np.ndarray:
    # half-open bins, last bin closed at hi; out-of-range -> -1 / n
    i = np.floor((v - lo) / (hi - lo) * n).astype(int)
    i[v == hi] = n - 1
    i[v < lo] = -1
    i[v > hi] = n
    return i


def bin_dataset(ds: QuadratureDataset, grid=(PHASE_BINS, QUAD_BINS, -X_WINDOW, X_WINDOW)) -> BinnedHistogram:
    if ds.heralds == 0:
        raise ValueError("cannot bin an empty dataset")
    n_ph, n_q, lo, hi = grid
    theta = np.mod(ds.thetas, np.pi)
    pi_ = _bin_index(theta, 0.0, np.pi, n_ph)
    qi = _bin_index(ds.xs, lo, hi, n_q)
    under = int(np.sum(qi < 0))
    over = int(np.sum(qi >= n_q))
    ok = (qi >= 0) & (qi < n_q)
    counts = np.zeros((n_ph, n_q), dtype=np.int64)
    np.add.at(counts, (pi_[ok], qi[ok]), 1)
    return BinnedHistogram(ds.probe, counts, ds.trials_total, ds.heralds, under, over, tuple(grid))


# -- dataset files -----------------------------------------------------------

MAGIC = "fsf-quadrature-dataset 1"


def write_dataset(ds: QuadratureDataset, path: str | Path) -> None:
    a = complex(ds.probe)
    lines = [
        MAGIC,
        f"alpha {a.real!r} {a.imag!r}",
        f"seed {ds.seed}",
        f"probe_index {ds.index}",
        f"trials_total {ds.trials_total}",
        f"heralds {ds.heralds}",
        "# theta x",
    ]
    lines += [f"{t:.9g} {x:.9g}" for t, x in zip(ds.thetas, ds.xs)]
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path: str | Path) -> QuadratureDataset:
    text = Path(path).read_text().split("\n")
    if not text or text[0] != MAGIC:
        raise DatasetFormatError(path, 1, "missing dataset header")
    header = {}
    keys = ("alpha", "seed", "probe_index", "trials_total", "heralds")
    for lineno, key in enumerate(keys, start=2):
        if lineno - 1 >= len(text):
            raise DatasetFormatError(path, lineno, "file truncated in header")
        parts = text[lineno - 1].split()
        if not parts or parts[0] != key:
            raise DatasetFormatError(path, lineno, f"expected '{key}'")
        try:
            header[key] = [float(p) for p in parts[1:]] if key == "alpha" else int(parts[1])
        except (ValueError, IndexError):
            raise DatasetFormatError(path, lineno, f"bad value for '{key}'") from None
    if len(header["alpha"]) != 2:
        raise DatasetFormatError(path, 2, "alpha needs real and imaginary parts")
    n = header["heralds"]
    start = len(keys) + 2  # header lines plus the comment line
    body = text[start:start + n]
    thetas = np.empty(n)
    xs = np.empty(n)
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != 2:
            raise DatasetFormatError(path, start + i + 1, "expected 'theta x'")
        try:
            thetas[i], xs[i] = float(parts[0]), float(parts[1])
        except ValueError:
            raise DatasetFormatError(path, start + i + 1, "non-numeric record") from None
    end_line = start + n
    if len(body) < n or end_line >= len(text) or text[end_line] != "end":
        raise DatasetFormatError(path, min(end_line, len(text)) + 1, f"file truncated: expected {n} records then 'end'")
    re_, im_ = header["alpha"]
    alpha = complex(re_, im_) if im_ else re_
    try:
        return QuadratureDataset(alpha, thetas, xs, header["trials_total"], n, header["seed"], header["probe_index"])
    except ValueError as exc:
        raise DatasetFormatError(path, 1, str(exc)) from None


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Manifest:
    plan: ProbePlan
    tensor_sha256: str
    probes: list = field(default_factory=list)  # dicts: index, alpha, file, sha256, success_*, status

    def to_json(self) -> str:
        doc = {"plan": self.plan.to_dict(), "tensor_sha256": self.tensor_sha256, "probes": self.probes}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Manifest:
        doc = json.loads(text)
        return cls(ProbePlan.from_dict(doc["plan"]), doc["tensor_sha256"], doc["probes"])


def simulate_run(E: ProcessTensor, plan: ProbePlan, out_dir: str | Path, tensor_sha256: str = "") -> Manifest:
    """Simulate every probe of ``plan`` into ``out_dir`` and write manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(plan, tensor_sha256)
    for i, alpha in enumerate(plan.amplitudes):
        psi = coherent_state(complex(alpha), E.n_max)
        p_model = float(np.trace(apply_process(E, psi.density_matrix())).real)
        entry = {"index": i, "alpha": [complex(alpha).real, complex(alpha).imag], "success_model": p_model}
        try:
            ds = simulate_probe(E, alpha, plan, probe_rng(plan.seed, i), index=i)
        except HeraldStarvation as exc:
            log.warning("skipping probe %d: %s", i, exc)
            entry.update(status="skipped", reason=str(exc))
            manifest.probes.append(entry)
            continue
        name = f"probe_{i:03d}.dat"
        write_dataset(ds, out / name)
        entry.update(
            status="ok",
            file=name,
            sha256=file_sha256(out / name),
            trials_total=ds.trials_total,
            heralds=ds.heralds,
            success_measured=ds.success_measured,
        )
        manifest.probes.append(entry)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_run(data_dir: str | Path, verify: bool = True) -> tuple[Manifest, list[QuadratureDataset]]:
    """Read manifest.json and every probe file it lists.

    Raises FileNotFoundError for missing files and ValueError when a file hash
    disagrees with the manifest.
    """
    d = Path(data_dir)
    manifest = Manifest.from_json((d / "manifest.json").read_text())
    datasets = []
    for entry in manifest.probes:
        if entry.get("status") != "ok":
            continue
        path = d / entry["file"]
        if not path.exists():
            raise FileNotFoundError(f"dataset file {path} listed in manifest is missing")
        if verify and file_sha256(path) != entry["sha256"]:
            raise ValueError(f"{path}: hash does not match manifest")
        datasets.append(read_dataset(path))
    return manifest, datasets
