import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.integrate import quad

from fsftomo.fock import quadrature_pdf
from fsftomo.homodyne import (
    DatasetFormatError,
    HeraldStarvation,
    ProbePlan,
    QuadratureDataset,
    bin_dataset,
    bin_edges,
    inverse_cdf_sampler,
    load_run,
    probe_rng,
    read_dataset,
    simulate_probe,
    simulate_run,
    write_dataset,
)
from fsftomo.model import build_tensor_attenuation, identity_tensor, reference_model
from fsftomo.tomography import success_curve


def single_photon_pdf(x):
    return 2 * x**2 * np.exp(-x**2) / math.sqrt(math.pi)


def test_single_photon_marginal():
    rho = np.diag([0.0, 1.0, 0.0]).astype(complex)
    x = np.linspace(-4, 4, 81)
    for theta in (0.0, 1.1):
        assert np.allclose(quadrature_pdf(rho, theta, x), single_photon_pdf(x), atol=1e-14)


def test_sampler_chi_square():
    grid = np.linspace(-5, 5, 2401)
    draw = inverse_cdf_sampler(single_photon_pdf(grid), grid)
    x = draw(np.random.default_rng(11).random(50_000))
    edges = np.linspace(-3.5, 3.5, 36)
    edges[0], edges[-1] = -np.inf, np.inf
    observed, _ = np.histogram(x, edges)
    cdf = [quad(single_photon_pdf, -10, e)[0] if np.isfinite(e) else float(e > 0) for e in edges]
    expected = np.diff(cdf) * len(x)
    assert stats.chisquare(observed, expected * observed.sum() / expected.sum()).pvalue > 1e-3


def test_plan_validation():
    assert np.allclose(ProbePlan().phases(), (np.arange(30) + 0.5) * np.pi / 30)
    with pytest.raises(ValueError):
        ProbePlan(samples_per_probe=999)
    with pytest.raises(ValueError):
        ProbePlan(amplitudes=())
    with pytest.raises(ValueError):
        ProbePlan(amplitudes=(2.5,))
    p = ProbePlan(amplitudes=(0.2, 0.5 + 0.1j), seed=4)
    assert ProbePlan.from_dict(p.to_dict()) == p


def test_vacuum_variance():
    plan = ProbePlan(amplitudes=(0.0,), samples_per_probe=20_000)
    ds = simulate_probe(identity_tensor(6), 0.0, plan, probe_rng(0, 0))
    assert ds.heralds == ds.trials_total == 20_000
    sigma = 0.5 * math.sqrt(2 / ds.heralds)
    assert abs(np.var(ds.xs) - 0.5) < 3 * sigma


def test_attenuated_coherent_mean():
    alpha = 1.0
    plan = ProbePlan(amplitudes=(alpha,), samples_per_probe=40_000)
    ds = simulate_probe(build_tensor_attenuation(0.5, 6), alpha, plan, probe_rng(3, 0))
    th0 = plan.phases()[0]
    sel = np.isclose(ds.thetas, th0, atol=1e-8)
    expected = math.sqrt(2) * math.sqrt(0.5) * alpha * math.cos(th0)
    assert abs(ds.xs[sel].mean() - expected) < 4 * math.sqrt(0.5 / sel.sum())


def test_success_rate_law_of_large_numbers():
    E = reference_model()
    plan = ProbePlan(amplitudes=(1.0,), samples_per_probe=20_000)
    ds = simulate_probe(E, 1.0, plan, probe_rng(7, 0))
    p = success_curve(E, [1.0])[0]
    assert ds.trials_total == math.ceil(20_000 / p)
    assert abs(ds.success_measured - p) < 4 * math.sqrt(p * (1 - p) / ds.trials_total)


def test_phases_uniform_over_grid():
    plan = ProbePlan(amplitudes=(0.5,), samples_per_probe=30_000)
    ds = simulate_probe(identity_tensor(6), 0.5, plan, probe_rng(1, 0))
    idx = np.rint(ds.thetas / (np.pi / 30) - 0.5).astype(int)
    assert set(idx) <= set(range(30))
    assert stats.chisquare(np.bincount(idx, minlength=30)).pvalue > 1e-3


def test_starvation():
    zero = identity_tensor(3).scaled(0.0)
    with pytest.raises(HeraldStarvation):
        simulate_probe(zero, 0.5, ProbePlan(amplitudes=(0.5,), n_max=3), probe_rng(0, 0))


def test_bin_single_record():
    ds = QuadratureDataset(0.3, [0.01], [0.0], 5, 1)
    h = bin_dataset(ds)
    assert h.counts[0, 300] == 1 and h.counts.sum() == 1
    assert h.fails == 4


def test_bin_identical_records():
    ds = QuadratureDataset(0.3, [1.0] * 50, [-2.2] * 50, 80, 50)
    h = bin_dataset(ds)
    assert np.count_nonzero(h.counts) == 1 and h.counts.max() == 50


def test_bin_edges_exact():
    pe, qe = bin_edges()
    assert np.array_equal(qe, np.linspace(-5.0, 5.0, 602))
    assert np.array_equal(pe, np.linspace(0.0, np.pi, 31))
    h = bin_dataset(QuadratureDataset(0.1, [0.0, np.pi, 0.2, 0.2], [-5.0, 5.0, -5.1, 9.0], 4, 4))
    assert h.counts[0, 0] == 1
    assert h.counts[0, 600] == 1  # theta = pi folds to 0; x = 5 closes the last bin
    assert (h.underflow, h.overflow) == (1, 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-7, 7)), min_size=1, max_size=300))
def test_binning_conserves_counts(records):
    th, xs = zip(*records)
    ds = QuadratureDataset(0.2, th, xs, len(records) + 3, len(records))
    h = bin_dataset(ds)
    assert h.counts.sum() + h.underflow + h.overflow == ds.heralds
    assert h.underflow == sum(x < -5 for x in xs)


def _small_dataset():
    plan = ProbePlan(amplitudes=(0.7,), samples_per_probe=1000, seed=9)
    return simulate_probe(reference_model(), 0.7, plan, probe_rng(9, 0))


def test_dataset_round_trip(tmp_path):
    ds = _small_dataset()
    write_dataset(ds, tmp_path / "d.dat")
    assert read_dataset(tmp_path / "d.dat") == ds


def test_truncated_dataset_rejected(tmp_path):
    ds = _small_dataset()
    write_dataset(ds, tmp_path / "d.dat")
    lines = (tmp_path / "d.dat").read_text().splitlines()
    (tmp_path / "cut.dat").write_text("\n".join(lines[:-20]) + "\n")
    with pytest.raises(DatasetFormatError, match="truncated"):
        read_dataset(tmp_path / "cut.dat")
    (tmp_path / "hdr.dat").write_text("\n".join(lines[:3]) + "\n")
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "hdr.dat")
    bad = lines[:]
    bad[10] = "0.1 nope"
    (tmp_path / "bad.dat").write_text("\n".join(bad) + "\n")
    with pytest.raises(DatasetFormatError, match=":11:"):
        read_dataset(tmp_path / "bad.dat")


def test_simulate_run_deterministic(tmp_path):
    plan = ProbePlan(amplitudes=(0.3, 0.9), samples_per_probe=1000, seed=5)
    E = reference_model()
    m1 = simulate_run(E, plan, tmp_path / "a")
    simulate_run(E, plan, tmp_path / "b")
    for name in ("manifest.json", "probe_000.dat", "probe_001.dat"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest, datasets = load_run(tmp_path / "a")
    assert manifest.plan == plan and len(datasets) == 2
    assert datasets[1].heralds == m1.probes[1]["heralds"]
    other = simulate_run(E, ProbePlan(amplitudes=(0.3, 0.9), samples_per_probe=1000, seed=6), tmp_path / "c")
    assert other.probes[0]["sha256"] != m1.probes[0]["sha256"]


def test_load_run_detects_tampering(tmp_path):
    plan = ProbePlan(amplitudes=(0.3, 0.9), samples_per_probe=1000)
    simulate_run(reference_model(), plan, tmp_path)
    path = tmp_path / "probe_001.dat"
    path.write_text(path.read_text().replace("end\n", "end\n\n"))
    with pytest.raises(ValueError, match="hash"):
        load_run(tmp_path)
    path.unlink()
    with pytest.raises(FileNotFoundError):
        load_run(tmp_path)
