import numpy as np
import pytest

from fsftomo.fock import random_density_matrix
from fsftomo.homodyne import REFERENCE_AMPLITUDES, ProbePlan, bin_dataset, probe_rng, simulate_probe
from fsftomo.model import (
    FsfParams,
    ProcessTensor,
    build_tensor_attenuation,
    identity_tensor,
    reference_model,
)
from fsftomo.tomography import (
    MeasurementModel,
    ReconConfig,
    ReconstructionError,
    charge_mask,
    choi_fidelity,
    choi_from_tensor,
    expected_histograms,
    fidelity_scan,
    maximally_mixed,
    mlr_reconstruct,
    predicted_probability,
    quadrature_outcomes,
    random_state_fidelity_study,
    rrr_step,
    success_curve,
    tensor_from_choi,
)


def simulate_histograms(E, amplitudes, samples, seed):
    plan = ProbePlan(amplitudes=tuple(amplitudes), samples_per_probe=samples, seed=seed, n_max=E.n_max)
    return [bin_dataset(simulate_probe(E, a, plan, probe_rng(seed, i))) for i, a in enumerate(amplitudes)]


def random_cp_tensor(d, rng):
    # random Kraus-like Choi, scaled so the largest layer success is below 1
    g = rng.standard_normal((d * d, d * d)) + 1j * rng.standard_normal((d * d, d * d))
    c = g @ g.conj().T
    e = c.reshape(d, d, d, d).transpose(0, 2, 1, 3)
    s = np.linalg.eigvalsh(np.einsum("jjmn->mn", e))[-1]
    return ProcessTensor(0.9 * e / s, "random")


def test_identity_choi_rank_one():
    C = choi_from_tensor(identity_tensor(4))
    phys = C.physical()
    w = np.linalg.eigvalsh(phys)
    assert np.sum(w > 1e-12) == 1 and w[-1] == pytest.approx(5)
    assert np.allclose(C.partial_trace_out(), np.eye(5))


def test_attenuation_choi_trace():
    E = build_tensor_attenuation(0.5, 6)
    phys = choi_from_tensor(E).physical()
    assert np.trace(phys).real == pytest.approx(7)
    assert np.linalg.eigvalsh(phys)[0] > -1e-12


def test_choi_round_trip_and_completeness():
    E = random_cp_tensor(4, np.random.default_rng(0))
    C = choi_from_tensor(E)
    assert np.array_equal(tensor_from_choi(C).elems, E.elems)
    assert np.allclose(C.partial_trace_out(), np.eye(4), atol=1e-12)
    assert np.linalg.eigvalsh(C.matrix)[0] > -1e-10


def test_choi_rejects_non_hermitian():
    e = identity_tensor(2).elems.copy()
    e[0, 1, 0, 0] = 1.0
    with pytest.raises(ValueError):
        choi_from_tensor(ProcessTensor(e))


def test_maximally_mixed_is_trace_preserving():
    C = maximally_mixed(7)
    assert np.allclose(C.partial_trace_out(), np.eye(7))
    assert np.all(C.matrix[charge_mask(7)] == C.matrix[charge_mask(7)])
    assert np.all(C.matrix[~charge_mask(7)] == 0)


def test_charge_mask_respects_model():
    # the generating tensor only couples entries with equal photon-number change
    C = choi_from_tensor(reference_model())
    assert np.max(np.abs(C.matrix[~charge_mask(7)])) == 0


def test_quadrature_outcomes_complete():
    cfg = ReconConfig()
    u, w, outside = quadrature_outcomes(cfg)
    per_phase = w * 30 * (u[:601].T @ u[:601].conj())
    assert np.allclose(per_phase, np.eye(7), atol=1e-4)
    assert np.linalg.eigvalsh(outside)[0] > -1e-12
    assert np.allclose(w * (u.T @ u.conj()) + outside, np.eye(7), atol=1e-14)


def test_predicted_probabilities():
    cfg = ReconConfig()
    C_id = choi_from_tensor(identity_tensor(6))
    assert predicted_probability(C_id, 0.0, "fail", cfg) == pytest.approx(0, abs=1e-15)
    E = reference_model()
    C = choi_from_tensor(E)
    for a in (0.1, 0.8, 1.5):
        total = sum(predicted_probability(C, a, (p, q), cfg) for p in range(0, 30, 3) for q in range(601)) * 3
        assert total == pytest.approx(success_curve(E, [a])[0], abs=1e-3)
        assert predicted_probability(C, a, "fail", cfg) == pytest.approx(1 - success_curve(E, [a])[0], abs=1e-12)
        assert predicted_probability(C, a, "outside", cfg) >= -1e-12


def test_expected_histograms_conserve_trials():
    E = reference_model()
    for h in expected_histograms(E, [0.2, 1.2], trials=1000.0):
        assert h.counts.sum() + h.overflow + h.fails == pytest.approx(1000.0, rel=1e-12)
        assert np.all(h.counts >= -1e-12)


def test_measurement_model_validation():
    hs = expected_histograms(reference_model(), [0.5], trials=100.0)
    with pytest.raises(ValueError, match="two distinct"):
        MeasurementModel(hs, ReconConfig())
    hs = expected_histograms(reference_model(), [0.5, 0.6], trials=100.0)
    with pytest.raises(ValueError, match="grid"):
        MeasurementModel(hs, ReconConfig(grid=(10, 101, -5.0, 5.0)))


def test_config_validation():
    with pytest.raises(ValueError):
        ReconConfig(mu=0.0)
    with pytest.raises(ValueError):
        ReconConfig(max_iters=-1)


def test_zero_iterations_returns_initializer():
    hs = expected_histograms(reference_model(), [0.3, 1.0], trials=1e4)
    res = mlr_reconstruct(hs, ReconConfig(max_iters=0))
    assert np.array_equal(res.choi.matrix, maximally_mixed(7).matrix)
    assert res.iterations == 0 and len(res.log_likelihoods) == 1


def test_generating_choi_is_fixed_point():
    E = reference_model()
    cfg = ReconConfig()
    hs = expected_histograms(E, REFERENCE_AMPLITUDES, trials=1e6, cfg=cfg)
    model = MeasurementModel(hs, cfg)
    C = choi_from_tensor(E)
    _, R = model.log_likelihood_and_R(C)
    step = rrr_step(C, R, cfg.mu, model)
    assert np.max(np.abs(step.matrix - C.matrix)) < 1e-8


def test_likelihood_monotone_and_trace_preserving():
    hs = simulate_histograms(reference_model(), REFERENCE_AMPLITUDES[::4], 2000, seed=3)
    seen = []
    res = mlr_reconstruct(hs, ReconConfig(max_iters=25), callback=lambda it, ll: seen.append(it))
    ll = np.array(res.log_likelihoods)
    assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[1:]))
    assert seen == list(range(1, res.iterations + 1))
    assert np.allclose(res.choi.partial_trace_out(), np.eye(7), atol=1e-8)
    assert np.linalg.eigvalsh(res.choi.matrix)[0] > -1e-8
    res.tensor.check()


def test_decrease_detected(monkeypatch):
    import fsftomo.tomography as tomo

    hs = expected_histograms(reference_model(), [0.3, 1.0], trials=1e4)
    calls = iter(range(100))
    real = tomo.MeasurementModel.log_likelihood_and_R

    def shrinking(self, C, with_R=True):
        ll, R = real(self, C, with_R)
        return ll - 1e12 * next(calls), R

    monkeypatch.setattr(tomo.MeasurementModel, "log_likelihood_and_R", shrinking)
    with pytest.raises(ReconstructionError, match="decreased"):
        mlr_reconstruct(hs, ReconConfig(max_iters=5))


@pytest.mark.slow
def test_attenuation_closed_loop():
    E = build_tensor_attenuation(0.5, 6)
    hs = simulate_histograms(E, REFERENCE_AMPLITUDES, 20_000, seed=1)
    # no iteration cap here; this fit is still climbing at 150 steps
    res = mlr_reconstruct(hs, ReconConfig(max_iters=400))
    assert choi_fidelity(res.tensor, E) >= 0.99


def test_choi_fidelity_examples():
    E = reference_model()
    assert choi_fidelity(E, E) == pytest.approx(1, abs=1e-9)
    erase = np.zeros((7, 7, 7, 7), dtype=complex)
    for m in range(7):
        erase[0, 0, m, m] = 1
    # square roots of roundoff-level zero eigenvalues limit this to ~1e-8
    assert choi_fidelity(identity_tensor(6), ProcessTensor(erase)) == pytest.approx(1 / 49, abs=1e-7)
    with pytest.raises(ValueError):
        choi_fidelity(identity_tensor(3), identity_tensor(4))


def test_scan_self_consistency():
    base = FsfParams()
    E = reference_model()
    a = fidelity_scan(E, "eta_h", np.linspace(0, 1, 21), "eta_apd", np.linspace(0, 1, 21), base=base)
    assert a.argmax_index == (9, 9)
    assert np.all((a.fidelity >= 0) & (a.fidelity <= 1))
    b = fidelity_scan(E, "eta_h", np.linspace(0.2, 0.8, 21), "R", np.linspace(0, 1, 21),
                      base=FsfParams(eta_h=0.44))
    assert b.argmax == pytest.approx((0.44, 0.5))
    assert b.to_csv().splitlines()[0] == "eta_h,R,fidelity"
    assert len(b.to_csv().splitlines()) == 1 + 21 * 21


def test_random_state_study():
    E = reference_model()
    same = random_state_fidelity_study(E, E, [1, 3], 1000, np.random.default_rng(0))
    for s in same:
        assert s.mean == pytest.approx(1, abs=1e-9) and s.std < 1e-9 and s.used == 1000
    att = build_tensor_attenuation(0.5, 6)
    diff = random_state_fidelity_study(E, att, [2], 1000, np.random.default_rng(0))
    assert diff[0].mean < 0.99
    with pytest.raises(ValueError):
        random_state_fidelity_study(E, E, [1], 10, np.random.default_rng(0))


def test_random_states_embedded():
    rho = random_density_matrix(2, np.random.default_rng(3))
    assert rho.shape == (3, 3)
