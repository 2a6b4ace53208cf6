"""Command-line pipeline: model -> simulate -> reconstruct -> analyze (and scan).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .homodyne import bin_dataset, file_sha256, load_run, simulate_run
from .model import (
    FsfParams,
    ProcessTensor,
    build_tensor_attenuation,
    compose_fsf_tensor,
    conditional_stats,
    linear_loss_prediction,
    load_tensor,
    save_tensor,
)
from .tomography import (
    ReconstructionError,
    choi_fidelity,
    fidelity_scan,
    mlr_reconstruct,
    random_state_fidelity_study,
    success_curve,
)

log = logging.getLogger("fsftomo")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_tensor(path) -> ProcessTensor:
    try:
        return load_tensor(path)
    except FileNotFoundError:
        raise CliError(f"tensor file {path} not found", EXIT_DATA) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None


def stats_table(E: ProcessTensor) -> str:
    st = conditional_stats(E)
    d = E.dim
    lines = ["n,s_n," + ",".join(f"P({k}|n)" for k in range(d))]
    for n in range(d):
        row = ["" if not st.defined[n] else f"{st.normalized[k, n]:.10g}" for k in range(d)]
        lines.append(f"{n},{st.success[n]:.10g}," + ",".join(row))
    return "\n".join(lines) + "\n"


def diagonal_table(E: ProcessTensor) -> str:
    diag = E.diagonal()
    lines = ["n,k,E_kk^nn"]
    for n in range(E.dim):
        for k in range(E.dim):
            lines.append(f"{n},{k},{diag[k, n]:.10g}")
    return "\n".join(lines) + "\n"


def model_summary(E: ProcessTensor, cfg: RunConfig, ideal: bool) -> str:
    st = conditional_stats(E)
    p11 = st.p(1, 1)
    lines = [
        "FSF model tensor",
        f"R = {cfg.R}  eta_h = {cfg.eta_h}  M = {cfg.M}  eta_det = {cfg.eta_det}  "
        f"eta_apd = {cfg.eta_apd}  povm = {cfg.povm}  n_max = {cfg.n_max}" + ("  (ideal)" if ideal else ""),
        "",
        "success probability per input Fock layer:",
    ]
    lines += [f"  s_{n} = {s:.6f}" for n, s in enumerate(st.success)]
    lines.append("")
    lines.append("P(1|1) = " + ("undefined (zero success)" if p11 is None else f"{p11:.6f}"))
    lines.append("")
    lines.append("conditional photon-number table:")
    lines.append(stats_table(E))
    return "\n".join(lines)


def cmd_model(args) -> int:
    cfg = _config(args)
    if args.ideal:
        cfg = cfg.replace(M=1.0, eta_h=1.0, povm="number-resolving-1")
    E = cfg.model_tensor()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(E, out / "model_tensor.json")
    _write(out / "model_summary.txt", model_summary(E, cfg, args.ideal))
    _write(out / "run.cfg", cfg.to_text())
    log.info("wrote %s", out / "model_tensor.json")
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if not args.tensor:
        raise CliError("simulate needs --tensor", EXIT_CONFIG)
    E = _load_tensor(args.tensor)
    if E.n_max != cfg.n_max:
        cfg = cfg.replace(n_max=E.n_max)
    out = Path(args.out)
    manifest = simulate_run(E, cfg.plan(), out, file_sha256(args.tensor))
    _write(out / "run.cfg", cfg.to_text())
    skipped = [p for p in manifest.probes if p["status"] != "ok"]
    for p in skipped:
        log.warning("probe %d skipped: %s", p["index"], p["reason"])
    single = compose_fsf_tensor(
        FsfParams(R=cfg.R, eta_h=cfg.eta_h, M=1.0, eta_det=cfg.eta_det, n_max=cfg.n_max), cfg.povm_element()
    )
    amps = [complex(*p["alpha"]) for p in manifest.probes]
    single_curve = success_curve(single, amps)
    lines = ["alpha_sq,success_measured,sigma_binomial,success_model,success_single_mode"]
    for p, s1 in zip(manifest.probes, single_curve):
        a2 = abs(complex(*p["alpha"])) ** 2
        if p["status"] == "ok":
            m = p["success_measured"]
            sig = math.sqrt(m * (1 - m) / p["trials_total"])
            lines.append(f"{a2:.10g},{m:.10g},{sig:.6g},{p['success_model']:.10g},{s1:.10g}")
        else:
            lines.append(f"{a2:.10g},,,{p['success_model']:.10g},{s1:.10g}")
    _write(out / "success_curve.csv", "\n".join(lines) + "\n")
    log.info("simulated %d probes into %s", len(manifest.probes) - len(skipped), out)
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    if not args.data:
        raise CliError("reconstruct needs --data", EXIT_CONFIG)
    try:
        manifest, datasets = load_run(args.data)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    except ValueError as exc:
        raise CliError(f"inconsistent dataset: {exc}", EXIT_DATA) from None
    if manifest.plan.n_max != cfg.n_max and args.nmax is None:
        cfg = cfg.replace(n_max=manifest.plan.n_max)
    hists = [bin_dataset(ds) for ds in datasets]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = mlr_reconstruct(hists, cfg.recon(),
                              callback=lambda it, ll: log.info("iteration %d: log-likelihood %.12g", it, ll))
    except (ReconstructionError, np.linalg.LinAlgError) as exc:
        raise CliError(f"reconstruction failed: {exc}", EXIT_NUMERIC) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    save_tensor(res.tensor, out / "reconstructed_tensor.json")
    rows = ["iteration,log_likelihood"] + [f"{i},{ll!r}" for i, ll in enumerate(res.log_likelihoods[1:], start=1)]
    _write(out / "iteration_log.csv", "\n".join(rows) + "\n")
    summary = [f"iterations: {res.iterations}", f"converged: {res.converged}",
               f"final log-likelihood: {res.log_likelihoods[-1]!r}"]
    if args.tensor:
        E = _load_tensor(args.tensor)
        if file_sha256(args.tensor) != manifest.tensor_sha256:
            log.warning("model tensor %s differs from the one that generated the data", args.tensor)
        summary.append(f"Choi fidelity vs model: {choi_fidelity(res.tensor, E):.6f}")
    _write(out / "reconstruct_summary.txt", "\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def _scan_grids(cfg: RunConfig, points: int):
    base = FsfParams(R=cfg.R, eta_h=cfg.eta_h, M=cfg.M, eta_det=cfg.eta_det, n_max=cfg.n_max)
    return base, [
        ("eta_h", np.linspace(0, 1, points), "eta_apd", np.linspace(0, 1, points), "scan_etah_etaapd.csv"),
        ("eta_h", np.linspace(0.2, 0.8, points), "R", np.linspace(0, 1, points), "scan_etah_R.csv"),
    ]


def _run_scans(recon: ProcessTensor, cfg: RunConfig, points: int, out: Path) -> list[str]:
    base, grids = _scan_grids(cfg, points)
    lines = []
    for xn, xs, yn, ys, name in grids:
        sc = fidelity_scan(recon, xn, xs, yn, ys, base=base, eta_apd=cfg.eta_apd, povm_kind=cfg.povm)
        _write(out / name, sc.to_csv())
        (i, j), (x, y) = sc.argmax_index, sc.argmax
        lines.append(f"{name}: max fidelity {sc.fidelity[i, j]:.6f} at {xn}={x:.4g} (index {i}), {yn}={y:.4g} (index {j})")
    return lines


def cmd_scan(args) -> int:
    cfg = _config(args)
    if not args.tensor:
        raise CliError("scan needs --tensor", EXIT_CONFIG)
    recon = _load_tensor(args.tensor)
    cfg = cfg.replace(n_max=recon.n_max)
    lines = _run_scans(recon, cfg, args.points, Path(args.out))
    print("\n".join(lines))
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    if not args.tensor or not args.model:
        raise CliError("analyze needs --tensor (reconstruction) and --model", EXIT_CONFIG)
    recon = _load_tensor(args.tensor)
    model = _load_tensor(args.model)
    if recon.elems.shape != model.elems.shape:
        raise CliError(f"dimension mismatch: {recon.elems.shape} vs {model.elems.shape}", EXIT_DATA)
    cfg = cfg.replace(n_max=recon.n_max)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    F = choi_fidelity(recon, model)
    _write(out / "stats_reconstructed.csv", stats_table(recon))
    _write(out / "stats_model.csv", stats_table(model))
    _write(out / "diagonal_reconstructed.csv", diagonal_table(recon))
    _write(out / "diagonal_model.csv", diagonal_table(model))

    sr, sm = conditional_stats(recon), conditional_stats(model)
    p11 = sr.p(1, 1)
    rows = ["n,P_nn_reconstructed,P_nn_model,P_nn_linear_loss"]
    for n in range(1, recon.dim):
        lin = "" if p11 is None else f"{linear_loss_prediction(p11, n):.10g}"
        rows.append(f"{n},{sr.normalized[n, n]:.10g},{sm.normalized[n, n]:.10g},{lin}")
    _write(out / "survival.csv", "\n".join(rows) + "\n")

    summary = [f"Choi fidelity (reconstructed vs model): {F:.6f}",
               "P(1|1) reconstructed: " + ("undefined" if p11 is None else f"{p11:.6f}"),
               "P(1|1) model: " + ("undefined" if sm.p(1, 1) is None else f"{sm.p(1, 1):.6f}")]
    if args.points > 0:
        summary += _run_scans(recon, cfg, args.points, out)
    if args.states > 0:
        rng = np.random.default_rng(cfg.seed)
        att = build_tensor_attenuation(0.5, recon.n_max)
        nmaxes = range(1, recon.n_max + 1)
        vs_model = random_state_fidelity_study(recon, model, nmaxes, args.states, rng)
        vs_att = random_state_fidelity_study(recon, att, nmaxes, args.states, rng)
        rows = ["n_max,mean_vs_model,std_vs_model,mean_vs_attenuation,std_vs_attenuation"]
        for a, b in zip(vs_model, vs_att):
            rows.append(f"{a.n_max},{a.mean:.10g},{a.std:.6g},{b.mean:.10g},{b.std:.6g}")
        _write(out / "random_state_fidelity.csv", "\n".join(rows) + "\n")
        summary.append(f"random-state output fidelity vs model (min over n_max): {min(a.mean for a in vs_model):.6f}")
    _write(out / "analysis_summary.txt", "\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def _config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    return cfg.replace(
        seed=getattr(args, "seed", None),
        max_iters=getattr(args, "iters", None),
        mu=getattr(args, "mu", None),
        n_max=getattr(args, "nmax", None),
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsftomo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--nmax", type=int)
        sp.add_argument("--out", metavar="DIR", default=out_default)

    sp = sub.add_parser("model", help="build the composed model tensor")
    common(sp, "model")
    sp.add_argument("--ideal", action="store_true", help="M=1, eta_h=1, number-resolving herald")
    sp.set_defaults(func=cmd_model)

    sp = sub.add_parser("simulate", help="simulate heralded homodyne data from a tensor")
    common(sp, "data")
    sp.add_argument("--tensor", metavar="PATH")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("reconstruct", help="maximum-likelihood process reconstruction")
    common(sp, "recon")
    sp.add_argument("--data", metavar="DIR")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--tensor", metavar="PATH", help="model tensor to report fidelity against")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("analyze", help="compare a reconstruction with a model")
    common(sp, "analysis")
    sp.add_argument("--tensor", metavar="PATH", help="reconstructed tensor")
    sp.add_argument("--model", metavar="PATH", help="model tensor")
    sp.add_argument("--points", type=int, default=21, help="scan grid points per axis (0 disables)")
    sp.add_argument("--states", type=int, default=10_000, help="random states per n_max (0 disables)")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("scan", help="fidelity surfaces of a tensor over model parameters")
    common(sp, "scan")
    sp.add_argument("--tensor", metavar="PATH")
    sp.add_argument("--points", type=int, default=21)
    sp.set_defaults(func=cmd_scan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fsftomo: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"fsftomo: {exc}", file=sys.stderr)
        return exc.code
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"fsftomo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
