"""Command-line front end: ``diracqc {check,propagate,sample,respond}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .checks import run_check
from .config import RunConfig, load_config, with_overrides
from .dirac import MatrixPhaseFunction
from .errors import ConfigError, DiracQCError
from .propagator import EnsembleState, propagate_ensemble
from .quantum import adiabatic_arrays, hamiltonian_function
from .response import Perturbation, ResponseRequest, convolve_response, response_phi
from .rng import CounterRNG
from .statmech import DensityExpansion, StationaryDensity, fredholm_check, sample_stationary

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_RUN = 0, 1, 2, 3


# ------------------------------------------------------------ observables


def observable(spec: str, model) -> MatrixPhaseFunction:
    """Named observables: identity, energy, population[:k] (adiabatic), diabatic[:k], position:i."""
    name, _, arg = spec.partition(":")
    n = model.n
    if name == "identity":
        return MatrixPhaseFunction.constant(np.eye(n))
    if name == "energy":
        return hamiltonian_function(model)
    k = int(arg) if arg else 0
    if name == "population":
        def fn(X):
            U = adiabatic_arrays(model, np.asarray(X.R, dtype=float))[1]
            u = U[..., :, k]
            return u[..., :, None] * u[..., None, :]

        return MatrixPhaseFunction(fn, n, None, True, f"population{k}")
    if name == "diabatic":
        M = np.zeros((n, n))
        M[k, k] = 1.0
        return MatrixPhaseFunction.constant(M)
    if name == "position":
        eye = np.eye(n)
        return MatrixPhaseFunction(lambda X: np.asarray(X.R)[..., k, None, None] * eye, n, None, True, f"R{k}")
    raise ConfigError(f"unknown observable '{spec}'", "observable")


def perturbation_operator(spec: dict, model) -> MatrixPhaseFunction:
    kind = spec.get("kind", "position")
    k = int(spec.get("coord", 0))
    n = model.n
    eye = np.eye(n)
    if kind == "position":
        return MatrixPhaseFunction(lambda X: np.asarray(X.R)[..., k, None, None] * eye, n, None, True, f"R{k}")
    if kind == "momentum":
        return MatrixPhaseFunction(lambda X: np.asarray(X.P)[..., k, None, None] * eye, n, None, True, f"P{k}")
    sx = np.ones((n, n)) - eye
    return MatrixPhaseFunction(lambda X: np.asarray(X.R)[..., k, None, None] * sx, n, None, True, f"R{k}sx")


def force_protocol(spec: dict, times: np.ndarray):
    """Callable for smooth protocols; bin values for the single-bin impulse."""
    kind = spec.get("kind", "zero")
    amp = float(spec.get("amplitude", 1.0))
    if kind == "impulse":
        out = np.zeros_like(times)
        out[0] = amp
        return out
    if kind == "zero":
        return lambda t: 0.0
    if kind == "step":
        return lambda t: amp
    w = float(spec.get("frequency", 1.0))
    return lambda t: amp * np.cos(w * t)


# ------------------------------------------------------------ commands


def _sampler_kwargs(cfg: RunConfig) -> dict:
    s = cfg.sampler
    return dict(chains=s.chains, burn_in=s.burn_in, thin=s.thin, step=s.step)


def _density(cfg: RunConfig) -> StationaryDensity:
    return StationaryDensity(beta=cfg.constants.beta, xi_width=cfg.sampler.xi_width)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def cmd_check(cfg: RunConfig):
    report = run_check(cfg)
    rows = [(c["name"], c["status"], "" if c["measured"] is None else c["measured"],
             "" if c["tolerance"] is None else c["tolerance"]) for c in report["checks"]]
    return _csv(["check", "status", "measured", "tolerance"], rows), report, (EXIT_OK if report["passed"]
                                                                              else EXIT_CHECK_FAILED)


def cmd_propagate(cfg: RunConfig):
    cset, model = cfg.build()
    samples = sample_stationary(_density(cfg), cset, model, cfg.ensemble.size, CounterRNG(cfg.seed),
                                **_sampler_kwargs(cfg))
    ens = samples.to_ensemble()
    if cfg.ensemble.pair is not None:
        if not all(0 <= p < model.n for p in cfg.ensemble.pair):
            raise ConfigError("pair indices out of range", "ensemble.pair")
        ens = EnsembleState(ens.R, ens.P, np.tile(cfg.ensemble.pair, (len(ens), 1)), ens.weights, ens.masses)
    obs = observable(cfg.propagate.observable, model)
    times = cfg.propagate.times.times()
    res = propagate_ensemble(ens, model, cset, cfg.integrator, obs, times, cfg.seed, cfg.constants.hbar,
                             cfg.threads, cfg.ensemble.hopping)
    col = cfg.propagate.observable.replace(":", "")
    rows = [(r["time"], r["re"], r["im"], r["se_re"], r["se_im"], r["hops"], r["frustrated"], r["max_violation"])
            for r in res.rows()]
    text = _csv(["time", col, col + "_im", "se", "se_im", "hops", "frustrated", "max_violation"], rows)
    summary = dict(command="propagate", trajectories=len(ens), used=res.n_used, truncated=res.n_truncated,
                   aborted=res.n_aborted, sampler_acceptance=samples.acceptance,
                   final=dict(value=float(res.mean[-1].real), stderr=float(res.stderr_re[-1])))
    return text, summary, EXIT_OK


def cmd_sample(cfg: RunConfig):
    cset, model = cfg.build()
    sd = _density(cfg)
    s = sample_stationary(sd, cset, model, cfg.sample.count, CounterRNG(cfg.seed), **_sampler_kwargs(cfg))
    N = cset.N
    header = [f"R{i}" for i in range(N)] + [f"P{i}" for i in range(N)] + ["alpha", "weight"]
    rows = [list(s.R[k]) + list(s.P[k]) + [int(s.alpha[k]), float(s.weights[k])] for k in range(len(s))]
    ke2 = np.sum(s.P**2 / cset.masses, axis=-1)
    m, se = s.mean_se(ke2)
    summary = dict(command="sample", count=len(s), acceptance=s.acceptance,
                   projection_failures=s.n_projection_failures, chains=s.n_chains,
                   equipartition=dict(value=float(m), stderr=float(se), expected=(N - cset.l) / sd.beta),
                   max_abs_sigma=float(np.max(np.abs(cset.sigma(s.R)), initial=0.0)),
                   max_abs_sigma_dot=float(np.max(np.abs(cset.sigma_dot(s.R, s.P)), initial=0.0)))
    if cfg.sample.fredholm:
        exp = DensityExpansion(sd, model, cset, cfg.integrator.frequency_mode)
        summary["fredholm"] = {
            label: [dict(f=e.name, estimate=e.estimate, stderr=e.stderr) for e in fredholm_check(exp, s, order)]
            for label, order in (("rho1", 1), ("synthetic", "s"))
        }
    return _csv(header, rows), summary, EXIT_OK


def cmd_respond(cfg: RunConfig):
    cset, model = cfg.build()
    rs = cfg.respond
    times = rs.times.times()
    A = perturbation_operator(rs.A, model)
    F = force_protocol(rs.force, times)
    req = ResponseRequest(observable(rs.B, model), times, rs.samples, cfg.seed)
    res = response_phi(req, Perturbation(A), _density(cfg), model, cset, cfg.integrator, cfg.constants.hbar,
                       cfg.threads, include_rho1=rs.include_rho1, hopping=cfg.ensemble.hopping,
                       sampler_options=_sampler_kwargs(cfg))
    dB = [convolve_response(times, res.phi, F, t) if k else 0.0 for k, t in enumerate(times)]
    header = ["time", "phi", "phi_im", "se", "bracket", "bracket_se", "measure", "measure_se",
              "compressibility", "compressibility_se", "delta_B"]
    rows = []
    for k, r in enumerate(res.rows()):
        rows.append((r["time"], r["phi"], r["phi_im"], r["se"], r["bracket"], r["bracket_se"], r["measure"],
                     r["measure_se"], r["kappa"], r["kappa_se"], float(dB[k])))
    summary = dict(command="respond", samples=res.n_samples, excluded=res.n_excluded, A=A.name, B=rs.B,
                   force=rs.force)
    return _csv(header, rows), summary, EXIT_OK


COMMANDS = {"check": cmd_check, "propagate": cmd_propagate, "sample": cmd_sample, "respond": cmd_respond}


# ------------------------------------------------------------ output


def write_outputs(out_dir, series: str, summary: dict, echo: str) -> Path:
    """Write the three artifacts into a sibling temp dir, then swap it into place."""
    out = Path(out_dir)
    parent = out.parent if str(out.parent) else Path(".")
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.tmp-", dir=parent))
    try:
        (tmp / "series.csv").write_text(series, encoding="utf-8")
        (tmp / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (tmp / "config.echo").write_text(echo, encoding="utf-8")
        old = None
        if out.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{out.name}.old-", dir=parent))
            os.replace(out, old / out.name)
        os.replace(tmp, out)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def run_command(cfg: RunConfig, command: str, out_dir=None) -> int:
    series, summary, code = COMMANDS[command](cfg)
    summary = dict(summary, seed=cfg.seed)
    write_outputs(out_dir or cfg.out, series, summary, cfg.to_yaml())
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diracqc", description="Constrained quantum-classical dynamics runs.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run configuration (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, help="worker threads for trajectory chunks")
    p.add_argument("--out", help="output directory (replaced atomically)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = with_overrides(cfg, seed=args.seed, threads=args.threads, out=args.out)
        code = run_command(cfg, args.command)
    except ConfigError as exc:
        print(f"diracqc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"diracqc: I/O error on {exc.filename or '?'}: {exc.strerror}", file=sys.stderr)
        return EXIT_RUN
    except DiracQCError as exc:
        print(f"diracqc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN
    print(f"diracqc {args.command}: wrote {cfg.out}" + (" (checks failed)" if code == EXIT_CHECK_FAILED else ""))
    return code


if __name__ == "__main__":
    sys.exit(main())
