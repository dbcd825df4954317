"""Command line runner: ``vexflow run <config>`` and ``vexflow verify <config>``.

Exit codes: 0 when every enabled check passes, 1 when a check fails or a
stage raises, 2 for an invalid configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from contextlib import nullcontext
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy import fft

from .errors import ConfigurationError, VexflowError

log = logging.getLogger("vexflow")


class StageError(Exception):
    def __init__(self, stage, exc):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")


class _Stage:
    """Context manager that tags any non-configuration error with a stage name."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, kind, exc, tb):
        if exc is None or isinstance(exc, (ConfigurationError, StageError)):
            return False
        if isinstance(exc, (VexflowError, ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError)):
            raise StageError(self.name, exc) from exc
        return False


def _versions():
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "scipy", "pyyaml"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = "unknown"
    return out


class _Outputs:
    """Writes files into the output directory and remembers their hashes."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hashes = {}

    def write(self, name, data):
        raw = data.encode() if isinstance(data, str) else bytes(data)
        (self.dir / name).write_bytes(raw)
        self.hashes[name] = hashlib.sha256(raw).hexdigest()


def _check(checks, name, passed, **info):
    checks[name] = {"passed": bool(passed), **info}
    log.info("%s %s %s", "PASS" if passed else "FAIL", name, info)


def _psi_callable(expr):
    if expr is None:
        return lambda x, y: np.ones_like(x)
    return lambda x, y: np.broadcast_to(np.asarray(expr(x=x, y=y), dtype=float), np.shape(x))


def _harmonic_csv(records):
    rows = ["step,t,mean,misfit,scaled_laplacian"]
    for r in records[1:]:
        hm = r.harmonic
        rows.append(f"{r.step},{r.t!r},{hm['mean']!r},{hm['misfit']!r},{hm['scaled_laplacian']!r}")
    return "\n".join(rows) + "\n"


def _pressure_rows(state):
    from .pressure import lp_norm

    h = state.grid.h
    sp = state.config.regularized.s_max_conjugate
    rows = []
    for r in state.history[1:]:
        b = r.pressures
        rows.append({
            "step": r.step, "t": float(r.t),
            "p1_l2": lp_norm(b.p1.sum(axis=0), 2.0, h), "p2_l2": lp_norm(b.p2.sum(axis=0), 2.0, h),
            "p3_l2": lp_norm(b.p3, 2.0, h), "p4_l2": lp_norm(b.p4, 2.0, h),
            "p4_conjugate": lp_norm(b.p4, sp, h), "ph_l2": lp_norm(b.ph, 2.0, h),
        })
    return rows


def _ladder_fields(state):
    from .exponent import TimeSamples

    recs = state.history
    u = np.stack([state.grid.cell_velocity(r.w) for r in recs[1:]])
    times = np.array([0.5 * (a.t + b.t) for a, b in zip(recs[:-1], recs[1:])])
    weights = np.array([b.t - a.t for a, b in zip(recs[:-1], recs[1:])])
    return u, TimeSamples(times, weights)


def run(args):
    from .scenario import load_scenario
    from .solver import (energy_report, local_energy_report, minty_identification, sample_eta, simulate,
                         theta_sweep, write_checkpoint)
    from .stress import verify_assumptions

    scen = load_scenario(args.config, seed=args.seed, output=args.output)
    out = _Outputs(scen.output)
    diag = scen.diagnostics
    checks = {}
    need_pressure = "pressure" in diag or "local_energy" in diag
    cfg = scen.solver_config(store_pressures=need_pressure)

    with _Stage("covering"):
        cov, _ = cfg.localization
        out.write("covering.csv", cov.to_csv())

    with _Stage("assumptions"):
        report = verify_assumptions(scen.model, theta=scen.theta, d=scen.domain.d, seed=scen.seed)
        out.write("assumptions.csv", report.to_csv())
        _check(checks, "assumptions", report.passed, failures=[c.name for c in report.failures()])

    sweep = None
    if "sweep" in diag:
        with _Stage("sweep"):
            sweep = theta_sweep(cfg, scen.theta_list, factor=diag["sweep"]["factor"])
            out.write("sweep.csv", sweep.to_csv())
            _check(checks, "sweep", sweep.passed, flags=dict(sweep.flags), notes=list(sweep.notes))

    with _Stage("simulate"):
        reuse = [r.state for r in (sweep.runs if sweep else ()) if r.theta == scen.theta and r.state is not None]
        state = reuse[0] if reuse else simulate(cfg)

    if "energy" in diag:
        with _Stage("energy"):
            ledger = energy_report(state)
            out.write("energy.csv", ledger.to_csv())
            limit = diag["energy"]["max_relative_residual"] * ledger.largest_column
            _check(checks, "energy", ledger.final_residual <= limit,
                   final_residual=ledger.final_residual, limit=limit)

    if "pressure" in diag:
        with _Stage("pressure"):
            from .pressure import norms_csv

            recs = state.history
            out.write("pressure_norms.csv", norms_csv(_pressure_rows(state)))
            out.write("harmonic.csv", _harmonic_csv(recs))
            worst = max(r.harmonic["scaled_laplacian"] for r in recs[1:])
            mean = max(abs(r.harmonic["mean"]) for r in recs[1:])
            limit = diag["pressure"]["max_scaled_laplacian"]
            _check(checks, "pressure", worst <= limit and mean <= 1e-10,
                   max_scaled_laplacian=worst, max_abs_mean=mean, limit=limit)

    if "local_energy" in diag:
        with _Stage("local_energy"):
            opts = diag["local_energy"]
            ledger = local_energy_report(state, _psi_callable(opts["psi"]))
            out.write("local_energy.csv", ledger.to_csv())
            fraction = ledger.final_residual / ledger.largest_column
            _check(checks, "local_energy", fraction <= opts["max_fraction"], fraction=fraction,
                   limit=opts["max_fraction"])

    if "minty" in diag:
        with _Stage("minty"):
            opts = diag["minty"]
            eta = sample_eta(opts["n_eta"], seed=scen.seed, scale=opts["eta_scale"])
            rep = minty_identification(sweep, eta, _psi_callable(opts["psi"]), tol=opts["tol"])
            out.write("minty.csv", rep.to_csv())
            _check(checks, "minty", rep.monotone_ok and rep.decreasing, monotone=rep.monotone_ok,
                   errors_decreasing=rep.decreasing)

    if "ladder" in diag:
        with _Stage("ladder"):
            from .mollifier import convergence_ladder

            opts = diag["ladder"]
            u, samples = _ladder_fields(state)
            X, Y = scen.domain.mesh()
            psi = np.broadcast_to(np.asarray(opts["psi"](x=X, y=Y), dtype=float), X.shape)
            lad = convergence_ladder(u, psi, opts["eps"], cfg.exponent, samples=samples)
            out.write("ladder.csv", lad.to_csv(scen.domain.d))
            _check(checks, "ladder", lad.passed)

    if "checkpoints" in diag:
        with _Stage("checkpoints"):
            import io

            buf = io.BytesIO()
            write_checkpoint(buf, state.history, state.theta, state.grid)
            out.write("checkpoint.bin", buf.getvalue())

    passed = all(c["passed"] for c in checks.values())
    manifest = {
        "scenario": scen.name, "source": scen.source, "config_sha256": scen.config_hash, "seed": scen.seed,
        "versions": _versions(), "files": dict(sorted(out.hashes.items())), "checks": checks, "passed": passed,
    }
    (out.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")
    for name, c in checks.items():
        print(f"{'PASS' if c['passed'] else 'FAIL'} {name}")
    print(f"outputs written to {out.dir}")
    return 0 if passed else 1


def verify(args):
    """Dry run: exponent bounds, structural sampling of the law and covering feasibility."""
    from .exponent import lower_exponent_bound
    from .grid import build_covering
    from .stress import verify_assumptions

    from .scenario import load_scenario

    scen = load_scenario(args.config, seed=args.seed, output=args.output, for_solver=False)
    d = scen.domain.d
    lines = []

    def report(ok, name, detail):
        lines.append((ok, f"{'PASS' if ok else 'FAIL'} {name}: {detail}"))

    bound = lower_exponent_bound(d)
    if scen.exponent is None:
        report(False, "A1", "not checked (exponent rejected)")
        report(False, "A2", scen.bounds_error or f"exponent below the bound {bound:g}")
    else:
        C = scen.exponent.log_holder_C
        report(bool(np.isfinite(C)), "A1", f"log-Holder constant {C:.6g}")
        report(True, "A2", f"s_min = {scen.exponent.s_min:.6g} >= {bound:.6g} for d={d}; "
                           f"s_max = {scen.exponent.s_max:.6g}")

    if scen.model is None:
        report(False, "T1-T3", "not checked (no exponent values)")
    else:
        with _Stage("assumptions"):
            rep = verify_assumptions(scen.model, theta=scen.theta, d=d, seed=scen.seed)
        for c in rep.checks:
            detail = f"min relative residual {c.min_residual:.3e}"
            if c.witness:
                detail += f"; witness {c.witness}"
            report(c.passed, c.name, detail)

    if scen.exponent is not None:
        try:
            with _Stage("covering"):
                cov = build_covering(scen.domain, scen.exponent)
            lifted = float(cov.lifted.min())
            report(True, "covering", f"{cov.n_balls} balls of radius {cov.r:.6g}; "
                                     f"oscillation threshold {cov.threshold:.6g}; min lifted exponent {lifted:.6g}")
        except StageError as exc:
            report(False, "covering", str(exc))
    ok = all(flag for flag, _ in lines)
    for _, text in lines:
        print(text)
    print("PASS" if ok else "FAIL")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.txt").write_text("\n".join(t for _, t in lines) + "\n")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="vexflow", description="Variable-exponent flow experiments.")
    p.add_argument("--threads", type=int, default=None, help="worker threads for FFTs")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run a scenario and its diagnostics"),
                           ("verify", "validate a scenario without time stepping")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("config", help="scenario file or bundled scenario name")
        s.add_argument("--output", default=None, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        s.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for FFTs")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    handler = run if args.command == "run" else verify
    try:
        with fft.set_workers(args.threads) if args.threads else nullcontext():
            return handler(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
