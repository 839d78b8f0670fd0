"""Command-line front end for analysis, simulation and verification runs.

Subcommands: validate | spectrum | classify | predict | simulate | verify
| report.  Exit status is 0 when everything requested passed, 1 when a
check or run failed, 2 on usage/configuration errors; semantic errors are
printed as one JSON object on stderr.

Values can come from three places with the precedence command line >
``--config`` JSON file > built-in defaults.  Config keys use the long
flag names without dashes (e.g. ``{"model": "fix1.json", "replicas":
5000}``).  ``--f`` accepts comma-separated reals or complex entries in
``re+imi`` form.  All CSV output uses 17 significant digits and ``.`` as
the decimal separator; the default worker count comes from the
BRANCHLAB_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .classify import classify, predict
from .fluctlab import (
    fclt_experiment,
    lln_experiment,
    regime_experiment,
    write_results_csv,
)
from .model import load_model, mean_matrix, model_hash, validate
from .semigroup import spectral_decompose
from .simulate import SimConfig, SimulationError, simulate_ensemble

__all__ = ["main"]


class UsageError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, complex) or np.iscomplexobj(np.asarray(v)):
        v = complex(v)
        if v.imag == 0:
            return "%.12g" % v.real
        return "%.12g%+.12gi" % (v.real, v.imag)
    return "%.12g" % float(v)


def _fmt_vec(vec) -> str:
    return "[" + ", ".join(_fmt(v) for v in np.atleast_1d(vec)) + "]"


def parse_vector(text: str) -> np.ndarray:
    """Parse ``--f``/``--x0`` style vectors: reals or ``re+imi`` entries."""
    items = []
    for token in text.split(","):
        token = token.strip().replace(" ", "")
        if not token:
            raise UsageError(f"empty entry in vector {text!r}")
        try:
            items.append(float(token))
            continue
        except ValueError:
            pass
        try:
            items.append(complex(token.replace("i", "j")))
        except ValueError:
            raise UsageError(f"cannot parse vector entry {token!r}") from None
    arr = np.array(items)
    if np.iscomplexobj(arr) and not np.any(arr.imag != 0):
        arr = arr.real
    return arr


def _real_f(arr: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(arr):
        raise UsageError("classification takes a real test function; "
                         "complex vectors only arise as internal components")
    return arr


class _Run:
    """Resolved options for one invocation plus manifest bookkeeping."""

    def __init__(self, ns: argparse.Namespace):
        self.ns = ns
        self.config = {}
        if getattr(ns, "config", None):
            with open(ns.config) as fh:
                loaded = json.load(fh)
            if not isinstance(loaded, dict):
                raise UsageError("--config must hold a JSON object")
            self.config = loaded
        self.t0 = time.monotonic()
        self.outputs: list[str] = []

    def opt(self, name: str, default=None):
        value = getattr(self.ns, name, None)
        if value is not None:
            return value
        return self.config.get(name, default)

    def require(self, name: str):
        value = self.opt(name)
        if value is None:
            raise UsageError(f"missing required option --{name}")
        return value

    def load_model(self):
        path = self.require("model")
        self.model_path = str(path)
        self.mech = load_model(path)
        return self.mech

    def out_dir(self) -> Path:
        out = Path(self.opt("out", "branchlab_out"))
        out.mkdir(parents=True, exist_ok=True)
        return out

    def write_manifest(self, out: Path, params: dict,
                       master_seed=None) -> None:
        manifest = {
            "tool_version": __version__,
            "subcommand": self.ns.command,
            "model_file": self.model_path,
            "model_hash": model_hash(self.mech),
            "master_seed": master_seed,
            "parameters": params,
            "outputs": self.outputs,
            "workers": self.opt("workers"),
            "wall_clock_s": round(time.monotonic() - self.t0, 3),
        }
        path = out / "manifest.json"
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")


def _cmd_validate(run: _Run) -> int:
    mech = run.load_model()
    report = validate(mech)
    for line in report.lines():
        print(line)
    return 0 if report.ok else 1


def _cmd_spectrum(run: _Run) -> int:
    mech = run.load_model()
    spec = spectral_decompose(mean_matrix(mech).B)
    print(f"lambda1={_fmt(spec.lambda1)}")
    print(f"phi={_fmt_vec(spec.phi)}")
    print(f"phitilde={_fmt_vec(spec.phitilde)}")
    for j, blk in enumerate(spec.blocks):
        chains = ",".join(str(n) for n in blk.chain_lengths)
        print(f"block {j}: eigenvalue={_fmt(blk.eigenvalue)} chains=[{chains}]")
    pairs = [(j, p) for j, p in enumerate(spec.conj_pair) if p > j]
    if pairs:
        print("conjugate_blocks=" + ", ".join(f"({a},{b})" for a, b in pairs))
    return 0


def _classification(run: _Run):
    mech = run.load_model()
    spec = spectral_decompose(mean_matrix(mech).B)
    f = _real_f(parse_vector(str(run.require("f"))))
    if f.shape != (mech.K,):
        raise UsageError(f"--f must have {mech.K} entries")
    return mech, spec, f


def _cmd_classify(run: _Run) -> int:
    _, spec, f = _classification(run)
    cls = classify(f, spec)
    print(f"regime={cls.regime}")
    print(f"mean_coefficient={_fmt(cls.mean_coeff)}")
    if np.isfinite(cls.alpha):
        print(f"alpha={_fmt(cls.alpha)}")
        print(f"gamma={cls.gamma}")
        print(f"epsilon={_fmt(cls.epsilon)}")
        print(f"leading_set={sorted(cls.iset)}")
    if cls.fstar is not None:
        print(f"fstar={_fmt_vec(cls.fstar)}")
        print(f"r={cls.r}")
    for w in cls.warnings:
        print(f"warning: {w}")
    return 0


def _cmd_predict(run: _Run) -> int:
    mech, spec, f = _classification(run)
    pred = predict(f, mech, spec)
    print(f"regime={pred.regime}")
    print(f"growth_exponent={_fmt(pred.c_exp)}")
    print(f"polynomial_power={_fmt(pred.p_pow)}")
    limit = pred.limit
    if hasattr(limit, "variance"):
        print(f"limit=GaussianMixture(variance={_fmt(limit.variance)})")
    elif hasattr(limit, "components"):
        parts = "; ".join(f"lambda={_fmt(lam)}" for lam, _ in limit.components)
        print(f"limit=L2MartingaleLimit({parts})")
    else:
        print(f"limit=Degenerate(value={_fmt(limit.value)})")
    if pred.secondary is not None:
        print(f"secondary=GaussianMixture(variance={_fmt(pred.secondary.variance)})"
              f" at_exponent={_fmt(pred.secondary_c_exp)}")
    if pred.covariance_rate is not None:
        print(f"covariance_rate={_fmt(pred.covariance_rate)}")
    for note in pred.notes:
        print(f"note: {note}")
    return 0


def _cmd_simulate(run: _Run) -> int:
    mech = run.load_model()
    spec = spectral_decompose(mean_matrix(mech).B)
    x0 = parse_vector(str(run.require("x0")))
    if np.iscomplexobj(x0):
        raise UsageError("--x0 must be real")
    T = float(run.require("T"))
    dt = float(run.opt("dt", 1e-3 / spec.lambda1))
    record = run.opt("record")
    record_times = (tuple(float(v) for v in parse_vector(str(record)))
                    if record is not None else (T,))
    n = int(run.opt("replicas", 20000))
    seed = int(run.opt("seed", 42))
    cfg = SimConfig(x0=tuple(float(v) for v in x0), T=T, dt=dt,
                    record_times=record_times)
    workers = run.opt("workers")
    ens = simulate_ensemble(mech, spec, cfg, n, seed,
                            workers=int(workers) if workers is not None else None)
    out = run.out_dir()
    csv_path = out / "ensemble.csv"
    meta_path = out / "ensemble_meta.json"
    ens.write_csv(csv_path)
    ens.write_metadata(meta_path)
    run.outputs = [str(csv_path), str(meta_path)]
    run.write_manifest(out, {
        "x0": list(cfg.x0), "T": T, "dt": dt, "record_times": list(record_times),
        "replicas": n,
    }, master_seed=seed)
    print(f"wrote {csv_path} ({n} replicas, clamp fraction "
          f"{ens.clamp_fraction():.2e})")
    return 0


def _suite_grids(regime: str, lambda1: float) -> tuple[tuple[float, ...], float]:
    u = 1.0 / lambda1
    if regime == "Small":
        return (9 * u, 12 * u), 15 * u
    if regime == "Critical":
        return (6 * u, 8 * u), 8 * u
    return (2 * u, 4 * u, 8 * u), 11 * u


def _cmd_verify(run: _Run) -> int:
    mech = run.load_model()
    spec = spectral_decompose(mean_matrix(mech).B)
    suite = run.opt("suite", "all")
    if suite not in ("lln", "fclt", "regime", "all"):
        raise UsageError(f"unknown suite {suite!r}")
    n = int(run.opt("replicas", 20000))
    seed = int(run.opt("seed", 42))
    workers = run.opt("workers")
    workers = int(workers) if workers is not None else None
    lam = spec.lambda1
    u = 1.0 / lam
    dt_opt = run.opt("dt")
    dt = float(dt_opt) if dt_opt is not None else 1e-3 * u
    x0 = run.opt("x0")
    x0 = (tuple(float(v) for v in parse_vector(str(x0))) if x0 is not None
          else (1.0,) + (0.0,) * (mech.K - 1))

    def ensemble(T, records, step=None):
        cfg = SimConfig(x0=x0, T=T, dt=step if step is not None else dt,
                        record_times=tuple(sorted(records)))
        return simulate_ensemble(mech, spec, cfg, n, seed, workers=workers)

    results = []
    fclt_dt = None
    if suite in ("lln", "all"):
        grid = (u, 2 * u, 3 * u, 4 * u)
        ens = ensemble(8 * u, grid + (8 * u,))
        results.append(lln_experiment(mech, spec, spec.phi, ens, grid))
    if suite in ("fclt", "all"):
        # The CDF statistic divides by sqrt(What_inf), so its weight sits on
        # the smallest survivors, exactly where Euler absorption error is
        # O(sqrt(dt)).  Unless the user pins --dt, run this suite on a finer
        # grid than the moment suites need.
        t, s_grid = 8 * u, (0.0, 0.5 * u, u)
        fclt_dt = dt if dt_opt is not None else 1e-4 * u
        ens = ensemble(12 * u, tuple(t + s for s in s_grid) + (12 * u,),
                       step=fclt_dt)
        results.append(fclt_experiment(mech, spec, ens, t, s_grid))
    if suite == "regime" or (suite == "all" and run.opt("f") is not None):
        f = _real_f(parse_vector(str(run.require("f"))))
        if f.shape != (mech.K,):
            raise UsageError(f"--f must have {mech.K} entries")
        pred = predict(f, mech, spec)
        grid, T = _suite_grids(pred.regime, lam)
        ens = ensemble(T, grid + (T,))
        attest = pred.regime == "Critical" and min(mech.b) > 0
        if pred.regime == "Critical" and not attest:
            raise UsageError("Critical-regime verification needs min b > 0")
        results.append(regime_experiment(mech, spec, f, pred, ens, grid,
                                         min_b_positive=attest))

    out = run.out_dir()
    for res in results:
        path = out / f"results_{res.experiment}.csv"
        res.write_csv(path)
        run.outputs.append(str(path))
    merged = out / "results.csv"
    write_results_csv(results, merged)
    run.outputs.append(str(merged))
    params = {
        "suite": suite, "replicas": n, "dt": dt, "x0": list(x0),
        "f": None if run.opt("f") is None else str(run.opt("f")),
    }
    if fclt_dt is not None and fclt_dt != dt:
        params["fclt_dt"] = fclt_dt
    run.write_manifest(out, params, master_seed=seed)

    ok = True
    for res in results:
        n_fail = sum(not r.passed for r in res.rows)
        status = "pass" if res.passed else f"FAIL ({n_fail} rows)"
        print(f"{res.experiment}: {status}  [{len(res.rows)} rows]"
              + (f"  survivors={res.survivors}" if res.survivors else ""))
        ok = ok and res.passed
    print(f"results written to {merged}")
    return 0 if ok else 1


def _read_result_rows(paths) -> list[dict]:
    import csv as _csv

    rows = []
    for path in paths:
        with open(path) as fh:
            reader = _csv.DictReader(fh)
            if reader.fieldnames is None or "experiment" not in reader.fieldnames:
                continue
            for rec in reader:
                rows.append({
                    "experiment": rec["experiment"],
                    "quantity": rec["quantity"],
                    "time": float(rec["time"]),
                    "empirical": float(rec["empirical"]),
                    "stderr": float(rec["stderr"]),
                    "predicted": float(rec["predicted"]),
                    "passed": rec["pass"] == "True",
                })
    return rows


def _cmd_report(run: _Run) -> int:
    run.model_path = None
    sources = run.opt("results")
    if not sources:
        raise UsageError("report needs --results (files or directories)")
    paths = []
    for src in sources:
        p = Path(src)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.csv")))
        elif p.exists():
            paths.append(p)
        else:
            raise UsageError(f"no such results path: {src}")
    rows = _read_result_rows(paths)
    if not rows:
        raise UsageError("no result rows found in the given paths")

    by_exp: dict[str, list[dict]] = {}
    for row in rows:
        by_exp.setdefault(row["experiment"], []).append(row)

    out = run.out_dir()
    summary = out / "summary.csv"
    ok = True
    with open(summary, "w") as fh:
        fh.write("experiment,quantity,points,failures,max_rel_gap\n")
        for exp, sub in by_exp.items():
            quantities = []
            for row in sub:
                if row["quantity"] not in quantities:
                    quantities.append(row["quantity"])
            for q in quantities:
                qrows = [r for r in sub if r["quantity"] == q]
                fails = sum(not r["passed"] for r in qrows)
                gaps = [abs(r["empirical"] - r["predicted"])
                        / max(abs(r["predicted"]), 1e-300)
                        for r in qrows if np.isfinite(r["predicted"])
                        and r["predicted"] != 0.0]
                gap = max(gaps) if gaps else float("nan")
                fh.write(f"{exp},{q},{len(qrows)},{fails},%.17g\n" % gap)
                status = "pass" if fails == 0 else f"FAIL {fails}/{len(qrows)}"
                print(f"{exp:16s} {q:38s} {status}")
                ok = ok and fails == 0
    print(f"summary written to {summary}")

    if not run.opt("no_figures", False):
        from .figures import render_figures

        for path in render_figures(by_exp, out):
            print(f"figure written to {path}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="branchlab",
        description="Spectral analysis, simulation and Monte Carlo "
                    "verification for multitype branching models.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        p.add_argument("--config", help="JSON file with default option values")
        if model:
            p.add_argument("--model", help="model definition JSON file")

    p = sub.add_parser("validate", help="structural checks + lambda1")
    common(p)
    p = sub.add_parser("spectrum", help="print the spectral decomposition")
    common(p)
    for name in ("classify", "predict"):
        p = sub.add_parser(name, help=f"{name} a test function")
        common(p)
        p.add_argument("--f", help="test function, e.g. '1,-1'")

    p = sub.add_parser("simulate", help="write an ensemble CSV + sidecar")
    common(p)
    p.add_argument("--x0", help="initial masses, e.g. '1,0'")
    p.add_argument("--T", type=float, help="horizon")
    p.add_argument("--dt", type=float, help="step size")
    p.add_argument("--record", help="comma-separated record times")
    p.add_argument("--replicas", type=int)
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("verify", help="run Monte Carlo experiment suites")
    common(p)
    p.add_argument("--suite", choices=("lln", "fclt", "regime", "all"))
    p.add_argument("--f", help="test function for the regime suite")
    p.add_argument("--x0", help="initial masses (default unit mass, type 1)")
    p.add_argument("--replicas", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("report", help="aggregate result CSVs; render figures")
    common(p, model=False)
    p.add_argument("--results", nargs="+", help="result CSV files or directories")
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-figures", dest="no_figures", action="store_true",
                   default=None)

    return parser


_HANDLERS = {
    "validate": _cmd_validate,
    "spectrum": _cmd_spectrum,
    "classify": _cmd_classify,
    "predict": _cmd_predict,
    "simulate": _cmd_simulate,
    "verify": _cmd_verify,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return _HANDLERS[ns.command](_Run(ns))
    except (UsageError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(json.dumps({"kind": "usage", "error": str(exc)}), file=sys.stderr)
        return 2
    except ValueError as exc:
        print(json.dumps({"kind": "usage", "error": str(exc)}), file=sys.stderr)
        return 2
    except (SimulationError, ArithmeticError, RuntimeError) as exc:
        print(json.dumps({"kind": "check", "error": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
