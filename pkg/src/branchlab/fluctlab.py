"""Monte Carlo experiments checking the limit behavior against moment oracles.

Every experiment reads a precomputed :class:`~branchlab.simulate.Ensemble`
and emits an :class:`ExperimentResult` whose rows flatten to the CSV schema
``experiment,quantity,time,empirical,stderr,predicted,pass``.

Pass rules compare empirical statistics to deterministic finite-horizon
values from the moments module, not to the bare limit constants: at the
horizons a desk run can afford, the exact expectations still sit several
percent away from their limits (for the standard two-type fixtures the
scaled second moment is 2 - e^{-t/2}, resp. 1 + 1/t), so a limit-constant
comparison would fail for deterministic reasons.  The limit constant is
reported alongside in ``limit_gap`` rows, whose pass criterion is that the
analytic gap shrinks along the time grid.

Normality checks use the variance-mixture structure: the statistic is
fluctuation / sqrt(prediction * What_inf) on replicas surviving at the
horizon (What_inf > 0.01 <phi, x0>), compared to a standard normal by
empirical-CDF distance with a threshold calibrated once, at fixed seed,
against true normal samples of the same size.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy.stats import kstest

from .classify import LimitLawPrediction, classify
from .model import Mechanism, mean_matrix
from .moments import (
    big_theta,
    delta_sq,
    martingale_variance,
    sigma_phi_sq,
    variance_of_functional,
)
from .semigroup import SpectralData, apply_semigroup
from .simulate import Ensemble

__all__ = [
    "SURVIVAL_FRACTION",
    "MIN_SURVIVORS",
    "HORIZON_MARGIN",
    "ResultRow",
    "ExperimentResult",
    "null_cdf_threshold",
    "lln_experiment",
    "fclt_experiment",
    "regime_experiment",
    "write_results_csv",
]

SURVIVAL_FRACTION = 0.01
MIN_SURVIVORS = 1000

# W^phi_T stands in for W_inf only where lambda1 * (T - t) >= this margin,
# keeping the proxy bias at e^{-3} ~ 5e-2 relative on the W scale.
HORIZON_MARGIN = 3.0

_NULL_SEED = 20260823
_NULL_SAMPLES = 400
_null_cache: dict[int, float] = {}

_CSV_HEADER = "experiment,quantity,time,empirical,stderr,predicted,pass"


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    quantity: str
    time: float
    empirical: float
    stderr: float
    predicted: float
    passed: bool

    def csv_line(self) -> str:
        return ",".join([
            self.experiment, self.quantity, "%.17g" % self.time,
            "%.17g" % self.empirical, "%.17g" % self.stderr,
            "%.17g" % self.predicted, str(self.passed),
        ])


@dataclass(frozen=True)
class ExperimentResult:
    """Flat statistics table for one experiment; stderr entries are >= 0
    (nan for rows, like CDF distances, that carry no standard error)."""

    experiment: str
    rows: tuple[ResultRow, ...]
    passed: bool
    n_replicas: int
    survivors: int | None = None
    notes: tuple[str, ...] = ()

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(_CSV_HEADER + "\n")
            for row in self.rows:
                fh.write(row.csv_line() + "\n")


def write_results_csv(results, path) -> None:
    """Concatenate several experiments into one flat CSV table."""
    with open(path, "w") as fh:
        fh.write(_CSV_HEADER + "\n")
        for res in results:
            for row in res.rows:
                fh.write(row.csv_line() + "\n")


def null_cdf_threshold(n: int, samples: int = _NULL_SAMPLES) -> float:
    """Pass threshold for the empirical-CDF distance at sample size n.

    1.5x the 99th percentile of Kolmogorov distances of ``samples`` true
    standard-normal samples of size n, drawn from a fixed-seed stream so
    the threshold is a constant of the library, not of the run.
    """
    if n in _null_cache:
        return _null_cache[n]
    rng = np.random.Generator(
        np.random.Philox(key=np.array([_NULL_SEED, n], dtype=np.uint64)))
    dists = np.empty(samples)
    for i in range(samples):
        dists[i] = kstest(rng.standard_normal(n), "norm").statistic
    thr = 1.5 * float(np.percentile(dists, 99))
    _null_cache[n] = thr
    return thr


def _time_index(ensemble: Ensemble, t: float) -> int:
    times = np.asarray(ensemble.times)
    pos = int(np.argmin(np.abs(times - t)))
    if abs(times[pos] - t) > ensemble.dt / 2 + 1e-12:
        raise ValueError(
            f"t={t:g} not among the ensemble record times {list(times)}")
    return pos


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def _variance_x(mech, spec, F, t: float, x0: np.ndarray) -> float:
    """Var_{x0} <F, X_t> for real or complex F (real + imaginary parts)."""
    F = np.asarray(F)
    out = float(x0 @ variance_of_functional(mech, spec, F.real, t))
    if np.iscomplexobj(F) and np.any(np.abs(F.imag) > 0):
        out += float(x0 @ variance_of_functional(mech, spec, F.imag, t))
    return out


def _mean_x(B: np.ndarray, f: np.ndarray, t: float, x0: np.ndarray) -> complex:
    F = np.asarray(f)
    m = x0 @ apply_semigroup(B, t, F.real)
    if np.iscomplexobj(F) and np.any(np.abs(F.imag) > 0):
        m = m + 1j * (x0 @ apply_semigroup(B, t, F.imag))
    return m


def _survivor_mask(ensemble: Ensemble) -> np.ndarray:
    mask = ensemble.survival_mask(SURVIVAL_FRACTION)
    n = int(np.count_nonzero(mask))
    if n < MIN_SURVIVORS:
        raise RuntimeError(
            f"only {n} surviving replicas (< {MIN_SURVIVORS}); "
            "distributional checks would have no power - enlarge the ensemble")
    return mask


def lln_experiment(mech: Mechanism, spec: SpectralData, f,
                   ensemble: Ensemble, t_grid) -> ExperimentResult:
    """L2 gap between e^{-lambda1 t}<f, X_t> and <f, phitilde> What_inf.

    Passes when the gap decreases along ``t_grid`` and ends below 10% of
    its initial value.  For f = phi the gap has a closed moment form and
    each point is additionally checked against it within 2 stderr.
    """
    f = np.asarray(f, dtype=float)
    t_grid = [float(t) for t in t_grid]
    lam = ensemble.lambda1
    if ensemble.T + 1e-9 < max(t_grid) + HORIZON_MARGIN / lam:
        raise ValueError(
            f"horizon T={ensemble.T:g} too short: need >= max(t_grid) + "
            f"{HORIZON_MARGIN:g}/lambda1 = {max(t_grid) + HORIZON_MARGIN / lam:g}")
    x0 = np.asarray(ensemble.x0)
    mean_coeff = float(f @ spec.phitilde)
    is_phi = np.allclose(f, spec.phi, rtol=1e-12, atol=1e-13)
    theta_x = float(x0 @ big_theta(mech, spec)) if is_phi else np.nan

    rows = []
    gaps = []
    se_final = 0.0
    for t in t_grid:
        idx = _time_index(ensemble, t)
        proj = np.exp(-lam * t) * (ensemble.states[:, idx, :] @ f)
        emp, se = _mean_se((proj - mean_coeff * ensemble.w_inf) ** 2)
        if is_phi:
            pred = theta_x - float(x0 @ martingale_variance(mech, spec, t))
            ok = abs(emp - pred) <= 2.0 * se
        else:
            pred, ok = np.nan, True
        rows.append(ResultRow("lln", "l2_gap", t, emp, se, pred, ok))
        gaps.append(emp)
        se_final = se

    decreasing = all(gaps[i + 1] <= gaps[i] + 1e-30 for i in range(len(gaps) - 1))
    initial = gaps[0]
    ratio = gaps[-1] / initial if initial > 0 else 0.0
    ok = decreasing and gaps[-1] <= 0.1 * initial + 1e-30
    rows.append(ResultRow("lln", "final_over_initial", t_grid[-1], ratio,
                          se_final / initial if initial > 0 else 0.0, 0.1, ok))
    notes = (f"winf_proxy_bias~{np.exp(-lam * (ensemble.T - max(t_grid))):.2e}",)
    return ExperimentResult("lln", tuple(rows), all(r.passed for r in rows),
                            ensemble.n_replicas, notes=notes)


def fclt_experiment(mech: Mechanism, spec: SpectralData, ensemble: Ensemble,
                    t: float, s_grid) -> ExperimentResult:
    """Gaussian fluctuations of the Perron martingale around its limit.

    Per replica, Y_s = e^{lambda1 (t+s)/2} (W_{t+s} - What_inf).  Checks
    the variance level Var(Y_0) / (sigma_phi^2 mean(What_inf)) against 1,
    the lag correlations against e^{-lambda1 |s_i - s_j| / 2}, and the
    survival-conditioned CDF of Y_0 / (sigma_phi sqrt(What_inf)) against a
    standard normal with the calibrated distance threshold.
    """
    s_grid = sorted(float(s) for s in s_grid)
    if s_grid[0] != 0.0:
        raise ValueError("s_grid must include 0 (variance and CDF checks use Y_0)")
    lam = ensemble.lambda1
    slack = lam * (ensemble.T - t - s_grid[-1])
    if slack < HORIZON_MARGIN - 1e-9:
        raise ValueError(
            f"horizon too short: lambda1 (T - t - max s) = {slack:.3g} < "
            f"{HORIZON_MARGIN:g}")

    Y = np.empty((ensemble.n_replicas, len(s_grid)))
    for k, s in enumerate(s_grid):
        idx = _time_index(ensemble, t + s)
        Y[:, k] = np.exp(lam * (t + s) / 2.0) * (ensemble.w[:, idx] - ensemble.w_inf)

    sigma2 = sigma_phi_sq(mech, spec)
    mean_winf = float(ensemble.w_inf.mean())
    y0 = Y[:, 0]
    var0 = float(y0.var(ddof=1))
    _, se_var = _mean_se((y0 - y0.mean()) ** 2)
    ratio = var0 / (sigma2 * mean_winf)
    rows = [ResultRow("fclt", "var_ratio", t, ratio, se_var / (sigma2 * mean_winf),
                      1.0, abs(ratio - 1.0) <= 0.05)]

    n = ensemble.n_replicas
    for i in range(len(s_grid)):
        for j in range(i + 1, len(s_grid)):
            r = float(np.corrcoef(Y[:, i], Y[:, j])[0, 1])
            target = float(np.exp(-lam * abs(s_grid[j] - s_grid[i]) / 2.0))
            se = (1.0 - r * r) / np.sqrt(n)
            rows.append(ResultRow("fclt", f"corr_{s_grid[i]:g}_{s_grid[j]:g}",
                                  t, r, se, target, abs(r - target) <= 0.05))

    mask = _survivor_mask(ensemble)
    survivors = int(np.count_nonzero(mask))
    z = y0[mask] / (np.sqrt(sigma2) * np.sqrt(ensemble.w_inf[mask]))
    dist = float(kstest(z, "norm").statistic)
    thr = null_cdf_threshold(survivors)
    rows.append(ResultRow("fclt", "cdf_distance", t, dist, np.nan, thr, dist < thr))

    notes = (f"survival_fraction={survivors / n:.4f}",
             f"winf_proxy_bias~{np.exp(-slack):.2e}")
    return ExperimentResult("fclt", tuple(rows), all(r.passed for r in rows),
                            n, survivors=survivors, notes=notes)


def _second_moment_rows(name: str, quantity: str, t_grid, empirical, stderrs,
                        analytic, limit: float, tol: float,
                        gap_rule: str = "shrinking") -> list[ResultRow]:
    """Per-time comparison rows plus the limit-constant bookkeeping.

    With ``gap_rule="shrinking"`` the analytic distance to the limit must
    decrease along the grid (the natural check when the limit is reached
    as t grows).  With ``"anchor"`` a single row compares the analytic
    value at the first grid point to the limit within tolerance; that is
    the right reading for W_T-proxy statistics, whose quality degrades as
    t approaches the horizon.
    """
    rows = []
    for t, emp, se, pred in zip(t_grid, empirical, stderrs, analytic):
        ok = abs(emp - pred) <= tol * abs(pred)
        rows.append(ResultRow(name, quantity, t, emp, se, pred, ok))
    if gap_rule == "shrinking":
        prev = None
        for t, emp, pred in zip(t_grid, empirical, analytic):
            gap = abs(pred - limit)
            ok = prev is None or gap <= prev + 1e-30
            rows.append(ResultRow(name, quantity + "_limit_gap", t, emp - limit,
                                  np.nan, pred - limit, ok))
            prev = gap
    else:
        ok = abs(analytic[0] - limit) <= tol * abs(limit)
        rows.append(ResultRow(name, quantity + "_limit", t_grid[0],
                              empirical[0], stderrs[0], limit, ok))
    return rows


def regime_experiment(mech: Mechanism, spec: SpectralData, f,
                      prediction: LimitLawPrediction, ensemble: Ensemble,
                      t_grid, tolerance: float | None = None,
                      min_b_positive: bool = False) -> ExperimentResult:
    """Regime-specific fluctuation checks for <f, X_t> against the prediction.

    Small: scaled second moment of the centered projection against its
    finite-t moment value, plus the survival-conditioned mixture-CDF check.
    Critical: the t^{-(1/2+gamma)} e^{-lambda1 t/2} second moment (callers
    must attest ``min_b_positive``).  Large: L2-Cauchy decrease of the
    component martingales, decay of the oscillatory remainder, the
    secondary-CLT second moment, and the horizon second moment of W^{f*}
    when the leading set is a real singleton.
    """
    f = np.asarray(f, dtype=float)
    t_grid = [float(t) for t in t_grid]
    cls = classify(f, spec)
    if cls.regime != prediction.regime:
        raise ValueError(
            f"prediction is for regime {prediction.regime!r} but f classifies "
            f"as {cls.regime!r}")
    regime = cls.regime
    if tolerance is None:
        tolerance = {"Small": 0.10, "Critical": 0.15, "Large": 0.10}[regime]
    lam = spec.lambda1
    B = mean_matrix(mech).B
    x0 = np.asarray(ensemble.x0)
    phix = float(x0 @ spec.phi)
    name = f"regime_{regime.lower()}"
    rows: list[ResultRow] = []
    notes: list[str] = []
    survivors = None

    if regime == "Small":
        slack = lam * (ensemble.T - max(t_grid))
        if slack < HORIZON_MARGIN - 1e-9:
            raise ValueError(
                f"horizon too short for the mixture-CDF check: lambda1 (T - "
                f"max t) = {slack:.3g} < {HORIZON_MARGIN:g}")
        rho2 = prediction.limit.variance
        emps, ses, preds = [], [], []
        central = {}
        for t in t_grid:
            idx = _time_index(ensemble, t)
            S = np.exp(-lam * t / 2.0) * (ensemble.states[:, idx, :] @ cls.fhat)
            emp, se = _mean_se(S ** 2)
            m = _mean_x(B, cls.fhat, t, x0).real
            central[t] = np.exp(-lam * t) * _variance_x(mech, spec, cls.fhat, t, x0)
            pred = central[t] + np.exp(-lam * t) * m * m
            emps.append(emp / phix)
            ses.append(se / phix)
            preds.append(pred / phix)
        rows += _second_moment_rows(name, "scaled_second_moment", t_grid,
                                    emps, ses, preds, rho2, tolerance)

        # Mixture-normality at the last grid point.  Centering and variance
        # use the finite-t moment oracles (deterministic mean removed,
        # central variance per unit phi-mass as mixture scale), which tend
        # to the limit statistic as t grows; the limit law is unchanged.
        t_last = t_grid[-1]
        idx = _time_index(ensemble, t_last)
        S = np.exp(-lam * t_last / 2.0) * (ensemble.states[:, idx, :] @ cls.fhat)
        S = S - np.exp(-lam * t_last / 2.0) * _mean_x(B, cls.fhat, t_last, x0).real
        mask = _survivor_mask(ensemble)
        survivors = int(np.count_nonzero(mask))
        z = S[mask] / np.sqrt(central[t_last] / phix * ensemble.w_inf[mask])
        dist = float(kstest(z, "norm").statistic)
        thr = null_cdf_threshold(survivors)
        rows.append(ResultRow(name, "cdf_distance", t_last, dist, np.nan, thr,
                              dist < thr))
        notes.append(f"survival_fraction={survivors / ensemble.n_replicas:.4f}")

    elif regime == "Critical":
        if not min_b_positive:
            raise ValueError(
                "Critical-regime runs require attesting min_b_positive=True")
        if min(mech.b) <= 0:
            raise ValueError("min_b_positive attested but min b = "
                             f"{min(mech.b):g}")
        gamma = cls.gamma
        limit = prediction.limit.variance
        emps, ses, preds = [], [], []
        for t in t_grid:
            idx = _time_index(ensemble, t)
            S = t ** -(0.5 + gamma) * np.exp(-lam * t / 2.0) \
                * (ensemble.states[:, idx, :] @ f)
            emp, se = _mean_se(S ** 2)
            m = _mean_x(B, f, t, x0).real
            pred = t ** -(1 + 2 * gamma) * np.exp(-lam * t) \
                * (_variance_x(mech, spec, f, t, x0) + m * m)
            emps.append(emp / phix)
            ses.append(se / phix)
            preds.append(pred / phix)
        rows += _second_moment_rows(name, "scaled_second_moment", t_grid,
                                    emps, ses, preds, limit, tolerance)

    else:  # Large
        slack = lam * (ensemble.T - max(t_grid))
        if slack < HORIZON_MARGIN - 1e-9:
            raise ValueError(
                f"horizon too short for the W_T proxies: lambda1 (T - max t)"
                f" = {slack:.3g} < {HORIZON_MARGIN:g}")
        gamma, alpha, eps = cls.gamma, cls.alpha, cls.epsilon
        gfact = factorial(gamma)
        sec_rate = lam - 2.0 * eps
        sec_limit = (prediction.secondary.variance
                     if prediction.secondary is not None else np.nan)
        jlist = sorted(cls.iset)
        wj_T: dict[int, np.ndarray] = {}
        for j in jlist:
            tag = f"_j{j}" if len(jlist) > 1 else ""
            F = cls.Fj[j]
            lam_j = spec.blocks[j].eigenvalue

            def wj(tt: float) -> np.ndarray:
                pos = _time_index(ensemble, tt)
                return np.exp(-lam_j * tt) * (ensemble.states[:, pos, :] @ F)

            wj_T[j] = wj(ensemble.T)
            var_j = {t: _variance_x(mech, spec, F, t, x0)
                     * np.exp(-2.0 * alpha * t) for t in t_grid}
            var_j[ensemble.T] = _variance_x(mech, spec, F, ensemble.T, x0) \
                * np.exp(-2.0 * alpha * ensemble.T)

            prev = None
            for t1, t2 in zip(t_grid[:-1], t_grid[1:]):
                emp, se = _mean_se(np.abs(wj(t2) - wj(t1)) ** 2)
                pred = var_j[t2] - var_j[t1]
                ok = prev is None or emp < prev
                rows.append(ResultRow(name, "cauchy_increment" + tag, t2,
                                      emp, se, pred, ok))
                prev = emp

            sec_emps, sec_ses, sec_preds = [], [], []
            for t in t_grid:
                emp, se = _mean_se(np.abs(wj_T[j] - wj(t)) ** 2)
                scale = np.exp(sec_rate * t) / phix
                sec_emps.append(emp * scale)
                sec_ses.append(se * scale)
                sec_preds.append((var_j[ensemble.T] - var_j[t]) * scale)
            rows += _second_moment_rows(name, "secondary_scaled_moment" + tag,
                                        t_grid, sec_emps, sec_ses, sec_preds,
                                        sec_limit, tolerance, gap_rule="anchor")

        prev = None
        for t in t_grid:
            pos = _time_index(ensemble, t)
            proj = t ** -gamma * np.exp(-alpha * t) * (ensemble.states[:, pos, :] @ f)
            combo = np.zeros(ensemble.n_replicas, dtype=complex)
            for j in jlist:
                omega = spec.blocks[j].eigenvalue.imag
                combo += np.exp(1j * omega * t) * wj_T[j]
            emp, se = _mean_se(np.abs(proj - combo.real / gfact) ** 2)
            ok = prev is None or emp < prev
            rows.append(ResultRow(name, "remainder_l2", t, emp, se, 0.0, ok))
            prev = emp

        if cls.fstar is not None:
            t_last = ensemble.T
            wstar = wj_T[jlist[0]].real / gfact
            emp, se = _mean_se(wstar ** 2)
            mstar = float(x0 @ cls.fstar)
            d2 = float(x0 @ delta_sq(mech, spec, cls.fstar, eps))
            limit = mstar * mstar + d2
            rows.append(ResultRow(name, "wstar_second_moment", t_last, emp, se,
                                  limit, abs(emp - limit) <= tolerance * limit))

    notes.append(f"tolerance={tolerance:g}")
    return ExperimentResult(name, tuple(rows), all(r.passed for r in rows),
                            ensemble.n_replicas, survivors=survivors,
                            notes=tuple(notes))
