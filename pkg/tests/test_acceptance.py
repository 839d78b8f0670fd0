"""Acceptance gate: the nine numbered checks the package must clear.

Each test prints one ``[criterion N] PASS/FAIL - detail`` line (run
pytest with ``-s`` to see the lines for passing tests too); the assert
carries the same line, so a red run shows exactly which clause broke
and by how much.  Tolerances are part of the contract and are pinned
inline, not shared with the unit suites.

Criterion 7's distribution-shape clause is expected to fail at the
pinned horizon: the statistic has a finite-time bias that no correct
implementation can remove at t = 4.  The analysis lives in
/root/notes/decisions.md; the other two clauses of that criterion are
asserted normally.
"""

import math

import numpy as np
import pytest

from branchlab.classify import classify, mean_shape_diagnostic, predict
from branchlab.fluctlab import (fclt_experiment, null_cdf_threshold,
                                regime_experiment)
from branchlab.moments import (big_theta, sigma_phi_sq, variance_asymptote,
                               variance_of_functional)
from branchlab.semigroup import (apply_semigroup, delta_t, solve_cumulant,
                                 subdominant_abscissa)
from branchlab.simulate import SimConfig, simulate_ensemble


def report(n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    assert ok, line


@pytest.fixture()
def five(feller, symmetric_pair, critical_pair, large_pair, cyclic_triple):
    return {"feller": feller, "symmetric_pair": symmetric_pair,
            "critical_pair": critical_pair, "large_pair": large_pair,
            "cyclic_triple": cyclic_triple}


def test_criterion_1_eigentriplet_and_uniform_deviation(five):
    worst_phi = worst_dual = 0.0
    final_dev = {}
    for name, case in five.items():
        spec, B = case.spec, case.B
        f = np.zeros(spec.K)
        f[0] = 1.0
        for t in (0.5, 1.0, 2.0):
            Tphi = apply_semigroup(B, t, spec.phi)
            worst_phi = max(worst_phi, float(np.abs(
                np.exp(-spec.lambda1 * t) * Tphi - spec.phi).max()))
            lhs = float(apply_semigroup(B, t, f) @ spec.phitilde)
            rhs = float(np.exp(spec.lambda1 * t) * (f @ spec.phitilde))
            worst_dual = max(worst_dual, abs(lhs - rhs) / abs(rhs))
        gap = spec.lambda1 - subdominant_abscissa(spec, f)
        t_end = 5.0 if not np.isfinite(gap) else 30.0 / gap
        grid = np.linspace(t_end / 6.0, t_end, 6)
        devs = [delta_t(spec, B, t) for t in grid]
        assert all(d2 <= d1 + 1e-15 for d1, d2 in zip(devs, devs[1:])), name
        final_dev[name] = devs[-1]
    worst_final = max(final_dev.values())
    ok = worst_phi < 1e-10 and worst_dual < 1e-10 and worst_final < 1e-6
    report(1, ok, f"eigen identities <= {max(worst_phi, worst_dual):.2e} "
           f"(tol 1e-10), uniform deviation decreasing, final <= "
           f"{worst_final:.2e} (tol 1e-6)")


def test_criterion_2_theta_pairing(five, pure_jump, defective_triple):
    cases = dict(five)
    cases["pure_jump"] = pure_jump
    cases["defective_triple"] = defective_triple
    worst = 0.0
    for name, case in cases.items():
        theta = big_theta(case.mech, case.spec)
        s2 = sigma_phi_sq(case.mech, case.spec)
        worst = max(worst, abs(float(theta @ case.spec.phitilde) - s2))
    th1 = big_theta(cases["feller"].mech, cases["feller"].spec)[0]
    s1 = sigma_phi_sq(cases["feller"].mech, cases["feller"].spec)
    th6 = big_theta(pure_jump.mech, pure_jump.spec)[0]
    s6 = sigma_phi_sq(pure_jump.mech, pure_jump.spec)
    anchors = (abs(th1 - 1.0) < 1e-12 and abs(s1 - 1.0) < 1e-12
               and abs(th6 - 0.5) < 1e-12 and abs(s6 - 0.5) < 1e-12)
    ok = worst < 1e-8 and anchors
    report(2, ok, f"<Theta, phitilde> = sigma_phi^2 within {worst:.2e} "
           f"(tol 1e-8) on 7 mechanisms; anchors Theta/sigma^2 = "
           f"{th1:g}/{s1:g} and {th6:g}/{s6:g}")


def test_criterion_3_cumulant_oracle(feller):
    mech, spec = feller.mech, feller.spec
    worst_closed = 0.0
    for t in (0.5, 1.0, 2.0):
        for theta in (0.5, 1.0, 2.0):
            got = solve_cumulant(mech, np.array([theta]), t)[0]
            want = theta * math.exp(t) / (1.0 + 0.5 * theta * (math.exp(t) - 1))
            worst_closed = max(worst_closed, abs(got - want) / want)

    # One-sided theta-stencils of V_t(theta f) around 0+ (the solver's
    # domain is theta >= 0): d1 = (4 V(h) - V(2h)) / 2h and
    # d2 = (-5 V(h) + 4 V(2h) - V(3h)) / h^2 give the first two moments
    # of <f, X_t> through the Laplace transform e^{-<x, V_t(theta f)>}.
    t, h = 1.0, 1e-3
    f = np.array([1.0])
    v = {k: solve_cumulant(mech, k * h * f, t)[0] for k in (1, 2, 3)}
    d1 = (4.0 * v[1] - v[2]) / (2.0 * h)
    d2 = (-5.0 * v[1] + 4.0 * v[2] - v[3]) / h ** 2
    mean_want = float(apply_semigroup(feller.B, t, f)[0])
    second_want = float(variance_of_functional(mech, spec, f, t)[0]) \
        + mean_want ** 2
    second_got = d1 ** 2 - d2
    rel_mean = abs(d1 - mean_want) / mean_want
    rel_second = abs(second_got - second_want) / second_want
    ok = worst_closed < 1e-8 and rel_mean < 1e-4 and rel_second < 1e-4
    report(3, ok, f"closed form within {worst_closed:.2e} (tol 1e-8); "
           f"moment identities within {max(rel_mean, rel_second):.2e} "
           f"(tol 1e-4)")


def test_criterion_4_variance_asymptotes(symmetric_pair, critical_pair,
                                         large_pair, cyclic_triple):
    jobs = (
        (symmetric_pair, np.array([1.0, -1.0]), (5.0, 10.0, 20.0), 1e-4),
        (critical_pair, np.array([1.0, -1.0]), (10.0, 20.0, 40.0), 0.02),
        (large_pair, np.array([1.0, -1.0]), (5.0, 10.0, 20.0), 1e-4),
        (cyclic_triple, np.array([1.0, 0.0, 0.0]), (10.0, 20.0, 40.0), 0.02),
    )
    details = []
    ok = True
    for case, f, grid, tol in jobs:
        cls = classify(f, case.spec)
        tab = variance_asymptote(case.mech, case.spec, f, cls, grid)
        dev = tab.final_deviation()
        ok = ok and tab.deviations_decreasing and dev < tol
        details.append(f"{tab.regime}:{dev:.1e}<{tol:g}")
    report(4, ok, "scaled variance to limit, deviations decreasing; "
           + ", ".join(details))


def test_criterion_5_classifier(five, pure_jump, defective_triple):
    c2 = classify(np.array([1.0, -1.0]), five["symmetric_pair"].spec)
    c3 = classify(np.array([1.0, -1.0]), five["critical_pair"].spec)
    c4 = classify(np.array([1.0, -1.0]), five["large_pair"].spec)
    regimes_ok = (c2.regime, c3.regime, c4.regime) \
        == ("Small", "Critical", "Large")

    draw_cases = [five["symmetric_pair"], five["critical_pair"],
                  five["large_pair"], five["cyclic_triple"], defective_triple]
    rng = np.random.default_rng(1000)
    violations = 0
    for i in range(1000):
        spec = draw_cases[i % len(draw_cases)].spec
        f = rng.standard_normal(spec.K)
        s = float(np.exp(rng.uniform(-2.0, 2.0)))
        c = float(rng.standard_normal())
        base = classify(f, spec)
        moved = classify(s * f + c * spec.phi, spec)
        same = (moved.regime == base.regime and moved.iset == base.iset
                and moved.gamma == base.gamma
                and abs(moved.alpha - base.alpha) <= 1e-9
                and np.allclose(moved.fhat, s * base.fhat,
                                atol=1e-9 * max(1.0, s)))
        violations += not same

    probes = {"feller": np.array([1.0]), "symmetric_pair": np.array([1.0, -1.0]),
              "critical_pair": np.array([1.0, -1.0]),
              "large_pair": np.array([1.0, -1.0]),
              "cyclic_triple": np.array([1.0, 0.0, 0.0])}
    diag_ok = True
    cases = dict(five)
    cases["pure_jump"] = pure_jump
    cases["defective_triple"] = defective_triple
    probes["pure_jump"] = np.array([1.0])
    probes["defective_triple"] = np.array([1.0, 0.0, 0.0])
    for name, case in cases.items():
        cls = classify(probes[name], case.spec)
        vals = mean_shape_diagnostic(case.spec, cls, (5.0, 10.0, 20.0))
        diag_ok = diag_ok and all(
            v2 <= v1 + 1e-15 for v1, v2 in zip(vals, vals[1:]))
    ok = regimes_ok and violations == 0 and diag_ok
    report(5, ok, f"regimes {c2.regime}/{c3.regime}/{c4.regime}; "
           f"{violations}/1000 equivariance violations; mean-shape "
           f"diagnostic non-increasing on all 7 mechanisms")


def test_criterion_6_simulator_moments(feller):
    mech, spec = feller.mech, feller.spec
    cfg = SimConfig(x0=(1.0,), T=3.0, dt=1e-3, record_times=(1.0, 2.0, 3.0))
    ens = simulate_ensemble(mech, spec, cfg, 20000, 42)
    x3 = ens.states[:, -1, 0]
    e3 = math.exp(3.0)
    z_mean = (x3.mean() - e3) / (x3.std(ddof=1) / math.sqrt(20000))
    var_rel = x3.var(ddof=1) / (e3 * (e3 - 1.0)) - 1.0
    varw_rel = ens.w_inf.var(ddof=1) / (1.0 - math.exp(-3.0)) - 1.0
    theta = 0.5
    laplace = np.exp(-theta * x3)
    pred = math.exp(-solve_cumulant(mech, np.array([theta]), 3.0)[0])
    z_lap = (laplace.mean() - pred) / (laplace.std(ddof=1) / math.sqrt(20000))
    ok = (abs(z_mean) < 3.0 and abs(var_rel) < 0.05 and abs(varw_rel) < 0.05
          and abs(z_lap) < 3.0)
    report(6, ok, f"mean z={z_mean:+.2f} (|z|<3); var rel {var_rel:+.3f} "
           f"(5%); Var[W] rel {varw_rel:+.3f} (5%); Laplace z={z_lap:+.2f}")


def test_criterion_7_fclt_reproduction(feller):
    mech, spec = feller.mech, feller.spec
    cfg = SimConfig(x0=(1.0,), T=11.0, dt=1e-3,
                    record_times=(4.0, 4.5, 5.0, 11.0))
    ens = simulate_ensemble(mech, spec, cfg, 20000, 7)
    res = fclt_experiment(mech, spec, ens, 4.0, (0.0, 0.5, 1.0))
    rows = {r.quantity: r for r in res.rows}
    var_row = rows["var_ratio"]
    corr_row = rows["corr_0_1"]
    cdf_row = rows["cdf_distance"]
    var_ok = abs(var_row.empirical - 1.0) <= 0.05
    corr_ok = abs(corr_row.empirical - math.exp(-0.5)) <= 0.05
    cdf_ok = cdf_row.passed
    detail = (f"var ratio {var_row.empirical:.4f} (in [0.95, 1.05]): "
              f"{'ok' if var_ok else 'FAIL'}; corr {corr_row.empirical:.4f} "
              f"vs {math.exp(-0.5):.4f} +/- 0.05: {'ok' if corr_ok else 'FAIL'}; "
              f"cdf distance {cdf_row.empirical:.4f} vs threshold "
              f"{cdf_row.predicted:.4f}: {'ok' if cdf_ok else 'FAIL'}")
    ok = var_ok and corr_ok and cdf_ok
    report(7, ok, detail + ("" if ok else
           " [known finite-horizon bias of the normalized statistic at "
           "t=4; analysis in /root/notes/decisions.md]"))


def test_criterion_8_trichotomy_monte_carlo(symmetric_pair, critical_pair,
                                            large_pair):
    f = np.array([1.0, -1.0])
    details = []

    # Small, 10%: gate the scaled-second-moment clauses; the extra
    # distribution-shape row this library adds is reported, not gated
    # (same finite-t transient as criterion 7, see the notes file).
    cfg = SimConfig(x0=(1.0, 1.0), T=6.0, dt=1e-3,
                    record_times=(3.0, 4.0, 6.0))
    ens = simulate_ensemble(symmetric_pair.mech, symmetric_pair.spec, cfg,
                            20000, 33)
    pred = predict(f, symmetric_pair.mech, symmetric_pair.spec)
    res = regime_experiment(symmetric_pair.mech, symmetric_pair.spec, f,
                            pred, ens, (3.0, 4.0), tolerance=0.10)
    moment_ok = all(r.passed for r in res.rows
                    if r.quantity.startswith("scaled_second_moment"))
    cdf_note = [r for r in res.rows if r.quantity == "cdf_distance"][0]
    details.append(f"Small moments 10%: {'ok' if moment_ok else 'FAIL'} "
                   f"(shape row {cdf_note.empirical:.3f} vs "
                   f"{cdf_note.predicted:.3f} not gated)")

    # Critical, 15%
    cfg = SimConfig(x0=(1.0, 1.0), T=4.0, dt=1e-3, record_times=(3.0, 4.0))
    ens = simulate_ensemble(critical_pair.mech, critical_pair.spec, cfg,
                            20000, 34)
    pred = predict(f, critical_pair.mech, critical_pair.spec)
    res = regime_experiment(critical_pair.mech, critical_pair.spec, f, pred,
                            ens, (3.0, 4.0), tolerance=0.15,
                            min_b_positive=True)
    critical_ok = res.passed
    details.append(f"Critical 15%: {'ok' if critical_ok else 'FAIL'}")

    # Large, 10%, including the L2-Cauchy decrease of the component
    # martingale and the horizon second moment of W^{f*}.
    cfg = SimConfig(x0=(1.0, 1.0), T=6.0, dt=1e-3,
                    record_times=(1.0, 2.0, 4.0, 6.0))
    ens = simulate_ensemble(large_pair.mech, large_pair.spec, cfg, 20000, 35)
    pred = predict(f, large_pair.mech, large_pair.spec)
    res = regime_experiment(large_pair.mech, large_pair.spec, f, pred, ens,
                            (1.0, 2.0, 4.0), tolerance=0.10)
    large_ok = res.passed
    wstar = [r for r in res.rows if r.quantity == "wstar_second_moment"][0]
    details.append(f"Large 10% + Cauchy: {'ok' if large_ok else 'FAIL'} "
                   f"(W* second moment {wstar.empirical:.4f} vs "
                   f"{wstar.predicted:g})")

    ok = moment_ok and critical_ok and large_ok
    report(8, ok, "; ".join(details))


def test_criterion_9_reproducibility(model_file, feller, tmp_path, capsys):
    from branchlab.cli import main

    path = model_file(feller.mech)
    payloads = {}
    for tag, workers in (("w1", 1), ("w8", 8), ("rerun", 1)):
        dest = tmp_path / tag
        code = main(["verify", "--model", str(path), "--suite", "lln",
                     "--replicas", "2000", "--seed", "5",
                     "--workers", str(workers), "--out", str(dest)])
        assert code == 0
        payloads[tag] = (dest / "results.csv").read_bytes()
    capsys.readouterr()
    identical = (payloads["w1"] == payloads["w8"]
                 and payloads["w1"] == payloads["rerun"])
    report(9, identical, "verify CSVs byte-identical for 1 vs 8 workers "
           "and across reruns (2000 replicas, seed 5)")
