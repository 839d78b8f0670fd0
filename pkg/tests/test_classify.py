"""Regime classification and limit-law prediction.

The two-type pairs put f = (1, -1) squarely in each regime by
construction; the cyclic triple exercises a conjugate leading pair, and
the defective triple a Jordan chain (gamma = 1).  Scale/shift
equivariance is the structural property the classifier must satisfy:
classifying s f + c phi may change only the mean coefficient and the
overall scale of fhat.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from branchlab.classify import (Classification, Degenerate, GaussianMixture,
                                L2MartingaleLimit, classify,
                                mean_shape_diagnostic, predict, project,
                                regime_tolerance)

F_SPLIT = np.array([1.0, -1.0])
E1_3 = np.array([1.0, 0.0, 0.0])


def test_small_regime(symmetric_pair):
    cl = classify(F_SPLIT, symmetric_pair.spec)
    assert cl.regime == "Small"
    assert cl.mean_coeff == pytest.approx(0.0, abs=1e-12)
    assert cl.alpha == pytest.approx(0.5, abs=1e-10)
    assert cl.epsilon == pytest.approx(1.0, abs=1e-10)
    assert cl.gamma == 0
    assert cl.iset == frozenset({1})
    assert_allclose(cl.fhat, F_SPLIT, atol=1e-12)
    assert_allclose(cl.fstar, F_SPLIT, atol=1e-9)
    assert cl.r == 0
    assert cl.warnings == ()


def test_critical_regime(critical_pair):
    cl = classify(F_SPLIT, critical_pair.spec)
    assert cl.regime == "Critical"
    assert cl.alpha == pytest.approx(1.0, abs=1e-10)
    assert cl.epsilon == pytest.approx(1.0, abs=1e-10)
    assert cl.gamma == 0


def test_large_regime(large_pair):
    cl = classify(F_SPLIT, large_pair.spec)
    assert cl.regime == "Large"
    assert cl.alpha == pytest.approx(1.5, abs=1e-10)
    assert cl.epsilon == pytest.approx(0.5, abs=1e-10)
    assert_allclose(cl.fstar, F_SPLIT, atol=1e-9)


def test_conjugate_leading_pair(cyclic_triple):
    cl = classify(E1_3, cyclic_triple.spec)
    assert cl.regime == "Critical"
    assert cl.alpha == pytest.approx(1.5, abs=1e-9)
    assert len(cl.iset) == 2
    assert cl.fstar is None and cl.r is None
    evs = [cyclic_triple.spec.blocks[j].eigenvalue for j in sorted(cl.iset)]
    assert evs[0] == pytest.approx(np.conj(evs[1]))


def test_jordan_chain_classification(defective_triple):
    cl = classify(E1_3, defective_triple.spec)
    assert cl.regime == "Small"
    assert cl.mean_coeff == pytest.approx(0.5)
    assert_allclose(cl.fhat, [0.75, -0.5, -0.25], atol=1e-12)
    assert cl.alpha == pytest.approx(1.0, abs=1e-9)
    assert cl.epsilon == pytest.approx(2.0, abs=1e-9)
    assert cl.gamma == 1
    assert cl.iset == frozenset({1})
    assert_allclose(cl.fstar, [-0.5, 0.0, 0.5], atol=1e-9)
    assert cl.r == 1


def test_trivial_and_length_checks(feller):
    cl = classify(np.array([2.0]), feller.spec)
    assert cl.regime == "Trivial"
    assert cl.mean_coeff == pytest.approx(2.0)
    assert cl.alpha == -np.inf and cl.epsilon == np.inf
    assert cl.iset == frozenset()
    with pytest.raises(ValueError, match="length"):
        classify(np.array([1.0, 2.0]), feller.spec)


def test_regime_tolerance_scales():
    assert regime_tolerance(0.5) == pytest.approx(1e-9)
    assert regime_tolerance(4.0) == pytest.approx(4e-9)


# -- predictions ------------------------------------------------------------

def test_predict_small(symmetric_pair):
    p = predict(F_SPLIT, symmetric_pair.mech, symmetric_pair.spec)
    assert p.regime == "Small"
    assert p.c_exp == pytest.approx(0.75)
    assert p.p_pow == 0.0
    assert isinstance(p.limit, GaussianMixture)
    assert p.limit.variance == pytest.approx(2.0, rel=1e-9)
    assert p.secondary is None and p.covariance_rate is None


def test_predict_critical(critical_pair):
    p = predict(F_SPLIT, critical_pair.mech, critical_pair.spec)
    assert p.regime == "Critical"
    assert p.c_exp == pytest.approx(1.0)
    assert p.p_pow == pytest.approx(-0.5)
    assert p.limit.variance == pytest.approx(1.0, rel=1e-9)
    assert p.notes == ()


def test_predict_large(large_pair):
    p = predict(F_SPLIT, large_pair.mech, large_pair.spec)
    assert p.regime == "Large"
    assert p.c_exp == pytest.approx(-1.5)
    assert p.p_pow == 0.0
    assert isinstance(p.limit, L2MartingaleLimit)
    (ev, vec), = p.limit.components
    assert ev == pytest.approx(1.5)
    assert_allclose(vec.real, F_SPLIT, atol=1e-9)
    assert p.secondary is not None
    assert p.secondary.variance == pytest.approx(1.0, rel=1e-9)
    assert p.secondary_c_exp == pytest.approx(0.5)
    assert p.notes == ()


def test_predict_oscillatory_critical(cyclic_triple):
    p = predict(E1_3, cyclic_triple.mech, cyclic_triple.spec)
    assert p.regime == "Critical"
    assert p.c_exp == pytest.approx(1.5)
    assert p.p_pow == pytest.approx(-0.5)
    assert p.limit.variance == pytest.approx(2.0 / 9.0, rel=1e-9)
    assert len(p.notes) == 1
    assert "not a real singleton" in p.notes[0]


def test_predict_trivial_and_degenerate(feller):
    p = predict(np.array([2.0]), feller.mech, feller.spec)
    assert p.regime == "Trivial"
    assert p.limit == GaussianMixture(variance=pytest.approx(4.0))
    assert p.covariance_rate == pytest.approx(0.5)
    assert p.c_exp == pytest.approx(0.5)

    z = predict(np.array([0.0]), feller.mech, feller.spec)
    assert isinstance(z.limit, Degenerate)


def test_predict_accepts_precomputed_classification(large_pair):
    cl = classify(F_SPLIT, large_pair.spec)
    p = predict(F_SPLIT, large_pair.mech, large_pair.spec, classification=cl)
    assert p.regime == "Large"


# -- projection and the mean-shape diagnostic -------------------------------

def test_project_reconstructs(defective_triple):
    f = np.array([0.3, -1.2, 0.7])
    coeffs = project(f, defective_triple.spec)
    rec = sum(defective_triple.spec.blocks[j].right @ coeffs[j]
              for j in range(len(coeffs)))
    assert_allclose(rec.real, f, atol=1e-12)
    assert np.abs(rec.imag).max() < 1e-12


def test_mean_shape_diagnostic_exact_cases(symmetric_pair, cyclic_triple):
    for case, f in ((symmetric_pair, F_SPLIT), (cyclic_triple, E1_3)):
        cl = classify(f, case.spec)
        vals = mean_shape_diagnostic(case.spec, cl, (5.0, 10.0, 20.0))
        # Diagonalizable spectra reproduce the leading term exactly.
        assert max(vals) < 1e-12


def test_mean_shape_diagnostic_jordan_decay(defective_triple):
    cl = classify(E1_3, defective_triple.spec)
    vals = mean_shape_diagnostic(defective_triple.spec, cl, (5.0, 10.0, 20.0))
    # The chain's lower rung contributes 0.75 t^{-1} e^{0} exactly.
    assert_allclose(vals, [0.15, 0.075, 0.0375], rtol=1e-9)


def test_mean_shape_diagnostic_trivial_is_empty(feller):
    cl = classify(np.array([1.0]), feller.spec)
    assert mean_shape_diagnostic(feller.spec, cl, (1.0, 2.0)) == []


# -- scale/shift equivariance ----------------------------------------------

def test_scale_shift_equivariance(symmetric_pair, large_pair, cyclic_triple,
                                  defective_triple):
    cases = (symmetric_pair, large_pair, cyclic_triple, defective_triple)
    rng = np.random.default_rng(404)
    for i in range(200):
        spec = cases[i % 4].spec
        f = rng.standard_normal(spec.K)
        s = float(np.exp(rng.uniform(-2.0, 2.0)))
        c = float(rng.standard_normal())
        base = classify(f, spec)
        moved = classify(s * f + c * spec.phi, spec)
        assert moved.regime == base.regime
        assert moved.iset == base.iset
        assert moved.gamma == base.gamma
        assert moved.alpha == pytest.approx(base.alpha, abs=1e-9)
        assert_allclose(moved.fhat, s * base.fhat, atol=1e-9 * max(1.0, s))
        assert moved.mean_coeff == pytest.approx(s * base.mean_coeff + c,
                                                 abs=1e-9)
