"""Variances and limit constants of the branching functionals.

All second-moment quantities reduce to time integrals of the mean
semigroup applied to the quadratic form vartheta:

    Var_{dx}<f, X_t> = int_0^t T_{t-s}( vartheta[T_s f] )(x) ds.

Infinite-horizon integrals whose integrand is linear in e^{sB} are linear
solves against a resolvent (Theta, delta^2); the one genuinely nonlinear
integral (rho^2_f) is truncated with a certified exponential tail bound.
Finite-horizon quadrature works on an exponentially rescaled integrand so
everything stays O(1) even at t = 40 on a supercritical model.

Type indices ``x`` are 1-based, matching the config file and the CSV
column convention (``type_1`` .. ``type_K``); ``x=None`` returns the full
K-vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad, quad_vec

from .model import Mechanism, mean_matrix, vartheta
from .semigroup import (
    PROJECTION_RTOL,
    Propagator,
    SpectralData,
    projection_mask,
    subdominant_abscissa,
)

__all__ = [
    "QuadratureError",
    "LimitConstants",
    "AsymptoteRow",
    "AsymptoteTable",
    "sigma_phi_sq",
    "big_theta",
    "martingale_variance",
    "variance_of_functional",
    "covariance_of_functionals",
    "rho_f_sq",
    "varrho_sq",
    "delta_sq",
    "variance_asymptote",
    "limit_constants",
]

QUAD_RTOL = 1e-9
# absolute bound demanded of the certified truncation tail of rho^2_f
TAIL_BOUND = 1e-9


class QuadratureError(RuntimeError):
    """Adaptive quadrature missed its tolerance; carries the raw estimate."""

    def __init__(self, message: str, estimate):
        super().__init__(message)
        self.estimate = estimate


# Propagators are cached per mechanism (hashable frozen dataclass), so the
# O(K^3) eigendecomposition happens once and every integrand evaluation in
# the quadratures below is O(K^2).
_PROPAGATORS: dict[Mechanism, Propagator] = {}


def _propagator(mech: Mechanism) -> Propagator:
    prop = _PROPAGATORS.get(mech)
    if prop is None:
        prop = Propagator(mean_matrix(mech).B)
        if len(_PROPAGATORS) > 64:
            _PROPAGATORS.clear()
        _PROPAGATORS[mech] = prop
    return prop


def _type_index(x: int, K: int) -> int:
    if not 1 <= x <= K:
        raise ValueError(f"type index x must be in 1..{K}, got {x}")
    return x - 1


def _pick(vec: np.ndarray, x: int | None, K: int):
    return vec if x is None else float(vec[_type_index(x, K)])


def _mean_active(spec: SpectralData, f: np.ndarray) -> bool:
    m = abs(complex(np.asarray(f) @ spec.phitilde))
    scale = float(np.abs(f).max()) if np.asarray(f).size else 0.0
    return m > PROJECTION_RTOL * scale * float(np.abs(spec.phitilde).max())


def sigma_phi_sq(mech: Mechanism, spec: SpectralData) -> float:
    """sigma^2_phi = <vartheta[phi], phitilde> / lambda1."""
    return float(vartheta(mech, spec.phi) @ spec.phitilde / spec.lambda1)


def _certified_horizon(h, decay: float, probe_end: float) -> float:
    """Smallest S with a certified bound int_S^inf |h| <= TAIL_BOUND.

    Assumes |h(s)| <= C e^{-decay s / 2}; the halved rate leaves room for
    the polynomial factors of defective blocks, and C is estimated on a
    probe grid.  Returns at least probe_end.
    """
    grid = np.linspace(0.0, probe_end, 257)
    C = max(abs(h(s)) * np.exp(0.5 * decay * s) for s in grid)
    if C <= 0:
        return probe_end
    S = (2.0 / decay) * np.log(2.0 * C / (decay * TAIL_BOUND))
    return float(max(S, probe_end))


def big_theta(mech: Mechanism, spec: SpectralData,
              method: str = "resolvent") -> np.ndarray:
    """Theta(x) = int_0^inf e^{-2 lambda1 s} T_s(vartheta[phi])(x) ds.

    Since Re spec(B) <= lambda1 < 2 lambda1, the integral is the
    resolvent solve (2 lambda1 I - B)^{-1} vartheta[phi]; the quadrature
    method exists for the cross-check invariant.
    """
    if spec.lambda1 <= 0:
        raise ValueError("Theta requires a supercritical spectrum (lambda1 > 0)")
    vth = vartheta(mech, spec.phi)
    B = mean_matrix(mech).B
    if method == "resolvent":
        return np.linalg.solve(2.0 * spec.lambda1 * np.eye(spec.K) - B, vth)
    if method == "quadrature":
        P = _propagator(mech)
        h = lambda s: np.abs(P.apply(s, vth, shift=2.0 * spec.lambda1)).max()
        S = _certified_horizon(h, spec.lambda1, max(10.0, 20.0 / spec.lambda1))
        out, err = quad_vec(lambda s: P.apply(s, vth, shift=2.0 * spec.lambda1),
                            0.0, S, epsabs=1e-12, epsrel=QUAD_RTOL)
        _check_quad(out, err)
        return out
    raise ValueError(f"unknown method {method!r}")


def martingale_variance(mech: Mechanism, spec: SpectralData, t: float,
                        x: int | None = None, method: str = "resolvent"):
    """Var_{dx}[W^phi_t] = int_0^t e^{-2 lambda1 s} T_s(vartheta[phi])(x) ds.

    Closed form (2 lambda1 I - B)^{-1} (I - e^{t(B - 2 lambda1 I)})
    vartheta[phi]; increasing in t with limit Theta(x).
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    vth = vartheta(mech, spec.phi)
    lam1 = spec.lambda1
    if method == "resolvent":
        B = mean_matrix(mech).B
        P = _propagator(mech)
        decayed = P.apply(t, vth, shift=2.0 * lam1)
        out = np.linalg.solve(2.0 * lam1 * np.eye(spec.K) - B, vth - decayed)
    elif method == "quadrature":
        P = _propagator(mech)
        out, err = quad_vec(lambda s: P.apply(s, vth, shift=2.0 * lam1),
                            0.0, float(t), epsabs=1e-12, epsrel=QUAD_RTOL)
        _check_quad(out, err)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _pick(out, x, spec.K)


def _check_quad(value: np.ndarray, err: float) -> None:
    scale = float(np.max(np.abs(value))) if np.size(value) else 0.0
    if err > max(1e-8, 1e-6 * scale):
        raise QuadratureError(
            f"quadrature error estimate {err:.3e} too large for value scale "
            f"{scale:.3e}", estimate=value)


def _growth_rate(spec: SpectralData, f: np.ndarray) -> float:
    """Exponential growth rate of s -> T_s f (up to polynomial factors)."""
    f = np.asarray(f)
    if not np.any(np.abs(f) > 0):
        return -np.inf
    if _mean_active(spec, f):
        return spec.lambda1
    return subdominant_abscissa(spec, f)


def _scaled_covariance(mech: Mechanism, spec: SpectralData, f: np.ndarray,
                       g: np.ndarray, t: float, c: float) -> np.ndarray:
    """e^{-ct} int_0^t T_{t-s}(vartheta[T_s f, T_s g]) ds, evaluated stably.

    c must be >= max(lambda1, growth(f) + growth(g)) so that both the
    outer semigroup factor and the running exponent stay bounded.
    """
    P = _propagator(mech)
    beta_f = _growth_rate(spec, f)
    beta_g = _growth_rate(spec, g)
    if not np.isfinite(beta_f) or not np.isfinite(beta_g):
        return np.zeros(spec.K)
    same = g is f or (np.shape(f) == np.shape(g) and np.array_equal(f, g))
    # the inner (growing) factors go through the masked block expansion so
    # an exact eigendirection cannot leak into faster modes; the outer
    # factor only decays under shift c, so the plain propagator is safe
    mask_f = projection_mask(spec, f)
    mask_g = mask_f if same else projection_mask(spec, g)

    def integrand(s):
        uf = spec.propagate(s, f, shift=beta_f, mask=mask_f)
        ug = uf if same else spec.propagate(s, g, shift=beta_g, mask=mask_g)
        inner = vartheta(mech, uf, ug)
        if np.iscomplexobj(inner):
            inner = inner.real
        return P.apply(t - s, inner, shift=c) * np.exp((beta_f + beta_g - c) * s)

    out, err = quad_vec(integrand, 0.0, float(t), epsabs=1e-12, epsrel=QUAD_RTOL)
    _check_quad(out, err)
    return out


def variance_of_functional(mech: Mechanism, spec: SpectralData, f: np.ndarray,
                           t: float, x: int | None = None):
    """Var_{dx}<f, X_t> by adaptive quadrature of the vartheta integral."""
    f = np.asarray(f, dtype=float)
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0 or not np.any(np.abs(f) > 0):
        return _pick(np.zeros(spec.K), x, spec.K)
    beta = _growth_rate(spec, f)
    c = max(spec.lambda1, 2.0 * beta)
    if c * t > 700.0:
        raise OverflowError(
            f"raw variance overflows double at t={t} (growth exponent {c:.3g}); "
            "use variance_asymptote for the scaled quantity")
    scaled = _scaled_covariance(mech, spec, f, f, t, c)
    return _pick(scaled * np.exp(c * t), x, spec.K)


def covariance_of_functionals(mech: Mechanism, spec: SpectralData,
                              f: np.ndarray, g: np.ndarray, t: float,
                              x: int | None = None):
    """Cov_{dx}(<f, X_t>, <g, X_t>) = int_0^t T_{t-s}(vartheta[T_s f, T_s g]) ds."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0 or not np.any(np.abs(f) > 0) or not np.any(np.abs(g) > 0):
        return _pick(np.zeros(spec.K), x, spec.K)
    c = max(spec.lambda1, _growth_rate(spec, f) + _growth_rate(spec, g))
    if c * t > 700.0:
        raise OverflowError(f"raw covariance overflows double at t={t}")
    scaled = _scaled_covariance(mech, spec, f, g, t, c)
    return _pick(scaled * np.exp(c * t), x, spec.K)


def rho_f_sq(mech: Mechanism, spec: SpectralData, f: np.ndarray) -> float:
    """rho^2_f = int_0^inf e^{-lambda1 s} <vartheta[T_s fhat], phitilde> ds
    + <f, phitilde>^2 sigma^2_phi, for f in the small regime.

    The integrand decays like e^{(2 alpha - lambda1)s}; the truncation
    horizon is chosen so the certified tail is below 1e-9.  Refuses f
    whose subdominant abscissa alpha is not strictly below lambda1 / 2.
    """
    f = np.asarray(f, dtype=float)
    m = float(f @ spec.phitilde)
    s2 = sigma_phi_sq(mech, spec)
    fhat = f - m * spec.phi
    alpha = subdominant_abscissa(spec, fhat)
    if alpha == -np.inf:
        return m * m * s2
    tol = 1e-9 * max(1.0, spec.lambda1)
    if alpha >= spec.lambda1 / 2.0 - tol:
        raise ValueError(
            f"rho^2_f requires the small regime (alpha < lambda1/2): "
            f"alpha={alpha!r}, lambda1={spec.lambda1!r}")
    decay = spec.lambda1 - 2.0 * alpha
    mask = projection_mask(spec, fhat)

    def h(s):
        u = spec.propagate(s, fhat, shift=alpha, mask=mask)
        return float(vartheta(mech, u) @ spec.phitilde) * np.exp((2.0 * alpha - spec.lambda1) * s)

    S = _certified_horizon(h, decay, max(10.0, 20.0 / decay))
    integral, err = quad(h, 0.0, S, epsabs=1e-12, epsrel=QUAD_RTOL, limit=500)
    if err > max(1e-8, 1e-6 * abs(integral)):
        raise QuadratureError(f"rho^2_f quadrature error {err:.3e}", estimate=integral)
    return float(integral) + m * m * s2


def varrho_sq(mech: Mechanism, spec: SpectralData, classification) -> float:
    """The leading-block variance constant
    (gamma!)^{-2} sum_{j in iset} <vartheta[F_j, conj F_j], phitilde>.

    For a real singleton leading set this is <vartheta[f*], phitilde> /
    (gamma!)^2.  Defined for Critical classifications and for the Large
    ones (where it feeds the secondary CLT variance).
    """
    if classification.regime not in ("Critical", "Large"):
        raise ValueError(
            f"varrho_sq needs a Critical or Large classification, got "
            f"{classification.regime}")
    gfact = float(math.factorial(classification.gamma))
    total = 0.0
    for j in sorted(classification.iset):
        Fj = np.asarray(classification.Fj[j])
        val = vartheta(mech, Fj, np.conj(Fj)) @ spec.phitilde
        total += float(np.real(val))
    return total / gfact ** 2


def delta_sq(mech: Mechanism, spec: SpectralData, fstar: np.ndarray,
             eps: float, method: str = "resolvent") -> np.ndarray:
    """delta^2(x) = int_0^inf e^{-2(lambda1 - eps)s} T_s(vartheta[f*])(x) ds.

    Valid for eps in [0, lambda1/2): then 2(lambda1 - eps) > lambda1
    dominates the spectrum and the integral is the resolvent solve
    (2(lambda1 - eps) I - B)^{-1} vartheta[f*].
    """
    if not 0.0 <= eps < spec.lambda1 / 2.0:
        raise ValueError(
            f"delta^2 requires eps in [0, lambda1/2) = [0, {spec.lambda1 / 2.0!r}), "
            f"got {eps!r}")
    fstar = np.asarray(fstar)
    vth = vartheta(mech, fstar, np.conj(fstar))
    vth = np.real(vth)
    rate = 2.0 * (spec.lambda1 - eps)
    if method == "resolvent":
        B = mean_matrix(mech).B
        return np.linalg.solve(rate * np.eye(spec.K) - B, vth)
    if method == "quadrature":
        P = _propagator(mech)
        h = lambda s: np.abs(P.apply(s, vth, shift=rate)).max()
        decay = rate - spec.lambda1
        S = _certified_horizon(h, decay, max(10.0, 20.0 / decay))
        out, err = quad_vec(lambda s: P.apply(s, vth, shift=rate), 0.0, S,
                            epsabs=1e-12, epsrel=QUAD_RTOL)
        _check_quad(out, err)
        return out
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Deterministic variance asymptotes (the trichotomy's second-moment side)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AsymptoteRow:
    t: float
    scaled: tuple[float, ...]
    limit: tuple[float, ...]
    deviation: float


@dataclass(frozen=True)
class AsymptoteTable:
    regime: str
    rows: tuple[AsymptoteRow, ...]
    deviations_decreasing: bool

    def final_deviation(self) -> float:
        return self.rows[-1].deviation


def variance_asymptote(mech: Mechanism, spec: SpectralData, f: np.ndarray,
                       classification, t_grid) -> AsymptoteTable:
    """Scaled variance along t_grid against its predicted limit.

    Scalings by regime (gamma from the classification, alpha = lambda1 -
    eps): Small e^{-lambda1 t} Var / phi -> rho^2; Critical t^{-(1+2 gamma)}
    e^{-lambda1 t} Var / phi -> varrho^2 / (1 + 2 gamma); Large t^{-2 gamma}
    e^{-2 alpha t} Var -> delta^2(x); Trivial (f proportional to phi)
    e^{-2 lambda1 t} Var -> <f, phitilde>^2 Theta(x).

    The Small/Critical/Large scalings apply to the centered part fhat:
    the principal component's variance grows at e^{2 lambda1 t} and would
    swamp the subdominant scalings.
    """
    t_grid = sorted(float(t) for t in t_grid)
    if not t_grid or t_grid[0] <= 0:
        raise ValueError("t_grid must contain positive times")
    regime = classification.regime
    fhat = np.asarray(classification.fhat, dtype=float)
    gamma = classification.gamma
    phi = spec.phi
    lam1 = spec.lambda1

    if regime == "Trivial":
        m = classification.mean_coeff
        limit = m * m * big_theta(mech, spec)
        rows = []
        for t in t_grid:
            scaled = _scaled_covariance(mech, spec, np.asarray(f, dtype=float),
                                        np.asarray(f, dtype=float), t, 2.0 * lam1)
            rows.append(_row(t, scaled, limit))
    elif regime == "Small":
        limit_val = rho_f_sq(mech, spec, fhat)
        limit = np.full(spec.K, limit_val)
        rows = []
        for t in t_grid:
            scaled = _scaled_covariance(mech, spec, fhat, fhat, t, lam1) / phi
            rows.append(_row(t, scaled, limit))
    elif regime == "Critical":
        limit_val = varrho_sq(mech, spec, classification) / (1.0 + 2.0 * gamma)
        limit = np.full(spec.K, limit_val)
        rows = []
        for t in t_grid:
            scaled = _scaled_covariance(mech, spec, fhat, fhat, t, lam1) \
                / phi * t ** (-(1.0 + 2.0 * gamma))
            rows.append(_row(t, scaled, limit))
    elif regime == "Large":
        if classification.fstar is None:
            raise ValueError("Large-regime asymptote needs the fixed-point f* "
                             "(singleton real leading set)")
        eps = classification.epsilon
        alpha = lam1 - eps
        limit = delta_sq(mech, spec, classification.fstar, eps)
        rows = []
        for t in t_grid:
            scaled = _scaled_covariance(mech, spec, fhat, fhat, t, 2.0 * alpha) \
                * t ** (-2.0 * gamma)
            rows.append(_row(t, scaled, limit))
    else:
        raise ValueError(f"unknown regime {regime!r}")

    devs = [r.deviation for r in rows]
    decreasing = all(devs[i + 1] <= devs[i] * (1.0 + 1e-6) + 1e-12
                     for i in range(len(devs) - 1))
    return AsymptoteTable(regime=regime, rows=tuple(rows),
                          deviations_decreasing=decreasing)


def _row(t: float, scaled: np.ndarray, limit: np.ndarray) -> AsymptoteRow:
    ref = float(np.max(np.abs(limit)))
    dev = float(np.max(np.abs(scaled - limit)))
    if ref > 0:
        dev /= ref
    return AsymptoteRow(t=t, scaled=tuple(float(v) for v in scaled),
                        limit=tuple(float(v) for v in limit), deviation=dev)


@dataclass(frozen=True)
class LimitConstants:
    """The numeric constants feeding a limit-law prediction."""

    sigma_phi_sq: float
    theta: tuple[float, ...]
    rho_f_sq: float | None = None
    varrho_sq: float | None = None
    delta_sq: tuple[float, ...] | None = None


def limit_constants(mech: Mechanism, spec: SpectralData,
                    classification=None, f=None) -> LimitConstants:
    """Assemble every constant applicable to (model, f)'s regime."""
    s2 = sigma_phi_sq(mech, spec)
    theta = tuple(float(v) for v in big_theta(mech, spec))
    rho = varrho = None
    dsq = None
    if classification is not None:
        if classification.regime in ("Small", "Trivial"):
            rho = rho_f_sq(mech, spec, np.asarray(f if f is not None
                                                  else classification.fhat, dtype=float))
        elif classification.regime in ("Critical", "Large"):
            varrho = varrho_sq(mech, spec, classification)
            if classification.regime == "Large" and classification.fstar is not None:
                dsq = tuple(float(v) for v in delta_sq(
                    mech, spec, classification.fstar, classification.epsilon))
    return LimitConstants(sigma_phi_sq=s2, theta=theta, rho_f_sq=rho,
                          varrho_sq=varrho, delta_sq=dsq)
