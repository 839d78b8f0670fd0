"""Mean semigroup, Perron triplet, Jordan spectral data, cumulant ODE.

Everything here lives on the K x K mean generator B of a mechanism:

* ``apply_semigroup``   evaluates T_t f = e^{tB} f,
* ``eigen_triplet``     the principal eigenvalue with its positive
  right/left eigenvectors (normalized max phi = 1, <phi, phitilde> = 1),
* ``spectral_decompose``the complete Jordan block structure with
  biorthogonal dual chains (the duals are the rows of P^{-1}, which makes
  biorthonormality exact by construction),
* ``delta_t``           the uniform gauge sup_{x, f in [0,1]^K}
  |phi_x^{-1} (e^{-lambda1 t} T_t f)(x) - <f, phitilde>|,
* ``solve_cumulant``    the nonlinear log-Laplace flow dv/dt = -psi(., v),
  the independent oracle the simulator is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .model import Mechanism, is_irreducible

__all__ = [
    "ReducibleMatrixError",
    "CumulantError",
    "EigenTriplet",
    "SpectralBlock",
    "SpectralData",
    "Propagator",
    "apply_semigroup",
    "eigen_triplet",
    "spectral_decompose",
    "delta_t",
    "solve_cumulant",
    "projection_mask",
    "subdominant_abscissa",
    "PROJECTION_RTOL",
]

# Scale-free threshold under which an expansion coefficient <f, dual_n>
# counts as zero (classifier and moment asymptotics share this rule).
PROJECTION_RTOL = 1e-10


class ReducibleMatrixError(ValueError):
    """The mean matrix is reducible; no simple principal eigenvalue."""


class CumulantError(RuntimeError):
    """Cumulant ODE integration failed; ``last_t`` is the last valid time."""

    def __init__(self, message: str, last_t: float):
        super().__init__(message)
        self.last_t = last_t


class EigenTriplet(NamedTuple):
    lambda1: float
    phi: np.ndarray
    phitilde: np.ndarray


def apply_semigroup(B: np.ndarray, t: float, f: np.ndarray) -> np.ndarray:
    """Evaluate T_t f = e^{tB} f (dense scaling-and-squaring expm)."""
    B = np.asarray(B, dtype=float)
    f = np.asarray(f)
    if not np.isfinite(t) or t < 0:
        raise ValueError(f"t must be finite and >= 0, got {t!r}")
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite entries in f")
    if t == 0:
        return f.astype(float, copy=True) if not np.iscomplexobj(f) else f.copy()
    return expm(t * B) @ f


def eigen_triplet(B: np.ndarray) -> EigenTriplet:
    """Principal eigenvalue and positive right/left eigenvectors.

    Returns (lambda1, phi, phitilde) with max(phi) = 1 and
    sum(phi * phitilde) = 1.  Requires B irreducible Metzler; refuses
    (``ReducibleMatrixError``) otherwise since the principal eigenvalue
    need not be simple then.
    """
    B = np.asarray(B, dtype=float)
    K = B.shape[0]
    if B.shape != (K, K):
        raise ValueError("B must be square")
    off = B - np.diag(np.diag(B))
    if np.any(off < 0):
        raise ValueError("B must be Metzler (nonnegative off-diagonal)")
    if not is_irreducible(B):
        raise ReducibleMatrixError(
            "mean matrix is reducible (off-diagonal positivity pattern is not "
            "strongly connected); principal eigendata undefined")

    w, V = np.linalg.eig(B)
    idx = int(np.argmax(w.real))
    lam1 = w[idx]
    scale = max(1.0, float(np.abs(w).max()))
    if abs(lam1.imag) > 1e-10 * scale:
        raise ArithmeticError(f"principal eigenvalue not real: {lam1!r}")
    lam1 = float(lam1.real)
    # simplicity: the Perron root of an irreducible Metzler matrix is simple;
    # a near-tie here means the matrix is numerically degenerate.
    gap = np.sort(np.abs(w - lam1))
    if K > 1 and gap[1] < 1e-10 * scale:
        raise ArithmeticError("principal eigenvalue is numerically multiple")

    phi = _positive_vector(V[:, idx], "right")
    phi = phi / phi.max()

    wl, Vl = np.linalg.eig(B.T)
    idx_l = int(np.argmin(np.abs(wl - lam1)))
    phitilde = _positive_vector(Vl[:, idx_l], "left")
    phitilde = phitilde / float(phi @ phitilde)
    return EigenTriplet(lambda1=lam1, phi=phi, phitilde=phitilde)


def _positive_vector(v: np.ndarray, side: str) -> np.ndarray:
    """Strip the phase from a Perron eigenvector and check strict positivity."""
    j = int(np.argmax(np.abs(v)))
    v = (v / v[j]).real
    if np.any(v <= 0):
        raise ArithmeticError(f"{side} principal eigenvector not strictly positive "
                              f"(min={v.min()!r})")
    return v


# ---------------------------------------------------------------------------
# Jordan spectral data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralBlock:
    """One spectral block: eigenvalue, right chains, dual left chains.

    ``right`` has the chain vectors as columns in chain order (within each
    chain the eigenvector comes first, so B right[:, n] = lam right[:, n]
    + right[:, n-1] above the chain bottom).  ``dual`` holds the matching
    rows of P^{-1}; the pairing sum(right[:, m] * dual[n, :]) is exactly
    the Kronecker delta.  ``chain_lengths`` partitions the columns.
    """

    eigenvalue: complex
    chain_lengths: tuple[int, ...]
    right: np.ndarray
    dual: np.ndarray

    @property
    def size(self) -> int:
        return sum(self.chain_lengths)

    def chain_slices(self) -> list[slice]:
        out, start = [], 0
        for d in self.chain_lengths:
            out.append(slice(start, start + d))
            start += d
        return out


@dataclass(frozen=True)
class SpectralData:
    """Complete spectral decomposition of a mean matrix."""

    lambda1: float
    phi: np.ndarray
    phitilde: np.ndarray
    blocks: tuple[SpectralBlock, ...]
    conj_pair: tuple[int, ...]

    @property
    def K(self) -> int:
        return self.phi.shape[0]

    def coefficients(self, f: np.ndarray) -> list[np.ndarray]:
        """Expansion coefficients c^(j)_n = <f, dual chain n of block j>."""
        f = np.asarray(f)
        return [blk.dual @ f for blk in self.blocks]

    def mean_coefficient(self, f: np.ndarray) -> float | complex:
        c = np.asarray(f) @ self.phitilde
        return float(c) if not np.iscomplexobj(np.asarray(f)) else c

    def propagate(self, t: float, f: np.ndarray, shift: float = 0.0,
                  mask: list[np.ndarray] | None = None) -> np.ndarray:
        """e^{-shift t} T_t f through the block expansion.

        Expansion coefficients below the projection threshold are zeroed
        (see :func:`projection_mask`), so a function lying exactly in a
        subdominant eigenspace stays there: without the mask, an O(eps)
        leak into a faster block gets amplified by e^{(lambda_j - shift)t}
        and dominates for large t.  Handles defective blocks exactly via
        the in-chain polynomial t^m/m!.
        """
        f = np.asarray(f)
        if mask is None:
            mask = projection_mask(self, f)
        out = np.zeros(self.K, dtype=complex)
        for j, blk in enumerate(self.blocks):
            c = np.where(mask[j], blk.dual @ f, 0.0)
            if not np.any(c != 0.0):
                continue
            scale = np.exp((blk.eigenvalue - shift) * t)
            for sl in blk.chain_slices():
                cc = c[sl]
                d = sl.stop - sl.start
                w = np.empty(d, dtype=complex)
                for n in range(d):
                    acc = 0.0 + 0.0j
                    p = 1.0
                    for q in range(n, d):
                        acc += p * cc[q]
                        p *= t / (q - n + 1)
                    w[n] = acc
                out += scale * (blk.right[:, sl] @ w)
        return out.real if not np.iscomplexobj(f) else out


def _nullspace(A: np.ndarray, cutoff: float) -> np.ndarray:
    """Orthonormal basis (columns) of the numerical null space of A."""
    _, s, vh = np.linalg.svd(A)
    rank = int(np.sum(s > cutoff))
    return vh[rank:].conj().T


def _cluster_eigenvalues(w: np.ndarray, tol: float) -> list[list[int]]:
    """Union-find clustering of eigenvalues at absolute tolerance tol.

    Near-real values are snapped to the real axis first; a defective real
    pair perturbs into a tiny conjugate pair whose members are twice as
    far from each other as from the axis, and snapping keeps the cluster
    decision consistent with the conjugate-symmetry enforcement.
    """
    w = np.where(np.abs(w.imag) <= tol, w.real.astype(complex), w)
    n = len(w)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if abs(w[i] - w[j]) <= tol:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def _jordan_chains(B: np.ndarray, lam: complex, mult: int, cutoff: float
                   ) -> list[list[np.ndarray]]:
    """Generalized eigenvector chains for one eigenvalue.

    Returns chains as lists [phi_1, ..., phi_d] with phi_1 an eigenvector
    and (B - lam) phi_n = phi_{n-1}.
    """
    K = B.shape[0]
    N = B - lam * np.eye(K)
    if not np.iscomplexobj(np.asarray(lam)) or abs(complex(lam).imag) == 0:
        N = N.real if not np.iscomplexobj(N) else N

    # null(N^j) dimensions until the cluster multiplicity is exhausted
    bases = [np.zeros((K, 0))]
    dims = [0]
    power = np.eye(K, dtype=N.dtype)
    while dims[-1] < mult:
        power = power @ N
        cut = max(cutoff, cutoff * np.linalg.norm(power, 2) / max(np.linalg.norm(B, 2), 1e-300))
        basis = _nullspace(power, cut)
        if basis.shape[1] <= dims[-1]:
            raise ArithmeticError(
                f"Jordan structure did not converge for eigenvalue {lam!r}: "
                f"null-space dimension stalled at {dims[-1]} < multiplicity {mult} "
                f"(cluster tolerance {cutoff!r})")
        bases.append(basis)
        dims.append(basis.shape[1])
    depth = len(dims) - 1

    chains: list[list[np.ndarray]] = []
    for level in range(depth, 0, -1):
        want = (dims[level] - dims[level - 1]) \
            - sum(1 for c in chains if len(c) >= level)
        if want <= 0:
            continue
        # span to avoid: anything of lower height plus already-chosen
        # vectors at this height
        avoid = [bases[level - 1]]
        avoid += [np.asarray(c[level - 1]).reshape(-1, 1) for c in chains
                  if len(c) >= level]
        S = np.hstack(avoid) if avoid else np.zeros((K, 0))
        Q, _ = np.linalg.qr(S) if S.shape[1] else (np.zeros((K, 0)), None)
        C = bases[level]
        resid = C - Q @ (Q.conj().T @ C) if Q.shape[1] else C
        _, s, vh = np.linalg.svd(resid)
        for i in range(want):
            top = C @ vh[i].conj()
            chain = [top]
            for _ in range(level - 1):
                chain.append(N @ chain[-1])
            chain.reverse()  # eigenvector first
            chains.append(chain)
    chains.sort(key=len, reverse=True)

    # fix the overall scale of each chain by its top vector's largest entry
    fixed = []
    for chain in chains:
        top = chain[-1]
        piv = top[int(np.argmax(np.abs(top)))]
        fixed.append([v / piv for v in chain])
    return fixed


class _RetryDecomposition(Exception):
    """Internal: the cluster tolerance was too fine, escalate and retry."""


def spectral_decompose(B: np.ndarray) -> SpectralData:
    """Full Jordan decomposition of a mean matrix, principal block first.

    Blocks are ordered by decreasing real part (ties: decreasing
    imaginary part, so each complex block immediately precedes its
    conjugate partner, whose chains are the exact conjugates).

    Eigenvalues within 1e-8 * ||B|| of each other form one block; if the
    resulting basis is numerically rank-deficient (a defective eigenvalue
    can split by ~sqrt(machine eps), beyond that tolerance) the clustering
    is retried once at 10x and once at 100x before giving up.
    """
    B = np.asarray(B, dtype=float)
    triplet = eigen_triplet(B)
    norm_B = max(np.linalg.norm(B, 2), 1e-300)
    base_tol = 1e-8 * norm_B
    rank_cutoff = 1e-10 * norm_B
    w = np.linalg.eigvals(B)

    last_err: Exception | None = None
    for factor in (1.0, 10.0, 100.0):
        try:
            return _decompose_at_tolerance(B, triplet, w, base_tol * factor,
                                           rank_cutoff)
        except _RetryDecomposition as err:
            last_err = err
    raise ArithmeticError(
        f"spectral decomposition failed even at 100x cluster tolerance: {last_err}")


def _decompose_at_tolerance(B: np.ndarray, triplet: EigenTriplet,
                            w: np.ndarray, cluster_tol: float,
                            rank_cutoff: float) -> SpectralData:
    K = B.shape[0]
    clusters = _cluster_eigenvalues(w, cluster_tol)
    entries = []
    for members in clusters:
        lam = complex(np.mean(w[members]))
        if abs(lam.imag) <= cluster_tol:
            lam = complex(lam.real, 0.0)
        entries.append((lam, len(members)))
    entries.sort(key=lambda e: (-e[0].real, -e[0].imag))

    blocks: list[SpectralBlock | None] = [None] * len(entries)
    pair = list(range(len(entries)))
    chains_by_index: list[list[list[np.ndarray]] | None] = [None] * len(entries)

    try:
        for k, (lam, mult) in enumerate(entries):
            if chains_by_index[k] is not None:
                continue
            if lam.imag > 0:
                partner = next(i for i, (mu, _m) in enumerate(entries)
                               if abs(mu - lam.conjugate()) <= max(cluster_tol, 1e-12)
                               and i != k)
                chains = _jordan_chains(B, lam, mult, rank_cutoff)
                chains_by_index[k] = chains
                chains_by_index[partner] = [[v.conj() for v in c] for c in chains]
                pair[k], pair[partner] = partner, k
            elif lam.imag == 0:
                chains = _jordan_chains(B, lam.real, mult, rank_cutoff)
                chains_by_index[k] = [[np.asarray(v).real for v in c] for c in chains]
    except (ArithmeticError, StopIteration) as err:
        raise _RetryDecomposition(str(err)) from err

    # principal block: replace by the Perron vector for exact positivity
    if entries[0][1] != 1 or entries[0][0].imag != 0:
        raise ArithmeticError("principal eigenvalue merged into a larger cluster; "
                              "matrix is numerically degenerate")
    chains_by_index[0] = [[triplet.phi.astype(float)]]

    columns = []
    layout = []  # (block index, chain lengths, column start)
    for k, chains in enumerate(chains_by_index):
        start = len(columns)
        lengths = tuple(len(c) for c in chains)
        for chain in chains:
            columns.extend(chain)
        layout.append((k, lengths, start))
    P = np.column_stack(columns)
    if np.iscomplexobj(P) and np.abs(P.imag).max() == 0:
        P = P.real
    if np.linalg.cond(P) > 1e10:
        raise _RetryDecomposition(
            f"generalized-eigenvector basis ill conditioned "
            f"(cond {np.linalg.cond(P):.2e}); eigenvalue clusters likely split")
    Pinv = np.linalg.inv(P)

    for k, lengths, start in layout:
        size = sum(lengths)
        blocks[k] = SpectralBlock(
            eigenvalue=entries[k][0],
            chain_lengths=lengths,
            right=P[:, start:start + size].copy(),
            dual=Pinv[start:start + size, :].copy(),
        )

    phitilde = blocks[0].dual[0]
    if np.iscomplexobj(phitilde):
        phitilde = phitilde.real
    if np.any(phitilde <= 0):
        raise ArithmeticError("principal dual row not strictly positive")

    return SpectralData(
        lambda1=triplet.lambda1,
        phi=triplet.phi,
        phitilde=phitilde,
        blocks=tuple(blocks),
        conj_pair=tuple(pair),
    )


def projection_mask(spec: SpectralData, f: np.ndarray,
                    rtol: float = PROJECTION_RTOL) -> list[np.ndarray]:
    """Per-block boolean arrays marking coefficients of f that count as nonzero.

    Coefficient n of block j is active when |<f, dual_n>| exceeds
    rtol * ||f||_inf * ||dual_n||_inf, which is invariant under rescaling
    either f or the chain.
    """
    f = np.asarray(f)
    scale = float(np.abs(f).max()) if f.size else 0.0
    masks = []
    for blk in spec.blocks:
        c = blk.dual @ f
        dual_norms = np.abs(blk.dual).max(axis=1)
        masks.append(np.abs(c) > rtol * scale * dual_norms)
    return masks


def subdominant_abscissa(spec: SpectralData, f: np.ndarray) -> float:
    """Largest Re(eigenvalue) among non-principal blocks f projects onto.

    Returns -inf when f has no component outside the principal direction
    (then the normalized mean remainder vanishes identically).
    """
    masks = projection_mask(spec, f)
    alpha = -np.inf
    for j in range(1, len(spec.blocks)):
        if masks[j].any():
            alpha = max(alpha, spec.blocks[j].eigenvalue.real)
    return alpha


def delta_t(spec: SpectralData, B: np.ndarray, t: float) -> float:
    """Exact uniform deviation of the normalized semigroup from its limit.

    The supremum over f in the unit cube of a linear functional splits by
    sign, so the value is computed row-wise from the positive/negative
    parts of M = diag(phi)^{-1} e^{-lambda1 t} e^{tB} - 1 phitilde^T.
    """
    if t <= 0:
        raise ValueError("t must be > 0")
    B = np.asarray(B, dtype=float)
    K = B.shape[0]
    E = expm(t * (B - spec.lambda1 * np.eye(K)))
    M = E / spec.phi[:, None] - np.outer(np.ones(K), spec.phitilde)
    pos = np.clip(M, 0.0, None).sum(axis=1)
    neg = np.clip(-M, 0.0, None).sum(axis=1)
    return float(np.maximum(pos, neg).max())


# ---------------------------------------------------------------------------
# Propagator: cached eigendecomposition for O(K^2) semigroup evaluations
# ---------------------------------------------------------------------------

class Propagator:
    """Evaluate e^{-shift t} e^{tB} f cheaply and without overflow.

    Uses a cached eigendecomposition when the eigenvector basis is well
    conditioned; falls back to a fresh expm call otherwise (defective
    matrices).  The shift is applied inside the exponent, so scaled
    quantities like e^{-lambda1 t} T_t f stay O(1) even for large t.
    """

    _COND_LIMIT = 1e8

    def __init__(self, B: np.ndarray):
        self.B = np.asarray(B, dtype=float)
        self.K = self.B.shape[0]
        w, V = np.linalg.eig(self.B)
        cond = np.linalg.cond(V)
        self.diagonalizable = bool(np.isfinite(cond) and cond < self._COND_LIMIT)
        if self.diagonalizable:
            self._w = w
            self._V = V
            self._Vinv = np.linalg.inv(V)

    def apply(self, t: float, f: np.ndarray, shift: float = 0.0) -> np.ndarray:
        f = np.asarray(f)
        real_out = not np.iscomplexobj(f)
        if self.diagonalizable:
            coeff = self._Vinv @ f
            out = self._V @ (np.exp((self._w - shift) * t) * coeff)
            return out.real if real_out else out
        out = expm(t * (self.B - shift * np.eye(self.K))) @ f
        return out.real if real_out and np.iscomplexobj(out) else out

    def matrix(self, t: float, shift: float = 0.0) -> np.ndarray:
        if self.diagonalizable:
            out = (self._V * np.exp((self._w - shift) * t)) @ self._Vinv
            return out.real if np.abs(out.imag).max() < 1e-8 * max(1.0, np.abs(out.real).max()) else out
        return expm(t * (self.B - shift * np.eye(self.K)))


# ---------------------------------------------------------------------------
# Cumulant (log-Laplace) ODE
# ---------------------------------------------------------------------------

def _psi(mech: Mechanism, v: np.ndarray) -> np.ndarray:
    """The branching mechanism psi(., v), vectorized over types."""
    a = mech.a_array()
    b = mech.b_array()
    eta = mech.eta_array()
    out = a * v + b * v * v - eta @ v
    for i, atoms in enumerate(mech.jumps):
        for atom in atoms:
            y = np.asarray(atom.vector, dtype=float)
            dot = v @ y
            out[i] += atom.rate * (np.exp(-dot) - 1.0 + dot)
    return out


def solve_cumulant(mech: Mechanism, f: np.ndarray, t: float,
                   full_output: bool = False):
    """Integrate dv/ds = -psi(., v), v(0) = f >= 0, up to time t.

    Returns V_t f as a K-vector (clamped at 0); with ``full_output`` also
    a dict with the clamping-event count and solver diagnostics.  The
    value is the log-Laplace exponent: E_{delta_i} exp(-<f, X_t>) =
    exp(-V_t f(i)), which is what makes this the simulator's oracle.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (mech.K,):
        raise ValueError(f"f must have length {mech.K}")
    if np.any(f < 0):
        raise ValueError("f must be componentwise >= 0")
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0 or not np.any(f > 0):
        value = f.copy()
        return (value, {"clamp_events": 0, "n_eval": 0}) if full_output else value

    clamp_events = 0

    def rhs(_s, v):
        nonlocal clamp_events
        if np.any(v < 0):
            clamp_events += 1
            v = np.maximum(v, 0.0)
        return -_psi(mech, v)

    sol = solve_ivp(rhs, (0.0, float(t)), f, method="RK45",
                    rtol=1e-9, atol=1e-12, dense_output=False, t_eval=[float(t)])
    if not sol.success:
        last = float(sol.t[-1]) if len(sol.t) else 0.0
        raise CumulantError(
            f"cumulant ODE failed at t={last!r}: {sol.message}", last_t=last)
    value = np.maximum(sol.y[:, -1], 0.0)
    if full_output:
        return value, {"clamp_events": clamp_events, "n_eval": int(sol.nfev)}
    return value
