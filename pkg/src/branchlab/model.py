"""Finite-type branching mechanisms and their moment operators.

A mechanism on the type space {1, ..., K} is parameterized by

    psi(i, u) = a_i u_i + b_i u_i^2 - u . eta_i
                + sum_k g_ik * (exp(-u . y_ik) - 1 + u . y_ik),

where a_i is a linear growth/killing rate, b_i >= 0 a Feller (quadratic)
coefficient, eta a nonnegative cross-type kernel with zero diagonal, and
the jump measure of type i is a finite list of atoms with rate g_ik and
mass vector y_ik in [0, inf)^K.  The jump term is fully compensated, so
the mean evolution is governed solely by the Metzler matrix

    B = -diag(a) + eta,

and the second-moment structure by the quadratic form

    vartheta[f, g](i) = 2 b_i f_i g_i + sum_k g_ik (f . y_ik)(g . y_ik).

This module owns the data types, structural validation, the config file
format, and nothing spectral (see :mod:`branchlab.semigroup`).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

__all__ = [
    "JumpAtom",
    "Mechanism",
    "MomentOperators",
    "ValidationReport",
    "validate",
    "mean_matrix",
    "vartheta",
    "is_irreducible",
    "load_model",
    "dump_model",
    "model_hash",
]

# Absolute tolerance for the cross-mean domination check; decimal config
# input rounds to binary floats, so exact comparison would be too strict.
DOMINATION_ATOL = 1e-12


@dataclass(frozen=True)
class JumpAtom:
    """One atom of a type's jump measure: rate g >= 0, mass vector y."""

    rate: float
    vector: tuple[float, ...]


@dataclass(frozen=True)
class Mechanism:
    """Immutable finite-type branching mechanism.

    Attributes
    ----------
    K : int
        Number of types.
    a : tuple of float
        Linear coefficients a_i (positive = killing, negative = growth).
    b : tuple of float
        Quadratic coefficients b_i >= 0.
    eta : tuple of tuple of float
        K x K cross-type mean kernel, zero diagonal.
    jumps : tuple of tuple of JumpAtom
        Per-type finite atom lists; jumps[i] belongs to type i (0-based).
    """

    K: int
    a: tuple[float, ...]
    b: tuple[float, ...]
    eta: tuple[tuple[float, ...], ...]
    jumps: tuple[tuple[JumpAtom, ...], ...] = field(default=())

    def __post_init__(self) -> None:
        if len(self.a) != self.K or len(self.b) != self.K:
            raise ValueError("a and b must have length K")
        if len(self.eta) != self.K or any(len(row) != self.K for row in self.eta):
            raise ValueError("eta must be K x K")
        if self.jumps == ():
            object.__setattr__(self, "jumps", tuple(() for _ in range(self.K)))
        if len(self.jumps) != self.K:
            raise ValueError("jumps must have one (possibly empty) list per type")
        for atoms in self.jumps:
            for atom in atoms:
                if len(atom.vector) != self.K:
                    raise ValueError("jump vector length must equal K")

    # Convenience array views (fresh copies; the dataclass stays hashless
    # and immutable).
    def a_array(self) -> np.ndarray:
        return np.asarray(self.a, dtype=float)

    def b_array(self) -> np.ndarray:
        return np.asarray(self.b, dtype=float)

    def eta_array(self) -> np.ndarray:
        return np.asarray(self.eta, dtype=float)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of structural and soft checks on a mechanism.

    ``hard_errors`` non-empty means the mechanism is malformed and no
    further analysis is defined.  Soft flags leave the mechanism usable
    for simulation but make some analyses refuse later.
    """

    hard_errors: tuple[str, ...]
    irreducible: bool
    lambda1: float
    supercritical: bool
    min_b_positive: bool
    fourth_moments_finite: bool
    notes: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.hard_errors

    def lines(self) -> list[str]:
        out = []
        status = "PASS" if self.ok else "FAIL"
        out.append(f"structure: {status}")
        for err in self.hard_errors:
            out.append(f"  error: {err}")
        out.append(f"irreducible: {self.irreducible}")
        out.append(f"lambda1: {self.lambda1!r}")
        out.append(f"supercritical (lambda1 > 0): {self.supercritical}")
        out.append(f"min b > 0 (extinction-probability sufficient condition only): "
                   f"{self.min_b_positive}")
        out.append(f"fourth moments finite: {self.fourth_moments_finite}")
        for note in self.notes:
            out.append(f"note: {note}")
        return out


@dataclass(frozen=True)
class MomentOperators:
    """Mean generator B plus the quadratic-form data of a mechanism."""

    B: np.ndarray
    mech: Mechanism

    def vartheta(self, f: np.ndarray, g: np.ndarray | None = None) -> np.ndarray:
        return vartheta(self.mech, f, g)


def mean_matrix(mech: Mechanism) -> MomentOperators:
    """Build the Metzler mean generator B = -diag(a) + eta.

    The compensated jump term has zero mean gradient at the origin, so
    the atoms do not enter B at all; they only constrain eta through the
    domination check in :func:`validate`.
    """
    B = mech.eta_array()
    np.fill_diagonal(B, -mech.a_array())
    B.setflags(write=False)
    return MomentOperators(B=B, mech=mech)


def vartheta(mech: Mechanism, f: np.ndarray, g: np.ndarray | None = None) -> np.ndarray:
    """Evaluate the second-moment form vartheta[f, g] componentwise.

    Bilinear and symmetric; complex vectors are accepted (no implicit
    conjugation, pass conj(f) explicitly where a sesquilinear pairing is
    wanted).  ``g`` defaults to ``f``.
    """
    f = np.asarray(f)
    g = f if g is None else np.asarray(g)
    if f.shape != (mech.K,) or g.shape != (mech.K,):
        raise ValueError(f"expected vectors of length {mech.K}")
    out = 2.0 * mech.b_array() * f * g
    if out.dtype == np.dtype(float) and (np.iscomplexobj(f) or np.iscomplexobj(g)):
        out = out.astype(complex)
    for i, atoms in enumerate(mech.jumps):
        for atom in atoms:
            y = np.asarray(atom.vector, dtype=float)
            out[i] += atom.rate * (f @ y) * (g @ y)
    return out


def _structural_errors(mech: Mechanism) -> list[str]:
    errs = []
    a = mech.a_array()
    b = mech.b_array()
    eta = mech.eta_array()
    if not np.all(np.isfinite(a)) or not np.all(np.isfinite(b)) or not np.all(np.isfinite(eta)):
        errs.append("non-finite coefficient")
    if np.any(b < 0):
        errs.append("negative b")
    if np.any(np.diag(eta) != 0):
        errs.append("nonzero diagonal in eta")
    off = eta - np.diag(np.diag(eta))
    if np.any(off < 0):
        errs.append("negative off-diagonal in eta")
    for i, atoms in enumerate(mech.jumps):
        for k, atom in enumerate(atoms):
            y = np.asarray(atom.vector, dtype=float)
            if atom.rate < 0:
                errs.append(f"negative jump rate at type {i + 1}, atom {k + 1}")
            if np.any(y < 0) or not np.any(y > 0):
                errs.append(f"jump vector at type {i + 1}, atom {k + 1} must be >= 0 "
                            "with at least one positive coordinate")
    # Cross-mean domination: the mean mass a type-i jump deposits on type
    # j != i may not exceed eta_ij (otherwise B would not dominate the
    # jump means and the compensated form is inadmissible).
    for i, atoms in enumerate(mech.jumps):
        if not atoms:
            continue
        cross = np.zeros(mech.K)
        for atom in atoms:
            cross += atom.rate * np.asarray(atom.vector, dtype=float)
        for j in range(mech.K):
            if j != i and cross[j] > eta[i, j] + DOMINATION_ATOL:
                errs.append(
                    f"cross-mean domination violated at ({i + 1},{j + 1}): "
                    f"{cross[j]!r} > eta={eta[i, j]!r}")
    return errs


def is_irreducible(B: np.ndarray) -> bool:
    """Strong connectivity of the directed graph of positive off-diagonals."""
    K = B.shape[0]
    if K == 1:
        return True
    pattern = (B > 0).astype(int)
    np.fill_diagonal(pattern, 0)
    n_comp, _ = connected_components(csr_matrix(pattern), directed=True,
                                     connection="strong")
    return n_comp == 1


def validate(mech: Mechanism) -> ValidationReport:
    """Run every structural invariant plus the soft analysis flags."""
    errs = _structural_errors(mech)
    if errs:
        return ValidationReport(
            hard_errors=tuple(errs), irreducible=False, lambda1=float("nan"),
            supercritical=False, min_b_positive=False, fourth_moments_finite=True)

    B = mean_matrix(mech).B
    irreducible = is_irreducible(B)
    lam1 = float(np.max(np.linalg.eigvals(B).real))
    min_b_positive = bool(np.min(mech.b_array()) > 0)
    notes = []
    if not irreducible:
        notes.append("mean matrix reducible: spectral analysis will refuse")
    if not min_b_positive:
        notes.append("min b = 0: critical-regime MC guard raised "
                     "(extinction-probability sufficient condition not established)")
    return ValidationReport(
        hard_errors=(),
        irreducible=irreducible,
        lambda1=lam1,
        supercritical=lam1 > 0,
        min_b_positive=min_b_positive,
        fourth_moments_finite=True,  # finite atom lists have all moments
        notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# Config file format (JSON): {"types": K, "a": [...], "b": [...],
# "eta": [[...]], "jumps": [{"type": 1-based, "rate": g, "vector": [...]}]}
# ---------------------------------------------------------------------------

_TOP_KEYS = {"types", "a", "b", "eta", "jumps"}
_JUMP_KEYS = {"type", "rate", "vector"}


def _mech_from_dict(cfg: dict) -> Mechanism:
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise ValueError(f"unknown model field(s): {sorted(unknown)}")
    missing = {"types", "a", "b", "eta"} - set(cfg)
    if missing:
        raise ValueError(f"missing model field(s): {sorted(missing)}")
    K = int(cfg["types"])
    jumps: list[list[JumpAtom]] = [[] for _ in range(K)]
    for entry in cfg.get("jumps", []):
        unknown = set(entry) - _JUMP_KEYS
        if unknown:
            raise ValueError(f"unknown jump field(s): {sorted(unknown)}")
        idx = int(entry["type"]) - 1
        if not 0 <= idx < K:
            raise ValueError(f"jump type index {entry['type']} out of range 1..{K}")
        jumps[idx].append(JumpAtom(rate=float(entry["rate"]),
                                   vector=tuple(float(v) for v in entry["vector"])))
    return Mechanism(
        K=K,
        a=tuple(float(v) for v in cfg["a"]),
        b=tuple(float(v) for v in cfg["b"]),
        eta=tuple(tuple(float(v) for v in row) for row in cfg["eta"]),
        jumps=tuple(tuple(atoms) for atoms in jumps),
    )


def load_model(path) -> Mechanism:
    """Read a mechanism from a JSON config file; unknown fields are rejected."""
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("model config must be a JSON object")
    return _mech_from_dict(cfg)


def _mech_to_dict(mech: Mechanism) -> dict:
    jumps = []
    for i, atoms in enumerate(mech.jumps):
        for atom in atoms:
            jumps.append({"type": i + 1, "rate": atom.rate,
                          "vector": list(atom.vector)})
    return {"types": mech.K, "a": list(mech.a), "b": list(mech.b),
            "eta": [list(row) for row in mech.eta], "jumps": jumps}


def dump_model(mech: Mechanism, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_mech_to_dict(mech), fh, indent=2, sort_keys=True)
        fh.write("\n")


def model_hash(mech: Mechanism) -> str:
    """Stable sha256 of the canonical serialization (repr-exact floats)."""
    canonical = json.dumps(_mech_to_dict(mech), sort_keys=True,
                           separators=(",", ":"), default=float)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
