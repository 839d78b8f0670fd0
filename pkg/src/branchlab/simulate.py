"""Euler simulation of the multitype branching SDE with reproducible streams.

The state is the K-vector of type masses.  One Euler step of size h does,
per coordinate i,

    X_i += (B^T X)_i h + sqrt(2 b_i X_i h) Z
         + sum_k ( Poisson(X_i g_ik h) * y_ik - X_i g_ik h * y_ik )_i-th atom

followed by clamping negatives to zero (full truncation, as for CIR-type
square-root coefficients).  Zero is an exact trap of the scheme: every
increment vanishes on a zero row.

Reproducibility: replicas are simulated in fixed blocks of 1000, each
block driven by a counter-based Philox stream keyed (master_seed,
block_index).  A replica's randomness is therefore an injective function
of (master_seed, replica_index) alone - independent of how blocks are
scheduled over workers - and ensembles are bit-identical for any worker
count.  Draw order inside a step is fixed: one (n, K) normal array, then
one Poisson array per jump atom in (type, atom) order.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import Mechanism, mean_matrix, model_hash
from .semigroup import SpectralData

__all__ = [
    "BLOCK_SIZE",
    "SimConfig",
    "Trajectory",
    "Ensemble",
    "SimulationError",
    "simulate_path",
    "simulate_ensemble",
]

BLOCK_SIZE = 1000


class SimulationError(RuntimeError):
    """Non-finite state during integration; carries replica indices."""

    def __init__(self, message: str, replicas: tuple[int, ...]):
        super().__init__(message)
        self.replicas = replicas


@dataclass(frozen=True)
class SimConfig:
    """Run parameters for a single trajectory or an ensemble.

    ``record_times`` are snapped to the nearest step-grid point.  For
    ensembles, ``seed``/``replica_index`` are superseded by the ensemble's
    master seed and block layout.
    """

    x0: tuple[float, ...]
    T: float
    dt: float
    record_times: tuple[float, ...] = ()
    seed: int = 0
    replica_index: int = 0

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.T <= 0:
            raise ValueError("T must be > 0")
        x0 = np.asarray(self.x0, dtype=float)
        if np.any(x0 < 0) or not np.all(np.isfinite(x0)):
            raise ValueError("x0 must be finite and componentwise >= 0")
        rt = tuple(float(t) for t in self.record_times)
        if any(t < 0 or t > self.T + 1e-12 for t in rt):
            raise ValueError("record_times must lie in [0, T]")
        if list(rt) != sorted(rt):
            raise ValueError("record_times must be sorted")
        object.__setattr__(self, "record_times", rt)


@dataclass(frozen=True)
class Trajectory:
    """One simulated path sampled at the (snapped) record times."""

    times: tuple[float, ...]
    states: np.ndarray            # (n_times, K)
    w_path: np.ndarray            # (n_times,)
    extinction_time: float | None
    w_inf: float                  # What = W^phi_T, the horizon estimate of W_inf
    clamp_events: int


@dataclass(frozen=True)
class Ensemble:
    """Seeded collection of replica paths with their W records.

    ``states`` has shape (n_replicas, n_times, K); ``w`` the matching
    W^phi values; ``w_inf`` the per-replica horizon estimates W^phi_T.
    ``extinction_times`` holds nan where the path never died.
    """

    times: tuple[float, ...]
    states: np.ndarray
    w: np.ndarray
    w_inf: np.ndarray
    extinction_times: np.ndarray
    clamp_events: int
    n_replicas: int
    master_seed: int
    dt: float
    T: float
    x0: tuple[float, ...]
    lambda1: float
    phi: tuple[float, ...]
    model_digest: str
    n_steps: int = field(default=0)

    @property
    def w0(self) -> float:
        return float(np.asarray(self.x0) @ np.asarray(self.phi))

    def survival_mask(self, fraction: float = 0.01) -> np.ndarray:
        """Replicas whose horizon W estimate exceeds fraction * <phi, x0>."""
        return self.w_inf > fraction * self.w0

    def clamp_fraction(self) -> float:
        total_entries = self.n_replicas * max(self.n_steps, 1) * len(self.x0)
        return self.clamp_events / total_entries

    def metadata(self) -> dict:
        return {
            "model_hash": self.model_digest,
            "master_seed": int(self.master_seed),
            "n_replicas": int(self.n_replicas),
            "block_size": BLOCK_SIZE,
            "dt": self.dt,
            "T": self.T,
            "x0": list(self.x0),
            "record_times": list(self.times),
            "n_steps": int(self.n_steps),
            "clamp_events": int(self.clamp_events),
            "clamp_fraction": self.clamp_fraction(),
            "lambda1": self.lambda1,
        }

    def write_csv(self, path) -> None:
        """Dump all records as ``replica,time,type_1..type_K,W`` rows."""
        K = len(self.x0)
        header = "replica,time," + ",".join(f"type_{k + 1}" for k in range(K)) + ",W"
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for r in range(self.n_replicas):
                for p, t in enumerate(self.times):
                    cells = [str(r), "%.17g" % t]
                    cells += ["%.17g" % v for v in self.states[r, p]]
                    cells.append("%.17g" % self.w[r, p])
                    fh.write(",".join(cells) + "\n")

    def write_metadata(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.metadata(), fh, indent=2)
            fh.write("\n")


def _snap_records(record_times, T: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Map requested record times to step indices on the dt grid."""
    n_steps = int(np.ceil(T / dt - 1e-9))
    req = list(record_times) if record_times else [T]
    idx = np.array(sorted({min(int(round(t / dt)), n_steps) for t in req}),
                   dtype=int)
    times = np.minimum(idx * dt, T)
    return idx, times


def _simulate_block(mech: Mechanism, B: np.ndarray, lambda1: float,
                    phi: np.ndarray, x0: np.ndarray, T: float, dt: float,
                    rec_idx: np.ndarray, key: tuple[int, int], n: int):
    """Advance n replicas in lockstep; returns records and diagnostics."""
    K = mech.K
    rng = np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))
    b = mech.b_array()
    atoms = [(i, atom.rate, np.asarray(atom.vector, dtype=float))
             for i, type_atoms in enumerate(mech.jumps) for atom in type_atoms]

    n_steps = int(np.ceil(T / dt - 1e-9))
    X = np.tile(x0, (n, 1))
    out_states = np.empty((n, len(rec_idx), K))
    extinct = np.full(n, np.nan)
    if not np.any(x0 > 0):
        extinct[:] = 0.0
    clamp_events = 0
    rec_pos = {int(m): p for p, m in enumerate(rec_idx)}
    if 0 in rec_pos:
        out_states[:, rec_pos[0], :] = X

    t = 0.0
    for m in range(1, n_steps + 1):
        h = min(dt, T - t)
        drift = X @ B
        Z = rng.standard_normal((n, K))
        dX = drift * h + np.sqrt(2.0 * b * X * h) * Z
        for (i, g, y) in atoms:
            lam = X[:, i] * (g * h)
            counts = rng.poisson(lam)
            dX += (counts - lam)[:, None] * y[None, :]
        X = X + dX
        neg = X < 0
        if neg.any():
            clamp_events += int(np.count_nonzero(neg))
            X[neg] = 0.0
        t += h
        dead = ~np.any(X > 0, axis=1) & np.isnan(extinct)
        if dead.any():
            extinct[dead] = t
        if m in rec_pos:
            if not np.all(np.isfinite(X)):
                bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
                raise SimulationError(
                    f"non-finite state at t={t:.6g} (step {m}) in "
                    f"{bad.size} replica(s) of this block", tuple(int(v) for v in bad))
            out_states[:, rec_pos[m], :] = X

    w_inf = np.exp(-lambda1 * T) * (X @ phi)
    return out_states, extinct, w_inf, clamp_events, n_steps


def simulate_path(mech: Mechanism, spec: SpectralData, cfg: SimConfig) -> Trajectory:
    """One replica, deterministic in (cfg.seed, cfg.replica_index)."""
    B = mean_matrix(mech).B
    x0 = np.asarray(cfg.x0, dtype=float)
    rec_idx, times = _snap_records(cfg.record_times, cfg.T, cfg.dt)
    states, extinct, w_inf, clamps, _steps = _simulate_block(
        mech, B, spec.lambda1, spec.phi, x0, cfg.T, cfg.dt, rec_idx,
        (cfg.seed, cfg.replica_index), 1)
    w_path = np.exp(-spec.lambda1 * times) * (states[0] @ spec.phi)
    ext = None if np.isnan(extinct[0]) else float(extinct[0])
    return Trajectory(times=tuple(float(t) for t in times), states=states[0],
                      w_path=w_path, extinction_time=ext,
                      w_inf=float(w_inf[0]), clamp_events=clamps)


def _block_payload(args):
    (mech, B, lambda1, phi, x0, T, dt, rec_idx, master_seed, block, n) = args
    return _simulate_block(mech, B, lambda1, phi, x0, T, dt, rec_idx,
                           (master_seed, block), n)


def simulate_ensemble(mech: Mechanism, spec: SpectralData, cfg: SimConfig,
                      n_replicas: int, master_seed: int,
                      workers: int | None = None) -> Ensemble:
    """n independent replicas; bit-identical for any worker count.

    ``workers`` defaults to the BRANCHLAB_WORKERS environment variable,
    else single-process.  Results are reduced in block order regardless of
    completion order.
    """
    if n_replicas < 1:
        raise ValueError("n_replicas must be >= 1")
    if workers is None:
        workers = int(os.environ.get("BRANCHLAB_WORKERS", "1"))
    B = mean_matrix(mech).B
    x0 = np.asarray(cfg.x0, dtype=float)
    rec_idx, times = _snap_records(cfg.record_times, cfg.T, cfg.dt)

    blocks = []
    start = 0
    bi = 0
    while start < n_replicas:
        n = min(BLOCK_SIZE, n_replicas - start)
        blocks.append((mech, B, spec.lambda1, spec.phi, x0, cfg.T, cfg.dt,
                       rec_idx, int(master_seed), bi, n))
        start += n
        bi += 1

    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_block_payload, blocks))
    else:
        results = [_block_payload(b) for b in blocks]

    states = np.concatenate([r[0] for r in results], axis=0)
    extinct = np.concatenate([r[1] for r in results])
    w_inf = np.concatenate([r[2] for r in results])
    clamps = int(sum(r[3] for r in results))
    n_steps = results[0][4]
    w = np.exp(-spec.lambda1 * times)[None, :] * (states @ spec.phi)

    return Ensemble(
        times=tuple(float(t) for t in times), states=states, w=w, w_inf=w_inf,
        extinction_times=extinct, clamp_events=clamps, n_replicas=n_replicas,
        master_seed=int(master_seed), dt=cfg.dt, T=cfg.T,
        x0=tuple(float(v) for v in x0), lambda1=spec.lambda1,
        phi=tuple(float(v) for v in spec.phi), model_digest=model_hash(mech),
        n_steps=n_steps)
