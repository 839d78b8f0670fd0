"""Euler-scheme simulator: determinism, reproducibility, moment sanity.

Replica streams are keyed by (master_seed, block_index), so a single
path, an n = 1 ensemble, and any worker split of a larger ensemble must
all reproduce byte-identical states.  The Monte Carlo checks compare
against first/second moments that the deterministic side computes
exactly; sample sizes are small, tolerances generous, seeds frozen.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from branchlab.moments import martingale_variance
from branchlab.simulate import (BLOCK_SIZE, SimConfig, simulate_ensemble,
                                simulate_path)


def test_config_validation():
    good = dict(x0=(1.0,), T=1.0, dt=1e-3)
    SimConfig(**good)
    SimConfig(x0=(0.0,), T=1.0, dt=1e-3)      # extinct start is legal
    with pytest.raises(ValueError, match="dt"):
        SimConfig(**{**good, "dt": 0.0})
    with pytest.raises(ValueError, match="T"):
        SimConfig(**{**good, "T": -1.0})
    with pytest.raises(ValueError, match="x0"):
        SimConfig(**{**good, "x0": (-0.5,)})
    with pytest.raises(ValueError, match="record_times"):
        SimConfig(**good, record_times=(2.0,))
    with pytest.raises(ValueError, match="sorted"):
        SimConfig(**good, record_times=(0.8, 0.2))


def test_zero_start_is_absorbing(feller):
    cfg = SimConfig(x0=(0.0,), T=1.0, dt=1e-3, record_times=(0.5, 1.0))
    tr = simulate_path(feller.mech, feller.spec, cfg)
    assert tr.states.max() == 0.0
    assert tr.extinction_time == 0.0
    assert tr.w_inf == 0.0
    assert tr.clamp_events == 0


def test_path_determinism_and_replica_distinctness(feller):
    cfg = SimConfig(x0=(1.0,), T=1.0, dt=1e-3, record_times=(0.5, 1.0),
                    seed=77, replica_index=0)
    a = simulate_path(feller.mech, feller.spec, cfg)
    b = simulate_path(feller.mech, feller.spec, cfg)
    assert np.array_equal(a.states, b.states)
    assert a.w_inf == b.w_inf

    other = SimConfig(x0=(1.0,), T=1.0, dt=1e-3, record_times=(0.5, 1.0),
                      seed=77, replica_index=1)
    c = simulate_path(feller.mech, feller.spec, other)
    assert not np.array_equal(a.states, c.states)


def test_single_path_matches_singleton_ensemble(feller):
    cfg = SimConfig(x0=(1.0,), T=1.0, dt=1e-3, record_times=(0.5, 1.0),
                    seed=77)
    tr = simulate_path(feller.mech, feller.spec, cfg)
    ens = simulate_ensemble(feller.mech, feller.spec, cfg, 1, 77)
    assert np.array_equal(tr.states, ens.states[0])
    assert tr.w_inf == ens.w_inf[0]
    assert_allclose(tr.w_path, ens.w[0])


def test_worker_count_does_not_change_results(symmetric_pair):
    # 1500 replicas span two blocks, so a two-worker pool actually splits.
    cfg = SimConfig(x0=(1.0, 1.0), T=2.0, dt=1e-3, record_times=(1.0, 2.0))
    a = simulate_ensemble(symmetric_pair.mech, symmetric_pair.spec, cfg,
                          1500, 99, workers=1)
    b = simulate_ensemble(symmetric_pair.mech, symmetric_pair.spec, cfg,
                          1500, 99, workers=2)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.w_inf, b.w_inf)
    assert np.array_equal(a.extinction_times, b.extinction_times,
                          equal_nan=True)
    assert a.clamp_events == b.clamp_events


def test_diffusion_moments(feller):
    cfg = SimConfig(x0=(1.0,), T=3.0, dt=1e-3, record_times=(1.0, 3.0))
    ens = simulate_ensemble(feller.mech, feller.spec, cfg, 3000, 21)
    final = ens.states[:, -1, 0]
    z = (final.mean() - np.exp(3.0)) / (final.std(ddof=1) / np.sqrt(3000))
    assert abs(z) < 3.0
    var_w = ens.w_inf.var(ddof=1)
    mv = martingale_variance(feller.mech, feller.spec, 3.0)[0]
    assert var_w == pytest.approx(mv, rel=0.08)
    assert ens.clamp_fraction() < 1e-3


def test_jump_moments_scale_with_initial_mass(pure_jump):
    # Two units of initial mass double the martingale variance.
    cfg = SimConfig(x0=(2.0,), T=3.0, dt=1e-3, record_times=(3.0,))
    ens = simulate_ensemble(pure_jump.mech, pure_jump.spec, cfg, 3000, 22)
    final = ens.states[:, -1, 0]
    z = (final.mean() - 2.0 * np.exp(3.0)) / (final.std(ddof=1) / np.sqrt(3000))
    assert abs(z) < 3.0
    var_w = ens.w_inf.var(ddof=1)
    mv = 2.0 * martingale_variance(pure_jump.mech, pure_jump.spec, 3.0)[0]
    assert var_w == pytest.approx(mv, rel=0.08)


def test_ensemble_bookkeeping(symmetric_pair):
    cfg = SimConfig(x0=(1.0, 1.0), T=1.0, dt=1e-2, record_times=(0.5, 1.0))
    ens = simulate_ensemble(symmetric_pair.mech, symmetric_pair.spec, cfg, 3, 5)
    assert ens.w0 == pytest.approx(2.0)
    assert ens.n_steps == 100
    mask = ens.survival_mask()
    assert mask.shape == (3,) and mask.dtype == bool
    md = ens.metadata()
    assert md["n_replicas"] == 3
    assert md["master_seed"] == 5
    assert md["block_size"] == BLOCK_SIZE
    assert md["model_hash"]
    assert md["record_times"] == [0.5, 1.0]
    assert 0.0 <= md["clamp_fraction"] <= 1.0


def test_write_csv_round_trip(symmetric_pair, tmp_path):
    cfg = SimConfig(x0=(1.0, 1.0), T=1.0, dt=1e-2, record_times=(0.5, 1.0))
    ens = simulate_ensemble(symmetric_pair.mech, symmetric_pair.spec, cfg, 3, 5)
    out = tmp_path / "paths.csv"
    ens.write_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "replica,time,type_1,type_2,W"
    assert len(lines) == 1 + 3 * 2
    row = lines[1].split(",")
    assert row[0] == "0"
    # %.17g is lossless for doubles.
    assert np.array_equal([float(v) for v in row[2:4]], ens.states[0, 0])
    assert float(row[4]) == ens.w[0, 0]


def test_ensemble_rejects_empty(feller):
    cfg = SimConfig(x0=(1.0,), T=1.0, dt=1e-2)
    with pytest.raises(ValueError, match="n_replicas"):
        simulate_ensemble(feller.mech, feller.spec, cfg, 0, 1)
