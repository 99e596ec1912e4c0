import math

import numpy as np
import pytest

from decoupled import datagen as D
from decoupled.errors import ContractError


# --------------------------------------------------------------------------
# three-body


def test_triangle_geometry():
    pos = D.triangle_positions()
    np.testing.assert_allclose(D.pair_distances(pos), 1.0, atol=1e-15)
    np.testing.assert_allclose(pos.mean(axis=0), 0.0, atol=1e-15)
    np.testing.assert_array_equal(pos[:, 2], 0.0)


def test_acceleration_matches_direct_sum(rng):
    pos = rng.normal(size=(3, 3))
    acc = D.gravity_acceleration(pos)
    for i in range(3):
        expected = sum((pos[j] - pos[i]) / np.linalg.norm(pos[j] - pos[i]) ** 3 for j in range(3) if j != i)
        np.testing.assert_allclose(acc[i], expected, rtol=1e-13)


def test_zero_velocity_collapse_is_symmetric():
    pos0 = D.triangle_positions()[None]
    P, V, md = D.rk4_gravity(pos0, np.zeros((1, 3, 3)), 1e-3, 500, 50)
    centroid = P[0].mean(axis=1)
    np.testing.assert_allclose(centroid, 0.0, atol=1e-9)
    d = D.pair_distances(P[0])
    np.testing.assert_allclose(d - d[:, :1], 0.0, atol=1e-12)
    assert np.all(np.diff(d[:, 0]) < 0)


def test_kepler_period_two_body():
    # two unit masses a unit apart on a circular orbit: omega^2 = G (m1 + m2) / d^3 = 2
    pos = np.array([[[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0], [1e6, 0.0, 0.0]]])
    v = math.sqrt(2.0) / 2.0
    vel = np.array([[[0.0, -v, 0.0], [0.0, v, 0.0], [0.0, 0.0, 0.0]]])
    P, _, _ = D.rk4_gravity(pos, vel, 1e-3, 10000, 10)
    rel = P[0, :, 1] - P[0, :, 0]
    angle = np.unwrap(np.arctan2(rel[:, 1], rel[:, 0]))
    t = np.arange(angle.size) * 1e-2
    t_period = np.interp(2 * np.pi, angle, t)
    analytic = 2 * np.pi / math.sqrt(2.0)
    assert abs(t_period - analytic) / analytic < 0.01


def test_clean_trajectories_conserve_momentum_and_energy():
    cfg = D.ThreeBodyConfig(n_train=40, seed=3)
    traj, info = D.simulate_three_body(cfg, [D.sample_rng(3, i) for i in range(40)])
    assert traj.shape == (40, 11, 9)
    assert info["momentum_error"].max() <= 1e-6
    assert info["energy_drift"].max() <= 1e-4
    assert info["min_distance"].min() >= cfg.min_distance


def test_strong_interactions_are_common():
    frac = D.calibrate_velocity_scale([D.ThreeBodyConfig().velocity_scale], n=100, seed=1)
    assert list(frac.values())[0] >= 0.8


def test_three_body_config_checks():
    with pytest.raises(ContractError):
        D.ThreeBodyConfig(horizon=4)
    with pytest.raises(ContractError):
        D.ThreeBodyConfig(noise_low=1.1, noise_high=1.0)
    with pytest.raises(ContractError):
        D.three_body_variant("noisy")


def test_three_body_dataset_shapes(tiny_three_body):
    ds = tiny_three_body
    assert ds.task == "trajectory" and len(ds) == 16 and ds.input_dim == 9
    for s in ds.samples:
        assert s.observations.shape == (8, 9)
        assert s.target.shape == (3, 9)
        np.testing.assert_array_equal(s.times, np.arange(8.0))


def test_unit_noise_gives_clean_history():
    cfg = D.ThreeBodyConfig(n_train=5, noise_low=1.0, noise_high=1.0, seed=2)
    ds = D.make_three_body_dataset(cfg)
    traj, _ = D.simulate_three_body(cfg, [D.sample_rng(2, i) for i in range(5)])
    for s, clean in zip(ds.samples, traj):
        np.testing.assert_array_equal(s.observations, clean[:8])
        np.testing.assert_array_equal(s.target, clean[8:])


def test_noise_is_multiplicative_and_bounded():
    cfg = D.ThreeBodyConfig(n_train=5, seed=2)
    ds = D.make_three_body_dataset(cfg)
    traj, _ = D.simulate_three_body(cfg, [D.sample_rng(2, i) for i in range(5)])
    for s, clean in zip(ds.samples, traj):
        mask = np.abs(clean[:8]) > 1e-6
        ratio = s.observations[mask] / clean[:8][mask]
        assert ratio.min() >= 0.995 and ratio.max() <= 1.005


def test_irregular_three_body_keeps_last_history_step():
    ds = D.make_three_body_dataset(D.three_body_variant("irregular", n_train=30, seed=4))
    for s in ds.samples:
        assert s.times.size == 6
        assert s.times[-1] == 7.0 and s.times[0] == 0.0
        assert np.all(np.diff(s.times) > 0)


def test_three_body_is_deterministic():
    cfg = D.ThreeBodyConfig(n_train=6, seed=9)
    assert D.make_three_body_dataset(cfg) == D.make_three_body_dataset(cfg)


# --------------------------------------------------------------------------
# springs


def test_adjacency_symmetric_zero_diagonal(rng):
    for _ in range(20):
        adj = D.sample_adjacency(rng, 5, 0.5)
        np.testing.assert_array_equal(adj, adj.T)
        np.testing.assert_array_equal(np.diag(adj), 0.0)


def test_empty_graph_moves_in_straight_lines(rng):
    cfg = D.SpringConfig(n_samples=1, seq_len=20)
    pos, vel = rng.normal(size=(1, 5, 2)), rng.normal(size=(1, 5, 2))
    traj, _, _ = D.simulate_springs(cfg, [rng], np.zeros((1, 5, 5)), (pos, vel))
    v = traj[0, :, 10:]
    np.testing.assert_allclose(v - v[0], 0.0, atol=1e-9)
    t = np.arange(20) * cfg.sim_dt * cfg.record_stride
    expected = pos[0].reshape(-1)[None] + t[:, None] * vel[0].reshape(-1)[None]
    np.testing.assert_allclose(traj[0, :, :10], expected, atol=1e-9)


def test_complete_graph_keeps_centre_of_mass(rng):
    cfg = D.SpringConfig(n_samples=1, seq_len=30)
    pos = rng.normal(size=(1, 5, 2))
    vel = rng.normal(size=(1, 5, 2))
    vel -= vel.mean(axis=1, keepdims=True)
    adj = np.ones((1, 5, 5)) - np.eye(5)
    traj, _, _ = D.simulate_springs(cfg, [rng], adj, (pos, vel))
    com = traj[0, :, :10].reshape(30, 5, 2).mean(axis=1)
    np.testing.assert_allclose(com - com[0], 0.0, atol=1e-9)


def test_single_spring_frequency():
    k = 0.1
    cfg = D.SpringConfig(n_samples=1, n_particles=2, seq_len=2000, spring_constant=k)
    adj = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    pos = np.array([[[-0.5, 0.0], [0.5, 0.0]]])
    vel = np.zeros((1, 2, 2))
    traj, _, _ = D.simulate_springs(cfg, [np.random.default_rng(0)], adj, (pos, vel))
    sep = traj[0, :, 2] - traj[0, :, 0]
    t = np.arange(sep.size) * cfg.sim_dt * cfg.record_stride
    idx = np.flatnonzero(np.sign(sep[:-1]) != np.sign(sep[1:]))
    crossings = t[idx] - sep[idx] * (t[idx + 1] - t[idx]) / (sep[idx + 1] - sep[idx])
    period = 2 * np.mean(np.diff(crossings))
    expected = math.sqrt(2 * k) / (2 * math.pi)
    assert abs(1 / period - expected) / expected < 0.01


def test_spring_energy_conserved():
    cfg = D.SpringConfig(n_samples=30, seed=1)
    _, _, info = D.simulate_springs(cfg, [D.sample_rng(1, i) for i in range(30)])
    assert info["energy_drift"].max() <= 1e-3


def test_label_balance():
    cfg = D.SpringConfig(n_samples=1000, seq_len=2, seed=0)
    ds = D.make_spring_dataset(cfg)
    frac = np.mean([s.target for s in ds.samples])
    assert abs(frac - 0.5) <= 0.02


def test_spring_dataset_layout():
    ds = D.make_spring_dataset(D.SpringConfig(n_samples=4, seed=2))
    assert ds.task == "links" and ds.input_dim == 20
    for s in ds.samples:
        assert s.observations.shape == (49, 20)
        assert s.target.shape == (10,)
        assert set(np.unique(s.target)) <= {0.0, 1.0}


@pytest.mark.parametrize("variant, T", [("regular", 49), ("irregular", 19), ("noisy", 49), ("short50", 25), ("short25", 13)])
def test_spring_variant_lengths(variant, T):
    ds = D.make_spring_dataset(D.spring_variant(variant, n_samples=5, seed=3))
    for s in ds.samples:
        assert s.times.size == T
        assert s.times[0] == 0.0
        assert np.all(np.diff(s.times) > 0)
        if variant == "irregular":
            assert s.times[-1] == 48.0


def test_crop_of_one_is_identity():
    a = D.make_spring_dataset(D.SpringConfig(n_samples=5, seed=3))
    b = D.make_spring_dataset(D.SpringConfig(n_samples=5, seed=3, crop_fraction=1.0))
    assert a == b


def test_zero_sigma_noisy_equals_clean():
    clean = D.make_spring_dataset(D.SpringConfig(n_samples=5, seed=3))
    noisy = D.make_spring_dataset(D.SpringConfig(n_samples=5, seed=3, noise_sigma=0.0))
    assert clean == noisy


def test_noise_is_additive():
    clean = D.make_spring_dataset(D.SpringConfig(n_samples=20, seed=3))
    noisy = D.make_spring_dataset(D.spring_variant("noisy", n_samples=20, seed=3))
    diff = np.concatenate([(b.observations - a.observations).ravel() for a, b in zip(clean.samples, noisy.samples)])
    assert abs(diff.std() - 0.05) < 0.005
    assert abs(diff.mean()) < 0.005


@pytest.mark.parametrize("fraction, expected", [(1.0, 49), (0.5, 25), (0.25, 13)])
def test_crop_length(fraction, expected):
    assert D.crop_length(49, fraction) == expected


def test_irregular_indices_contract(rng):
    for _ in range(50):
        idx = D.irregular_indices(rng, 49, 19)
        assert idx[0] == 0 and idx[-1] == 48 and idx.size == 19
        assert np.all(np.diff(idx) > 0)
    with pytest.raises(ContractError):
        D.irregular_indices(rng, 5, 6)


def test_spring_config_checks():
    with pytest.raises(ContractError):
        D.SpringConfig(crop_fraction=0.0)
    with pytest.raises(ContractError):
        D.SpringConfig(noise_sigma=-1.0)
    with pytest.raises(ContractError):
        D.spring_variant("short10")
