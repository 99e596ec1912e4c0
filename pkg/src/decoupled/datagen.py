"""Synthetic benchmarks: gravitational three-body trajectories and spring link prediction.

Each sample draws its initial condition from its own generator seeded by
``(seed, index)``, so any subset of a dataset can be regenerated on its own.
Simulation itself is vectorised across samples.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)


@dataclass
class Sample:
    times: np.ndarray  # (T,)
    observations: np.ndarray  # (T, k)
    target: np.ndarray  # (horizon, k) or (pairs,)

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.observations, other.observations)
            and np.array_equal(self.target, other.target)
        )


@dataclass
class Dataset:
    samples: list
    task: str  # "trajectory" | "links"
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.task == other.task
            and self.metadata == other.metadata
            and self.samples == other.samples
        )

    @property
    def input_dim(self):
        return self.samples[0].observations.shape[1] if self.samples else 0

    @property
    def target_shape(self):
        return self.samples[0].target.shape if self.samples else ()

    def subset(self, indices):
        return Dataset([self.samples[i] for i in indices], self.task, dict(self.metadata))

    def time_grid(self):
        """Sorted union of every sample's timestamps."""
        return np.unique(np.concatenate([s.times for s in self.samples]))


def sample_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def irregular_indices(rng, total, keep):
    """``keep`` sorted indices out of ``range(total)``; first and last always kept."""
    if keep > total or keep < 2:
        raise ContractError(f"cannot keep {keep} of {total} timestamps")
    inner = rng.choice(np.arange(1, total - 1), size=keep - 2, replace=False)
    return np.sort(np.concatenate([[0], inner, [total - 1]]))


# --------------------------------------------------------------------------
# three body


@dataclass
class ThreeBodyConfig:
    n_train: int = 200
    n_val: int = 0
    n_test: int = 0
    history_len: int = 8
    horizon: int = 3
    irregular: bool = False
    noise_low: float = 0.995
    noise_high: float = 1.005
    velocity_scale: float = 0.5
    internal_dt: float = 1e-3
    record_dt: float = 1.0
    min_distance: float = 1e-3
    max_energy_drift: float = 1e-4
    accuracy: float = 0.005
    max_attempts: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.horizon != 3:
            raise ContractError("the trajectory task predicts 3 future locations")
        if self.irregular and self.history_len not in (6, 8):
            raise ContractError("history_len must be 6 or 8")
        if not 0 < self.noise_low <= self.noise_high < 2:
            raise ContractError("noise interval must lie inside (0, 2)")

    @property
    def observed_len(self):
        return 6 if self.irregular else self.history_len

    @property
    def n_samples(self):
        return self.n_train + self.n_val + self.n_test


def triangle_positions():
    """Equilateral triangle of unit side in the z=0 plane, centred at the origin."""
    r = 1.0 / math.sqrt(3.0)
    ang = np.array([math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3])
    return np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(3)], axis=1)


def gravity_acceleration(pos):
    """Pairwise Newtonian attraction with G = 1 and unit masses; pos is (..., N, 3)."""
    diff = pos[..., None, :, :] - pos[..., :, None, :]  # r_j - r_i
    dist2 = np.einsum("...ijk,...ijk->...ij", diff, diff)
    n = pos.shape[-2]
    dist2[..., np.arange(n), np.arange(n)] = np.inf
    return np.einsum("...ijk,...ij->...ik", diff, dist2**-1.5)


def gravity_energy(pos, vel):
    kinetic = 0.5 * np.sum(vel * vel, axis=(-1, -2))
    potential = -np.sum(1.0 / pair_distances(pos), axis=-1)
    return kinetic + potential


def pair_distances(pos):
    n = pos.shape[-2]
    iu = np.triu_indices(n, 1)
    diff = pos[..., iu[0], :] - pos[..., iu[1], :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


@numba.njit(cache=True)
def _accel(pos, out):
    for i in range(3):
        out[i, 0] = 0.0
        out[i, 1] = 0.0
        out[i, 2] = 0.0
    for i in range(3):
        for j in range(i + 1, 3):
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            r2 = dx * dx + dy * dy + dz * dz
            inv3 = 1.0 / (r2 * np.sqrt(r2))
            out[i, 0] += dx * inv3
            out[i, 1] += dy * inv3
            out[i, 2] += dz * inv3
            out[j, 0] -= dx * inv3
            out[j, 1] -= dy * inv3
            out[j, 2] -= dz * inv3


@numba.njit(cache=True)
def _min_pair(pos):
    best = np.inf
    for i in range(3):
        for j in range(i + 1, 3):
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            r = np.sqrt(dx * dx + dy * dy + dz * dz)
            if r < best:
                best = r
    return best


@numba.njit(cache=True)
def _rk4_step(pos, vel, h, k1v, k2v, k3v, k4v, tmp):
    _accel(pos, k1v)
    tmp[:] = pos + 0.5 * h * vel
    _accel(tmp, k2v)
    k2x = vel + 0.5 * h * k1v
    tmp[:] = pos + 0.5 * h * k2x
    _accel(tmp, k3v)
    k3x = vel + 0.5 * h * k2v
    tmp[:] = pos + h * k3x
    _accel(tmp, k4v)
    k4x = vel + h * k3v
    pos += h / 6.0 * (vel + 2.0 * k2x + 2.0 * k3x + k4x)
    vel += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)


@numba.njit(cache=True)
def _simulate_one(pos0, vel0, dt, n_steps, record_every, accuracy, min_allowed):
    n_rec = n_steps // record_every + 1
    rec_p = np.zeros((n_rec, 3, 3))
    rec_v = np.zeros((n_rec, 3, 3))
    pos = pos0.copy()
    vel = vel0.copy()
    k1v = np.zeros((3, 3))
    k2v = np.zeros((3, 3))
    k3v = np.zeros((3, 3))
    k4v = np.zeros((3, 3))
    tmp = np.zeros((3, 3))
    rec_p[0] = pos
    rec_v[0] = vel
    min_dist = _min_pair(pos)
    for step in range(1, n_steps + 1):
        r = _min_pair(pos)
        n_sub = max(1, int(np.ceil(dt / (accuracy * r**1.5))))
        h = dt / n_sub
        for _ in range(n_sub):
            _rk4_step(pos, vel, h, k1v, k2v, k3v, k4v, tmp)
            r = _min_pair(pos)
            if r < min_dist:
                min_dist = r
            if min_dist < min_allowed:
                rec_p[step // record_every + (step % record_every > 0):] = np.nan
                rec_v[step // record_every + (step % record_every > 0):] = np.nan
                return rec_p, rec_v, min_dist
        if step % record_every == 0:
            rec_p[step // record_every] = pos
            rec_v[step // record_every] = vel
    return rec_p, rec_v, min_dist


def rk4_gravity(pos, vel, dt, n_steps, record_every, accuracy=0.005, min_allowed=0.0):
    """Integrate a batch (S, 3, 3) of three-body systems with classical RK4.

    The base step is ``dt``; a step is split into equal sub-steps when the
    closest pair's free-fall time ``r**1.5`` is shorter than ``dt / accuracy``.
    Returns positions and velocities every ``record_every`` base steps plus
    the minimum pair distance seen. A sample stops early once a pair comes
    closer than ``min_allowed``; its remaining records are NaN.
    """
    pos = np.asarray(pos, dtype=np.float64)
    vel = np.asarray(vel, dtype=np.float64)
    S = pos.shape[0]
    n_rec = n_steps // record_every + 1
    P = np.zeros((S, n_rec, 3, 3))
    V = np.zeros((S, n_rec, 3, 3))
    md = np.zeros(S)
    for i in range(S):
        P[i], V[i], md[i] = _simulate_one(pos[i], vel[i], dt, n_steps, record_every, accuracy, min_allowed)
    return P, V, md


def simulate_three_body(config, rngs, initial_velocities=None):
    """Clean trajectories, one per generator in ``rngs``: array (S, T_total, 9).

    Returns ``(trajectories, info)``; ``info`` carries per-sample minimum pair
    distances, relative energy drift and how many draws were rejected.
    """
    S = len(rngs)
    T_total = config.history_len + config.horizon
    per_record = int(round(config.record_dt / config.internal_dt))
    n_steps = per_record * (T_total - 1)
    base = triangle_positions()
    out = np.zeros((S, T_total, 9))
    min_d = np.zeros(S)
    drift = np.zeros(S)
    momentum_err = np.zeros(S)
    rejected = 0
    pending = np.arange(S)
    for _ in range(config.max_attempts):
        if pending.size == 0:
            break
        if initial_velocities is not None:
            vel0 = np.asarray(initial_velocities, dtype=np.float64)[pending].copy()
        else:
            vel0 = np.stack([rngs[i].normal(0.0, config.velocity_scale, size=(3, 3)) for i in pending])
        pos0 = np.broadcast_to(base, vel0.shape).copy()
        e0 = gravity_energy(pos0, vel0)
        p, v, md = rk4_gravity(
            pos0, vel0, config.internal_dt, n_steps, per_record, config.accuracy, config.min_distance
        )
        e = gravity_energy(p, v)
        rel = np.max(np.abs(e - e0[:, None]), axis=1) / np.abs(e0)
        mom = np.max(np.abs(v.sum(axis=2) - vel0.sum(axis=1)[:, None, :]), axis=(1, 2))
        ok = np.isfinite(rel) & (md >= config.min_distance) & (rel <= config.max_energy_drift)
        if initial_velocities is not None:
            ok[:] = True
        good = pending[ok]
        out[good] = p[ok].reshape(ok.sum(), T_total, 9)
        min_d[good] = md[ok]
        drift[good] = rel[ok]
        momentum_err[good] = mom[ok]
        rejected += int((~ok).sum())
        pending = pending[~ok]
    if pending.size:
        raise RuntimeError(f"{pending.size} three-body samples never met the accuracy limits")
    if rejected:
        log.info("three-body: resampled %d close-encounter draws", rejected)
    return out, {"min_distance": min_d, "energy_drift": drift, "momentum_error": momentum_err, "rejected": rejected}


def make_three_body_dataset(config):
    S = config.n_samples
    rngs = [sample_rng(config.seed, i) for i in range(S)]
    traj, info = simulate_three_body(config, rngs)
    H = config.history_len
    samples = []
    for i in range(S):
        rng = rngs[i]
        history = traj[i, :H]
        noise = rng.uniform(config.noise_low, config.noise_high, size=history.shape)
        observed = history * noise
        times = np.arange(H, dtype=np.float64) * config.record_dt
        if config.irregular:
            keep = irregular_indices(rng, H, config.observed_len)
            times, observed = times[keep], observed[keep]
        samples.append(Sample(times, observed, traj[i, H:].copy()))
    meta = {
        "generator": "three-body",
        "config": asdict(config),
        "seed": config.seed,
        "splits": [config.n_train, config.n_val, config.n_test],
        "rejected": info["rejected"],
    }
    return Dataset(samples, "trajectory", meta)


def calibrate_velocity_scale(scales, n=200, threshold=0.5, seed=0, **overrides):
    """Fraction of samples whose minimum pair distance drops below ``threshold``."""
    result = {}
    for s in scales:
        cfg = ThreeBodyConfig(n_train=n, velocity_scale=s, seed=seed, **overrides)
        _, info = simulate_three_body(cfg, [sample_rng(seed, i) for i in range(n)])
        result[s] = float(np.mean(info["min_distance"] < threshold))
    return result


# --------------------------------------------------------------------------
# springs


@dataclass
class SpringConfig:
    n_samples: int = 200
    n_particles: int = 5
    p_edge: float = 0.5
    seq_len: int = 49
    irregular: bool = False
    irregular_len: int = 19
    spring_constant: float = 0.1
    sim_dt: float = 1e-3
    record_stride: int = 100
    init_scale: float = 0.5
    noise_sigma: float = 0.0
    crop_fraction: float = 1.0
    max_attempts: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ContractError("crop_fraction must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be nonnegative")

    @property
    def input_dim(self):
        return 4 * self.n_particles

    @property
    def n_pairs(self):
        return self.n_particles * (self.n_particles - 1) // 2


def sample_adjacency(rng, n, p):
    upper = rng.random((n, n)) < p
    adj = np.triu(upper, 1).astype(np.float64)
    return adj + adj.T


def spring_force(pos, adj, k):
    """F_i = -k sum_j adj_ij (r_i - r_j); pos (S, N, 2), adj (S, N, N)."""
    degree = adj.sum(axis=-1, keepdims=True)
    return -k * (degree * pos - adj @ pos)


def spring_energy(pos, vel, adj, k):
    kinetic = 0.5 * np.sum(vel * vel, axis=(-1, -2))
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    return kinetic + 0.25 * k * np.sum(adj * d2, axis=(-1, -2))


def leapfrog_springs(pos, vel, adj, k, dt, n_records, stride):
    """Kick-drift-kick leapfrog; records (S, n_records, N, 2) positions and velocities."""
    ps, vs = [pos.copy()], [vel.copy()]
    acc = spring_force(pos, adj, k)
    for _ in range(n_records - 1):
        for _ in range(stride):
            vel = vel + 0.5 * dt * acc
            pos = pos + dt * vel
            acc = spring_force(pos, adj, k)
            vel = vel + 0.5 * dt * acc
        ps.append(pos.copy())
        vs.append(vel.copy())
    return np.stack(ps, axis=1), np.stack(vs, axis=1)


def simulate_springs(config, rngs, adjacency=None, initial=None):
    """Clean spring trajectories: ``(trajectories (S, T, 4N), adjacency (S, N, N), info)``.

    Observation layout per timestamp: all positions (x0, y0, x1, y1, ...)
    followed by all velocities in the same order.
    """
    S, N = len(rngs), config.n_particles
    T = config.seq_len
    if adjacency is None:
        adj = np.stack([sample_adjacency(rng, N, config.p_edge) for rng in rngs])
    else:
        adj = np.asarray(adjacency, dtype=np.float64).reshape(S, N, N)
    out = np.zeros((S, T, 4 * N))
    drift = np.zeros(S)
    rejected = 0
    pending = np.arange(S)
    for _ in range(config.max_attempts):
        if pending.size == 0:
            break
        if initial is not None:
            pos0 = np.asarray(initial[0], dtype=np.float64)[pending].copy()
            vel0 = np.asarray(initial[1], dtype=np.float64)[pending].copy()
        else:
            pos0 = np.stack([rngs[i].normal(0.0, config.init_scale, size=(N, 2)) for i in pending])
            vel0 = np.stack([rngs[i].normal(0.0, config.init_scale, size=(N, 2)) for i in pending])
        p, v = leapfrog_springs(pos0, vel0, adj[pending], config.spring_constant, config.sim_dt, T, config.record_stride)
        e = spring_energy(p, v, adj[pending][:, None], config.spring_constant)
        e0 = e[:, :1]
        rel = np.max(np.abs(e - e0), axis=1) / np.maximum(np.abs(e0[:, 0]), 1e-12)
        ok = np.isfinite(p).all(axis=(1, 2, 3)) & np.isfinite(v).all(axis=(1, 2, 3))
        good = pending[ok]
        out[good] = np.concatenate([p[ok].reshape(ok.sum(), T, 2 * N), v[ok].reshape(ok.sum(), T, 2 * N)], axis=2)
        drift[good] = rel[ok]
        rejected += int((~ok).sum())
        pending = pending[~ok]
    if pending.size:
        raise RuntimeError(f"{pending.size} spring samples overflowed")
    return out, adj, {"energy_drift": drift, "rejected": rejected}


def pair_labels(adj):
    iu = np.triu_indices(adj.shape[-1], 1)
    return adj[..., iu[0], iu[1]]


def make_spring_dataset(config):
    S = config.n_samples
    rngs = [sample_rng(config.seed, i) for i in range(S)]
    traj, adj, info = simulate_springs(config, rngs)
    labels = pair_labels(adj)
    T = config.seq_len
    samples = []
    for i in range(S):
        rng = rngs[i]
        times = np.arange(T, dtype=np.float64)
        obs = traj[i].copy()
        if config.irregular:
            keep = irregular_indices(rng, T, config.irregular_len)
            times, obs = times[keep], obs[keep]
        if config.noise_sigma > 0:
            obs = obs + rng.normal(0.0, config.noise_sigma, size=obs.shape)
        if config.crop_fraction < 1.0:
            cut = crop_length(T, config.crop_fraction)
            mask = times < cut
            times, obs = times[mask], obs[mask]
        samples.append(Sample(times, obs, labels[i].copy()))
    meta = {
        "generator": "springs",
        "config": asdict(config),
        "seed": config.seed,
        "rejected": info["rejected"],
    }
    return Dataset(samples, "links", meta)


def crop_length(total, fraction):
    """Number of leading timestamps kept by a crop: ceil(fraction * total)."""
    return int(math.ceil(fraction * total - 1e-9))


VARIANTS = ("regular", "irregular", "noisy", "short50", "short25")


def spring_variant(variant, **kwargs):
    cfg = SpringConfig(**kwargs)
    if variant == "irregular":
        cfg.irregular = True
    elif variant == "noisy":
        if cfg.noise_sigma == 0.0:
            cfg.noise_sigma = 0.05
    elif variant == "short50":
        cfg.crop_fraction = 0.5
    elif variant == "short25":
        cfg.crop_fraction = 0.25
    elif variant != "regular":
        raise ContractError(f"unknown spring variant {variant!r}")
    return cfg


def three_body_variant(variant, **kwargs):
    if variant not in ("regular", "irregular"):
        raise ContractError(f"three-body supports regular/irregular, not {variant!r}")
    return ThreeBodyConfig(irregular=(variant == "irregular"), **kwargs)
