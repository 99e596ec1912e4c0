"""The decoupled neural system: sub-system CDEs coupled by a row-stochastic meta-system.

Shapes used throughout (B = batch, n = sub-systems, q = hidden size per
sub-system, m = control size per sub-system, k = raw input channels,
T = observed timestamps, G = Euler steps):

    observations  C   (B, T, k)
    encoded knots X   (B, T, n*m)
    hidden state  Z   (B, n, q)
    logits        L   (B, n, n)
    interactions  A   (B, n, n), every row on the simplex

Controls enter through spline derivatives. Because spline fits are linear in
the knot values, the derivative of the encoded path at every Euler step is a
fixed matrix times X, so gradients reach the encoders without special casing.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError
from .projections import project_rows, softmax_jacobian, softmax_rows
from .splines import DEFAULT_SMOOTHING, fit_path, path_weights

META_MODES = ("reparam", "discrete-projde", "identity")


@dataclass
class DnsConfig:
    input_dim: int
    n: int = 3
    q: int = 16
    m: int | None = None
    d_k: int = 8
    field_depth: int = 2
    field_width: int = 64
    field_final: str = "tanh"
    projection: str = "softmax"
    meta: str = "reparam"
    encoding: str = "mlp"
    encoder_hidden: int | None = None
    encoder_activation: str = "tanh"
    init_hidden: int = 32
    substeps: int = 1
    spline_kind: str = "interpolating"
    smoothing: float = DEFAULT_SMOOTHING
    append_time: bool = False
    task: str = "trajectory"
    horizon: int = 3
    n_outputs: int | None = None
    link_hidden: int = 64

    def __post_init__(self):
        if self.m is None:
            self.m = self.input_dim if self.encoding == "none" else 2 * self.input_dim
        if self.encoder_hidden is None:
            self.encoder_hidden = self.m
        for name in ("input_dim", "n", "q", "m", "d_k", "field_depth", "substeps"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.encoding == "none" and self.m != self.input_dim:
            raise ContractError("without an encoder the control size equals the input size")
        if self.projection not in ("softmax", "sparsemax"):
            raise ContractError(f"unknown projection {self.projection!r}")
        if self.meta not in META_MODES:
            raise ContractError(f"unknown meta mode {self.meta!r}")
        if self.task not in ("trajectory", "links"):
            raise ContractError(f"unknown task {self.task!r}")
        if self.n_outputs is None:
            self.n_outputs = self.horizon * self.input_dim if self.task == "trajectory" else 1

    @property
    def control_dim(self):
        """Width of each sub-system's control, including the optional time channel."""
        return self.m + (1 if self.append_time else 0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class DnsParameters:
    """Named learnable tensors plus the config that shapes them."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def values(self):
        return list(self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def field_layers(self):
        cfg = self.config
        layers = []
        for i in range(cfg.field_depth):
            last = i == cfg.field_depth - 1
            act = cfg.field_final if last else "tanh"
            layers.append((self[f"field_w{i}"], self[f"field_b{i}"], act))
        return layers

    def copy(self):
        return DnsParameters(
            replace(self.config),
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
        )


def _small_uniform(rng, shape):
    return rng.uniform(0.0, 0.01, size=shape)


def _fan_in_uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config, rng):
    """Fresh parameters. Encoder, initial-state, query and key weights are
    drawn from U[0, 0.01) with zero biases; field and readout weights use the
    usual +-1/sqrt(fan_in) range."""
    c = config
    n, q, k, m, eh = c.n, c.q, c.input_dim, c.m, c.encoder_hidden
    p = {}
    if c.encoding == "mlp":
        p["enc_w1"] = _small_uniform(rng, (k, n * eh))
        p["enc_b1"] = np.zeros(n * eh)
        p["enc_w2"] = _small_uniform(rng, (n, eh, m))
        p["enc_b2"] = np.zeros((n, m))
    p["init_w1"] = _small_uniform(rng, (k, c.init_hidden))
    p["init_b1"] = np.zeros(c.init_hidden)
    p["init_w2"] = _small_uniform(rng, (c.init_hidden, n * q))
    p["init_b2"] = np.zeros(n * q)
    widths = [q] + [c.field_width] * (c.field_depth - 1) + [q * c.control_dim]
    for i in range(c.field_depth):
        p[f"field_w{i}"] = _fan_in_uniform(rng, widths[i], (widths[i], widths[i + 1]))
        p[f"field_b{i}"] = _fan_in_uniform(rng, widths[i], (widths[i + 1],))
    if c.meta != "identity" and n > 1:
        p["query_w"] = _small_uniform(rng, (q, c.d_k))
        p["query_b"] = np.zeros(c.d_k)
        p["key_w"] = _small_uniform(rng, (q, c.d_k))
        p["key_b"] = np.zeros(c.d_k)
    if c.task == "trajectory":
        p["out_w"] = _fan_in_uniform(rng, n * q, (n * q, c.n_outputs))
        p["out_b"] = np.zeros(c.n_outputs)
    else:
        p["link_w1"] = _fan_in_uniform(rng, n * q, (n * q, c.link_hidden))
        p["link_b1"] = np.zeros(c.link_hidden)
        p["link_w2"] = _fan_in_uniform(rng, c.link_hidden, (c.link_hidden, c.n_outputs))
        p["link_b2"] = np.zeros(c.n_outputs)
    return DnsParameters(config, {name: Tensor(v, requires_grad=True, name=name) for name, v in p.items()})


# --------------------------------------------------------------------------
# state


@dataclass
class DnsState:
    t: float
    Z: Tensor
    L: Tensor | None
    A: Tensor

    def numpy(self):
        return {
            "t": self.t,
            "Z": self.Z.data.copy(),
            "L": None if self.L is None else self.L.data.copy(),
            "A": self.A.data.copy(),
        }


@dataclass
class Batch:
    """Observations plus precomputed spline-derivative weights on a shared grid."""

    C: np.ndarray  # (B, T, k)
    knot_times: np.ndarray  # (B, T)
    grid: np.ndarray  # (G+1,)
    weights: np.ndarray  # (B, G, T): control increment per step = weights[:, g] @ X
    targets: np.ndarray | None = None

    @property
    def size(self):
        return self.C.shape[0]


def make_grid(knot_times, substeps=1):
    """Knot times with every interval split into ``substeps`` equal Euler steps."""
    knots = np.asarray(knot_times, dtype=np.float64)
    pieces = [knots[:1]]
    for a, b in zip(knots[:-1], knots[1:]):
        pieces.append(a + (b - a) * np.arange(1, substeps + 1) / substeps)
    return np.concatenate(pieces)


def make_batch(times_list, obs_list, config, grid=None, targets=None):
    """Stack samples and precompute derivative weights on the Euler grid.

    Every sample must share its first and last timestamp. Without an explicit
    grid, the union of all knot times is refined by ``config.substeps``.
    """
    times_list = [np.asarray(t, dtype=np.float64) for t in times_list]
    if grid is None:
        grid = make_grid(np.unique(np.concatenate(times_list)), config.substeps)
    grid = np.asarray(grid, dtype=np.float64)
    T = max(t.size for t in times_list)
    B = len(times_list)
    k = config.input_dim
    C = np.zeros((B, T, k))
    knots = np.zeros((B, T))
    G = grid.size - 1
    W = np.zeros((B, G, T))
    dt = np.diff(grid)
    cache = {}
    for b, (t, obs) in enumerate(zip(times_list, obs_list)):
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (t.size, k):
            raise ContractError(f"sample {b}: observations {obs.shape} vs ({t.size}, {k})")
        if t[0] > grid[0] + 1e-12 or t[-1] < grid[-1] - 1e-12:
            raise ContractError("every sample must be observed at the first and last grid time")
        C[b, : t.size] = obs
        knots[b, : t.size] = t
        if t.size < T:
            C[b, t.size :] = obs[-1]
            knots[b, t.size :] = t[-1]
        key = t.tobytes()
        if key not in cache:
            cache[key] = path_weights(t, grid[:-1], config.spline_kind, config.smoothing) * dt[:, None]
        W[b, :, : t.size] = cache[key]
    return Batch(C, knots, grid, W, None if targets is None else np.asarray(targets, dtype=np.float64))


# --------------------------------------------------------------------------
# pieces of the forward pass


def _mlp(x, w1, b1, w2, b2, act):
    h = ad.ACTIVATIONS[act](ad.linear(x, w1, b1))
    return ad.linear(h, w2, b2)


def encode_knots(params, C):
    """Apply every per-sub-system encoder to every observation: (B,T,k) -> (B,T,n*m)."""
    cfg = params.config
    C = ad.as_tensor(C)
    B, T, k = C.shape
    n, m, eh = cfg.n, cfg.m, cfg.encoder_hidden
    if cfg.encoding == "none":
        X = C if n == 1 else ad.concat([C] * n, axis=-1)
    else:
        flat = ad.reshape(C, (B * T, k))
        h = ad.ACTIVATIONS[cfg.encoder_activation](ad.linear(flat, params["enc_w1"], params["enc_b1"]))
        h = ad.transpose(ad.reshape(h, (B * T, n, eh)), (1, 0, 2))
        x = ad.expand_add(ad.bmm(h, params["enc_w2"]), params["enc_b2"], axis=1)
        X = ad.reshape(ad.transpose(x, (1, 0, 2)), (B, T, n * m))
    return X


def control_increments(params, batch, X):
    """Per-step control increments, a list of G tensors shaped (B, n, control_dim)."""
    cfg = params.config
    B = batch.size
    G = batch.weights.shape[1]
    out = []
    dt = np.diff(batch.grid)
    for g in range(G):
        w = Tensor(batch.weights[:, g : g + 1, :])
        dx = ad.reshape(ad.bmm(w, X), (B, cfg.n, cfg.m))
        if cfg.append_time:
            tcol = Tensor(np.full((B, cfg.n, 1), dt[g]))
            dx = ad.concat([dx, tcol], axis=-1)
        out.append(dx)
    return out


def meta_logits(params, Z):
    """``Q(Z) K(Z)^T / sqrt(d_k)`` for each sample."""
    cfg = params.config
    Q = ad.linear(Z, params["query_w"], params["query_b"])
    K = ad.linear(Z, params["key_w"], params["key_b"])
    return ad.scale(ad.bmm(Q, ad.transpose(K)), 1.0 / math.sqrt(cfg.d_k))


def _project(params, L):
    return ad.PROJECTIONS[params.config.projection](L)


def _identity_A(B, n):
    return Tensor(np.broadcast_to(np.eye(n), (B, n, n)).copy())


def _uses_meta(cfg):
    return cfg.meta != "identity" and cfg.n > 1


def initial_state(params, c0, t0=0.0):
    """State at the first timestamp from the first raw observation (B, k)."""
    cfg = params.config
    c0 = ad.as_tensor(c0)
    B = c0.shape[0]
    z = _mlp(c0, params["init_w1"], params["init_b1"], params["init_w2"], params["init_b2"], "tanh")
    Z = ad.reshape(z, (B, cfg.n, cfg.q))
    if _uses_meta(cfg):
        L = meta_logits(params, Z)
        A = _project(params, L)
    else:
        L, A = None, _identity_A(B, cfg.n)
    return DnsState(t0, Z, L, A)


def field(params, AZ):
    """Shared vector field applied to every mixed sub-system state: (B,n,q) -> (B*n,q,cd)."""
    cfg = params.config
    B = AZ.shape[0]
    h = ad.reshape(AZ, (B * cfg.n, cfg.q))
    F = ad.mlp_forward(params.field_layers(), h)
    return ad.reshape(F, (B * cfg.n, cfg.q, cfg.control_dim))


def euler_step(params, state, dx, dt, index=None):
    """One synchronous Euler update of (Z, L, A) driven by control increments ``dx``."""
    cfg = params.config
    B = state.Z.shape[0]
    n, q, cd = cfg.n, cfg.q, cfg.control_dim
    AZ = ad.bmm(state.A, state.Z) if _uses_meta(cfg) else state.Z
    F = field(params, AZ)
    dz = ad.reshape(ad.bmm(F, ad.reshape(dx, (B * n, cd, 1))), (B, n, q))
    Z = state.Z + dz

    def check(name, t):
        if not np.isfinite(t.data).all():
            raise NumericError(f"non-finite {name} at step {index} (t={state.t + dt:g})")

    check("Z", Z)
    if not _uses_meta(cfg):
        return DnsState(state.t + dt, Z, None, state.A)
    L = meta_logits(params, Z)
    check("L", L)
    if cfg.meta == "reparam":
        A = _project(params, L)
    else:
        A = _project(params, state.A + (L - state.L))
    return DnsState(state.t + dt, Z, L, A)


def run(params, batch, keep_states=False):
    """Integrate a batch over its grid; returns the final state (and the trajectory)."""
    X = encode_knots(params, Tensor(batch.C))
    increments = control_increments(params, batch, X)
    state = initial_state(params, Tensor(batch.C[:, 0, :]), float(batch.grid[0]))
    states = [state] if keep_states else None
    dts = np.diff(batch.grid)
    for g, dx in enumerate(increments):
        state = euler_step(params, state, dx, float(dts[g]), index=g)
        if keep_states:
            states.append(state)
    return (state, states) if keep_states else state


# --------------------------------------------------------------------------
# readouts and losses


def readout_trajectory(params, state):
    cfg = params.config
    B = state.Z.shape[0]
    flat = ad.reshape(state.Z, (B, cfg.n * cfg.q))
    y = ad.linear(flat, params["out_w"], params["out_b"])
    return ad.reshape(y, (B, cfg.horizon, cfg.input_dim))


def readout_links(params, state):
    """One logit per unordered particle pair."""
    cfg = params.config
    B = state.Z.shape[0]
    flat = ad.reshape(state.Z, (B, cfg.n * cfg.q))
    return _mlp(flat, params["link_w1"], params["link_b1"], params["link_w2"], params["link_b2"], "relu")


def predict(params, batch):
    state = run(params, batch)
    if params.config.task == "trajectory":
        return readout_trajectory(params, state)
    return readout_links(params, state)


def loss(params, batch):
    out = predict(params, batch)
    if params.config.task == "trajectory":
        return ad.mse(out, batch.targets)
    return ad.bce_with_logits(out, batch.targets)


# --------------------------------------------------------------------------
# single-series conveniences


def encode_controls(params, times, obs):
    """Encode one observation series and fit a control path per sub-system."""
    cfg = params.config
    obs = np.asarray(obs, dtype=np.float64)
    X = encode_knots(params, Tensor(obs[None])).data[0]
    paths = []
    for i in range(cfg.n):
        xi = X[:, i * cfg.m : (i + 1) * cfg.m]
        paths.append(fit_path(times, xi, cfg.spline_kind, cfg.smoothing))
    return paths


def init_state(params, times, obs):
    obs = np.asarray(obs, dtype=np.float64)
    return initial_state(params, Tensor(obs[:1]), float(np.asarray(times)[0]))


def step(params, state, paths, dt):
    """Euler step for a single series, reading control increments from fitted paths."""
    cfg = params.config
    dx = np.stack([p.eval_derivative(state.t) * dt for p in paths])  # (n, m)
    if cfg.append_time:
        dx = np.concatenate([dx, np.full((cfg.n, 1), dt)], axis=1)
    return euler_step(params, state, Tensor(dx[None]), dt)


def integrate(params, times, obs, t0=None, t1=None):
    """All intermediate states of one series between ``t0`` and ``t1``.

    Knot intervals are split into ``substeps`` Euler steps; ``t1`` may reach
    past the last knot, where the control path continues linearly.
    """
    times = np.asarray(times, dtype=np.float64)
    t0 = times[0] if t0 is None else float(t0)
    t1 = times[-1] if t1 is None else float(t1)
    if not t0 < t1:
        raise ContractError("integration needs t0 < t1")
    inner = times[(times > t0) & (times < t1)]
    grid = make_grid(np.concatenate([[t0], inner, [t1]]), params.config.substeps)
    obs = np.asarray(obs, dtype=np.float64)
    cfg = params.config
    X = encode_knots(params, Tensor(obs[None]))
    W = path_weights(times, grid[:-1], cfg.spline_kind, cfg.smoothing) * np.diff(grid)[:, None]
    batch = Batch(obs[None], times[None], grid, W[None])
    increments = control_increments(params, batch, X)
    c0 = fit_path(times, obs, "interpolating").eval(t0)[None] if t0 != times[0] else obs[:1]
    state = initial_state(params, Tensor(c0), t0)
    states = [state]
    for g, dx in enumerate(increments):
        state = euler_step(params, state, dx, float(grid[g + 1] - grid[g]), index=g)
        states.append(state)
    return states


# --------------------------------------------------------------------------
# analysis


def compute_focus(params, times, obs, normalize=False):
    """Mean over timestamps of |d ||x_i(t)||_1 / d c_j(t)|, shape (n, k)."""
    cfg = params.config
    obs = np.asarray(obs, dtype=np.float64)
    out = np.zeros((cfg.n, cfg.input_dim))
    for i in range(cfg.n):
        C = Tensor(obs[None], requires_grad=True)
        X = encode_knots(params, C)
        xi = ad.take(X, (slice(None), slice(None), slice(i * cfg.m, (i + 1) * cfg.m)))
        ad.backward(ad.sum_(ad.abs_(xi)))
        out[i] = np.abs(C.grad[0]).mean(axis=0)
    if normalize:
        peak = out.max(axis=1, keepdims=True)
        out = np.divide(out, peak, out=np.zeros_like(out), where=peak > 0)
    return out


def equivalence_check(L, Ldot, dt_list):
    """Compare the logit-space and interaction-space updates of a softmax meta-system.

    For each dt, the exact change ``softmax(L + dt*Ldot) - softmax(L)`` is compared
    with the first-order change ``dt * J_softmax(L) Ldot`` row by row. The error
    shrinks like dt^2, so halving dt divides it by about four.
    """
    L = np.atleast_2d(np.asarray(L, dtype=np.float64))
    Ldot = np.atleast_2d(np.asarray(Ldot, dtype=np.float64))
    base = softmax_rows(L)
    linear = np.stack([softmax_jacobian(row) @ v for row, v in zip(L, Ldot)])
    errors, exact_changes = [], []
    for dt in dt_list:
        change = softmax_rows(L + dt * Ldot) - base
        exact_changes.append(change)
        errors.append(float(np.abs(change - dt * linear).max()))
    errors = np.array(errors)
    dts = np.asarray(dt_list, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = errors[:-1] / errors[1:]
        orders = np.log(ratios) / np.log(dts[:-1] / dts[1:])
    return {
        "dt": dts,
        "error": errors,
        "ratio": ratios,
        "order": orders,
        "max_change": np.array([np.abs(c).max() for c in exact_changes]),
    }


def permute_subsystems(params, perm):
    """Relabel sub-systems; the model's outputs are unchanged and A is conjugated."""
    cfg = params.config
    perm = np.asarray(perm)
    n, q, eh = cfg.n, cfg.q, cfg.encoder_hidden
    t = {k: v.data.copy() for k, v in params.items()}
    if cfg.encoding == "mlp":
        t["enc_w1"] = t["enc_w1"].reshape(-1, n, eh)[:, perm].reshape(-1, n * eh)
        t["enc_b1"] = t["enc_b1"].reshape(n, eh)[perm].reshape(-1)
        t["enc_w2"] = t["enc_w2"][perm]
        t["enc_b2"] = t["enc_b2"][perm]
    t["init_w2"] = t["init_w2"].reshape(-1, n, q)[:, perm].reshape(-1, n * q)
    t["init_b2"] = t["init_b2"].reshape(n, q)[perm].reshape(-1)
    head = "out_w" if cfg.task == "trajectory" else "link_w1"
    t[head] = t[head].reshape(n, q, -1)[perm].reshape(n * q, -1)
    return DnsParameters(replace(cfg), {k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()})


def exposed_interactions(params, times, obs):
    """Every A(t) along one integration, as a (steps+1, n, n) array with times."""
    states = integrate(params, times, obs)
    return np.array([s.t for s in states]), np.stack([s.A.data[0] for s in states])


def single_system_config(config, **overrides):
    """The n=1 neural-CDE counterpart of ``config``."""
    return replace(config, n=1, **overrides)


__all__ = [
    "DnsConfig",
    "DnsParameters",
    "DnsState",
    "Batch",
    "init_params",
    "make_grid",
    "make_batch",
    "encode_knots",
    "encode_controls",
    "init_state",
    "initial_state",
    "step",
    "euler_step",
    "integrate",
    "run",
    "readout_trajectory",
    "readout_links",
    "predict",
    "loss",
    "compute_focus",
    "equivalence_check",
    "permute_subsystems",
    "exposed_interactions",
    "project_rows",
    "field",
]
