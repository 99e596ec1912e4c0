"""Optimisation and evaluation harness: Adam, cosine annealing, clipping,
early stopping, k-fold cross-validation and the encoder/meta-system ablations."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor
from .errors import ContractError, NumericError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    eta_min: float = 1e-4
    clip_norm: float | None = 0.1
    patience: int = 10
    batch_size: int = 128
    max_epochs: int = 100
    folds: int = 5
    val_fraction: float = 0.1
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    debug_clip: bool = False

    def __post_init__(self):
        if not self.lr > self.eta_min > 0:
            raise ContractError("need lr > eta_min > 0")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        self.betas = tuple(self.betas)

    @classmethod
    def for_task(cls, task, **overrides):
        """Protocol defaults: spring runs without clipping, three-body anneals to 5e-5."""
        if task == "links":
            base = dict(clip_norm=None, eta_min=1e-4)
        else:
            base = dict(clip_norm=0.1, eta_min=5e-5)
        base.update(overrides)
        return cls(**base)


def model_config_for(dataset, **overrides):
    """A DnsConfig whose input size, task and output width match ``dataset``."""
    target = np.asarray(dataset.samples[0].target)
    base = dict(input_dim=dataset.input_dim, task=dataset.task)
    if dataset.task == "links":
        base["n_outputs"] = int(target.size)
    else:
        base["horizon"] = int(target.shape[0])
    base.update(overrides)
    return M.DnsConfig(**base)


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# optimiser pieces


def cosine_lr(epoch, max_epochs, lr0, eta_min):
    if max_epochs <= 0:
        return lr0
    return eta_min + (lr0 - eta_min) * (1.0 + math.cos(math.pi * epoch / max_epochs)) / 2.0


def global_norm(grads):
    """Global L2 norm, reduced in sorted-name order so it does not depend on dict order."""
    return math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))


def clip_grad_norm(grads, max_norm):
    """Rescale a dict of gradients so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return dict(grads), norm


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """In-place Adam update of ``params`` (dict of Tensors). Returns False if skipped."""
    if any(not np.isfinite(g).all() for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient, skipping update %d", state.t + 1)
        return False
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


# --------------------------------------------------------------------------
# data plumbing


class Prepared:
    """A whole dataset turned into one big Batch; minibatches are index slices."""

    def __init__(self, dataset, config, grid=None):
        if dataset.task != config.task:
            raise ContractError(f"dataset task {dataset.task!r} does not match model task {config.task!r}")
        if dataset.input_dim != config.input_dim:
            raise ContractError(f"dataset has {dataset.input_dim} channels, model expects {config.input_dim}")
        if grid is None:
            grid = M.make_grid(dataset.time_grid(), config.substeps)
        targets = np.stack([np.asarray(s.target, dtype=np.float64) for s in dataset.samples])
        self.batch = M.make_batch(
            [s.times for s in dataset.samples],
            [s.observations for s in dataset.samples],
            config,
            grid=grid,
            targets=targets,
        )
        self.task = dataset.task

    def __len__(self):
        return self.batch.size

    def take(self, idx):
        b = self.batch
        return M.Batch(b.C[idx], b.knot_times[idx], b.grid, b.weights[idx], b.targets[idx])


def _minibatches(n, size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _params_snapshot(params):
    return {k: v.data.copy() for k, v in params.items()}


def _load_snapshot(params, snap):
    for k, v in snap.items():
        params[k].data = v.copy()


# --------------------------------------------------------------------------
# evaluation


def predictions(params, prepared, batch_size=256):
    outs = []
    for idx in _minibatches(len(prepared), batch_size):
        outs.append(M.predict(params, prepared.take(idx)).data)
    return np.concatenate(outs) if outs else np.zeros((0,))


def metrics_from_outputs(task, outputs, targets):
    if task == "trajectory":
        err = outputs - targets
        return {"task": task, "metric": "mse", "value": float(np.mean(err * err))}
    probs = 0.5 * (1.0 + np.tanh(0.5 * outputs))
    correct = (probs > 0.5) == (targets > 0.5)
    return {
        "task": task,
        "metric": "accuracy",
        "value": float(correct.mean()),
        "per_pair": correct.mean(axis=0).tolist(),
    }


def evaluate(params, data, batch_size=256):
    """MSE over every predicted coordinate, or pair accuracy at threshold 0.5."""
    prepared = data if isinstance(data, Prepared) else Prepared(data, params.config)
    out = predictions(params, prepared, batch_size)
    return metrics_from_outputs(prepared.task, out, prepared.batch.targets)


def mean_loss(params, prepared, batch_size=256):
    total, n = 0.0, 0
    for idx in _minibatches(len(prepared), batch_size):
        total += float(M.loss(params, prepared.take(idx)).data) * idx.size
        n += idx.size
    return total / max(n, 1)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    params: M.DnsParameters
    adam: AdamState
    epoch: int
    rng_state: dict
    best: dict
    best_val: float
    best_epoch: int
    bad_epochs: int
    curves: dict
    done: bool = False


@dataclass
class TrainResult:
    params: M.DnsParameters
    metrics: dict
    curves: dict
    state: TrainState


def split_indices(n, val_fraction, rng):
    order = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def new_state(model_config, train_config):
    rng = np.random.default_rng(train_config.seed)
    params = M.init_params(model_config, rng)
    return TrainState(
        params=params,
        adam=AdamState(),
        epoch=0,
        rng_state=rng.bit_generator.state,
        best=_params_snapshot(params),
        best_val=math.inf,
        best_epoch=-1,
        bad_epochs=0,
        curves={"epoch": [], "lr": [], "train_loss": [], "val_loss": [], "val_metric": [], "grad_norm": []},
    )


def train_epoch(state, train_data, tc):
    params = state.params
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state.rng_state
    lr = cosine_lr(state.epoch, tc.max_epochs, tc.lr, tc.eta_min)
    losses, norms = [], []
    for step, idx in enumerate(_minibatches(len(train_data), tc.batch_size, rng)):
        params.zero_grad()
        try:
            L = M.loss(params, train_data.take(idx))
        except NumericError as exc:
            raise TrainingDiverged(f"epoch {state.epoch} step {step}: {exc} (lr={lr:g})") from exc
        if not np.isfinite(L.data):
            raise TrainingDiverged(f"epoch {state.epoch} step {step}: loss is {float(L.data)} (lr={lr:g})")
        ad.backward(L)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
        if tc.clip_norm:
            grads, norm = clip_grad_norm(grads, tc.clip_norm)
            if tc.debug_clip:
                assert global_norm(grads) <= tc.clip_norm + 1e-12
        else:
            norm = global_norm(grads)
        if not math.isfinite(norm):
            raise TrainingDiverged(f"epoch {state.epoch} step {step}: gradient norm {norm} (lr={lr:g})")
        adam_step(params.tensors, grads, state.adam, lr, tc.betas, tc.eps)
        losses.append(float(L.data))
        norms.append(norm)
    state.rng_state = rng.bit_generator.state
    return lr, float(np.mean(losses)) if losses else math.nan, float(np.mean(norms)) if norms else 0.0


def run_training(state, train_data, val_data, tc, stop_after=None, on_epoch=None):
    """Advance ``state`` epoch by epoch until early stopping, the epoch cap, or
    ``stop_after`` epochs in this call (for interrupt/resume)."""
    ran = 0
    while not state.done and state.epoch < tc.max_epochs:
        if stop_after is not None and ran >= stop_after:
            break
        t0 = time.perf_counter()
        lr, train_loss, norm = train_epoch(state, train_data, tc)
        val_loss = mean_loss(state.params, val_data)
        val_metric = evaluate(state.params, val_data)["value"]
        c = state.curves
        c["epoch"].append(state.epoch)
        c["lr"].append(lr)
        c["train_loss"].append(train_loss)
        c["val_loss"].append(val_loss)
        c["val_metric"].append(val_metric)
        c["grad_norm"].append(norm)
        if val_loss < state.best_val:
            state.best_val = val_loss
            state.best_epoch = state.epoch
            state.best = _params_snapshot(state.params)
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
        log.info(
            "epoch %d lr %.2e train %.5f val %.5f metric %.4f (%.1fs)",
            state.epoch, lr, train_loss, val_loss, val_metric, time.perf_counter() - t0,
        )
        state.epoch += 1
        ran += 1
        if on_epoch is not None:
            on_epoch(state)
        if state.bad_epochs >= tc.patience:
            state.done = True
    if state.epoch >= tc.max_epochs:
        state.done = True
    return state


def best_params(state):
    p = state.params.copy()
    _load_snapshot(p, state.best)
    return p


def train(model_config, dataset, tc, val=None, state=None, stop_after=None, on_epoch=None):
    """Fit a model; returns the parameters with the lowest validation loss.

    Without an explicit ``val`` dataset a ``val_fraction`` hold-out is split
    off ``dataset`` using ``tc.seed``.
    """
    if dataset.task != model_config.task:
        raise ContractError(f"dataset task {dataset.task!r} does not match model task {model_config.task!r}")
    if val is None:
        tr_idx, va_idx = split_indices(len(dataset), tc.val_fraction, np.random.default_rng([tc.seed, 1]))
        train_set, val_set = dataset.subset(tr_idx), dataset.subset(va_idx)
    else:
        train_set, val_set = dataset, val
    grid = M.make_grid(np.unique(np.concatenate([train_set.time_grid(), val_set.time_grid()])), model_config.substeps)
    train_data = Prepared(train_set, model_config, grid)
    val_data = Prepared(val_set, model_config, grid)
    if state is None:
        state = new_state(model_config, tc)
    run_training(state, train_data, val_data, tc, stop_after=stop_after, on_epoch=on_epoch)
    params = best_params(state)
    metrics = evaluate(params, val_data)
    metrics["best_epoch"] = state.best_epoch
    metrics["val_loss"] = state.best_val
    return TrainResult(params, metrics, state.curves, state)


def crossval(model_config, dataset, tc, test=None):
    """k-fold cross-validation; each fold trains on the rest and validates on itself."""
    if tc.folds < 2:
        raise ContractError("cross-validation needs at least 2 folds")
    folds = fold_indices(len(dataset), tc.folds, np.random.default_rng([tc.seed, 2]))
    per_fold, results = [], []
    for f, held in enumerate(folds):
        rest = np.sort(np.concatenate([folds[j] for j in range(tc.folds) if j != f]))
        fold_tc = replace(tc, seed=tc.seed + 1000 * (f + 1))
        res = train(model_config, dataset.subset(rest), fold_tc, val=dataset.subset(held))
        value = evaluate(res.params, test)["value"] if test is not None else res.metrics["value"]
        per_fold.append(value)
        results.append(res)
    return aggregate(model_config.task, per_fold), results


def fold_indices(n, k, rng):
    order = rng.permutation(n)
    return [np.sort(part) for part in np.array_split(order, k)]


def aggregate(task, values):
    values = [float(v) for v in values]
    return {
        "task": task,
        "metric": "mse" if task == "trajectory" else "accuracy",
        "mean": float(np.mean(values)),
        "std": float(np.std(values)),
        "per_fold": values,
    }


# --------------------------------------------------------------------------
# ablations


def ablation_variants(base):
    """Encoder and meta-system ablations around a full multi-sub-system config."""
    k = base.input_dim
    single_q = base.n * base.q
    return {
        "No encoding": replace(base, n=1, q=single_q, encoding="none", m=k, encoder_hidden=None),
        "MLP(2xinput)": replace(base, n=1, q=single_q, encoding="mlp", m=2 * k, encoder_hidden=None),
        "MLP(16xinput)": replace(base, n=1, q=single_q, encoding="mlp", m=16 * k, encoder_hidden=None),
        "Frozen A": replace(base, meta="identity"),
        f"DNS ({base.n}xMLP(2xinput))": base,
    }


def _rebuild(cfg):
    # re-run defaults that depend on other fields
    d = asdict(cfg)
    return M.DnsConfig(**d)


def ablation_suite(dataset, base, tc, test, variants=None, seeds=(0,)):
    """Train every variant under the same budget and seeds; one row per variant."""
    variants = variants or ablation_variants(base)
    rows = []
    for name, cfg in variants.items():
        cfg = _rebuild(cfg)
        scores = []
        for s in seeds:
            res = train(cfg, dataset, replace(tc, seed=s))
            scores.append(evaluate(res.params, test)["value"])
        rows.append(
            {
                "variant": name,
                "mean": float(np.mean(scores)),
                "std": float(np.std(scores)),
                "per_seed": scores,
                "params": M.init_params(cfg, np.random.default_rng(0)).count(),
            }
        )
    return rows


def deep_copy_state(state):
    return copy.deepcopy(state)
