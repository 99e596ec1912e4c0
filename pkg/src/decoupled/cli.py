"""Command-line entry point: ``dns <command> [flags]``.

Commands
    gen            regenerate a three-body or spring dataset
    train          fit a model (optionally k-fold) and write checkpoint + metrics
    eval           score a checkpoint on a dataset
    inspect-meta   dump the interaction matrix at every Euler step
    inspect-focus  per-sub-system input sensitivity
    compare-proj   softmax vs sparsemax images of random planar points
    ablate         encoder / meta-system ablation table

Every command writes a ``*.manifest.json`` (or ``manifest.json`` inside an
output directory) and every artifact carries that manifest's id.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt
from . import datagen as D
from . import dataio
from . import model as M
from . import plotting
from . import training as T
from .errors import ContractError, FormatError, InputError
from .projections import COMPARISON_COLUMNS, projection_comparison

CSV_VERSION = 1
MODEL_TAGS = {
    "dns": dict(projection="softmax", spline_kind="interpolating"),
    "dns-g": dict(projection="sparsemax", spline_kind="interpolating"),
    "dns-s": dict(projection="softmax", spline_kind="smoothing"),
}
TASK_NAMES = {"three-body": "trajectory", "spring": "links"}

log = logging.getLogger("decoupled")


class UsageError(Exception):
    """Bad flag combination; reported with exit status 2."""


# --------------------------------------------------------------------------
# manifests


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, default=str, separators=(",", ":"))


def config_hash(obj):
    return hashlib.sha256(_canonical(obj).encode("utf-8")).hexdigest()[:16]


@dataclass
class RunManifest:
    command: str
    args: dict
    seed: int | None = None
    config_hashes: dict = field(default_factory=dict)
    dataset_fingerprint: str | None = None
    metrics: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def id(self):
        # Only the inputs that determine the outputs; paths and timing are excluded
        # so that re-running a command reproduces its artifacts byte for byte.
        stable = {k: v for k, v in self.args.items() if k not in ("out", "plot")}
        return config_hash(
            {"command": self.command, "args": stable, "data": self.dataset_fingerprint, "configs": self.config_hashes}
        )

    def write(self, path):
        body = asdict(self)
        body["id"] = self.id
        with open(path, "w") as fh:
            json.dump(body, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        return path


def _args_dict(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def _write_csv(path, schema, manifest_id, columns, rows):
    """CSV preceded by one ``#`` line naming the schema, its version and the manifest."""
    tmp = path + ".part"
    with open(tmp, "w", newline="") as fh:
        fh.write(f"# schema={schema} version={CSV_VERSION} manifest={manifest_id}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    os.replace(tmp, path)
    return path


def read_csv(path):
    """Read a CSV written by this tool; returns ``(header_info, columns, rows)``."""
    with open(path) as fh:
        first = fh.readline().strip()
        info = dict(part.split("=", 1) for part in first.lstrip("# ").split())
        reader = csv.reader(fh)
        columns = next(reader)
        rows = [r for r in reader]
    return info, columns, rows


def _write_json(path, obj):
    tmp = path + ".part"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _sidecar(path):
    return os.path.splitext(path)[0] + ".manifest.json"


def _require_file(path, what):
    if not os.path.isfile(path):
        raise InputError(f"{what} not found: {path}")


# --------------------------------------------------------------------------
# gen


def _gen_config(args):
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.task == "three-body":
        if args.variant not in ("regular", "irregular"):
            raise UsageError(f"three-body has no {args.variant!r} variant (use regular or irregular)")
        kw = dict(n_train=args.n, seed=args.seed)
        if args.velocity_scale is not None:
            kw["velocity_scale"] = args.velocity_scale
        return D.three_body_variant(args.variant, **kw)
    kw = dict(n_samples=args.n, n_particles=args.particles, seed=args.seed)
    return D.spring_variant(args.variant, **kw)


def cmd_gen(args):
    t0 = time.perf_counter()
    cfg = _gen_config(args)
    if args.task == "three-body":
        ds = D.make_three_body_dataset(cfg)
    else:
        ds = D.make_spring_dataset(cfg)
    man = RunManifest("gen", _args_dict(args), seed=args.seed, config_hashes={"generator": config_hash(asdict(cfg))})
    ds.metadata["manifest"] = man.id
    ds.metadata["variant"] = args.variant
    tmp = args.out + ".part"
    dataio.write_dataset(ds, tmp)
    os.replace(tmp, args.out)
    man.dataset_fingerprint = None
    man.artifacts = [args.out]
    man.metrics = {"fingerprint": dataio.fingerprint(args.out)}
    man.wall_clock = time.perf_counter() - t0
    man.write(_sidecar(args.out))
    T_lens = sorted({len(s.times) for s in ds.samples})
    print(
        f"wrote {args.out}: task={ds.task} variant={args.variant} samples={len(ds)} "
        f"T={T_lens[0] if len(T_lens) == 1 else T_lens} k={ds.input_dim} "
        f"rejected={ds.metadata.get('rejected', 0)}"
    )
    return 0


# --------------------------------------------------------------------------
# train / eval


def _model_config(args, dataset):
    over = dict(MODEL_TAGS[args.model])
    over.update(n=args.n_sub, q=args.hidden, field_depth=args.field_depth, substeps=args.substeps)
    if args.field_width is not None:
        over["field_width"] = args.field_width
    if args.smoothing is not None:
        over["smoothing"] = args.smoothing
    return T.model_config_for(dataset, **over)


def _train_config(args, task):
    over = dict(seed=args.seed, folds=getattr(args, "folds", None) or 5)
    if args.epochs is not None:
        over["max_epochs"] = args.epochs
    if args.batch_size is not None:
        over["batch_size"] = args.batch_size
    if args.lr is not None:
        over["lr"] = args.lr
    if args.patience is not None:
        over["patience"] = args.patience
    return T.TrainConfig.for_task(task, **over)


def cmd_train(args):
    t0 = time.perf_counter()
    _require_file(args.data, "dataset")
    dataset = dataio.read_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    if args.resume:
        _require_file(args.resume, "checkpoint")
        state, tc, _ = ckpt.load(args.resume)
        cfg = state.params.config
        if cfg.task != dataset.task:
            raise UsageError(f"checkpoint predicts {cfg.task!r} but the dataset is {dataset.task!r}")
    else:
        state = None
        cfg = _model_config(args, dataset)
        tc = _train_config(args, dataset.task)
    test = None
    if args.test:
        _require_file(args.test, "test dataset")
        test = dataio.read_dataset(args.test)
    man = RunManifest(
        "train",
        _args_dict(args),
        seed=tc.seed,
        config_hashes={"model": config_hash(cfg.to_dict()), "train": config_hash(vars(tc))},
        dataset_fingerprint=dataio.fingerprint(args.data),
    )
    extra = {"manifest": man.id, "data": os.path.abspath(args.data)}
    if args.folds:
        agg, results = T.crossval(cfg, dataset, replace(tc, folds=args.folds), test=test)
        best = int(np.argmax(agg["per_fold"]) if agg["metric"] == "accuracy" else np.argmin(agg["per_fold"]))
        for f, res in enumerate(results):
            path = os.path.join(args.out, f"fold{f}.dnsc")
            ckpt.save(path, res.state, replace(tc, seed=tc.seed + 1000 * (f + 1)), dict(extra, fold=f))
            man.artifacts.append(path)
        main = results[best]
        main_tc = replace(tc, seed=tc.seed + 1000 * (best + 1))
        extra["fold"] = best
        metrics = agg
    else:
        main = T.train(cfg, dataset, tc, state=state, stop_after=args.stop_after)
        main_tc = tc
        value = T.evaluate(main.params, test)["value"] if test is not None else main.metrics["value"]
        metrics = T.aggregate(cfg.task, [value])
        metrics["best_epoch"] = main.state.best_epoch
    metrics["evaluated_on"] = "test" if test is not None else "validation"
    ck_path = os.path.join(args.out, "checkpoint.dnsc")
    ckpt.save(ck_path, main.state, main_tc, extra)
    metrics["manifest"] = man.id
    _write_json(os.path.join(args.out, "metrics.json"), metrics)
    c = main.curves
    curve_rows = zip(c["epoch"], c["lr"], c["train_loss"], c["val_loss"], c["val_metric"], c["grad_norm"])
    _write_csv(
        os.path.join(args.out, "curves.csv"),
        "curves",
        man.id,
        ["epoch", "lr", "train_loss", "val_loss", "val_metric", "grad_norm"],
        curve_rows,
    )
    if c["epoch"]:
        plotting.plot_curves(c, os.path.join(args.out, "curves.png"))
    man.artifacts += [ck_path, "metrics.json", "curves.csv"]
    man.metrics = metrics
    man.wall_clock = time.perf_counter() - t0
    man.write(os.path.join(args.out, "manifest.json"))
    print(_format_metrics(metrics))
    return 0


def _format_metrics(metrics):
    if metrics["metric"] == "mse":
        scaled = [v * 100 for v in metrics["per_fold"]]
        return (
            f"{metrics['task']}: MSE (x1e-2) {metrics['mean'] * 100:.4f} +- {metrics['std'] * 100:.4f} "
            f"per fold {', '.join(f'{v:.4f}' for v in scaled)}"
        )
    return (
        f"{metrics['task']}: accuracy {metrics['mean'] * 100:.2f}% +- {metrics['std'] * 100:.2f} "
        f"per fold {', '.join(f'{v * 100:.2f}' for v in metrics['per_fold'])}"
    )


def cmd_eval(args):
    _require_file(args.ckpt, "checkpoint")
    _require_file(args.data, "dataset")
    params = ckpt.load_params(args.ckpt, best=not args.last)
    dataset = dataio.read_dataset(args.data)
    if params.config.task != dataset.task:
        raise UsageError(f"checkpoint predicts {params.config.task!r} but the dataset is {dataset.task!r}")
    if args.indices:
        dataset = dataset.subset(_parse_indices(args.indices, len(dataset)))
    m = T.evaluate(params, dataset)
    metrics = T.aggregate(dataset.task, [m["value"]])
    if "per_pair" in m:
        metrics["per_pair"] = m["per_pair"]
    if metrics["metric"] == "mse":
        metrics["mse_x1e-2"] = metrics["mean"] * 100
    print(_format_metrics(metrics))
    if args.out:
        man = RunManifest(
            "eval", _args_dict(args), dataset_fingerprint=dataio.fingerprint(args.data), metrics=metrics
        )
        metrics["manifest"] = man.id
        _write_json(args.out, metrics)
        man.artifacts = [args.out]
        man.write(_sidecar(args.out))
    return 0


def _parse_indices(text, n):
    idx = []
    for part in text.split(","):
        if ":" in part:
            a, b = part.split(":")
            idx.extend(range(int(a or 0), int(b or n)))
        else:
            idx.append(int(part))
    idx = np.array(idx, dtype=int)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
        raise UsageError(f"indices must lie in [0, {n})")
    return idx


# --------------------------------------------------------------------------
# inspection


def _load_pair(args):
    _require_file(args.ckpt, "checkpoint")
    _require_file(args.data, "dataset")
    params = ckpt.load_params(args.ckpt)
    dataset = dataio.read_dataset(args.data)
    if dataset.input_dim != params.config.input_dim:
        raise UsageError(f"dataset has {dataset.input_dim} channels, checkpoint expects {params.config.input_dim}")
    return params, dataset


def cmd_inspect_meta(args):
    params, dataset = _load_pair(args)
    if not 0 <= args.sample < len(dataset):
        raise UsageError(f"--sample must lie in [0, {len(dataset)})")
    s = dataset.samples[args.sample]
    times, A = M.exposed_interactions(params, s.times, s.observations)
    n = A.shape[1]
    man = RunManifest("inspect-meta", _args_dict(args), dataset_fingerprint=dataio.fingerprint(args.data))
    rows = ((t, i, j, A[g, i, j]) for g, t in enumerate(times) for i in range(n) for j in range(n))
    _write_csv(args.out, "meta", man.id, ["t", "i", "j", "a_ij"], rows)
    zeros = float(np.mean(A == 0.0))
    man.metrics = {
        "steps": int(len(times)),
        "zero_fraction": zeros,
        "max_row_sum_error": float(np.abs(A.sum(axis=2) - 1).max()),
    }
    man.artifacts = [args.out]
    if args.plot:
        plotting.plot_meta(times, A, args.plot)
        man.artifacts.append(args.plot)
    man.write(_sidecar(args.out))
    print(f"wrote {args.out}: {len(times)} steps, n={n}, exact zeros {zeros * 100:.1f}%")
    return 0


def cmd_inspect_focus(args):
    params, dataset = _load_pair(args)
    count = min(args.samples, len(dataset)) if args.samples else len(dataset)
    focus = np.zeros((params.config.n, params.config.input_dim))
    for s in dataset.samples[:count]:
        focus += M.compute_focus(params, s.times, s.observations)
    focus /= count
    if args.normalize:
        peak = focus.max(axis=1, keepdims=True)
        focus = np.divide(focus, peak, out=np.zeros_like(focus), where=peak > 0)
    man = RunManifest("inspect-focus", _args_dict(args), dataset_fingerprint=dataio.fingerprint(args.data))
    rows = ((i, j, focus[i, j]) for i in range(focus.shape[0]) for j in range(focus.shape[1]))
    _write_csv(args.out, "focus", man.id, ["subsystem", "channel", "sensitivity"], rows)
    man.artifacts = [args.out]
    if args.plot:
        plotting.plot_focus(focus, args.plot)
        man.artifacts.append(args.plot)
    man.write(_sidecar(args.out))
    print(f"wrote {args.out}: {focus.shape[0]} sub-systems x {focus.shape[1]} channels over {count} samples")
    return 0


def cmd_compare_proj(args):
    if args.n_points < 1:
        raise UsageError("--n-points must be positive")
    rng = np.random.default_rng(args.seed)
    table = projection_comparison(rng.uniform(-2.0, 2.0, size=(args.n_points, 2)))
    man = RunManifest("compare-proj", _args_dict(args), seed=args.seed)
    _write_csv(args.out, "projections", man.id, list(COMPARISON_COLUMNS), table)
    vertices = int(np.sum(np.any(table[:, 4:6] == 1.0, axis=1)))
    man.metrics = {"sparse_vertex_hits": vertices, "soft_min_entry": float(table[:, 2:4].min())}
    man.artifacts = [args.out]
    if args.plot:
        plotting.plot_projection_comparison(table, args.plot)
        man.artifacts.append(args.plot)
    man.write(_sidecar(args.out))
    print(f"wrote {args.out}: {args.n_points} points, {vertices} sparsemax images on a vertex")
    return 0


def cmd_ablate(args):
    _require_file(args.data, "dataset")
    _require_file(args.test, "test dataset")
    dataset = dataio.read_dataset(args.data)
    test = dataio.read_dataset(args.test)
    base = _model_config(args, dataset)
    tc = _train_config(args, dataset.task)
    seeds = tuple(range(args.seed, args.seed + args.seeds))
    rows = T.ablation_suite(dataset, base, tc, test, seeds=seeds)
    man = RunManifest(
        "ablate",
        _args_dict(args),
        seed=args.seed,
        config_hashes={"model": config_hash(base.to_dict()), "train": config_hash(vars(tc))},
        dataset_fingerprint=dataio.fingerprint(args.data),
        metrics={"rows": rows},
    )
    os.makedirs(args.out, exist_ok=True)
    table = os.path.join(args.out, "ablation.csv")
    _write_csv(
        table,
        "ablation",
        man.id,
        ["variant", "mean", "std", "params"],
        ((r["variant"], r["mean"], r["std"], r["params"]) for r in rows),
    )
    metric = "mse" if dataset.task == "trajectory" else "accuracy"
    plotting.plot_ablation(rows, os.path.join(args.out, "ablation.png"), metric)
    man.artifacts = [table, "ablation.png"]
    man.write(os.path.join(args.out, "manifest.json"))
    for r in rows:
        print(f"{r['variant']:<24} {r['mean']:.4f} +- {r['std']:.4f}  ({r['params']} params)")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _model_flags(p):
    p.add_argument("--model", choices=sorted(MODEL_TAGS), default="dns")
    p.add_argument("--n-sub", type=int, default=3, help="number of sub-systems")
    p.add_argument("--hidden", type=int, default=16, help="hidden size q of each sub-system")
    p.add_argument("--field-depth", type=int, default=2)
    p.add_argument("--field-width", type=int, default=None)
    p.add_argument("--substeps", type=int, default=1, help="Euler steps per observation interval")
    p.add_argument("--smoothing", type=float, default=None, help="smoothing-spline lambda (dns-s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="dns", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset")
    p.add_argument("--task", choices=sorted(TASK_NAMES), required=True)
    p.add_argument("--variant", choices=D.VARIANTS, default="regular")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--particles", type=int, default=5, help="spring particles")
    p.add_argument("--velocity-scale", type=float, default=None, help="three-body initial velocity std")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--test", default=None, help="optional held-out dataset scored with the best parameters")
    _model_flags(p)
    p.add_argument("--folds", type=int, default=None, help="k-fold cross-validation")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, default=None, help="pause after this many epochs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--indices", default=None, help="comma list or a:b range of samples")
    p.add_argument("--last", action="store_true", help="use the final rather than the best parameters")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-meta", help="interaction matrix along one integration")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None)
    p.set_defaults(func=cmd_inspect_meta)

    p = sub.add_parser("inspect-focus", help="sub-system focus on input channels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None)
    p.set_defaults(func=cmd_inspect_focus)

    p = sub.add_parser("compare-proj", help="softmax vs sparsemax on random 2-D points")
    p.add_argument("--n-points", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None)
    p.set_defaults(func=cmd_compare_proj)

    p = sub.add_parser("ablate", help="ablation table")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    _model_flags(p)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dns {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (InputError, FormatError, ContractError, T.TrainingDiverged) as exc:
        print(f"dns {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
