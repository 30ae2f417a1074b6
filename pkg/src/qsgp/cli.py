"""Command-line interface: ``qsgp {train,predict,evaluate,diagnose}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import io
import sys
from typing import List, Optional

import numpy as np

from . import data as datamod
from .artifact import ModelArtifact, save_atomic
from .control_variates import support_rows
from .diagnostics import COLUMNS as DIAG_COLUMNS
from .diagnostics import failed, run_all
from .errors import DataError, InvalidState, NumericError, UnsupportedOperation
from .features import BasisExpansion, Hyperparameters
from .optimizer import METRIC_COLUMNS, TrainConfig, TrainData, init_training, rvm_prune, train
from .predict import PredictiveResult, class_probability, evaluate, predict, predict_augmented
from .sites import GAUSSIAN, LAPLACE, LOGISTIC

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

KERNELS = ("rff", "inducing", "rvm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_data_args(p, demo=True):
    p.add_argument("--data", help="CSV file (features then target by default)")
    if demo:
        p.add_argument("--demo", choices=sorted(datamod.DEMOS), help="use a built-in dataset instead of --data")
    p.add_argument("--has-header", action="store_true")
    p.add_argument("--target-column", type=int, default=-1)
    p.add_argument("--delimiter", default=",")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qsgp", description="Sparse variational GP regression and classification "
                                               "with O(1)-per-step stochastic training.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="fit a model")
    _add_data_args(t)
    t.add_argument("--likelihood", choices=(GAUSSIAN, LAPLACE, LOGISTIC), default=GAUSSIAN)
    t.add_argument("--kernel", choices=KERNELS, default="rff")
    t.add_argument("--m", type=int, default=1000, help="number of basis functions (rvm: one per row)")
    t.add_argument("--mtilde", type=int, default=10000)
    t.add_argument("--ntilde", type=int, default=500)
    t.add_argument("--cv-rank", type=int, default=500, help="control-variate support size (0 disables)")
    t.add_argument("--chevron-cols", type=int, default=10)
    t.add_argument("--iters", type=int, default=1000)
    t.add_argument("--lr-variational", type=float, default=0.1)
    t.add_argument("--lr-hyper", type=float, default=1e-5)
    t.add_argument("--lr-precision", type=float, default=0.05)
    t.add_argument("--lr-chevron-scale", type=float, default=1.0,
                   help="multiplier on --lr-variational for the dense columns of the Cholesky factor")
    t.add_argument("--decay", type=float, default=100.0, help="total learning-rate decay over the run")
    t.add_argument("--freeze-hyper-iters", type=int, default=None)
    t.add_argument("--quad-points", type=int, default=101)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lengthscale", type=float, default=1.0)
    t.add_argument("--signal-variance", type=float, default=1.0)
    t.add_argument("--noise-variance", type=float, default=0.1)
    t.add_argument("--laplace-scale", type=float, default=0.3)
    t.add_argument("--prune-threshold", type=float, default=1e4)
    t.add_argument("--full-batch", action="store_true", help="enumerate all indices every step")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--metrics", help="metrics CSV to write")
    t.add_argument("--log-every", type=int, default=100)

    for name in ("predict", "evaluate"):
        q = sub.add_parser(name, help=f"{name} with a saved model")
        q.add_argument("--model", required=True)
        _add_data_args(q)
        q.add_argument("--quad-points", type=int, default=101)
        if name == "predict":
            q.add_argument("--features-only", action="store_true", help="the file has no target column")
            q.add_argument("--latent", action="store_true", help="omit the noise variance")
            q.add_argument("--out", help="CSV to write (default stdout)")

    dg = sub.add_parser("diagnose", help="run estimator self-checks")
    dg.add_argument("--replicates", type=int, default=10000)
    dg.add_argument("--seed", type=int, default=0)
    dg.add_argument("--out", help="CSV to write (default stdout)")
    return parser


# -- helpers -------------------------------------------------------------

def _raw_data(args):
    if getattr(args, "demo", None) and args.data:
        raise UsageError("give either --data or --demo, not both")
    if getattr(args, "demo", None):
        return datamod.DEMOS[args.demo](args.seed)
    if not args.data:
        raise UsageError("--data (or --demo) is required")
    try:
        A = datamod.read_csv(args.data, args.has_header, args.delimiter)
    except OSError as exc:
        raise DataError(f"cannot read {args.data}: {exc}") from exc
    return datamod.split_target(A, args.target_column)


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv(columns, rows) -> str:
    out = io.StringIO()
    out.write(",".join(columns) + "\n")
    for r in rows:
        out.write(",".join(_fmt(r[c]) for c in columns) + "\n")
    return out.getvalue()


def _build_expansion(args, ds: datamod.Dataset) -> BasisExpansion:
    hyper = Hyperparameters.create(ds.d, args.lengthscale, args.signal_variance, args.noise_variance,
                                   args.laplace_scale)
    if args.kernel == "rff":
        m = args.m + (args.m % 2)
        return BasisExpansion.rff(m, hyper, args.seed)
    if args.kernel == "inducing":
        m = min(args.m, ds.n)
        rows = np.arange(ds.n) if m == ds.n else support_rows(args.seed, ds.n, m)
        return BasisExpansion.inducing(ds.X[rows], hyper)
    return BasisExpansion.dictionary(hyper, np.ones(ds.n), centers=ds.X)


def _config(args) -> TrainConfig:
    return TrainConfig(
        m_tilde=args.mtilde, n_tilde=args.ntilde, n_bar=args.cv_rank, chevron_k=args.chevron_cols,
        iterations=args.iters, lr_variational=args.lr_variational, lr_hyper=args.lr_hyper,
        decay_factor=args.decay, hyper_freeze=args.freeze_hyper_iters, likelihood=args.likelihood,
        quad_points=args.quad_points, seed=args.seed, full_batch=args.full_batch, log_every=args.log_every,
        lr_precision=args.lr_precision, lr_chevron_scale=args.lr_chevron_scale,
        prune_threshold=args.prune_threshold)


def _config_echo(cfg: TrainConfig, args) -> dict:
    return {"kernel": args.kernel, "m_tilde": cfg.m_tilde, "n_tilde": cfg.n_tilde, "n_bar": cfg.n_bar,
            "chevron_k": cfg.chevron_k, "iterations": cfg.iterations, "lr_variational": cfg.lr_variational,
            "lr_hyper": cfg.lr_hyper, "decay_factor": cfg.decay_factor, "hyper_freeze": cfg.hyper_freeze,
            "likelihood": cfg.likelihood, "quad_points": cfg.quad_points, "seed": cfg.seed,
            "full_batch": cfg.full_batch}


def _metrics_text(echo: dict, rows: List[dict]) -> str:
    head = "".join(f"# {k}={v}\n" for k, v in echo.items())
    return head + _csv(METRIC_COLUMNS, rows)


# -- commands ------------------------------------------------------------

def cmd_train(args) -> int:
    if args.kernel == "rvm" and args.likelihood == LOGISTIC:
        raise UsageError("--kernel rvm supports gaussian and laplace likelihoods only")
    for name in ("m", "mtilde", "ntilde", "log_every"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    if args.iters < 0 or args.cv_rank < 0 or args.chevron_cols < 0:
        raise UsageError("--iters, --cv-rank and --chevron-cols must be non-negative")
    if args.freeze_hyper_iters is not None and not 0 <= args.freeze_hyper_iters <= args.iters:
        raise UsageError("--freeze-hyper-iters must lie in [0, --iters]")
    X, y = _raw_data(args)
    ds = datamod.make_dataset(X, y, args.likelihood)
    try:
        cfg = _config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    expansion = _build_expansion(args, ds)
    echo = _config_echo(cfg, args)
    rvm = args.kernel == "rvm"
    ts = init_training(TrainData(ds.X, ds.y), expansion, cfg, rvm=rvm)
    frozen = expansion.hyper
    rows: List[dict] = []
    interrupted = False
    try:
        train(TrainData(ds.X, ds.y), expansion, cfg, ts=ts, on_row=rows.append)
    except KeyboardInterrupt:
        interrupted = True
    state, ex = ts.state, ts.expansion
    extra = {}
    if rvm:
        pruned = rvm_prune(ts.rvm, state, ex)
        state, ex = pruned.state, pruned.expansion
        extra["relevance_vectors"] = int(pruned.keep.size)
        print(f"relevance vectors: {pruned.keep.size}")
    extra["rejected_steps"] = int(ts.rejected)
    art = ModelArtifact.from_model(state, ex, args.likelihood, ds.standardization, frozen_hyper=frozen,
                                   iteration=ts.iteration, config=echo, extra=extra)
    art.save(args.out)
    if args.metrics:
        save_atomic(args.metrics, _metrics_text(echo, rows))
    if interrupted:
        print(f"interrupted at iteration {ts.iteration}; checkpoint written to {args.out}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def _load_for_prediction(args, need_targets):
    art = ModelArtifact.load(args.model)
    std = art.standardization()
    features_only = getattr(args, "features_only", False)
    if not args.data and not getattr(args, "demo", None):
        raise UsageError("--data (or --demo) is required")
    if getattr(args, "demo", None):
        if args.data:
            raise UsageError("give either --data or --demo, not both")
        X, y = datamod.DEMOS[args.demo](0)
    else:
        try:
            A = datamod.read_csv(args.data, args.has_header, args.delimiter)
        except OSError as exc:
            raise DataError(f"cannot read {args.data}: {exc}") from exc
        if features_only:
            X, y = A, None
        else:
            X, y = datamod.split_target(A, args.target_column)
    if need_targets and y is None:
        raise UsageError("evaluation needs a target column")
    if X.shape[1] != len(art.x_mean):
        raise DataError(f"data has {X.shape[1]} feature columns, the model expects {len(art.x_mean)}")
    Xs = std.transform_x(X)
    if y is not None and art.likelihood == LOGISTIC:
        y = datamod._labels(y)
    return art, Xs, y


def _predictions(art: ModelArtifact, Xs, latent, quad_points):
    state, ex = art.state(), art.expansion()
    noisy = art.likelihood == GAUSSIAN and not latent
    res = predict(state, ex, Xs, include_noise=noisy)
    out = {}
    if art.likelihood == LOGISTIC:
        out["mean"] = res.mean
        out["variance"] = res.variance
        out["probability"] = class_probability(res.mean, res.variance, quad_points)
        return out, res
    ys = art.y_std
    out["mean"] = art.y_mean + ys * res.mean
    out["variance"] = ys * ys * res.variance
    if ex.kind == "inducing_point":
        aug = predict_augmented(state, ex, Xs).augmented_variance
        if noisy:
            aug = aug + ex.hyper.noise_variance
        out["augmented_variance"] = ys * ys * aug
    return out, res


def cmd_predict(args) -> int:
    art, Xs, _ = _load_for_prediction(args, need_targets=False)
    out, _ = _predictions(art, Xs, args.latent, args.quad_points)
    cols = list(out)
    rows = [{c: out[c][a] for c in cols} for a in range(len(Xs))]
    text = _csv(cols, rows)
    if args.out:
        save_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    art, Xs, y = _load_for_prediction(args, need_targets=True)
    state, ex = art.state(), art.expansion()
    if art.likelihood == LOGISTIC:
        res = predict(state, ex, Xs)
        met = evaluate(res, y, LOGISTIC, quad_points=args.quad_points)
    else:
        res = predict(state, ex, Xs, include_noise=art.likelihood == GAUSSIAN)
        ys = art.y_std
        scaled = PredictiveResult(art.y_mean + ys * res.mean, ys * ys * res.variance)
        scale = ys * ex.hyper.laplace_scale if art.likelihood == LAPLACE else None
        met = evaluate(scaled, y, art.likelihood, scale=scale, quad_points=args.quad_points)
    sys.stdout.write("rmse,mnlp,accuracy\n")
    sys.stdout.write(f"{met.rmse:.6f},{met.mnlp:.6f},{met.accuracy:.6f}\n")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.replicates < 1:
        raise UsageError("--replicates must be positive")
    rows = run_all(args.replicates, args.seed)
    text = _csv(DIAG_COLUMNS, [r._asdict() for r in rows])
    if args.out:
        save_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_NUMERIC if failed(rows) else EXIT_OK


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate, "diagnose": cmd_diagnose}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnsupportedOperation as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, InvalidState, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
