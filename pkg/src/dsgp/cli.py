"""Command-line workflows: train, predict, gradcheck, bench, classify.

Single binary with subcommands.  Every run prints its fully-resolved
configuration, and every output CSV starts with the same key=value pairs as
``#`` comment lines, so any result file can be reproduced from its own header.

Exit codes: 0 success, 1 runtime/model error, 2 usage error.

With ``--backend procs`` the coordinator spawns one worker subprocess per
partition; the ``DSGP_WORKER`` environment variable overrides the worker
command line (see ``dsgp.engine.ProcessBackend``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from . import bench as bench_mod
from .bound import assemble_gradients, local_grads, local_terms, reduce_partials
from .data import load_csv, take_head
from .kernel import InducingInputs, KernelParams, LatentPosterior
from .model import (
    classify_by_density,
    evaluate,
    load_model,
    new_gplvm,
    new_regression,
    predict,
    save_model,
    train,
)
from .optim import grad_check

logger = logging.getLogger(__name__)

GRADCHECK_THRESHOLD = 1e-4
GRADCHECK_GROUPS = ("Z", "log_ard", "log_sv", "log_beta", "mu", "log_S")


# ---------------------------------------------------------------------------
# Resolved-config plumbing


def _fmt_value(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _config_pairs(command, **kw):
    """Ordered (key, value) pairs: command first, then sorted flags."""
    return [("command", command)] + sorted(kw.items())


def _echo_config(pairs):
    print("config: " + " ".join(f"{k}={_fmt_value(v)}" for k, v in pairs))


def _comment_header(pairs):
    return [f"# {k}={_fmt_value(v)}" for k, v in pairs]


def _write_table(path, pairs, header, rows):
    """CSV with the resolved config echoed as leading comment lines."""
    with open(path, "w", newline="") as fh:
        for line in _comment_header(pairs):
            fh.write(line + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _split_columns(spec):
    """Parse a comma-separated column list (names or zero-based indices)."""
    if not spec:
        return []
    return [c.strip() for c in spec.split(",") if c.strip()]


def _all_columns(path, header):
    """Column names of a CSV file (positional indices when headerless)."""
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if header:
                return [c.strip() for c in row]
            return [str(i) for i in range(len(row))]
    raise ValueError(f"{path}: no rows")


# ---------------------------------------------------------------------------
# train


def cmd_train(args, parser):
    if args.mode == "reg" and not args.inputs:
        parser.error("--mode reg requires --inputs")
    if args.mode == "lvm" and args.latent_dim is None:
        parser.error("--mode lvm requires --latent-dim")
    if args.restarts < 1:
        parser.error("--restarts must be >= 1")
    inputs = _split_columns(args.inputs)
    outputs = _split_columns(args.outputs)
    if not outputs:
        names = _all_columns(args.data, args.header)
        outputs = [c for c in names if c not in inputs]
    trace_path = args.trace or args.checkpoint + ".trace.csv"

    pairs = _config_pairs(
        "train",
        data=args.data,
        mode=args.mode,
        inputs=inputs,
        outputs=outputs,
        latent_dim=args.latent_dim,
        inducing=args.inducing,
        optimizer=args.optimizer,
        backend=args.backend,
        workers=args.workers,
        max_evals=args.max_evals,
        evals_per_step=args.evals_per_step,
        strategy=args.strategy,
        local_steps=args.local_steps,
        seed=args.seed,
        restarts=args.restarts,
        init_noise=args.init_noise,
        limit=args.limit,
        header=args.header,
        checkpoint=args.checkpoint,
        trace=trace_path,
    )
    _echo_config(pairs)

    ds = load_csv(
        args.data,
        input_columns=inputs if args.mode == "reg" else (),
        output_columns=outputs,
        header=args.header,
    )
    if args.limit:
        ds = take_head(ds, args.limit)

    best = None
    for r in range(args.restarts):
        seed_r = args.seed + r
        if args.mode == "reg":
            state = new_regression(ds.X, ds.Y, args.inducing, seed=seed_r)
        else:
            # the first restart keeps the deterministic PCA start; later ones
            # jitter it so the restarts explore distinct basins
            state = new_gplvm(
                ds.Y, args.latent_dim, args.inducing, seed=seed_r,
                init_noise=0.0 if r == 0 else args.init_noise,
            )
        state, trace = train(
            state,
            backend=args.backend,
            workers=args.workers,
            method=args.optimizer,
            max_evals=args.max_evals,
            evals_per_step=args.evals_per_step,
            mode=args.strategy,
            local_steps=args.local_steps if args.strategy == "alternating" else 0,
        )
        final = evaluate(state)
        print(
            f"restart={r} seed={seed_r} final_bound={final!r} evals={trace.n_evals}"
        )
        if best is None or final > best[0]:
            best = (final, r, seed_r, state, trace)

    final, r, seed_r, state, trace = best
    save_model(state, args.checkpoint)
    rows = [
        (i, repr(b), a, s)
        for i, (b, a, s) in enumerate(
            zip(trace.bounds, trace.accepted, trace.statuses)
        )
    ]
    _write_table(
        trace_path,
        pairs + [("best_restart", r), ("best_seed", seed_r)],
        ["step", "bound", "accepted", "status"],
        rows,
    )
    print(f"final_bound={final!r}")
    print(f"checkpoint written: {args.checkpoint}")
    print(f"trace written: {trace_path}")
    return 0


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args, parser):
    if not args.inputs:
        parser.error("predict requires --inputs")
    inputs = _split_columns(args.inputs)
    targets = _split_columns(args.targets)
    pairs = _config_pairs(
        "predict",
        checkpoint=args.checkpoint,
        data=args.data,
        inputs=inputs,
        targets=targets,
        include_noise=args.include_noise,
        limit=args.limit,
        header=args.header,
        out=args.out,
    )
    _echo_config(pairs)

    state = load_model(args.checkpoint)
    ds = load_csv(
        args.data,
        input_columns=inputs,
        output_columns=targets or inputs,
        header=args.header,
    )
    if args.limit:
        ds = take_head(ds, args.limit)
    pred = predict(state, ds.X, include_noise=args.include_noise)

    header = [f"mean_{j}" for j in range(state.d)] + ["variance"]
    rows = [
        [repr(float(v)) for v in pred.mean[i]] + [repr(float(pred.variance[i, 0]))]
        for i in range(pred.mean.shape[0])
    ]
    _write_table(args.out, pairs, header, rows)
    print(f"predictions written: {args.out} ({pred.mean.shape[0]} rows)")

    if targets:
        if ds.Y.shape[1] != state.d:
            raise ValueError(
                f"{ds.Y.shape[1]} target columns but model has {state.d} outputs"
            )
        rmse = float(np.sqrt(np.mean((pred.mean - ds.Y) ** 2)))
        print(f"rmse={rmse!r}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_instance(seed, n, m, q, d, latent):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((n, d))
    means = rng.standard_normal((n, q))
    if latent:
        variances = np.exp(rng.normal(-2.0, 0.3, (n, q)))
        lat = LatentPosterior(means=means, variances=variances)
    else:
        lat = LatentPosterior.point_mass(means)
    Z = rng.standard_normal((m, q)) * 1.2
    kern = KernelParams(
        signal_variance=1.3,
        ard_weights=np.exp(rng.normal(0.0, 0.2, q)),
        noise_precision=2.0,
    )
    return Y, lat, InducingInputs(Z), kern


def run_gradcheck(
    seed=0, n=12, m=4, q=2, d=2, latent=True, inject=None, h=1e-5,
    threshold=GRADCHECK_THRESHOLD,
):
    """Finite-difference validation of every parameter group's gradient.

    Returns (all_pass, rows) where each row is (group, max_rel_err, verdict);
    ``max_rel_err`` is None for groups skipped in frozen (regression) mode.
    ``inject`` names a group whose analytic gradient is sign-flipped, a
    debugging aid that must make exactly that group fail.
    """
    Y, lat0, Zi0, kern0 = _gradcheck_instance(seed, n, m, q, d, latent)

    def full(latents, Zi, kern):
        parts = local_terms(Y, latents, Zi, kern)
        totals = reduce_partials([parts], Zi.m, d)
        report = assemble_gradients(totals, [(Y, latents)], Zi, kern, n, d)
        if latents.frozen:
            local = (None, None)
        else:
            local = local_grads(Y, latents, Zi, kern, report.accum)
        return report.value, report.grad_global, local

    def fg_factory(group):
        def fg(x):
            lat, Zi, kern = lat0, Zi0, kern0
            if group == "Z":
                Zi = InducingInputs(x.reshape(m, q))
            elif group == "log_ard":
                kern = kern0.replace(ard_weights=np.exp(x))
            elif group == "log_sv":
                kern = kern0.replace(signal_variance=float(np.exp(x[0])))
            elif group == "log_beta":
                kern = kern0.replace(noise_precision=float(np.exp(x[0])))
            elif group == "mu":
                lat = LatentPosterior(x.reshape(n, q), lat0.variances)
            elif group == "log_S":
                lat = LatentPosterior(lat0.means, np.exp(x.reshape(n, q)))
            value, gg, local = full(lat, Zi, kern)
            g = {
                "Z": lambda: gg.Z.ravel(),
                "log_ard": lambda: gg.log_ard_weights,
                "log_sv": lambda: np.array([gg.log_signal_variance]),
                "log_beta": lambda: np.array([gg.log_noise_precision]),
                "mu": lambda: local[0].ravel(),
                "log_S": lambda: local[1].ravel(),
            }[group]()
            if group == inject:
                g = -g
            return value, g

        return fg

    x0 = {
        "Z": Zi0.Z.ravel(),
        "log_ard": np.log(kern0.ard_weights),
        "log_sv": np.array([np.log(kern0.signal_variance)]),
        "log_beta": np.array([np.log(kern0.noise_precision)]),
        "mu": lat0.means.ravel(),
        "log_S": None if lat0.frozen else np.log(lat0.variances).ravel(),
    }

    rows = []
    all_pass = True
    for group in GRADCHECK_GROUPS:
        if lat0.frozen and group in ("mu", "log_S"):
            rows.append((group, None, "frozen/skipped"))
            continue
        err, _, _ = grad_check(fg_factory(group), x0[group], h=h)
        ok = err < threshold
        all_pass = all_pass and ok
        rows.append((group, err, "PASS" if ok else "FAIL"))
    return all_pass, rows


def cmd_gradcheck(args, parser):
    latent = args.mode == "lvm"
    pairs = _config_pairs(
        "gradcheck",
        mode=args.mode,
        seed=args.seed,
        n=args.n,
        inducing=args.inducing,
        latent_dim=args.latent_dim,
        output_dim=args.output_dim,
        step=args.step,
        threshold=GRADCHECK_THRESHOLD,
        inject_sign_flip=args.inject_sign_flip,
    )
    _echo_config(pairs)
    all_pass, rows = run_gradcheck(
        seed=args.seed,
        n=args.n,
        m=args.inducing,
        q=args.latent_dim,
        d=args.output_dim,
        latent=latent,
        inject=args.inject_sign_flip,
        h=args.step,
    )
    for group, err, verdict in rows:
        if err is None:
            print(f"group {group:<9} {verdict}")
        else:
            print(f"group {group:<9} max_rel_err={err:.3e} {verdict}")
    print(f"gradcheck: {'PASS' if all_pass else 'FAIL'} "
          f"(threshold {GRADCHECK_THRESHOLD:g})")
    return 0 if all_pass else 1


# ---------------------------------------------------------------------------
# bench


def _int_list(spec):
    return tuple(int(x) for x in _split_columns(spec))


def cmd_bench(args, parser):
    backend = args.backend or ("serial" if args.kind == "load" else "threads")
    if args.kind == "strong":
        counts = _int_list(args.workers or "1,2,4")
        pairs = _config_pairs(
            "bench", kind="strong", n=args.n, inducing=args.inducing,
            workers=counts, iters=args.iters, seed=args.seed,
            backend=backend, out=args.out,
        )
        _echo_config(pairs)
        report = bench_mod.bench_strong(
            n=args.n, worker_counts=counts, iters=args.iters,
            m=args.inducing, seed=args.seed, backend=backend,
        )
    elif args.kind == "weak":
        factors = _int_list(args.scale_factors or "1,2,4")
        pairs = _config_pairs(
            "bench", kind="weak", base_n=args.base_n,
            base_workers=args.base_workers, scale_factors=factors,
            inducing=args.inducing, iters=args.iters, seed=args.seed,
            backend=backend, out=args.out,
        )
        _echo_config(pairs)
        report = bench_mod.bench_weak(
            base_n=args.base_n, base_workers=args.base_workers,
            scale_factors=factors, iters=args.iters, m=args.inducing,
            seed=args.seed, backend=backend,
        )
    else:
        workers = int(args.workers or "4")
        pairs = _config_pairs(
            "bench", kind="load", n=args.n, workers=workers,
            inducing=args.inducing, iters=args.iters, seed=args.seed,
            backend=backend, unbalanced=args.unbalanced, out=args.out,
        )
        _echo_config(pairs)
        report = bench_mod.bench_load(
            n=args.n, workers=workers, iters=args.iters, m=args.inducing,
            seed=args.seed, backend=backend, unbalanced=args.unbalanced,
        )
    report.save_csv(args.out)
    print(report.table())
    print(f"report written: {args.out}")
    return 0


# ---------------------------------------------------------------------------
# classify


def cmd_classify(args, parser):
    if not args.model:
        parser.error("classify requires at least one --model")
    columns = _split_columns(args.columns)
    labels = args.labels
    if not columns:
        names = _all_columns(args.data, args.header)
        columns = [c for c in names if c != labels]
    pairs = _config_pairs(
        "classify",
        data=args.data,
        models=list(args.model),
        columns=columns,
        labels=labels,
        max_evals=args.max_evals,
        limit=args.limit,
        header=args.header,
        out=args.out,
    )
    _echo_config(pairs)

    models = [load_model(p) for p in args.model]
    if len(models) == 1:
        logger.warning(
            "single class supplied: every row will be assigned class 0"
        )

    out_cols = columns + ([labels] if labels else [])
    ds = load_csv(args.data, output_columns=out_cols, header=args.header)
    if args.limit:
        ds = take_head(ds, args.limit)
    Y = ds.Y[:, : len(columns)]
    y_true = ds.Y[:, -1].astype(int) if labels else None

    header = ["row"] + [f"score_{c}" for c in range(len(models))] + ["predicted"]
    rows = []
    predicted = np.empty(Y.shape[0], dtype=int)
    for i in range(Y.shape[0]):
        label, scores = classify_by_density(models, Y[i], max_evals=args.max_evals)
        predicted[i] = label
        rows.append([i] + [repr(float(s)) for s in scores] + [label])
    _write_table(args.out, pairs, header, rows)
    print(f"scores written: {args.out} ({Y.shape[0]} rows)")

    if y_true is not None:
        correct = int(np.sum(predicted == y_true))
        accuracy = correct / Y.shape[0]
        print(f"accuracy={accuracy!r} ({correct}/{Y.shape[0]})")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dsgp",
        description=(
            "Distributed variational inference for sparse GP regression and "
            "latent variable models"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    p.add_argument("data", help="CSV dataset path")
    p.add_argument("--mode", choices=("reg", "lvm"), required=True)
    p.add_argument("--inputs", help="comma-separated input columns (reg)")
    p.add_argument("--outputs", help="comma-separated output columns "
                   "(default: all non-input columns)")
    p.add_argument("--latent-dim", type=int, help="latent dimension (lvm)")
    p.add_argument("--inducing", type=int, default=10, metavar="M")
    p.add_argument("--optimizer", choices=("lbfgs", "scg"), default="lbfgs")
    p.add_argument("--backend", choices=("serial", "threads", "procs"),
                   default="serial")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-evals", type=int, default=200)
    p.add_argument("--evals-per-step", type=int, default=25)
    p.add_argument("--strategy", choices=("joint", "alternating"),
                   default="joint",
                   help="optimize globals and locals jointly, or alternate "
                   "global steps with fixed-rate local updates")
    p.add_argument("--local-steps", type=int, default=1,
                   help="local ascent steps per alternating round")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=1,
                   help="independent seeds; the largest final bound wins")
    p.add_argument("--init-noise", type=float, default=1.0,
                   help="latent-init noise std for lvm restarts after the "
                   "first (the first keeps the deterministic PCA start)")
    p.add_argument("--limit", type=int, help="use only the first N rows")
    p.add_argument("--header", action=argparse.BooleanOptionalAction,
                   default=True, help="first CSV row holds column names")
    p.add_argument("--checkpoint", required=True, help="output model path")
    p.add_argument("--trace", help="bound-trace CSV path "
                   "(default: <checkpoint>.trace.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data", help="CSV with input columns")
    p.add_argument("--inputs", required=True,
                   help="comma-separated input columns")
    p.add_argument("--targets", help="ground-truth columns; prints RMSE")
    p.add_argument("--include-noise", action="store_true",
                   help="add observation noise variance to the predictive "
                   "variance")
    p.add_argument("--limit", type=int, help="use only the first N rows")
    p.add_argument("--header", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient validation")
    p.add_argument("--mode", choices=("reg", "lvm"), default="lvm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=12)
    p.add_argument("--inducing", type=int, default=4, metavar="M")
    p.add_argument("--latent-dim", type=int, default=2)
    p.add_argument("--output-dim", type=int, default=2)
    p.add_argument("--step", type=float, default=1e-5,
                   help="central-difference step size")
    p.add_argument("--inject-sign-flip", choices=GRADCHECK_GROUPS,
                   help="debug: flip one group's analytic gradient; "
                   "gradcheck must then fail on that group")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="scaling and load-balance benchmarks")
    p.add_argument("kind", choices=("strong", "weak", "load"))
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--base-n", type=int, default=500)
    p.add_argument("--base-workers", type=int, default=1)
    p.add_argument("--workers", help="strong: comma list of counts; "
                   "load: single count")
    p.add_argument("--scale-factors", help="weak: comma list of factors")
    p.add_argument("--inducing", type=int, default=10, metavar="M")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=("serial", "threads", "procs"),
                   help="default: threads for strong/weak, serial for load")
    p.add_argument("--unbalanced", action="store_true",
                   help="load: skew the first partition to ~60%% of the rows")
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("classify",
                       help="density classification with per-class models")
    p.add_argument("data", help="CSV with test rows")
    p.add_argument("--model", action="append", required=True,
                   help="checkpoint path; repeat once per class "
                   "(class index = order given)")
    p.add_argument("--columns", help="comma-separated observation columns "
                   "(default: all non-label columns)")
    p.add_argument("--labels", help="ground-truth label column; "
                   "prints accuracy")
    p.add_argument("--max-evals", type=int, default=150)
    p.add_argument("--limit", type=int, help="use only the first N rows")
    p.add_argument("--header", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--out", required=True, help="scores CSV path")
    p.set_defaults(func=cmd_classify)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, parser)
    except SystemExit:
        raise
    except Exception as exc:  # CLI boundary: report and exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
