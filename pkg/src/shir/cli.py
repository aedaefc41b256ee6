"""Command-line interface.

Subcommands: local-fit (raw data in, envelope out), aggregate (envelopes in,
coefficient bundle + GIC table out), simulate (benchmark runs), evaluate
(bundle + held-out data in, prediction metrics out), serve-site (fit, then
serve the envelope over the one-shot socket protocol).

Exit codes: 0 success, 1 usage, 2 data error, 3 convergence error.
The SHIR_OUT_DIR environment variable supplies the default output directory.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .data import GammaSchedule, StudyData, check_summaries
from .errors import (ContractViolation, ConvergenceError, DataError,
                     DegenerateFoldError, EnvelopeError, SingularityError,
                     SiteError)
from .families import as_family
from .local import cross_validate_lambda, default_lambda_grid, summarize
from .transport import RunManifest, collect, serve_site, write_envelope
from .tuning import select_by_gic

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CONVERGENCE = 3

_CONV_ERRORS = (ConvergenceError, SingularityError)
_DATA_ERRORS = (ContractViolation, DataError, EnvelopeError, SiteError,
                DegenerateFoldError, FileNotFoundError, KeyError, ValueError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("SHIR_OUT_DIR") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_table(path, y_col=None):
    df = pd.read_csv(path, sep=None, engine="python")
    if y_col is None:
        y_col = df.columns[0]
    if y_col not in df.columns:
        raise DataError(f"response column {y_col!r} not in {path}")
    y = df[y_col].to_numpy(dtype=float)
    X = df.drop(columns=[y_col]).to_numpy(dtype=float)
    names = [c for c in df.columns if c != y_col]
    return X, y, names


def _study_from_csv(path, site_id, y_col=None) -> StudyData:
    X, y, _ = _load_table(path, y_col)
    design = np.column_stack([np.ones(X.shape[0]), X])
    return StudyData(design, y, site_id=site_id)


def _parse_grid(text):
    if text is None:
        return None
    return np.array([float(tok) for tok in text.split(",") if tok], dtype=float)


def _fit_site(args) -> tuple:
    data = _study_from_csv(args.data, args.site_id, args.y_col)
    family = as_family(args.family)
    grid = _parse_grid(args.lambda_grid)
    if grid is None:
        grid = default_lambda_grid(data, family)
    fit = cross_validate_lambda(data, family, K=args.folds, grid=grid,
                                seed=args.seed)
    return data, fit, summarize(data, fit, family)


def cmd_local_fit(args) -> int:
    out = _out_dir(args)
    data, fit, summary = _fit_site(args)
    path = write_envelope(summary, out / f"{args.site_id}.shirsum")
    print(f"wrote {path} (lambda_m={fit.lambda_m:.6g}, "
          f"nonzero={int(np.count_nonzero(fit.beta[1:]))})")
    return EXIT_OK


def cmd_serve_site(args) -> int:
    from .transport import SummaryServer

    _, _, summary = _fit_site(args)
    server = SummaryServer(summary, host=args.host, port=args.port)
    host, port = server.address
    print(f"serving {args.site_id} on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return EXIT_OK


def bundle_frame(bundle, site_ids) -> pd.DataFrame:
    cols = {"term": np.arange(bundle.p), "mu": bundle.mu}
    for m, sid in enumerate(site_ids):
        cols[f"alpha:{sid}"] = bundle.alpha[m]
    for m, sid in enumerate(site_ids):
        cols[f"beta:{sid}"] = bundle.beta[m]
    return pd.DataFrame(cols)


def read_bundle(path):
    df = pd.read_csv(path, sep="\t")
    mu = df["mu"].to_numpy(dtype=float)
    alphas = {c.split(":", 1)[1]: df[c].to_numpy(dtype=float)
              for c in df.columns if c.startswith("alpha:")}
    return mu, alphas


def cmd_aggregate(args) -> int:
    if args.manifest:
        manifest = RunManifest.from_json(args.manifest)
        if args.schedule:
            manifest.schedule = args.schedule
    else:
        if not args.envelopes:
            sys.stderr.write("error: give envelope paths or --manifest\n")
            return EXIT_USAGE
        manifest = RunManifest(sites=list(args.envelopes),
                               schedule=args.schedule or "bic")
    summaries = check_summaries(collect(manifest))
    best, table = select_by_gic(
        summaries,
        lambda_grid=_parse_grid(args.lambda_grid) if args.lambda_grid else
        (np.asarray(manifest.lambda_grid, dtype=float)
         if manifest.lambda_grid else None),
        lambda_g_grid=_parse_grid(args.lambda_g_grid) if args.lambda_g_grid else
        (np.asarray(manifest.lambda_g_grid, dtype=float)
         if manifest.lambda_g_grid else None),
        schedule=GammaSchedule(manifest.schedule),
        return_table=True)
    out = _out_dir(args)
    site_ids = [s.site_id for s in summaries]
    bundle_frame(best.bundle, site_ids).to_csv(out / "bundle.tsv", sep="\t",
                                               index=False)
    rows = pd.DataFrame([{"lambda": r.lam, "lambda_g": r.lambda_g,
                          "deviance": r.deviance, "df": r.df, "gic": r.gic,
                          "selected": r is best} for r in table])
    rows.to_csv(out / "gic_table.tsv", sep="\t", index=False)
    print(f"aggregated {len(summaries)} sites: lambda={best.lam:.6g} "
          f"lambda_g={best.lambda_g:.6g} gic={best.gic:.6g}")
    print(f"wrote {out / 'bundle.tsv'} and {out / 'gic_table.tsv'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simulate import SimSetting, run_benchmark

    setting = SimSetting(mechanism=args.mechanism, n_sites=args.sites,
                         dim=args.dim, n_per_site=args.n,
                         replications=args.reps, seed=args.seed)
    out = _out_dir(args)
    methods = [tok for tok in args.methods.split(",") if tok]
    run_benchmark(setting, methods=methods, folds=args.folds,
                  schedule=GammaSchedule(args.schedule or "bic"),
                  out_dir=out, progress=args.progress)
    print(f"wrote {out / 'metrics_long.tsv'} and {out / 'metrics_summary.tsv'}")
    return EXIT_OK


def _auc(y, score):
    order = np.argsort(score, kind="mergesort")
    ranks = np.empty(len(score))
    ranks[order] = np.arange(1, len(score) + 1)
    # midranks for ties
    for val in np.unique(score):
        mask = score == val
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        return float("nan")
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def cmd_evaluate(args) -> int:
    mu, alphas = read_bundle(args.bundle)
    X, y, _ = _load_table(args.data, args.y_col)
    design = np.column_stack([np.ones(X.shape[0]), X])
    if design.shape[1] != mu.shape[0]:
        raise DataError(
            f"bundle has p={mu.shape[0]}, data gives p={design.shape[1]}")
    beta = mu.copy()
    if args.site:
        if args.site not in alphas:
            raise DataError(f"site {args.site!r} not in bundle")
        beta = beta + alphas[args.site]
    eta = design @ beta
    family = as_family(args.family)
    lines = []
    if family.value == "logistic":
        from .simulate import _expit

        prob = _expit(eta)
        eps = 1e-12
        lines.append(("log_loss", float(np.mean(
            -(y * np.log(prob + eps) + (1 - y) * np.log(1 - prob + eps))))))
        lines.append(("brier", float(np.mean((y - prob) ** 2))))
        lines.append(("auc", _auc(y, prob)))
    else:
        resid = y - eta
        mse = float(np.mean(resid ** 2))
        lines.append(("mse", mse))
        var = float(np.var(y))
        lines.append(("r2", 1.0 - mse / var if var > 0 else float("nan")))
    text = "\n".join(f"{k}\t{v:.6g}" for k, v in lines) + "\n"
    if args.out and args.out != "-":
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        print(f"wrote {path}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="shir", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", default=None,
                        help="output directory (default: $SHIR_OUT_DIR or .)")
        sp.add_argument("--seed", type=int, default=0)

    fit = sub.add_parser("local-fit", help="fit one site, write its envelope")
    fit.add_argument("--data", required=True, help="CSV/TSV with the response "
                     "in the first column (or --y-col)")
    fit.add_argument("--y-col", default=None)
    fit.add_argument("--family", default="logistic",
                     choices=["logistic", "squared-error", "linear"])
    fit.add_argument("--folds", type=int, default=10)
    fit.add_argument("--site-id", required=True)
    fit.add_argument("--lambda-grid", default=None,
                     help="comma-separated values (default: automatic path)")
    common(fit)
    fit.set_defaults(func=cmd_local_fit)

    srv = sub.add_parser("serve-site", help="fit one site and serve its envelope")
    for a in ("--data", "--site-id"):
        srv.add_argument(a, required=True)
    srv.add_argument("--y-col", default=None)
    srv.add_argument("--family", default="logistic",
                     choices=["logistic", "squared-error", "linear"])
    srv.add_argument("--folds", type=int, default=10)
    srv.add_argument("--lambda-grid", default=None)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=0)
    common(srv)
    srv.set_defaults(func=cmd_serve_site)

    agg = sub.add_parser("aggregate", help="combine envelopes into a model")
    agg.add_argument("envelopes", nargs="*", help="envelope files")
    agg.add_argument("--manifest", default=None, help="run manifest JSON")
    agg.add_argument("--schedule", default=None,
                     choices=["aic", "bic", "mbic", "ric"])
    agg.add_argument("--lambda-grid", default=None)
    agg.add_argument("--lambda-g-grid", default=None)
    common(agg)
    agg.set_defaults(func=cmd_aggregate)

    sim = sub.add_parser("simulate", help="run the synthetic benchmark")
    sim.add_argument("--mechanism", default="i",
                     choices=["i", "ii", "iii", "i-strong", "ii-weak",
                              "iii-dense-misspec"])
    sim.add_argument("--sites", type=int, default=4)
    sim.add_argument("--dim", type=int, default=100)
    sim.add_argument("--n", type=int, default=400)
    sim.add_argument("--reps", type=int, default=20)
    sim.add_argument("--methods", default="ipd,shir,debias,sma")
    sim.add_argument("--folds", type=int, default=10)
    sim.add_argument("--schedule", default="bic",
                     choices=["aic", "bic", "mbic", "ric"])
    sim.add_argument("--progress", action="store_true")
    common(sim)
    sim.set_defaults(func=cmd_simulate)

    ev = sub.add_parser("evaluate", help="score a bundle on held-out data")
    ev.add_argument("--bundle", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--y-col", default=None)
    ev.add_argument("--family", default="logistic",
                    choices=["logistic", "squared-error", "linear"])
    ev.add_argument("--site", default=None,
                    help="score mu + alpha for this site (default: mu only)")
    common(ev)
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONV_ERRORS as err:
        sys.stderr.write(f"convergence error: {err}\n")
        return EXIT_CONVERGENCE
    except _DATA_ERRORS as err:
        sys.stderr.write(f"data error: {err}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
