"""Command-line interface: CSV/JSON ingestion, fit/predict/simulate/diagnose.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
All floats serialize via repr (shortest round-trip decimal), so model
files and result CSVs are byte-stable across runs.
"""

import argparse
import csv
import dataclasses
import json
import sys

import numpy as np

from .diagnostics import brown_forsythe, log_squared_residuals, quartile_groups
from .ecm import fit as run_fit
from .errors import DataError, NumericalError
from .model_core import DataSet, FitConfig, FitResult, FitState, PriorConfig, validate_dataset
from .prediction import predict_intervals
from .simulate import ExperimentResult, SimConfig, run_experiment

__all__ = ["load_dataset", "main"]

MODEL_FORMAT = "hprobe-model-v1"

_RESULT_COLUMNS = ["method", "replicate", "seed", "rmse", "mad", "tpr", "fdr", "ecp", "mean_pi_length", "error"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        raise _UsageError(message)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _read_csv(path: str):
    """Header row plus a float matrix; positions in error messages are
    1-based data rows."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            rows = []
            for i, row in enumerate(reader, start=1):
                if len(row) != len(header):
                    raise DataError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
                rows.append(row)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    out = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows, start=1):
        for j, cell in enumerate(row):
            try:
                out[i - 1, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i}, column '{header[j]}'") from None
    return header, out


def load_dataset(path_y: str, path_x: str, path_v_mean: str, path_v_var: str | None = None) -> DataSet:
    """Read the outcome, sparse design, and non-sparse designs from CSV.

    v_var defaults to v_mean when omitted.
    """
    _, y = _read_csv(path_y)
    if y.shape[1] != 1:
        raise DataError(f"{path_y}: outcome file must have exactly one column, got {y.shape[1]}")
    _, x = _read_csv(path_x)
    _, vm = _read_csv(path_v_mean)
    vv = None
    if path_v_var is not None:
        _, vv = _read_csv(path_v_var)
    return validate_dataset(y[:, 0], x, vm, vv)


# ---------------------------------------------------------------------------
# model file round trip


def _model_to_dict(result: FitResult, standardize: dict | None) -> dict:
    st = result.state
    return {
        "format": MODEL_FORMAT,
        "state": {
            "beta": st.beta.tolist(),
            "s2": st.s2.tolist(),
            "p_incl": st.p_incl.tolist(),
            "phi": st.phi.tolist(),
            "alpha0": st.alpha0,
            "omega": st.omega.tolist(),
            "w0": st.w0.tolist(),
            "w0_var": st.w0_var.tolist(),
            "t": st.t,
        },
        "psi": result.psi.tolist(),
        "sigma2": result.sigma2.tolist(),
        "converged": result.converged,
        "trace": [[t, cc] for t, cc in result.trace],
        "null_model": result.null_model,
        "prob_clamp_count": result.prob_clamp_count,
        "intercept_flags": list(result.intercept_flags),
        "standardize": standardize,
    }


def _model_from_dict(doc: dict) -> tuple[FitResult, dict | None]:
    if doc.get("format") != MODEL_FORMAT:
        raise DataError(f"unrecognized model file format {doc.get('format')!r}")
    s = doc["state"]
    state = FitState(
        beta=np.asarray(s["beta"], dtype=float),
        s2=np.asarray(s["s2"], dtype=float),
        p_incl=np.asarray(s["p_incl"], dtype=float),
        phi=np.asarray(s["phi"], dtype=float),
        alpha0=float(s["alpha0"]),
        omega=np.asarray(s["omega"], dtype=float),
        w0=np.asarray(s["w0"], dtype=float),
        w0_var=np.asarray(s["w0_var"], dtype=float),
        t=int(s["t"]),
    )
    result = FitResult(
        state=state,
        psi=np.asarray(doc["psi"], dtype=float),
        sigma2=np.asarray(doc["sigma2"], dtype=float),
        converged=bool(doc["converged"]),
        trace=[(int(t), float(cc)) for t, cc in doc["trace"]],
        null_model=bool(doc["null_model"]),
        prob_clamp_count=int(doc["prob_clamp_count"]),
        intercept_flags=tuple(doc["intercept_flags"]),
    )
    return result, doc.get("standardize")


def save_model(path: str, result: FitResult, standardize: dict | None = None) -> None:
    text = json.dumps(_model_to_dict(result, standardize), indent=1, sort_keys=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


def load_model(path: str) -> tuple[FitResult, dict | None]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    return _model_from_dict(doc)


# ---------------------------------------------------------------------------
# config files


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def _split_fit_config(doc: dict) -> tuple[FitConfig, PriorConfig]:
    fit_fields = {f.name for f in dataclasses.fields(FitConfig)}
    prior_fields = {f.name for f in dataclasses.fields(PriorConfig)}
    unknown = set(doc) - fit_fields - prior_fields
    if unknown:
        raise DataError(f"unknown fit-config keys: {sorted(unknown)}")
    return (
        FitConfig(**{k: v for k, v in doc.items() if k in fit_fields}),
        PriorConfig(**{k: v for k, v in doc.items() if k in prior_fields}),
    )


def _sim_config(doc: dict) -> SimConfig:
    fields = {f.name for f in dataclasses.fields(SimConfig)}
    unknown = set(doc) - fields
    if unknown:
        raise DataError(f"unknown simulate-config keys: {sorted(unknown)}")
    return SimConfig(**doc)


# ---------------------------------------------------------------------------
# subcommands


def _standardize_columns(x: np.ndarray):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0.0] = 1.0
    return (x - mean) / scale, {"mean": mean.tolist(), "scale": scale.tolist()}


def _apply_standardize(x: np.ndarray, spec: dict) -> np.ndarray:
    mean = np.asarray(spec["mean"], dtype=float)
    scale = np.asarray(spec["scale"], dtype=float)
    if mean.shape[0] != x.shape[1]:
        raise DataError(
            f"model was fit on {mean.shape[0]} standardized predictors, new data has {x.shape[1]}"
        )
    return (x - mean) / scale


def _cmd_fit(args) -> int:
    data = load_dataset(args.y, args.x, args.v_mean, args.v_var)
    fit_cfg, prior_cfg = _split_fit_config(_load_json(args.config)) if args.config else (FitConfig(), PriorConfig())
    if args.seed is not None:
        fit_cfg = dataclasses.replace(fit_cfg, seed=args.seed)

    standardize = None
    if args.standardize:
        x_std, standardize = _standardize_columns(data.x)
        data = validate_dataset(data.y, x_std, data.v_mean, data.v_var)

    result = run_fit(data, fit_cfg, prior_cfg)
    save_model(args.out, result, standardize)

    summary_path = args.out + ".summary.csv"
    st = result.state
    selected = np.flatnonzero(st.p_incl > 0.5)
    with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("k,beta,p_incl\n")
        for k in selected:
            fh.write(f"{k},{_fmt(float(st.beta[k]))},{_fmt(float(st.p_incl[k]))}\n")
    print(f"model written to {args.out}; {selected.size} selected predictors in {summary_path}")
    if not result.converged:
        print("warning: fit did not converge within max_iterations", file=sys.stderr)
    return 0


def _cmd_predict(args) -> int:
    result, standardize = load_model(args.model)
    _, x = _read_csv(args.x)
    _, v = _read_csv(args.v_mean)
    vv = None
    if args.v_var is not None:
        _, vv = _read_csv(args.v_var)
    if standardize is not None:
        x = _apply_standardize(x, standardize)
    y_hat, lower, upper, _, sigma2_new = predict_intervals(result, x, v, args.level, v_var_new=vv)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("y_hat,lower,upper,sigma2_new\n")
        for row in zip(y_hat, lower, upper, sigma2_new):
            fh.write(",".join(_fmt(float(c)) for c in row) + "\n")
    print(f"{y_hat.shape[0]} predictions written to {args.out}")
    return 0


def result_csv_text(result: ExperimentResult) -> str:
    """Deterministic CSV rendering of an experiment table.

    Wall-clock runtimes are intentionally left out so identical configs
    produce identical bytes.
    """
    lines = [",".join(_RESULT_COLUMNS)]
    rows = sorted(result.rows, key=lambda r: (r.replicate, r.method))
    for r in rows:
        lines.append(
            ",".join(
                [
                    r.method,
                    str(r.replicate),
                    str(r.seed),
                    _fmt(r.rmse),
                    _fmt(r.mad),
                    _fmt(r.tpr),
                    _fmt(r.fdr),
                    _fmt(r.ecp),
                    _fmt(r.mean_pi_length),
                    r.error.replace(",", ";"),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _cmd_simulate(args) -> int:
    cfg = _sim_config(_load_json(args.config))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    result = run_experiment(cfg, n_jobs=max(1, args.threads))
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result_csv_text(result))
    n_err = sum(1 for r in result.rows if r.error)
    print(f"{len(result.rows)} rows written to {args.out} ({n_err} fit errors)")
    return 0


def _cmd_diagnose(args) -> int:
    data = load_dataset(args.y, args.x, args.v_mean, args.v_var)
    result, standardize = load_model(args.model)
    if standardize is not None:
        data = validate_dataset(
            data.y, _apply_standardize(data.x, standardize), data.v_mean, data.v_var
        )

    headers = {}
    for path, arr in ((args.v_var or args.v_mean, data.v_var), (args.v_mean, data.v_mean), (args.x, data.x)):
        hdr, _ = _read_csv(path)
        offset = arr.shape[1] - len(hdr)  # injected intercept shifts indices
        for j, name in enumerate(hdr):
            headers.setdefault(name, arr[:, j + offset])
    if args.candidate not in headers:
        raise DataError(f"candidate column {args.candidate!r} not found in any input file")
    candidate = headers[args.candidate]

    lsr = log_squared_residuals(result, data)
    uniq = np.unique(candidate)
    groups = candidate.astype(int) if uniq.size <= 10 else quartile_groups(candidate)
    stat, pval = brown_forsythe(lsr, groups)

    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{args.candidate},log_sq_residual\n")
        for c, r in zip(candidate, lsr):
            fh.write(f"{_fmt(float(c))},{_fmt(float(r))}\n")
    print(f"brown_forsythe_statistic={_fmt(stat)}")
    print(f"p_value={_fmt(pval)}")
    print(f"diagnostics written to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="hprobe", description="Heteroscedastic sparse regression: fit, predict, simulate, diagnose.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the model to CSV data")
    p_fit.add_argument("--y", required=True)
    p_fit.add_argument("--x", required=True)
    p_fit.add_argument("--v-mean", dest="v_mean", required=True)
    p_fit.add_argument("--v-var", dest="v_var", default=None)
    p_fit.add_argument("--config", default=None, help="JSON with fit/prior settings")
    p_fit.add_argument("--out", required=True, help="model JSON path")
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--standardize", action="store_true", help="standardize X columns before fitting")
    p_fit.set_defaults(func=_cmd_fit)

    p_pred = sub.add_parser("predict", help="prediction intervals for new rows")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--x", required=True)
    p_pred.add_argument("--v-mean", dest="v_mean", required=True)
    p_pred.add_argument("--v-var", dest="v_var", default=None)
    p_pred.add_argument("--level", type=float, default=0.95)
    p_pred.add_argument("--out", required=True)
    p_pred.set_defaults(func=_cmd_predict)

    p_sim = sub.add_parser("simulate", help="run a replicated experiment")
    p_sim.add_argument("--config", required=True, help="JSON with generator settings")
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--threads", type=int, default=1)
    p_sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_sim.set_defaults(func=_cmd_simulate)

    p_diag = sub.add_parser("diagnose", help="residual heteroscedasticity checks")
    p_diag.add_argument("--model", required=True)
    p_diag.add_argument("--y", required=True)
    p_diag.add_argument("--x", required=True)
    p_diag.add_argument("--v-mean", dest="v_mean", required=True)
    p_diag.add_argument("--v-var", dest="v_var", default=None)
    p_diag.add_argument("--candidate", required=True, help="column name to test against")
    p_diag.add_argument("--out", required=True)
    p_diag.set_defaults(func=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
