"""Command-line front end: ``nhmsar {fit,simulate,bootstrap,stability,select}``.

Regime labels on the command line and in output files are 1-based; the
library uses 0-based labels internally.

Exit codes: 0 success, 2 bad input, 3 fit failure, 4 missing parameter file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from nhmsar import core, estimation as est, fileio
from nhmsar import gaussian_ar as ga
from nhmsar import rainfall as rf
from nhmsar.errors import AllStartsFailed, NhmsarError, OptimFailed

EXIT_OK, EXIT_INPUT, EXIT_FIT, EXIT_MISSING = 0, 2, 3, 4

_CONSTRAINTS = {"theta-doubleprime": "theta_double_prime", "theta-prime": "theta_prime"}
_TRANSFORMS = {"none": lambda v: v, "log10": np.log10, "log": np.log}


class InputError(Exception):
    pass


class MissingFile(Exception):
    pass


# --- helpers ---------------------------------------------------------------

def _load_series(args):
    try:
        sf = fileio.read_series(args.data)
    except FileNotFoundError:
        raise InputError(f"data file not found: {args.data}") from None
    except fileio.SeriesFormatError as exc:
        raise InputError(f"{args.data}: {exc}") from None
    return sf


def _transform(values, name):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _TRANSFORMS[name](np.asarray(values, float))
    if not np.all(np.isfinite(out)):
        raise InputError(f"transform {name} produced non-finite values")
    return out


def _observations(sf, family_name, transform):
    """Observation array in the layout the family expects."""
    if family_name == "rainfall":
        if transform != "none":
            raise InputError("--transform applies to univariate series only")
        try:
            return sf.rainfall_rows()
        except fileio.SeriesFormatError as exc:
            raise InputError(str(exc)) from None
    if sf.value is None:
        raise InputError("data file has no 'value' column")
    return _transform(sf.value, transform)


def _model_spec(args) -> dict:
    spec = {"family": args.family, "M": args.M, "s": args.s, "r": args.r}
    if args.family in ("nhmsar", "msar"):
        spec["constraint"] = "theta-doubleprime" if args.family == "msar" else args.constraint
        spec["pi_fixed"] = args.pi_fixed
    if args.family == "rainfall":
        spec.update(s=1, r=1, fix_mu=args.fix_mu)
    return spec


def family_from_spec(spec: dict):
    """Estimation family described by a model spec."""
    name = spec["family"]
    if name in ("nhmsar", "msar"):
        return est.GaussianArFamily(
            kind=name, num_regimes=int(spec["M"]), order=int(spec["s"]),
            trans_lag=int(spec["r"]), constraint=_CONSTRAINTS[spec["constraint"]],
            pi0=float(spec["pi_fixed"]),
        )
    if name == "rainfall":
        m = spec.get("covariate_dim")
        l = spec.get("num_stations")
        if m is None:
            raise InputError("rainfall spec lacks covariate_dim")
        sigma = spec.get("sigma_mat")
        return est.RainfallFamily(
            num_regimes=int(spec["M"]), num_stations=int(l), covariate_dim=int(m),
            sigma_mat=None if sigma is None else tuple(map(tuple, sigma)),
            fix_mu=bool(spec.get("fix_mu", False)),
        )
    raise InputError(f"family {name!r} has no estimation family")


def _em_config(args) -> est.EmConfig:
    return est.EmConfig(max_iter=args.max_iter, tol=args.tol, x0=args.x0 - 1, bic_n=args.bic_n)


def _cli_config(args) -> dict:
    skip = {"func", "command", "verbose", "out", "regime_probs"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def report_to_dict(report: est.FitReport, spec: dict, cli_config: dict) -> dict:
    if report.family == "setar":
        params = report.params
    else:
        params = report.params.to_dict()
    return {
        "schema": fileio.SCHEMA,
        "kind": "fit",
        "family": report.family,
        "model": spec,
        "params": params,
        "loglik": report.loglik,
        "loglik_trace": [float(v) for v in report.loglik_trace],
        "aic": report.aic,
        "bic": report.bic,
        "npar": report.npar,
        "n_obs": report.n_obs,
        "converged": report.converged,
        "iterations": report.iterations,
        "restart_index": report.restart_index,
        "start_logliks": report.start_logliks,
        "seed": report.seed,
        "config": {"cli": cli_config, "em": report.config},
        "data_digest": report.data_digest,
    }


def report_from_dict(d: dict) -> est.FitReport:
    """Rebuild a FitReport from its JSON form."""
    family = d["family"]
    params = d["params"] if family == "setar" else _params_from(d)
    return est.FitReport(
        family=family, params=params, loglik_trace=d["loglik_trace"],
        converged=d["converged"], iterations=d["iterations"],
        restart_index=d["restart_index"], npar=d["npar"], n_obs=d["n_obs"],
        seed=d.get("seed"), config=d.get("config", {}).get("em", {}),
        start_logliks=d.get("start_logliks", []), data_digest=d.get("data_digest", ""),
    )


def _params_from(doc: dict):
    family = doc["family"]
    try:
        if family in ("nhmsar", "msar"):
            return ga.GaussianArParams.from_dict(doc["params"])
        if family == "rainfall":
            return rf.RainfallNhmmParams.from_dict(doc["params"])
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"invalid parameters: {exc}") from None
    raise InputError(f"no parameter object for family {family!r}")


def load_param_doc(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"parameter file not found: {path}")
    try:
        doc = fileio.load_json(p)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno}") from None
    if not isinstance(doc, dict) or doc.get("schema") != fileio.SCHEMA:
        raise InputError(f"{path}: expected schema {fileio.SCHEMA!r}")
    if "family" not in doc or "params" not in doc:
        raise InputError(f"{path}: missing 'family' or 'params'")
    return doc


def params_document(family: str, model: dict, params) -> dict:
    """Standalone parameter file contents."""
    return {"schema": fileio.SCHEMA, "kind": "params", "family": family,
            "model": model, "params": params.to_dict()}


def _write_regime_probs(path, index, probs, comment):
    cols = {f"p{j + 1}": probs[:, j] for j in range(probs.shape[1])}
    fileio.write_series(path, index, cols, comment)


# --- subcommands -----------------------------------------------------------

def cmd_fit(args) -> int:
    sf = _load_series(args)
    obs = _observations(sf, args.family, args.transform)
    spec = _model_spec(args)
    cfg = _em_config(args)
    if args.family == "setar":
        report = est.setar_report(obs, order=args.s, delay=args.r, config=cfg)
        report.seed = args.seed
        probs = None
    else:
        if args.family == "rainfall":
            spec["covariate_dim"] = int(sf.z.shape[1])
            spec["num_stations"] = int(sf.r.shape[1])
        family = family_from_spec(spec)
        report = est.multi_start_fit(family, obs, n_starts=args.starts, seed=args.seed,
                                     config=cfg)
        _, sm = core.smooth(family.model(report.params), cfg.x0,
                            obs[:family.order], obs[family.order:])
        probs = sm.gamma
    doc = report_to_dict(report, spec, _cli_config(args))
    fileio.save_json(args.out, doc)
    if args.regime_probs:
        s = spec["s"]
        if probs is None:
            fit = ga.fit_setar(obs, args.s, args.r, threshold=report.params["threshold"])
            probs = np.eye(2)[fit.regimes(obs)]
        comment = "seed=%d config=%s" % (args.seed, json.dumps(_cli_config(args), sort_keys=True))
        _write_regime_probs(args.regime_probs, sf.index[s:], probs, comment)
    print(f"{report.family}: loglik {report.loglik:.4f} AIC {report.aic:.3f} "
          f"BIC {report.bic:.3f} npar {report.npar} converged {report.converged}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    doc = load_param_doc(args.params)
    params = _params_from(doc)
    x0 = args.x0 - 1
    comment = "seed=%d config=%s" % (args.seed, json.dumps(_cli_config(args), sort_keys=True))
    if doc["family"] == "rainfall":
        if args.data is None:
            raise InputError("rainfall simulation needs --data with covariate columns")
        sf = _load_series(args)
        if sf.z is None:
            raise InputError("data file has no z columns")
        xs, r = rf.simulate_rainfall(params, sf.z, x0, args.seed)
        cols = {f"z{j + 1}": sf.z[1:, j] for j in range(sf.z.shape[1])}
        cols.update({f"r{i + 1}": r[:, i] for i in range(r.shape[1])})
        cols["regime"] = [int(v) + 1 for v in xs]
        fileio.write_series(args.out, sf.index[1:], cols, comment)
        return EXIT_OK
    s = params.order
    if args.init is not None:
        try:
            y_init = [float(v) for v in args.init.split(",")]
        except ValueError:
            raise InputError("--init must be comma-separated numbers") from None
    elif args.data is not None:
        sf = _load_series(args)
        y_init = _observations(sf, doc["family"], args.transform)[:s]
    else:
        b = params.beta[x0]
        y_init = [b[0] / (1.0 - b[1:].sum())] * s
    if len(y_init) != s:
        raise InputError(f"need {s} initial values, got {len(y_init)}")
    xs, y = core.simulate(ga.GaussianArModel(params), x0, y_init, args.T, args.seed)
    cols = {"value": y, "regime": [int(v) + 1 for v in xs]}
    fileio.write_series(args.out, list(range(1, args.T + 1)), cols, comment)
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    doc = load_param_doc(args.params)
    if doc.get("kind") != "fit" or doc["family"] == "setar":
        raise InputError("bootstrap needs a fit report of an nhmsar, msar or rainfall model")
    sf = _load_series(args)
    transform = doc["config"]["cli"].get("transform", "none")
    obs = _observations(sf, doc["family"], transform)
    if est.data_digest(obs) != doc.get("data_digest"):
        raise InputError("data differ from those used for the fit")
    family = family_from_spec(doc["model"])
    fitted = report_from_dict(doc)
    cfg = est.EmConfig(**fitted.config) if fitted.config else _em_config(args)
    boot = est.parametric_bootstrap(family, fitted, obs, B=args.B, seed=args.seed,
                                    n_starts=args.starts, config=cfg)
    out = boot.to_dict()
    out.update(schema=fileio.SCHEMA, kind="bootstrap", family=doc["family"],
               point=[float(v) for v in fitted.params.to_vector()],
               config={"cli": _cli_config(args), "em": asdict(cfg)})
    fileio.save_json(args.out, out)
    for n, lo, hi in zip(boot.names, boot.ci_lower, boot.ci_upper):
        print(f"{n:>16s}  [{lo: .4g}, {hi: .4g}]")
    return EXIT_OK


def cmd_stability(args) -> int:
    doc = load_param_doc(args.params)
    if doc["family"] not in ("nhmsar", "msar"):
        raise InputError("stability applies to Gaussian AR families")
    params = _params_from(doc)
    basis = args.basis_regime - 1
    if not 0 <= basis < params.num_regimes:
        raise InputError(f"basis regime must lie in 1..{params.num_regimes}")
    rep = ga.stability_check(params, basis_regime=basis)
    out = rep.to_dict()
    out.update(schema=fileio.SCHEMA, kind="stability", basis_regime=args.basis_regime,
               config={"cli": _cli_config(args)}, seed=None)
    fileio.save_json(args.out, out)
    print(f"spectral radii {np.round(rep.spectral_radii, 4).tolist()} "
          f"driftc {rep.driftc_holds} driftb {rep.driftb_holds}")
    return EXIT_OK


def format_table(rows) -> str:
    head = f"{'model':<8s} {'loglik':>10s} {'AIC':>10s} {'BIC':>10s} {'npar':>5s} {'n':>5s}"
    lines = [head, "-" * len(head)]
    for r in rows:
        mark = ("*A" if r.best_aic else "  ") + ("*B" if r.best_bic else "  ")
        lines.append(f"{r.model:<8s} {r.loglik:10.3f} {r.aic:10.3f} {r.bic:10.3f} "
                     f"{r.npar:5d} {r.n_obs:5d} {mark}")
    lines.append("*A lowest AIC, *B lowest BIC")
    return "\n".join(lines) + "\n"


def cmd_select(args) -> int:
    fits = []
    for path in args.fits:
        doc = load_param_doc(path)
        if doc.get("kind") != "fit":
            raise InputError(f"{path} is not a fit report")
        fits.append(report_from_dict(doc))
    try:
        rows = est.model_select(fits)
    except NhmsarError as exc:
        raise InputError(str(exc)) from None
    cols = {k: [getattr(r, k) for r in rows]
            for k in ("loglik", "aic", "bic", "npar", "n_obs")}
    cols["best_aic"] = [int(r.best_aic) for r in rows]
    cols["best_bic"] = [int(r.best_bic) for r in rows]
    comment = "config=" + json.dumps(_cli_config(args), sort_keys=True)
    fileio.write_series(args.out, [r.model for r in rows], cols, comment)
    table = format_table(rows)
    Path(args.out).with_suffix(".txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nhmsar", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_opts(sp, required):
        sp.add_argument("--data", required=required, help="series CSV")
        sp.add_argument("--transform", choices=sorted(_TRANSFORMS), default="none")

    def em_opts(sp):
        sp.add_argument("--max-iter", type=int, default=500)
        sp.add_argument("--tol", type=float, default=1e-8)
        sp.add_argument("--x0", type=int, default=1, help="initial regime (1-based)")
        sp.add_argument("--bic-n", choices=("conditional", "full"), default="conditional")

    f = sub.add_parser("fit", help="fit a model by multi-start EM")
    data_opts(f, True)
    f.add_argument("--family", choices=("nhmsar", "msar", "setar", "rainfall"), default="nhmsar")
    f.add_argument("--M", type=int, default=2)
    f.add_argument("--s", type=int, default=2)
    f.add_argument("--r", type=int, default=2)
    f.add_argument("--pi-fixed", type=float, default=ga.PI_MACHINE_EPS)
    f.add_argument("--constraint", choices=sorted(_CONSTRAINTS), default="theta-doubleprime")
    f.add_argument("--fix-mu", action="store_true", help="rainfall: homogeneous chain")
    f.add_argument("--starts", type=int, default=20)
    f.add_argument("--seed", type=int, default=0)
    em_opts(f)
    f.add_argument("--out", required=True)
    f.add_argument("--regime-probs", help="CSV of smoothed regime probabilities")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="simulate from a parameter file")
    s.add_argument("--params", required=True)
    data_opts(s, False)
    s.add_argument("--init", help="comma-separated initial window")
    s.add_argument("--T", type=int, default=114)
    s.add_argument("--x0", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bootstrap", help="parametric bootstrap of a fit report")
    b.add_argument("--params", required=True)
    data_opts(b, True)
    b.add_argument("--B", type=int, default=200)
    b.add_argument("--starts", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    em_opts(b)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bootstrap)

    st = sub.add_parser("stability", help="spectral radii and drift conditions")
    st.add_argument("--params", required=True)
    st.add_argument("--basis-regime", type=int, default=2)
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_stability)

    se = sub.add_parser("select", help="AIC/BIC comparison of fit reports")
    se.add_argument("--fits", nargs="+", required=True)
    se.add_argument("--out", required=True)
    se.set_defaults(func=cmd_select)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except MissingFile as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (AllStartsFailed, OptimFailed) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except NhmsarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT if isinstance(exc, ValueError) else EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
