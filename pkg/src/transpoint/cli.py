"""Command-line interface.

Exit codes: 0 success, 2 input error, 3 numerical degeneracy,
4 no valid transition point, 5 too few training studies.
"""

import argparse
import csv
import io as _io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import analyze
from .estimators import EnsembleWeights, RidgeConfig
from .exceptions import ConditionViolation, DegenerateError, InputError, TranspointError
from .io import (
    INTERCEPT,
    MANIFEST_SCHEMA,
    SIMULATION_SCHEMA,
    DatasetManifest,
    export_synthetic,
    generator_from_dict,
    load_sweep_config,
    load_toml,
    print_schema,
    top_k_correlated,
)
from .model import RandomEffectsStructure, generate_study
from .simulation import THREADS_ENV, run_sweep
from .transition import DEGENERATE, tau_ls, tau_ls_interval, tau_ridge, tau_ridge_interval
from .varcomp import estimate_varcomp
from .weights import optimal_transition_point, optimal_weights_ls, optimal_weights_ridge

log = logging.getLogger("transpoint")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _dump_csv(rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in row])
    return buf.getvalue()


def _emit(args, name, obj, rows):
    text = _dump_json(obj) if args.format == "json" else _dump_csv(rows)
    sys.stdout.write(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.{args.format}").write_text(text, encoding="utf-8")


def _fmt_tau(t):
    if t is None:
        return "none"
    return f"{t:.6g} (sqrt {np.sqrt(max(t, 0.0)):.6g})"


def _tau_rows(results):
    rows = [("learner", "kind", "status", "tau_lower", "tau_upper", "sqrt_tau_lower", "sqrt_tau_upper")]
    for res in results:
        lo, hi = res.sqrt_bounds
        rows.append((res.learner, res.kind, res.status, res.tau_lower, res.tau_upper, lo, hi))
    return rows


def _load_manifest(args):
    man = DatasetManifest.load(args.manifest)
    train, test = man.load_studies()
    if getattr(args, "top_k_correlated", None):
        man = man.select(top_k_correlated(train, man, args.top_k_correlated))
        train, test = man.load_studies()
    return man, train, test


# ------------------------------------------------------------------ commands


def cmd_analyze(args):
    man, train, test = _load_manifest(args)
    rep = analyze(
        train,
        test,
        man.re_columns,
        learner=args.learner,
        lam=args.lam,
        scaling=args.scaling,
        intercept=man.intercept,
        weights=args.weights,
        B=args.bootstrap,
        seed=args.seed,
        sigma_bar2=args.sigma_bar2,
        sigma_eps2=args.sigma_eps2,
        names=man.columns,
    )
    d = rep.as_dict()
    d["predictors"] = list(man.predictors)
    d["random_effects"] = list(man.random_effects)
    _emit(args, "analysis", d, rep.csv_rows())
    return 0


def cmd_varcomp(args):
    man, train, _ = _load_manifest(args)
    vc = estimate_varcomp(train, man.re_columns)
    names = man.columns
    rows = [("coefficient", "random_effect", "sigma_hat2", "q_statistic")]
    table = []
    for j, name in enumerate(names):
        has = j in man.re_columns
        q = float(vc.q_statistics[j])
        rows.append((name, has, float(vc.sigma_hat2[j]), q if np.isfinite(q) else None))
        table.append({
            "coefficient": name,
            "random_effect": has,
            "sigma_hat2": float(vc.sigma_hat2[j]),
            "q_statistic": q if np.isfinite(q) else None,
            "estimates": vc.coefficients[:, j].tolist(),
            "sampling_variances": vc.sampling_variances[:, j].tolist(),
        })
    rows.append(("sigma_eps_hat2", "", vc.sigma_eps_hat2, None))
    rows.append(("sigma_bar2_hat", "", vc.sigma_bar2_hat, None))
    obj = {
        "sigma_eps_hat2": vc.sigma_eps_hat2,
        "sigma_bar2_hat": vc.sigma_bar2_hat,
        "sqrt_sigma_bar2_hat": float(np.sqrt(vc.sigma_bar2_hat)),
        "study_ids": [s.id for s in train],
        "coefficients": table,
    }
    _emit(args, "varcomp", obj, rows)
    return 0


def _learners(args):
    return ("ls", "ridge") if args.learner == "both" else (args.learner,)


def _config_setting(args):
    """Generator, ridge config and grouped RE structure from a simulation config."""
    data = load_toml(args.config, SIMULATION_SCHEMA)
    gen = generator_from_dict(data, args.seed)
    rd = data.get("ridge", {})
    lam = args.lam if args.lam is not None else rd.get("lambda", 1.0)
    scaling = args.scaling or rd.get("scaling", "inverse-sd")
    lam_k = rd.get("lambda_per_study", [lam] * gen.n_train) if args.lam is None else [lam] * gen.n_train
    ridge_cfg = RidgeConfig(lam, tuple(lam_k), scaling, data["design"].get("intercept", False))
    return data, gen, ridge_cfg


def cmd_transition(args):
    learners = _learners(args)
    results, extra = [], {}
    if args.manifest:
        man, train, test = _load_manifest(args)
        rep = analyze(
            train, test, man.re_columns, learner=args.learner, lam=args.lam if args.lam is not None else 1.0,
            scaling=args.scaling or "inverse-sd", intercept=man.intercept, weights=args.weights,
            B=100, seed=args.seed, sigma_bar2=args.sigma_bar2, sigma_eps2=args.sigma_eps2,
        )
        for name in learners:
            for part in (rep.tau_point, rep.tau_interval):
                if name in part:
                    results.append(part[name])
        extra["sigma_bar2_hat"] = rep.sigma_bar2_hat
        extra["recommendation"] = rep.recommendation
    elif args.config:
        data, gen, ridge_cfg = _config_setting(args)
        train = [s for s in _zero_studies(gen)]
        cols = gen.re.re_columns
        X0 = gen.X0
        w = EnsembleWeights.equal(gen.n_train)
        re = gen.re
        for name in learners:
            if name == "ls":
                results.append(tau_ls(train, cols, gen.sigma_eps2, w, X0))
                results.append(tau_ls_interval(train, re, gen.sigma_eps2, w, X0))
            else:
                results.append(tau_ridge(train, cols, gen.sigma_eps2, gen.beta, ridge_cfg, w, X0))
                results.append(tau_ridge_interval(train, re, gen.sigma_eps2, gen.beta, ridge_cfg, w, X0))
            if args.weights == "optimal":
                try:
                    extra[f"optimal_weights_tau_{name}"] = optimal_transition_point(
                        train, cols, gen.sigma_eps2, X0, name, gen.beta, ridge_cfg
                    )
                except ConditionViolation as exc:
                    extra[f"optimal_weights_tau_{name}"] = None
                    log.warning("%s: %s", name, exc)
    else:
        raise InputError("give --manifest or --config")

    obj = {"results": [r.as_dict() for r in results], **extra}
    for r in results:
        if r.status == DEGENERATE:
            obj.setdefault("diagnosis", []).append(
                f"{r.learner} {r.kind}: degenerate, merged and ensemble errors respond identically to heterogeneity"
            )
    _emit(args, "transition", obj, _tau_rows(results))
    for r in results:
        print(f"# {r.learner} {r.kind}: tau_lower={_fmt_tau(r.tau_lower)} tau_upper={_fmt_tau(r.tau_upper)} "
              f"[{r.status}]", file=sys.stderr)
    if not any(r.valid for r in results):
        if any(r.status == DEGENERATE for r in results):
            return DegenerateError.exit_code
        return ConditionViolation.exit_code
    return 0


def _zero_studies(gen):
    # outcomes are irrelevant for the closed forms; only designs matter
    from .model import StudyData

    return [StudyData(D, np.zeros(D.shape[0]), id=f"train{k + 1}") for k, D in enumerate(gen.train_designs)]


def cmd_weights(args):
    learners = _learners(args)
    out, rows = {}, [("learner", "study", "weight")]
    if args.manifest:
        man, train, test = _load_manifest(args)
        rep = analyze(
            train, test, man.re_columns, learner=args.learner, lam=args.lam if args.lam is not None else 1.0,
            scaling=args.scaling or "inverse-sd", intercept=man.intercept, weights="optimal", B=100,
            seed=args.seed, sigma_bar2=args.sigma_bar2, sigma_eps2=args.sigma_eps2,
        )
        ids = [s.id for s in train]
        for sc in rep.scores:
            if sc.arm == "ensemble-optimal":
                out[sc.learner] = {"weights": dict(zip(ids, sc.weights)), "source": "plug-in estimates"}
                rows += [(sc.learner, i, w) for i, w in zip(ids, sc.weights)]
    elif args.config:
        if args.sigma_bar2 is None:
            raise InputError("--sigma-bar2 is required with --config")
        data, gen, ridge_cfg = _config_setting(args)
        train = _zero_studies(gen)
        alloc = data["effects"].get("allocation")
        re = RandomEffectsStructure.from_sigma_bar2(gen.re.re_columns, gen.p, args.sigma_bar2, alloc)
        ids = [s.id for s in train]
        for name in learners:
            if name == "ls":
                sol = optimal_weights_ls(train, re, gen.sigma_eps2, gen.X0)
            else:
                sol = optimal_weights_ridge(train, re, gen.sigma_eps2, gen.beta, ridge_cfg, gen.X0)
            eq = EnsembleWeights.equal(len(train)).w
            out[name] = {
                "weights": dict(zip(ids, sol.w.tolist())),
                "objective": sol.objective,
                "equal_weights_objective": float(eq @ sol.C @ eq),
                "kkt_residual": sol.kkt_residual,
                "has_negative": sol.has_negative,
            }
            rows += [(name, i, float(w)) for i, w in zip(ids, sol.w)]
    else:
        raise InputError("give --manifest or --config")
    _emit(args, "weights", out, rows)
    return 0


def cmd_simulate(args):
    cfg = load_sweep_config(args.config, seed=args.seed, replicates=args.replicates, threads=args.threads,
                            ridge_lambda=args.lam)
    res = run_sweep(cfg)
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(res.to_csv(), encoding="utf-8")
    (out / "sweep.json").write_text(res.to_json(), encoding="utf-8")
    for name in cfg.learners:
        th = res.theoretical[name]
        emp = res.empirical[name]
        if th.kind == "point":
            print(f"theoretical tau_{name} = {_fmt_tau(th.tau_lower)} [{th.status}]")
        else:
            print(f"theoretical tau_{name} in [{_fmt_tau(th.tau_lower)}, {_fmt_tau(th.tau_upper)}] [{th.status}]")
        if emp.detected:
            print(f"empirical crossing {name} = {emp.estimate:.6g}, interval [{emp.lower:.6g}, {emp.upper:.6g}]")
        else:
            print(f"empirical crossing {name}: none detected ({emp.prevailing} prevailed)")
    bad = [pt for pt in res.points if not all(pt.concordance().values())]
    print(f"self-check: {len(res.points) - len(bad)}/{len(res.points)} grid points within 3 SE of the closed form")
    print(f"wrote {out / 'sweep.csv'} and {out / 'sweep.json'}")
    return 0


def cmd_gen(args):
    data = load_toml(args.config, SIMULATION_SCHEMA)
    gen = generator_from_dict(data, args.seed)
    alloc = data["effects"].get("allocation")
    re = RandomEffectsStructure.from_sigma_bar2(gen.re.re_columns, gen.p, args.sigma_bar2, alloc)
    gen = gen.with_re(re)
    studies = [generate_study(gen, i, args.replicate) for i in range(len(gen.designs))]
    intercept = data["design"].get("intercept", False)
    n_pred = gen.p - (1 if intercept else 0)
    preds = tuple(f"x{j + 1}" for j in range(n_pred))
    names = ((INTERCEPT,) if intercept else ()) + preds
    re_names = [names[c] for c in gen.re.re_columns]
    path = export_synthetic(
        args.out_dir or ".", studies[: gen.n_train], studies[gen.n_train :], preds, intercept, re_names
    )
    print(f"wrote {path}")
    return 0


# ------------------------------------------------------------------ parser


def _common(p, manifest=True, config=False):
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out-dir", default=None, help="also write the output here")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--print-schema", action="store_true", help="print the input file schema and exit")


def _modeling(p, default_learner="both"):
    p.add_argument("--learner", choices=("ls", "ridge", "both"), default=default_learner)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="ridge penalty (same for all fits)")
    p.add_argument("--scaling", choices=("none", "inverse-sd"), default=None)
    p.add_argument("--weights", choices=("equal", "optimal"), default="equal")
    p.add_argument("--sigma-bar2", type=float, default=None)
    p.add_argument("--sigma-eps2", type=float, default=None)
    p.add_argument("--top-k-correlated", type=int, default=None,
                   help="keep the k predictors most correlated with the outcome in the training studies")


def build_parser():
    ap = argparse.ArgumentParser(prog="transpoint", description="Merge or ensemble multi-study regressions.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate heterogeneity, compare with the transition bounds, score learners")
    a.add_argument("manifest", nargs="?")
    _common(a)
    _modeling(a)
    a.add_argument("--bootstrap", type=int, default=1000, help="bootstrap resamples for RMSPE intervals")
    a.set_defaults(func=cmd_analyze, schema=MANIFEST_SCHEMA)

    s = sub.add_parser("simulate", help="Monte Carlo sweep over heterogeneity")
    s.add_argument("config", nargs="?")
    _common(s)
    s.add_argument("--replicates", type=int, default=None)
    s.add_argument("--threads", type=int, default=None, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    s.add_argument("--lambda", dest="lam", type=float, default=None)
    s.set_defaults(func=cmd_simulate, schema=SIMULATION_SCHEMA)

    for name, func, helptext in (
        ("transition", cmd_transition, "transition points and intervals"),
        ("weights", cmd_weights, "optimal ensemble weights"),
    ):
        t = sub.add_parser(name, help=helptext)
        src = t.add_mutually_exclusive_group()
        src.add_argument("--manifest")
        src.add_argument("--config")
        _common(t)
        _modeling(t)
        t.set_defaults(func=func, schema=MANIFEST_SCHEMA)

    v = sub.add_parser("varcomp", help="variance component estimates")
    v.add_argument("manifest", nargs="?")
    _common(v)
    v.add_argument("--top-k-correlated", type=int, default=None)
    v.set_defaults(func=cmd_varcomp, schema=MANIFEST_SCHEMA)

    g = sub.add_parser("gen", help="write a synthetic dataset (CSV files plus manifest)")
    g.add_argument("config", nargs="?")
    _common(g)
    g.add_argument("--sigma-bar2", type=float, default=0.0)
    g.add_argument("--replicate", type=int, default=0)
    g.set_defaults(func=cmd_gen, schema=SIMULATION_SCHEMA)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    logging.captureWarnings(True)
    if args.print_schema:
        sys.stdout.write(print_schema(args.schema) + "\n")
        return 0
    need = {"analyze": "manifest", "varcomp": "manifest", "simulate": "config", "gen": "config"}.get(args.command)
    if need and getattr(args, need) is None:
        print(f"error: {args.command} needs a {need} file", file=sys.stderr)
        return InputError.exit_code
    if args.seed is None:
        args.seed = 0 if args.command in ("analyze", "transition", "weights") else None
    if args.command == "analyze" and args.lam is None:
        args.lam = 1.0
    if args.command == "analyze" and args.scaling is None:
        args.scaling = "inverse-sd"
    try:
        return args.func(args)
    except TranspointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
