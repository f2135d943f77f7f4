"""Data-analysis workflow: estimate heterogeneity, compare it with the transition
bounds, and score merged and ensemble learners on held-out studies."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .estimators import EnsembleWeights, RidgeConfig, ensemble_combine, fit_merged, fit_ols, fit_per_study, fit_ridge
from .exceptions import DegenerateError, InputError, TranspointError
from .model import RandomEffectsStructure, stack_studies
from .transition import tau_ls, tau_ls_interval, tau_ridge, tau_ridge_interval
from .varcomp import bootstrap_residuals, estimate_varcomp
from .weights import optimal_weights_ls, optimal_weights_ridge

log = logging.getLogger(__name__)

RECOMMENDATIONS = ("merge", "ensemble", "indeterminate")


def recommend(sigma_bar2, result):
    """``merge`` below the lower valid bound, ``ensemble`` above the upper one."""
    if result is None:
        return "indeterminate"
    return result.region(sigma_bar2)


def combine_recommendations(recs):
    """Single call across learners: kept only when every learner agrees."""
    recs = list(recs)
    if recs and all(r == recs[0] for r in recs):
        return recs[0]
    return "indeterminate"


@dataclass
class ArmScore:
    learner: str
    arm: str
    rmspe: float
    ci_lower: float
    ci_upper: float
    weights: Optional[list] = None


@dataclass
class AnalysisReport:
    """Everything the ``analyze`` command reports."""

    sigma_bar2_hat: float
    sigma_eps_hat2: float
    sigma_hat2: dict
    source: str
    tau_point: dict
    tau_interval: dict
    recommendations: dict
    recommendation: str
    scores: list = field(default_factory=list)
    tau_weights: str = "equal"
    notes: list = field(default_factory=list)

    def as_dict(self):
        return {
            "sigma_bar2_hat": self.sigma_bar2_hat,
            "sqrt_sigma_bar2_hat": float(np.sqrt(self.sigma_bar2_hat)),
            "sigma_eps_hat2": self.sigma_eps_hat2,
            "sigma_hat2": self.sigma_hat2,
            "variance_source": self.source,
            "tau_weights": self.tau_weights,
            "transition_point": {k: v.as_dict() for k, v in self.tau_point.items()},
            "transition_interval": {k: v.as_dict() for k, v in self.tau_interval.items()},
            "recommendation_by_learner": self.recommendations,
            "recommendation": self.recommendation,
            "test_rmspe": [s.__dict__ for s in self.scores],
            "notes": self.notes,
        }

    def csv_rows(self):
        rows = [("section", "learner", "name", "value", "lower", "upper")]
        rows.append(("heterogeneity", "", "sigma_bar2_hat", self.sigma_bar2_hat, "", ""))
        rows.append(("heterogeneity", "", "sigma_eps_hat2", self.sigma_eps_hat2, "", ""))
        for name, res in self.tau_point.items():
            rows.append(("tau_point", name, res.status, res.tau_lower, "", ""))
        for name, res in self.tau_interval.items():
            rows.append(("tau_interval", name, res.status, "", res.tau_lower, res.tau_upper))
        for name, rec in self.recommendations.items():
            rows.append(("recommendation", name, rec, "", "", ""))
        rows.append(("recommendation", "overall", self.recommendation, "", "", ""))
        for s in self.scores:
            rows.append(("test_rmspe", s.learner, s.arm, s.rmspe, s.ci_lower, s.ci_upper))
        return rows


def _beta_plugin(train, ridge_cfg):
    """Merged least squares when identifiable, merged ridge otherwise."""
    merged = stack_studies(train).data
    if merged.n > merged.p:
        try:
            return fit_ols(merged, kind="LS-merged").coefficients
        except DegenerateError:
            pass
    return fit_ridge(merged, ridge_cfg.lambda_merged, ridge_cfg.scaling, ridge_cfg.intercept, "Ridge-merged").coefficients


def analyze(
    train,
    test,
    re_columns,
    learner="both",
    lam=1.0,
    scaling="inverse-sd",
    intercept=True,
    weights="equal",
    B=1000,
    seed=0,
    sigma_bar2=None,
    sigma_eps2=None,
    names=None,
):
    """Run the full merge-or-ensemble analysis.

    Parameters
    ----------
    train, test : list of StudyData
        Training studies (at least two) and held-out studies (at least one).
    re_columns : sequence of int
        Columns that carry random effects.
    learner : {"ls", "ridge", "both"}
    weights : {"equal", "optimal"}
        Ensemble weights used for the transition bounds.
    sigma_bar2, sigma_eps2 : float, optional
        Known variance components. When both are given the moment estimates
        are skipped, which is the only route when some study has ``n_k <= p``.
    names : sequence of str, optional
        Column names for the per-coefficient variance table.
    """
    if learner not in ("ls", "ridge", "both"):
        raise InputError(f"unknown learner {learner!r}")
    if weights not in ("equal", "optimal"):
        raise InputError(f"unknown weights {weights!r}")
    learners = ("ls", "ridge") if learner == "both" else (learner,)
    train, test = list(train), list(test)
    if not test:
        raise InputError("at least one test study is required")
    K = len(train)
    cols = tuple(int(c) for c in re_columns)
    p = train[0].p
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    notes = []

    if (sigma_bar2 is None) != (sigma_eps2 is None):
        raise InputError("give both sigma_bar2 and sigma_eps2, or neither")
    if sigma_bar2 is None:
        if any(s.n <= p for s in train):
            raise DegenerateError(
                "moment estimates of the variance components need n_k > p in every study; "
                "pass known values with --sigma-bar2 and --sigma-eps2"
            )
        vc = estimate_varcomp(train, cols)
        var = vc.sigma_hat2[list(cols)]
        s_bar2, s_eps2 = vc.sigma_bar2_hat, vc.sigma_eps_hat2
        table = {names[j]: float(vc.sigma_hat2[j]) for j in range(p)}
        source = "estimated"
    else:
        if sigma_bar2 < 0 or sigma_eps2 <= 0:
            raise InputError("need sigma_bar2 >= 0 and sigma_eps2 > 0")
        var = np.full(len(cols), p * sigma_bar2 / len(cols))
        s_bar2, s_eps2 = float(sigma_bar2), float(sigma_eps2)
        table = {names[j]: float(var[cols.index(j)]) if j in cols else 0.0 for j in range(p)}
        source = "given"
    re_hat = RandomEffectsStructure(cols, var, groups=tuple((i,) for i in range(len(cols))))

    ridge_cfg = RidgeConfig.uniform(lam, K, scaling, intercept)
    X0 = stack_studies(test).data.X
    Y0 = stack_studies(test).data.Y
    beta_hat = _beta_plugin(train, ridge_cfg)
    ls_ok = all(s.n > p for s in train)

    opt = {}
    for name in learners:
        if name == "ls" and not ls_ok:
            continue
        try:
            if name == "ls":
                opt[name] = optimal_weights_ls(train, re_hat, s_eps2, X0)
            else:
                opt[name] = optimal_weights_ridge(train, re_hat, s_eps2, beta_hat, ridge_cfg, X0)
        except TranspointError as exc:
            notes.append(f"{name}: optimal weights unavailable ({exc})")

    points, intervals, recs = {}, {}, {}
    for name in learners:
        if name == "ls" and not ls_ok:
            notes.append("ls: skipped, some training study has n_k <= p")
            recs[name] = "indeterminate"
            continue
        if weights == "optimal" and name in opt:
            w = opt[name].weights
        else:
            w = EnsembleWeights.equal(K)
        if name == "ls":
            points[name] = tau_ls(train, cols, s_eps2, w, X0)
            intervals[name] = tau_ls_interval(train, re_hat, s_eps2, w, X0)
        else:
            points[name] = tau_ridge(train, cols, s_eps2, beta_hat, ridge_cfg, w, X0)
            intervals[name] = tau_ridge_interval(train, re_hat, s_eps2, beta_hat, ridge_cfg, w, X0)
        recs[name] = recommend(s_bar2, intervals[name])

    scores = []
    for name in learners:
        if name == "ls" and not ls_ok:
            continue
        cfg = None if name == "ls" else ridge_cfg
        arms = [("merged", fit_merged(train, name, cfg), None)]
        per = fit_per_study(train, name, cfg)
        eq = EnsembleWeights.equal(K)
        arms.append(("ensemble-equal", ensemble_combine(per, eq), eq.w))
        if name in opt:
            arms.append(("ensemble-optimal", ensemble_combine(per, opt[name].weights), opt[name].w))
        for arm, fit, w in arms:
            resid = Y0 - X0 @ fit.coefficients
            bs = bootstrap_residuals(resid, B=B, seed=seed)
            scores.append(
                ArmScore(name, arm, bs.rmspe, bs.ci_lower, bs.ci_upper, None if w is None else [float(x) for x in w])
            )

    return AnalysisReport(
        float(s_bar2), float(s_eps2), table, source, points, intervals, recs,
        combine_recommendations(recs.values()), scores, weights, notes,
    )
