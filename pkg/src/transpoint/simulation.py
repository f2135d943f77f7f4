"""Monte Carlo sweeps over heterogeneity, checked against the closed forms.

Every learner here is linear in the outcomes, so each replicate reduces to
applying precomputed hat maps to freshly drawn outcome vectors. Replicates are
processed in fixed-size chunks; each chunk only depends on its replicate
indices, so the result is the same for any number of worker threads.
"""

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import error_theory as et
from ._linalg import SPDSolver
from .estimators import EnsembleWeights, RidgeConfig, penalized_gram
from .exceptions import InputError, SimulationError, TranspointError
from .model import GeneratorConfig, RandomEffectsStructure, StudyData, draw_effects
from .transition import transition_from_components
from .varcomp import estimate_varcomp
from .weights import _solve_quadratic, optimal_transition_point

log = logging.getLogger(__name__)

THREADS_ENV = "TRANSPOINT_THREADS"
LEARNERS = ("ls", "ridge")
WEIGHTINGS = ("equal", "optimal-oracle", "optimal-estimated")
MAX_EXCLUDED = 0.01


def default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class SweepConfig:
    """What to simulate.

    ``allocation`` gives the relative share of the variance budget
    ``p * sigma_bar2`` for each random effect (uniform when omitted); the
    grouping used for theoretical bounds comes from ``generator.re.groups``.
    """

    generator: GeneratorConfig
    sigma_bar2_grid: tuple
    replicates: int = 1000
    learners: tuple = ("ls",)
    weights: str = "equal"
    ridge_cfg: Optional[RidgeConfig] = None
    allocation: Optional[tuple] = None
    mspe: str = "excess"
    threads: Optional[int] = None
    chunk_size: int = 250
    n_boot: int = 200

    def __post_init__(self):
        grid = tuple(float(s) for s in self.sigma_bar2_grid)
        if not grid:
            raise InputError("sigma_bar2_grid is empty")
        if any(s < 0 or not np.isfinite(s) for s in grid):
            raise InputError("sigma_bar2_grid must be finite and non-negative")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise InputError("sigma_bar2_grid must be strictly ascending")
        if self.replicates < 100:
            raise InputError(f"replicates must be at least 100, got {self.replicates}")
        learners = tuple(self.learners)
        if not learners or any(l not in LEARNERS for l in learners):
            raise InputError(f"learners must be a non-empty subset of {LEARNERS}")
        if "ridge" in learners and self.ridge_cfg is None:
            raise InputError("ridge learner needs ridge_cfg")
        if self.weights not in WEIGHTINGS:
            raise InputError(f"weights must be one of {WEIGHTINGS}")
        if self.mspe not in ("excess", "raw"):
            raise InputError("mspe must be 'excess' or 'raw'")
        if self.mspe == "raw" and self.generator.n_train == len(self.generator.designs):
            raise InputError("raw MSPE needs test designs")
        if self.generator.n_train == len(self.generator.designs):
            raise InputError("generator config has no test designs")
        if self.ridge_cfg is not None:
            self.ridge_cfg.check_K(self.generator.n_train)
        if self.chunk_size < 1:
            raise InputError("chunk_size must be positive")
        object.__setattr__(self, "sigma_bar2_grid", grid)
        object.__setattr__(self, "learners", learners)
        if self.allocation is not None:
            object.__setattr__(self, "allocation", tuple(float(a) for a in self.allocation))

    def variances_at(self, sigma_bar2):
        g = self.generator
        re = RandomEffectsStructure.from_sigma_bar2(
            g.re.re_columns, g.p, sigma_bar2, self.allocation
        )
        return re.variances


@dataclass(frozen=True)
class PointSummary:
    sigma_bar2: float
    learner: str
    mspe_merged: float
    se_merged: float
    mspe_ensemble: float
    se_ensemble: float
    diff: float
    se_diff: float
    log_ratio: float
    analytic_merged: Optional[float] = None
    analytic_ensemble: Optional[float] = None
    n_used: int = 0

    @property
    def analytic_diff(self):
        if self.analytic_merged is None:
            return None
        return self.analytic_ensemble - self.analytic_merged

    def concordance(self, k=3.0):
        """``{arm: within k SEs}`` for merged, ensemble, and their difference."""
        if self.analytic_merged is None:
            return {}
        return {
            "merged": abs(self.mspe_merged - self.analytic_merged) <= k * self.se_merged,
            "ensemble": abs(self.mspe_ensemble - self.analytic_ensemble) <= k * self.se_ensemble,
            "diff": abs(self.diff - self.analytic_diff) <= k * self.se_diff,
        }


@dataclass(frozen=True)
class EmpiricalTransition:
    estimate: Optional[float]
    lower: Optional[float]
    upper: Optional[float]
    prevailing: Optional[str] = None
    boot_found: float = 0.0

    @property
    def detected(self):
        return self.estimate is not None

    def covers(self, value):
        return self.detected and self.lower <= value <= self.upper


@dataclass
class SweepResult:
    config: SweepConfig
    points: list
    errors: dict
    theoretical: dict
    optimal_tau: dict = field(default_factory=dict)
    excluded: int = 0
    empirical: dict = field(default_factory=dict)

    def curve(self, learner):
        return [pt for pt in self.points if pt.learner == learner]

    @property
    def concordant(self):
        return all(all(pt.concordance().values()) for pt in self.points)

    def csv_rows(self):
        rows = []
        for pt in self.points:
            rows.append((pt.sigma_bar2, pt.learner, "merged", pt.mspe_merged, pt.se_merged, pt.log_ratio))
            rows.append((pt.sigma_bar2, pt.learner, "ensemble", pt.mspe_ensemble, pt.se_ensemble, pt.log_ratio))
        return rows

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("sigma_bar2", "learner", "arm", "mspe", "se", "log_ratio"))
        for row in self.csv_rows():
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def summary(self):
        c = self.config
        out = {
            "replicates": c.replicates,
            "excluded": self.excluded,
            "weights": c.weights,
            "mspe": c.mspe,
            "seed": c.generator.seed,
            "sigma_bar2_grid": list(c.sigma_bar2_grid),
            "learners": {},
        }
        for learner in c.learners:
            th = self.theoretical.get(learner)
            emp = self.empirical.get(learner)
            curve = self.curve(learner)
            out["learners"][learner] = {
                "theoretical": th.as_dict() if th is not None else None,
                "optimal_weights_tau": self.optimal_tau.get(learner),
                "empirical_transition": None
                if emp is None
                else {
                    "estimate": emp.estimate,
                    "lower": emp.lower,
                    "upper": emp.upper,
                    "prevailing": emp.prevailing,
                    "bootstrap_found": emp.boot_found,
                },
                "points": [
                    {
                        "sigma_bar2": pt.sigma_bar2,
                        "mspe_merged": pt.mspe_merged,
                        "se_merged": pt.se_merged,
                        "mspe_ensemble": pt.mspe_ensemble,
                        "se_ensemble": pt.se_ensemble,
                        "diff": pt.diff,
                        "se_diff": pt.se_diff,
                        "log_ratio": pt.log_ratio,
                        "analytic_merged": pt.analytic_merged,
                        "analytic_ensemble": pt.analytic_ensemble,
                        "self_check": pt.concordance(),
                    }
                    for pt in curve
                ],
            }
        return out

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True, default=_json_default) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


# ------------------------------------------------------------------ internals


class _Learner:
    """Hat maps and analytic components for one learner on fixed designs."""

    def __init__(self, name, gen, ridge_cfg):
        self.name = name
        train = gen.train_designs
        X = np.vstack(train)
        cols = gen.re.re_columns
        X0 = gen.X0
        if name == "ls":
            Mm, Ms = X.T @ X, [D.T @ D for D in train]
        else:
            Mm, _ = penalized_gram(X, ridge_cfg.lambda_merged, ridge_cfg.scaling, ridge_cfg.intercept)
            Ms = [
                penalized_gram(D, lam, ridge_cfg.scaling, ridge_cfg.intercept)[0]
                for D, lam in zip(train, ridge_cfg.lambda_per_study)
            ]
        self.H_merged = SPDSolver(Mm, what="merged Gram matrix").solve(X.T).T  # N x p
        self.H_study = [SPDSolver(M, what=f"Gram matrix of study {k}").solve(D.T).T for k, (M, D) in enumerate(zip(Ms, train))]
        studies = [StudyData(D, np.zeros(D.shape[0]), id=f"s{k}") for k, D in enumerate(train)]
        if name == "ls":
            self.merged = et.ls_merged_components(studies, cols, X0)
            self.parts = [et.ls_study_components(s, cols, X0) for s in studies]
        else:
            self.merged = et.ridge_merged_components(studies, cols, gen.beta, ridge_cfg, X0)
            self.parts = et.ridge_study_components_all(studies, cols, gen.beta, ridge_cfg, X0)
        self.studies = studies

    def weights(self, variances, sigma_eps2, mode):
        K = len(self.parts)
        if mode == "equal":
            return EnsembleWeights.equal(K).w
        v = np.array([c.variance_term(variances, sigma_eps2) for c in self.parts])
        B = np.column_stack([c.bias for c in self.parts])
        return _solve_quadratic(np.diag(v) + B.T @ B).w

    def analytic(self, variances, sigma_eps2, w):
        ens = et.combine_study_components(self.parts, w)
        return self.merged.excess(variances, sigma_eps2), ens.excess(variances, sigma_eps2)


def _estimated_weights(learner, gen, ridge_cfg, Y_rows, offsets):
    """Plug-in optimal weights from one replicate's training data."""
    cols = gen.re.re_columns
    studies = [
        StudyData(D, Y_rows[offsets[k] : offsets[k + 1]], id=f"s{k}")
        for k, D in enumerate(gen.train_designs)
    ]
    vc = estimate_varcomp(studies, cols)
    var = vc.sigma_hat2[list(cols)]
    beta_hat = vc.coefficients.mean(axis=0)
    if learner.name == "ls":
        parts = learner.parts
        v = np.array([c.variance_term(var, vc.sigma_eps_hat2) for c in parts])
        return (1.0 / v) / np.sum(1.0 / v)
    parts = et.ridge_study_components_all(studies, cols, beta_hat, ridge_cfg, gen.X0)
    v = np.array([c.variance_term(var, vc.sigma_eps_hat2) for c in parts])
    B = np.column_stack([c.bias for c in parts])
    return _solve_quadratic(np.diag(v) + B.T @ B).w


def _chunk(cfg, learners, weights_at, reps):
    """Per-replicate squared errors for one chunk: {learner: (m, G, 2)} array."""
    gen = cfg.generator
    K = gen.n_train
    cols = list(gen.re.re_columns)
    train = gen.train_designs
    offsets = np.concatenate([[0], np.cumsum([D.shape[0] for D in train])])
    N = offsets[-1]
    m = len(reps)
    q = gen.re.q
    zg = np.empty((m, K, q))
    ze = np.empty((m, N))
    raw = cfg.mspe == "raw"
    tests = gen.test_designs
    t_off = np.concatenate([[0], np.cumsum([D.shape[0] for D in tests])])
    n0 = t_off[-1]
    if raw:
        zg0 = np.empty((m, len(tests), q))
        ze0 = np.empty((m, n0))
    for i, r in enumerate(reps):
        for k in range(K):
            zg[i, k], ze[i, offsets[k] : offsets[k + 1]] = draw_effects(gen, k, r)
        if raw:
            for t in range(len(tests)):
                zg0[i, t], ze0[i, t_off[t] : t_off[t + 1]] = draw_effects(gen, K + t, r)

    X0 = gen.X0
    R0 = X0.T @ X0
    Xb_train = np.concatenate([D @ gen.beta for D in train])
    Xb_test = X0 @ gen.beta
    sd_eps = np.sqrt(gen.sigma_eps2)
    out = {l.name: np.empty((m, len(cfg.sigma_bar2_grid), 2)) for l in learners}
    for gi, s in enumerate(cfg.sigma_bar2_grid):
        sd = np.sqrt(cfg.variances_at(s))
        Y = np.empty((m, N))
        for k, D in enumerate(train):
            sl = slice(offsets[k], offsets[k + 1])
            Y[:, sl] = Xb_train[sl] + (zg[:, k, :] * sd) @ D[:, cols].T + sd_eps * ze[:, sl]
        if raw:
            Y0 = np.empty((m, n0))
            for t, D in enumerate(tests):
                sl = slice(t_off[t], t_off[t + 1])
                Y0[:, sl] = Xb_test[sl] + (zg0[:, t, :] * sd) @ D[:, cols].T + sd_eps * ze0[:, sl]
        for l in learners:
            b_m = Y @ l.H_merged
            per = [Y[:, offsets[k] : offsets[k + 1]] @ l.H_study[k] for k in range(K)]
            if cfg.weights == "optimal-estimated":
                W = np.array([_estimated_weights(l, gen, cfg.ridge_cfg, Y[i], offsets) for i in range(m)])
                b_e = sum(W[:, [k]] * per[k] for k in range(K))
            else:
                w = weights_at[l.name][gi]
                b_e = sum(w[k] * per[k] for k in range(K))
            for a, bh in enumerate((b_m, b_e)):
                if raw:
                    res = Y0 - bh @ X0.T
                    out[l.name][:, gi, a] = np.einsum("ij,ij->i", res, res) / n0
                else:
                    d = bh - gen.beta
                    out[l.name][:, gi, a] = np.einsum("ij,jk,ik->i", d, R0, d)
    return out


def interpolate_crossing(grid, values):
    """First zero crossing of a sampled curve, by linear interpolation.

    Returns ``(estimate, prevailing)``: ``estimate`` is None when the curve
    never changes sign, and ``prevailing`` is the sign that held
    (``"merge"`` for positive log ratios, ``"ensemble"`` for negative).
    """
    grid = np.asarray(grid, float)
    v = np.asarray(values, float)
    for i in range(len(v)):
        if v[i] == 0.0:
            return float(grid[i]), None
        if i + 1 < len(v) and np.sign(v[i]) != np.sign(v[i + 1]) and v[i + 1] != 0.0:
            t = v[i] / (v[i] - v[i + 1])
            return float(grid[i] + t * (grid[i + 1] - grid[i])), None
    if np.all(v > 0):
        return None, "merge"
    return None, "ensemble"


def empirical_transition(curve, learner=None, n_boot=None, seed=None, level=0.95):
    """Empirical crossing of the log MSPE ratio, with a bootstrap-over-replicates interval.

    ``curve`` is either a :class:`SweepResult` (then ``learner`` picks the
    curve) or a sequence of ``(sigma_bar2, log_ratio)`` pairs, in which case
    no interval is computed.
    """
    if not isinstance(curve, SweepResult):
        pts = list(curve)
        est, prev = interpolate_crossing([a for a, _ in pts], [b for _, b in pts])
        return EmpiricalTransition(est, est, est, prev, 1.0 if est is not None else 0.0)

    learner = learner or curve.config.learners[0]
    grid = curve.config.sigma_bar2_grid
    lr = [pt.log_ratio for pt in curve.curve(learner)]
    est, prev = interpolate_crossing(grid, lr)
    if est is None:
        return EmpiricalTransition(None, None, None, prev, 0.0)
    errs = curve.errors[learner]  # (R, G, 2)
    R = errs.shape[0]
    n_boot = n_boot or curve.config.n_boot
    rng = np.random.default_rng(np.random.SeedSequence([curve.config.generator.seed, 0xB007]))
    found = []
    for _ in range(n_boot):
        idx = rng.integers(0, R, size=R)
        means = errs[idx].mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            b_lr = np.log(means[:, 1] / means[:, 0])
        e, _ = interpolate_crossing(grid, b_lr)
        if e is not None:
            found.append(e)
    if found:
        a = (1 - level) / 2
        lo, hi = np.quantile(found, [a, 1 - a])
        lo, hi = min(lo, est), max(hi, est)
    else:
        lo = hi = est
    return EmpiricalTransition(est, float(lo), float(hi), None, len(found) / n_boot)


def _theory(cfg, learner):
    gen = cfg.generator
    groups = gen.re.groups if cfg.allocation is not None else (tuple(range(gen.re.q)),)
    kind = "point" if len(groups) == 1 else "interval"
    w = EnsembleWeights.equal(gen.n_train)
    ens = et.combine_study_components(learner.parts, w)
    return transition_from_components(learner.merged, ens, groups, gen.p, gen.sigma_eps2, kind, learner.name)


def theoretical_taus(config: SweepConfig):
    """Equal-weights transition point (or interval) per learner, without simulating."""
    return {name: _theory(config, _Learner(name, config.generator, config.ridge_cfg)) for name in config.learners}


def run_sweep(config: SweepConfig):
    """Run the Monte Carlo sweep and compare it with the closed forms.

    Raises
    ------
    SimulationError
        More than 1% of replicates produced non-finite errors.
    """
    gen = config.generator
    learners = [_Learner(name, gen, config.ridge_cfg) for name in config.learners]
    if config.weights == "optimal-estimated" and any(D.shape[0] <= gen.p for D in gen.train_designs):
        raise InputError("optimal-estimated weights need n_k > p in every training study")

    weights_at = {}
    for l in learners:
        weights_at[l.name] = [
            l.weights(config.variances_at(s), gen.sigma_eps2, config.weights if config.weights != "optimal-estimated" else "equal")
            for s in config.sigma_bar2_grid
        ]

    reps = np.arange(config.replicates)
    chunks = [reps[i : i + config.chunk_size] for i in range(0, len(reps), config.chunk_size)]
    threads = config.threads or default_threads()
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _chunk(config, learners, weights_at, c), chunks))
    else:
        parts = [_chunk(config, learners, weights_at, c) for c in chunks]

    errors = {l.name: np.concatenate([p_[l.name] for p_ in parts], axis=0) for l in learners}
    bad = np.zeros(config.replicates, dtype=bool)
    for e in errors.values():
        bad |= ~np.all(np.isfinite(e), axis=(1, 2))
    n_bad = int(bad.sum())
    if n_bad > MAX_EXCLUDED * config.replicates:
        raise SimulationError(f"{n_bad} of {config.replicates} replicates failed (> 1%)")
    if n_bad:
        log.warning("excluded %d non-finite replicates", n_bad)
        errors = {k: v[~bad] for k, v in errors.items()}

    points = []
    for l in learners:
        e = errors[l.name]
        R = e.shape[0]
        for gi, s in enumerate(config.sigma_bar2_grid):
            mM, mE = e[:, gi, 0], e[:, gi, 1]
            d = mE - mM
            an_m = an_e = None
            if config.weights != "optimal-estimated":
                var = config.variances_at(s)
                an_m, an_e = l.analytic(var, gen.sigma_eps2, weights_at[l.name][gi])
                if config.mspe == "raw":
                    re_s = RandomEffectsStructure(gen.re.re_columns, var)
                    irr = et.irreducible_error(re_s, gen.sigma_eps2, gen.X0)
                    n0 = gen.X0.shape[0]
                    an_m, an_e = (an_m + irr) / n0, (an_e + irr) / n0
            with np.errstate(divide="ignore", invalid="ignore"):
                lr = float(np.log(mE.mean() / mM.mean()))
            points.append(
                PointSummary(
                    s, l.name,
                    float(mM.mean()), float(mM.std(ddof=1) / np.sqrt(R)),
                    float(mE.mean()), float(mE.std(ddof=1) / np.sqrt(R)),
                    float(d.mean()), float(d.std(ddof=1) / np.sqrt(R)),
                    lr,
                    None if an_m is None else float(an_m),
                    None if an_e is None else float(an_e),
                    R,
                )
            )

    theoretical, optimal_tau = {}, {}
    for l in learners:
        theoretical[l.name] = _theory(config, l)
        if config.weights != "equal" and config.allocation is None:
            try:
                optimal_tau[l.name] = optimal_transition_point(
                    l.studies, gen.re.re_columns, gen.sigma_eps2, gen.X0, l.name, gen.beta, config.ridge_cfg
                )
            except TranspointError as exc:
                log.info("no optimal-weights transition for %s: %s", l.name, exc)
                optimal_tau[l.name] = None

    result = SweepResult(config, points, errors, theoretical, optimal_tau, n_bad)
    for l in learners:
        result.empirical[l.name] = empirical_transition(result, l.name)
    for pt in points:
        bad_arms = [k for k, ok in pt.concordance().items() if not ok]
        if bad_arms:
            log.warning(
                "self-check: %s at sigma_bar2=%g outside 3 SE for %s", pt.learner, pt.sigma_bar2, bad_arms
            )
    return result


def compare_at(sigma_bar2_values, config: SweepConfig):
    """Absolute (per-observation) MSPE of every learner and arm at chosen heterogeneity levels.

    Returns a list of dicts with keys ``sigma_bar2, learner, arm, mspe, se, analytic``.
    """
    cfg = replace(config, sigma_bar2_grid=tuple(sorted(float(s) for s in sigma_bar2_values)), mspe="raw")
    res = run_sweep(cfg)
    rows = []
    for pt in res.points:
        rows.append(dict(sigma_bar2=pt.sigma_bar2, learner=pt.learner, arm="merged",
                         mspe=pt.mspe_merged, se=pt.se_merged, analytic=pt.analytic_merged))
        rows.append(dict(sigma_bar2=pt.sigma_bar2, learner=pt.learner, arm="ensemble",
                         mspe=pt.mspe_ensemble, se=pt.se_ensemble, analytic=pt.analytic_ensemble))
    return rows
