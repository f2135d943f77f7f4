"""Multi-study linear mixed-effects model: containers and data generation.

Each study ``k`` follows

    Y_k = X_k beta + Z_k gamma_k + eps_k,    Z_k = X_k[:, re_columns]

with ``gamma_k ~ N(0, G)``, ``G`` diagonal, and ``eps_k ~ N(0, sigma_eps2 I)``.
Designs are fixed; only the random effects and residuals are redrawn.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import InputError


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StudyData:
    """One study's design matrix and outcome vector."""

    X: np.ndarray
    Y: np.ndarray
    id: str = ""

    def __post_init__(self):
        X = _frozen(self.X)
        Y = _frozen(self.Y).ravel()
        if X.ndim == 1:
            X = _frozen(X.reshape(-1, 1))
        if X.ndim != 2:
            raise InputError(f"study {self.id!r}: X must be 2-D, got {X.ndim}-D")
        if X.shape[0] < 1:
            raise InputError(f"study {self.id!r}: needs at least one observation")
        if Y.shape[0] != X.shape[0]:
            raise InputError(
                f"study {self.id!r}: X has {X.shape[0]} rows but Y has length {Y.shape[0]}"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise InputError(f"study {self.id!r}: non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "id", str(self.id))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]


def check_collection(studies):
    """Validate a list of studies and return their common column count."""
    studies = list(studies)
    if not studies:
        raise InputError("need at least one study")
    p = studies[0].p
    for s in studies[1:]:
        if s.p != p:
            raise InputError(
                f"study {s.id!r} has {s.p} columns, expected {p} (all studies must share p)"
            )
    return p


@dataclass(frozen=True)
class RandomEffectsStructure:
    """Which predictor columns carry random effects, and their variances.

    Parameters
    ----------
    re_columns : sequence of int
        Predictor columns with a random effect, in the order of ``variances``.
    variances : sequence of float
        Diagonal of ``G``; one non-negative entry per random effect.
    groups : sequence of sequence of int, optional
        Partition of ``range(q)`` into variance groups. Members of a group must
        share a variance. Defaults to grouping equal variances together.
    """

    re_columns: tuple
    variances: np.ndarray
    groups: Optional[tuple] = None

    def __post_init__(self):
        cols = tuple(int(c) for c in self.re_columns)
        var = _frozen(self.variances).ravel()
        if len(cols) != var.shape[0]:
            raise InputError(
                f"{len(cols)} random-effect columns but {var.shape[0]} variances"
            )
        if len(set(cols)) != len(cols):
            raise InputError(f"duplicate random-effect columns: {cols}")
        if any(c < 0 for c in cols):
            raise InputError("random-effect column indices must be non-negative")
        if not np.all(np.isfinite(var)) or np.any(var < 0):
            raise InputError("random-effect variances must be finite and non-negative")
        if self.groups is None:
            groups = _groups_by_value(var)
        else:
            groups = tuple(tuple(int(i) for i in g) for g in self.groups)
            flat = sorted(i for g in groups for i in g)
            if flat != list(range(len(cols))) or any(len(g) == 0 for g in groups):
                raise InputError(f"groups {groups} do not partition range({len(cols)})")
            for g in groups:
                if np.ptp(var[list(g)]) != 0.0:
                    raise InputError(f"group {g} mixes different variances")
        object.__setattr__(self, "re_columns", cols)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "groups", groups)

    @classmethod
    def equal(cls, re_columns, sigma2):
        """All random effects share one variance (a single group)."""
        cols = tuple(re_columns)
        return cls(cols, np.full(len(cols), float(sigma2)), groups=(tuple(range(len(cols))),))

    @classmethod
    def from_sigma_bar2(cls, re_columns, p, sigma_bar2, allocation=None, groups=None):
        """Spread ``p * sigma_bar2`` of total variance over the random effects.

        ``allocation`` gives relative shares (default uniform), so that
        ``tr(G) / p == sigma_bar2``.
        """
        cols = tuple(re_columns)
        if allocation is None:
            share = np.full(len(cols), 1.0 / len(cols))
        else:
            share = np.asarray(allocation, dtype=float)
            if share.shape != (len(cols),) or np.any(share < 0) or share.sum() <= 0:
                raise InputError("allocation must be non-negative with one entry per random effect")
            share = share / share.sum()
        if groups is None and allocation is None:
            groups = (tuple(range(len(cols))),)
        return cls(cols, p * float(sigma_bar2) * share, groups=groups)

    def with_variances(self, variances):
        """Same columns and grouping, new variance values."""
        return RandomEffectsStructure(self.re_columns, variances, groups=self.groups)

    @property
    def q(self):
        return len(self.re_columns)

    @property
    def r(self):
        return len(self.groups)

    @property
    def group_sizes(self):
        return tuple(len(g) for g in self.groups)

    @property
    def group_values(self):
        return tuple(float(self.variances[g[0]]) for g in self.groups)

    @property
    def G(self):
        return np.diag(self.variances)

    def selector(self, p):
        """The p x q matrix Gamma with ``X @ Gamma == X[:, re_columns]``."""
        self.check_p(p)
        Gam = np.zeros((p, self.q))
        Gam[list(self.re_columns), np.arange(self.q)] = 1.0
        return Gam

    def check_p(self, p):
        if self.q > p or (self.q and max(self.re_columns) >= p):
            raise InputError(
                f"random-effect columns {self.re_columns} do not fit a design with p={p}"
            )


def _groups_by_value(var):
    order = {}
    for i, v in enumerate(var):
        order.setdefault(float(v), []).append(i)
    return tuple(tuple(g) for g in order.values())


@dataclass(frozen=True)
class HeterogeneitySummary:
    sigma_bar2: float


def heterogeneity_summary(re, p):
    """Average random-effect variance per fixed effect, ``tr(G) / p``."""
    if p <= 0:
        raise InputError("p must be positive")
    re.check_p(p)
    return HeterogeneitySummary(float(np.sum(re.variances)) / p)


@dataclass(frozen=True)
class GeneratorConfig:
    """Everything needed to draw outcomes for fixed training and test designs.

    ``designs`` lists the training designs first and then the test designs;
    ``n_train`` says where the split is.
    """

    beta: np.ndarray
    re: RandomEffectsStructure
    sigma_eps2: float
    designs: tuple
    n_train: int
    seed: int = 0
    train_ids: tuple = field(default=())

    def __post_init__(self):
        beta = _frozen(self.beta).ravel()
        designs = tuple(_frozen(D) for D in self.designs)
        if not designs:
            raise InputError("at least one design is required")
        p = beta.shape[0]
        for i, D in enumerate(designs):
            if D.ndim != 2 or D.shape[1] != p:
                raise InputError(f"design {i} has shape {D.shape}, expected (n, {p})")
            if not np.all(np.isfinite(D)):
                raise InputError(f"design {i} has non-finite entries")
        if not (np.isfinite(self.sigma_eps2) and self.sigma_eps2 >= 0):
            raise InputError("sigma_eps2 must be finite and non-negative")
        if not 1 <= self.n_train <= len(designs):
            raise InputError(f"n_train={self.n_train} out of range for {len(designs)} designs")
        self.re.check_p(p)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "designs", designs)
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "sigma_eps2", float(self.sigma_eps2))

    @property
    def p(self):
        return self.beta.shape[0]

    @property
    def train_designs(self):
        return self.designs[: self.n_train]

    @property
    def test_designs(self):
        return self.designs[self.n_train :]

    @property
    def X0(self):
        """All test designs stacked row-wise."""
        if self.n_train == len(self.designs):
            raise InputError("config has no test designs")
        return np.vstack(self.test_designs)

    def with_re(self, re):
        return GeneratorConfig(
            self.beta, re, self.sigma_eps2, self.designs, self.n_train, self.seed, self.train_ids
        )


def substream(seed, study_index, replicate):
    """Independent generator for one (study, replicate) pair.

    ``SeedSequence`` hashes the three integers, so any subset of replicates
    can be drawn in any order, on any worker, with the same result.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(study_index), int(replicate)])
    return np.random.Generator(np.random.PCG64(ss))


def draw_effects(config, study_index, replicate):
    """Standard-normal draws ``(z_gamma, z_eps)`` for one study and replicate."""
    if not 0 <= study_index < len(config.designs):
        raise InputError(
            f"study index {study_index} out of range (config has {len(config.designs)} designs)"
        )
    rng = substream(config.seed, study_index, replicate)
    z_gamma = rng.standard_normal(config.re.q)
    z_eps = rng.standard_normal(config.designs[study_index].shape[0])
    return z_gamma, z_eps


def generate_study(config, study_index, replicate_seed):
    """Draw one outcome vector for design ``study_index``.

    The result is a pure function of ``(config, study_index, replicate_seed)``.
    """
    X = config.designs[study_index] if 0 <= study_index < len(config.designs) else None
    z_gamma, z_eps = draw_effects(config, study_index, replicate_seed)
    gamma = np.sqrt(config.re.variances) * z_gamma
    Y = X @ config.beta + X[:, list(config.re.re_columns)] @ gamma + np.sqrt(config.sigma_eps2) * z_eps
    label = config.train_ids[study_index] if study_index < len(config.train_ids) else f"study{study_index}"
    return StudyData(X, Y, id=label)


@dataclass(frozen=True)
class StackedStudies:
    """Row-stacked studies plus the offsets needed to undo the stacking."""

    data: StudyData
    offsets: tuple
    ids: tuple

    def unstack(self):
        out = []
        for i, sid in enumerate(self.ids):
            lo, hi = self.offsets[i], self.offsets[i + 1]
            out.append(StudyData(self.data.X[lo:hi], self.data.Y[lo:hi], id=sid))
        return out


def stack_studies(studies: Sequence[StudyData]):
    """Merge studies by stacking rows in study order.

    Returns a ``StackedStudies``; its ``data`` attribute is the merged
    ``StudyData`` and ``offsets`` records where each study starts.
    """
    studies = list(studies)
    check_collection(studies)
    offsets = np.concatenate([[0], np.cumsum([s.n for s in studies])])
    merged = StudyData(
        np.vstack([s.X for s in studies]),
        np.concatenate([s.Y for s in studies]),
        id="merged",
    )
    return StackedStudies(merged, tuple(int(o) for o in offsets), tuple(s.id for s in studies))


def gaussian_designs(n_studies, n, p, seed, intercept=False, scale=None):
    """Fixed iid N(0, scale^2) designs; column 0 is all ones when ``intercept``."""
    rng = np.random.default_rng(seed)
    scale = np.ones(p) if scale is None else np.broadcast_to(np.asarray(scale, float), (p,))
    designs = []
    for _ in range(n_studies):
        D = rng.standard_normal((n, p)) * scale
        if intercept:
            D[:, 0] = 1.0
        designs.append(D)
    return designs
