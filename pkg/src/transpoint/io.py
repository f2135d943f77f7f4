"""CSV datasets, dataset manifests, and simulation config files.

CSV files are RFC 4180 with a header row, UTF-8, decimal points, and no
missing values. Manifests and simulation configs are TOML, validated against
the JSON schemas below (``transpoint <cmd> --print-schema`` prints them).
"""

import csv
import json
import os
import re as _re
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .exceptions import InputError, InsufficientStudiesError
from .model import StudyData

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

INTERCEPT = "(intercept)"

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "transpoint dataset manifest",
    "type": "object",
    "required": ["outcome", "predictors", "studies"],
    "additionalProperties": False,
    "properties": {
        "outcome": {"type": "string", "minLength": 1},
        "predictors": {"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1},
        "intercept": {"type": "boolean", "default": True},
        "random_effects": {
            "type": "array",
            "items": {"type": "string"},
            "description": "predictors with random effects; '(intercept)' names the intercept. Default: all.",
        },
        "studies": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["path"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"},
                    "path": {"type": "string"},
                    "role": {"enum": ["train", "test"], "default": "train"},
                },
            },
        },
    },
}

_NUM_LIST = {"type": "array", "items": {"type": "number"}}

SIMULATION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "transpoint simulation config",
    "type": "object",
    "required": ["design", "effects", "grid"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "replicates": {"type": "integer", "minimum": 100},
        "learners": {"type": "array", "items": {"enum": ["ls", "ridge"]}, "minItems": 1},
        "weights": {"enum": ["equal", "optimal-oracle", "optimal-estimated"]},
        "mspe": {"enum": ["excess", "raw"]},
        "sigma_eps2": {"type": "number", "exclusiveMinimum": 0},
        "design": {
            "type": "object",
            "required": ["train_studies", "test_studies", "n", "p"],
            "additionalProperties": False,
            "properties": {
                "train_studies": {"type": "integer", "minimum": 1},
                "test_studies": {"type": "integer", "minimum": 1},
                "n": {"type": "integer", "minimum": 2},
                "p": {"type": "integer", "minimum": 1},
                "intercept": {"type": "boolean"},
                "scale": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "effects": {
            "type": "object",
            "required": ["re_columns"],
            "additionalProperties": False,
            "properties": {
                "re_columns": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "beta": _NUM_LIST,
                "beta_blocks": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["count", "sd"],
                        "additionalProperties": False,
                        "properties": {
                            "count": {"type": "integer", "minimum": 1},
                            "sd": {"type": "number", "minimum": 0},
                        },
                    },
                },
                "beta_seed": {"type": "integer", "minimum": 0},
                "allocation": _NUM_LIST,
                "groups": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sigma_bar2": _NUM_LIST,
                "tau_multiples": _NUM_LIST,
                "tau_learner": {"enum": ["ls", "ridge"]},
                "include_tau": {"type": "boolean"},
            },
        },
        "ridge": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda": {"type": "number", "minimum": 0},
                "lambda_per_study": _NUM_LIST,
                "scaling": {"enum": ["none", "inverse-sd"]},
            },
        },
    },
}


# ---------------------------------------------------------------- TOML + schema


def _locate(text, path):
    """Best-effort line number of the key at the end of a schema error path."""
    keys = [k for k in path if isinstance(k, str)]
    if not keys:
        return None
    pat = _re.compile(r"^\s*(\[+\s*)?" + _re.escape(keys[-1]) + r"\s*(=|\]|\.)")
    for i, line in enumerate(text.splitlines(), 1):
        if pat.search(line):
            return i
    return None


def load_toml(path, schema):
    """Parse and validate a TOML file; errors name the offending line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            line = _locate(text, list(e.absolute_path))
            where = f"line {line}" if line else "top level"
            loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
            msgs.append(f"{path}:{where}: {loc}: {e.message}")
        raise InputError("\n".join(msgs))
    return data


def print_schema(schema):
    return json.dumps(schema, indent=2)


# ---------------------------------------------------------------- CSV


def read_study_csv(path, outcome, predictors, intercept=True, study_id=None):
    """Read exactly ``outcome`` and ``predictors`` from a CSV file.

    An intercept column of ones is prepended when ``intercept`` is true.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file (header row required)") from None
        missing = [c for c in [outcome, *predictors] if c not in header]
        if missing:
            raise InputError(f"{path}: missing column(s) {missing}")
        if len(set(header)) != len(header):
            raise InputError(f"{path}: duplicate column names in header")
        idx = [header.index(c) for c in predictors]
        iy = header.index(outcome)
        X, Y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                Y.append(_num(row[iy]))
                X.append([_num(row[j]) for j in idx])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    if not Y:
        raise InputError(f"{path}: no data rows")
    X = np.array(X, dtype=float)
    if intercept:
        X = np.column_stack([np.ones(len(Y)), X])
    return StudyData(X, np.array(Y), id=study_id or path.stem)


def _num(s):
    s = s.strip()
    if s == "" or s.lower() in ("na", "nan", "null", "none"):
        raise ValueError(f"missing value {s!r}")
    v = float(s)
    if not np.isfinite(v):
        raise ValueError(f"non-finite value {s!r}")
    return v


def write_study_csv(path, study, outcome, predictors, intercept=True):
    """Write a study so that :func:`read_study_csv` recovers it bit for bit."""
    X = study.X[:, 1:] if intercept else study.X
    if X.shape[1] != len(predictors):
        raise InputError("predictor names do not match the design")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([outcome, *predictors])
        for y, row in zip(study.Y, X):
            w.writerow([repr(float(y)), *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class DatasetManifest:
    outcome: str
    predictors: tuple
    intercept: bool
    random_effects: tuple
    studies: tuple  # (id, path, role)
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path):
        path = Path(path)
        data = load_toml(path, MANIFEST_SCHEMA)
        predictors = tuple(data["predictors"])
        if len(set(predictors)) != len(predictors):
            raise InputError(f"{path}: duplicate predictor names")
        intercept = data.get("intercept", True)
        names = ((INTERCEPT,) if intercept else ()) + predictors
        re_names = tuple(data.get("random_effects", names))
        unknown = [r for r in re_names if r not in names]
        if unknown:
            raise InputError(f"{path}: random_effects not among predictors: {unknown}")
        studies = []
        for i, s in enumerate(data["studies"]):
            sid = s.get("id") or Path(s["path"]).stem
            studies.append((sid, s["path"], s.get("role", "train")))
        ids = [s[0] for s in studies]
        if len(set(ids)) != len(ids):
            raise InputError(f"{path}: duplicate study ids")
        return cls(data["outcome"], predictors, intercept, re_names, tuple(studies), path.parent)

    @property
    def columns(self):
        return ((INTERCEPT,) if self.intercept else ()) + self.predictors

    @property
    def re_columns(self):
        cols = self.columns
        return tuple(cols.index(r) for r in self.random_effects)

    def select(self, predictors):
        """Same manifest restricted to a subset of predictors (order kept)."""
        keep = tuple(p for p in self.predictors if p in set(predictors))
        re_names = tuple(r for r in self.random_effects if r == INTERCEPT or r in keep)
        return DatasetManifest(self.outcome, keep, self.intercept, re_names, self.studies, self.base_dir)

    def load_studies(self):
        """Return ``(train, test)`` lists of :class:`StudyData`."""
        train, test = [], []
        for sid, rel, role in self.studies:
            p = Path(rel)
            if not p.is_absolute():
                p = self.base_dir / p
            s = read_study_csv(p, self.outcome, self.predictors, self.intercept, sid)
            (train if role == "train" else test).append(s)
        if len(train) < 2:
            raise InsufficientStudiesError(f"need at least 2 training studies, got {len(train)}")
        if not test:
            raise InputError("manifest declares no test study")
        return train, test

    def to_toml(self):
        lines = [
            f"outcome = {json.dumps(self.outcome)}",
            f"predictors = [{', '.join(json.dumps(p) for p in self.predictors)}]",
            f"intercept = {'true' if self.intercept else 'false'}",
            f"random_effects = [{', '.join(json.dumps(r) for r in self.random_effects)}]",
        ]
        for sid, path, role in self.studies:
            lines += ["", "[[studies]]", f"id = {json.dumps(sid)}", f"path = {json.dumps(str(path))}",
                      f"role = {json.dumps(role)}"]
        return "\n".join(lines) + "\n"


def top_k_correlated(train, manifest, k):
    """Names of the ``k`` predictors most correlated (in absolute value) with the outcome.

    Computed on the merged training studies only.
    """
    if k < 1:
        raise InputError("--top-k-correlated must be >= 1")
    X = np.vstack([s.X for s in train])
    Y = np.concatenate([s.Y for s in train])
    off = 1 if manifest.intercept else 0
    scores = []
    for j, name in enumerate(manifest.predictors):
        x = X[:, j + off]
        sx, sy = x.std(), Y.std()
        c = 0.0 if sx == 0 or sy == 0 else abs(np.corrcoef(x, Y)[0, 1])
        scores.append((-c, j, name))
    return tuple(name for _, _, name in sorted(scores)[:k])


def export_synthetic(out_dir, train, test, predictors=None, intercept=False, re_names=None, outcome="y"):
    """Write studies as CSV files plus a ``manifest.toml``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = train[0].p
    n_pred = p - (1 if intercept else 0)
    predictors = tuple(predictors or (f"x{j + 1}" for j in range(n_pred)))
    entries = []
    for role, group in (("train", train), ("test", test)):
        for s in group:
            fname = f"{s.id}.csv"
            write_study_csv(out / fname, s, outcome, predictors, intercept)
            entries.append((s.id, fname, role))
    names = ((INTERCEPT,) if intercept else ()) + predictors
    man = DatasetManifest(outcome, predictors, intercept, tuple(re_names or names), tuple(entries), out)
    mpath = out / "manifest.toml"
    mpath.write_text(man.to_toml(), encoding="utf-8")
    return mpath


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)


# ---------------------------------------------------------------- simulation configs


def _beta_from(effects, p):
    if "beta" in effects:
        beta = np.asarray(effects["beta"], float)
    elif "beta_blocks" in effects:
        rng = np.random.default_rng(effects.get("beta_seed", 0))
        beta = np.concatenate([rng.normal(0.0, b["sd"], b["count"]) for b in effects["beta_blocks"]])
    else:
        raise InputError("effects: give either 'beta' or 'beta_blocks'")
    if beta.shape != (p,):
        raise InputError(f"effects: beta has {beta.shape[0]} entries, design has p={p}")
    return beta


def _groups_of(values):
    out = {}
    for i, v in enumerate(values):
        out.setdefault(float(v), []).append(i)
    return tuple(tuple(g) for g in out.values())


def generator_from_dict(data, seed=None):
    """Build the :class:`~transpoint.model.GeneratorConfig` (at zero heterogeneity)."""
    from .model import GeneratorConfig, RandomEffectsStructure, gaussian_designs

    d = data["design"]
    p = d["p"]
    K, T = d["train_studies"], d["test_studies"]
    designs = gaussian_designs(K + T, d["n"], p, d.get("seed", 0), d.get("intercept", False), d.get("scale"))
    eff = data["effects"]
    cols = tuple(eff["re_columns"])
    q = len(cols)
    groups = eff.get("groups")
    if groups is None and "allocation" in eff:
        groups = _groups_of(eff["allocation"])
    re = RandomEffectsStructure(cols, np.zeros(q), groups=groups or (tuple(range(q)),))
    ids = tuple(f"train{k + 1}" for k in range(K)) + tuple(f"test{t + 1}" for t in range(T))
    return GeneratorConfig(
        _beta_from(eff, p), re, data.get("sigma_eps2", 1.0), tuple(designs), K,
        data.get("seed", 0) if seed is None else seed, ids,
    )


def sweep_config_from_dict(data, seed=None, replicates=None, threads=None, ridge_lambda=None):
    """Turn a validated simulation config into a :class:`~transpoint.simulation.SweepConfig`.

    A ``[grid]`` table either lists ``sigma_bar2`` values or gives
    ``tau_multiples`` of the theoretical transition point of ``tau_learner``;
    ``include_tau`` adds every learner's own transition point to the grid.
    """
    from .estimators import RidgeConfig
    from .exceptions import ConditionViolation
    from .simulation import SweepConfig, theoretical_taus

    gen = generator_from_dict(data, seed)
    learners = tuple(data.get("learners", ["ls"]))
    rd = data.get("ridge", {})
    ridge_cfg = None
    if "ridge" in learners or rd:
        lam = rd.get("lambda", 1.0) if ridge_lambda is None else ridge_lambda
        lam_k = rd.get("lambda_per_study", [lam] * gen.n_train)
        ridge_cfg = RidgeConfig(lam, tuple(lam_k), rd.get("scaling", "inverse-sd"), data["design"].get("intercept", False))
    alloc = data["effects"].get("allocation")
    base = dict(
        replicates=data.get("replicates", 1000) if replicates is None else replicates,
        learners=learners,
        weights=data.get("weights", "equal"),
        ridge_cfg=ridge_cfg,
        allocation=None if alloc is None else tuple(alloc),
        mspe=data.get("mspe", "excess"),
        threads=threads,
    )
    grid_spec = data["grid"]
    grid = list(grid_spec.get("sigma_bar2", []))
    if "tau_multiples" in grid_spec or grid_spec.get("include_tau"):
        taus = theoretical_taus(SweepConfig(gen, (0.0,), **base))
        ref = grid_spec.get("tau_learner", learners[0])
        if ref not in taus:
            raise InputError(f"grid: tau_learner {ref!r} is not among the learners")

        def value(name):
            t = taus[name]
            if not t.valid_lower:
                raise ConditionViolation(f"no valid transition point for {name} ({t.status}); cannot scale the grid")
            return t.tau_lower

        grid += [m * value(ref) for m in grid_spec.get("tau_multiples", [])]
        if grid_spec.get("include_tau"):
            grid += [value(name) for name in learners]
    if not grid:
        raise InputError("grid: no sigma_bar2 values (give sigma_bar2 or tau_multiples)")
    grid = sorted(set(float(g) for g in grid))
    return SweepConfig(gen, tuple(grid), **base)


def load_sweep_config(path, **overrides):
    return sweep_config_from_dict(load_toml(path, SIMULATION_SCHEMA), **overrides)
