"""Simulation lab: data-generating processes, oracle truths and the Monte Carlo runner.

Every DGP returns a :class:`Dataset` with roles assigned, draws from
``numpy.random.default_rng(seed)`` and is deterministic given ``(n, seed)``.
Scenario ids follow the pattern ``ex<k>/<scenario>/q<NN>/<method>[/...]``;
see :func:`parse_scenario`.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import re
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, special, stats

from .dataset import Dataset
from .errors import ArgumentError, InstabilityError, QieeError, SpecError
from .estimands import (
    COMPOSITES,
    OracleNuisance,
    build_problem,
    canonical_method,
    effect,
    estimate,
    estimand_parts,
    fit_nuisance,
    inverse_cdf_estimate,
)
from .nuisance import FunctionCurve, LearnerSpec, RoleBinding, outcome_grid

FAMILIES = ("example1", "example2", "example3", "longitudinal2", "null")
COVARIATES = ("L1", "L2", "L3", "L4")
MISSPECIFIED = ("Lt1", "Lt2", "Lt3", "Lt4")
ORACLE_SEED = 20240601
ORACLE_DRAWS = 1_000_000


# ---------------------------------------------------------------------------
# data-generating processes


def _covariates(rng, n):
    return rng.standard_normal((n, 4))


def _propensity_index(L):
    return -L[:, 0] + 0.5 * L[:, 1] - 0.25 * L[:, 2] - 0.1 * L[:, 3]


def _outcome_index(L):
    return 10 * L[:, 0] + 5 * L[:, 1] + 5 * L[:, 2] + 5 * L[:, 3]


def _survival_index(L):
    return L[:, 0] - 0.8 * L[:, 1] + 0.6 * L[:, 2] - L[:, 3]


def _frame(L, **cols):
    out = {name: L[:, j] for j, name in enumerate(COVARIATES)}
    out.update(cols)
    return out


def dgp_example1(n: int, seed: int) -> Dataset:
    """L ~ N(0, I_4); A ~ Bern(expit(-L1 + .5 L2 - .25 L3 - .1 L4)); Y ~ N(1.5 A + 10 L1 + 5 L2 + 5 L3 + 5 L4, e^(2+A))."""
    _check_n(n)
    rng = np.random.default_rng(seed)
    L = _covariates(rng, n)
    A = (rng.random(n) < special.expit(_propensity_index(L))).astype(float)
    Y = 1.5 * A + _outcome_index(L) + np.exp((2 + A) / 2) * rng.standard_normal(n)
    return Dataset(_frame(L, A=A, Y=Y), {"outcome": "Y", "treatment": "A", "covariate": COVARIATES})


MEDIATOR_COV = np.array([[1.0, 0.2], [0.2, 1.0]])


def _mediator_means(A, L):
    s = L.sum(axis=1)
    return np.column_stack([0.5 * A + 2 * L[:, 0] + L[:, 1] + L[:, 2] + L[:, 3], A - s])


def dgp_example2(n: int, seed: int) -> Dataset:
    """Example 1 covariates and treatment; bivariate normal mediators; Gaussian outcome."""
    _check_n(n)
    rng = np.random.default_rng(seed)
    L = _covariates(rng, n)
    A = (rng.random(n) < special.expit(_propensity_index(L))).astype(float)
    M = _mediator_means(A, L) + rng.standard_normal((n, 2)) @ np.linalg.cholesky(MEDIATOR_COV).T
    Y = 2 + 1.5 * A + M.sum(axis=1) + _outcome_index(L) + np.exp((2 + A) / 2) * rng.standard_normal(n)
    return Dataset(
        _frame(L, A=A, M1=M[:, 0], M2=M[:, 1], Y=Y),
        {"outcome": "Y", "treatment": "A", "mediator": ("M1", "M2"), "covariate": COVARIATES},
    )


def dgp_example3(n: int, seed: int) -> Dataset:
    """Survival M ~ Bern(expit(-1 + 2A + L1 - .8 L2 + .6 L3 - L4)); Y observed only when M = 1."""
    _check_n(n)
    rng = np.random.default_rng(seed)
    L = _covariates(rng, n)
    A = (rng.random(n) < special.expit(_propensity_index(L))).astype(float)
    M = (rng.random(n) < special.expit(-1 + 2 * A + _survival_index(L))).astype(float)
    Y = 1 + 1.5 * A + _outcome_index(L) + np.exp((2 + A) / 2) * rng.standard_normal(n)
    Y[M == 0] = np.nan
    return Dataset(
        _frame(L, A=A, M=M, Y=Y),
        {"outcome": "Y", "treatment": "A", "survival": "M", "covariate": COVARIATES},
    )


# two-period design; coefficients are those of _LONG below
_LONG = {
    "a1": (0.3, 0.8),  # intercept, L1
    "l2": (0.6, 0.8),  # L1, A1
    "a2": (-0.2, 0.7, -0.4, 0.5),  # intercept, L2, L1, A1
    "y": (1.0, 1.0, 1.5, 2.0, 1.5),  # intercept, A1, A2, L1, L2
}


def dgp_longitudinal2(n: int, seed: int, randomized: bool = False, horizon: int = 2) -> Dataset:
    """Two-period sequentially ignorable design.

    ``L1 ~ N(0,1)``, ``A1 ~ Bern(expit(.3 + .8 L1))``,
    ``L2 = .6 L1 + .8 A1 + N(0,1)``, ``A2 ~ Bern(expit(-.2 + .7 L2 - .4 L1 + .5 A1))``,
    ``Y = 1 + A1 + 1.5 A2 + 2 L1 + 1.5 L2 + N(0,1)``. With ``randomized`` both
    treatment probabilities are 0.5. ``horizon=1`` keeps only the first
    period's roles, which also carry the point-treatment role names.
    """
    _check_n(n)
    if horizon not in (1, 2):
        raise ArgumentError("horizon must be 1 or 2")
    rng = np.random.default_rng(seed)
    L1 = rng.standard_normal(n)
    p1 = np.full(n, 0.5) if randomized else special.expit(_LONG["a1"][0] + _LONG["a1"][1] * L1)
    A1 = (rng.random(n) < p1).astype(float)
    L2 = _LONG["l2"][0] * L1 + _LONG["l2"][1] * A1 + rng.standard_normal(n)
    c = _LONG["a2"]
    p2 = np.full(n, 0.5) if randomized else special.expit(c[0] + c[1] * L2 + c[2] * L1 + c[3] * A1)
    A2 = (rng.random(n) < p2).astype(float)
    b = _LONG["y"]
    Y = b[0] + b[1] * A1 + b[2] * A2 + b[3] * L1 + b[4] * L2 + rng.standard_normal(n)
    roles = {
        "outcome": "Y",
        "time-varying-treatment[1]": "A1",
        "time-varying-covariate[1]": "L1",
        "treatment": "A1",
        "covariate": "L1",
    }
    cols = {"L1": L1, "A1": A1, "Y": Y}
    if horizon == 2:
        roles.update({"time-varying-treatment[2]": "A2", "time-varying-covariate[2]": "L2"})
        cols.update({"L2": L2, "A2": A2})
    return Dataset(cols, roles)


def dgp_null(n: int, seed: int) -> Dataset:
    """Randomized null design: A ~ Bern(0.5) independent of Y ~ U(0, 1) and of L."""
    _check_n(n)
    rng = np.random.default_rng(seed)
    L = _covariates(rng, n)
    A = (rng.random(n) < 0.5).astype(float)
    Y = rng.random(n)
    return Dataset(_frame(L, A=A, Y=Y), {"outcome": "Y", "treatment": "A", "covariate": COVARIATES})


def _check_n(n):
    if n < 100:
        raise ArgumentError(f"simulated samples need n >= 100, got {n}")


_GENERATORS = {
    "example1": dgp_example1,
    "example2": dgp_example2,
    "example3": dgp_example3,
    "longitudinal2": dgp_longitudinal2,
    "null": dgp_null,
}


@dataclass(frozen=True)
class DgpSpec:
    """Simulation family with sample size and seed."""

    family: str
    n: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown DGP family {self.family!r}")
        if self.n < 100:
            raise SpecError("n must be at least 100")

    def generate(self, seed: int | None = None) -> Dataset:
        return _GENERATORS[self.family](self.n, self.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# covariate misspecification


def misspecify_covariates(L) -> np.ndarray:
    """Transformed covariates used to misspecify working models.

    ``(exp(L1/2), L2/(1 + L1), (L2 L3/25 + .6)^3, (L2 + L4 + 20)^2)``; the
    denominator ``1 + L1`` is floored at 0.05 in absolute value with its sign
    kept, so the second feature stays finite.
    """
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[1] != 4:
        raise ArgumentError("expected an n x 4 covariate matrix")
    den = 1 + L[:, 0]
    den = np.where(np.abs(den) < 0.05, np.where(den < 0, -0.05, 0.05), den)
    return np.column_stack([
        np.exp(0.5 * L[:, 0]),
        L[:, 1] / den,
        (L[:, 1] * L[:, 2] / 25 + 0.6) ** 3,
        (L[:, 1] + L[:, 3] + 20) ** 2,
    ])


def with_misspecified(data: Dataset) -> Dataset:
    """Append the transformed covariates (``Lt*``) as role-less columns."""
    if data.has_role("time-varying-covariate[1]"):
        extra = {}
        for t in range(1, data.horizon + 1):
            col = data.role_columns(f"time-varying-covariate[{t}]")[0]
            extra[f"{col}sq"] = data.column(col) ** 2
        return data.with_columns(**extra)
    Lt = misspecify_covariates(data.matrix(COVARIATES))
    return data.with_columns(**{name: Lt[:, j] for j, name in enumerate(MISSPECIFIED)})


def _misspecified_features(role_features, data: Dataset) -> tuple[str, ...]:
    if data.has_role("time-varying-covariate[1]"):
        return tuple(f"{data.role_columns(f)[0]}sq" if data.has_role(f) else f for f in role_features)
    out = []
    for f in role_features:
        out.extend(MISSPECIFIED if f == "covariate" else [f])
    return tuple(out)


# ---------------------------------------------------------------------------
# oracle nuisances


def _normal_cdf_curve(n, loc, scale):
    loc = np.asarray(loc, dtype=float)
    return FunctionCurve(n, lambda t: special.ndtr((t - loc) / scale), lambda t: stats.norm.pdf((t - loc) / scale) / scale)


def oracle_nuisance(family: str, data: Dataset, problem, randomized: bool = False) -> OracleNuisance:
    """True nuisance functions of ``problem`` evaluated on ``data``.

    ``randomized`` selects the sequentially randomized longitudinal variant.
    """
    n = data.n
    name = problem.name
    out = OracleNuisance()
    if family in ("example1", "example2", "example3", "null"):
        L = data.matrix(COVARIATES)
        ps1 = np.full(n, 0.5) if family == "null" else special.expit(_propensity_index(L))
    if family in ("example1", "null") and name.startswith("qte:a="):
        a = int(name[-1])
        out["propensity"] = ps1 if a == 1 else 1 - ps1
        if family == "null":
            out["outcome_cdf"] = FunctionCurve(n, lambda t: np.clip(t, 0.0, 1.0) + 0 * ps1,
                                               lambda t: ((t > 0) & (t < 1)).astype(float) + 0 * ps1)
        else:
            out["outcome_cdf"] = _normal_cdf_curve(n, 1.5 * a + _outcome_index(L), np.exp((2 + a) / 2))
        return out
    if family == "example2" and name == "mediation:1m0":
        M = data.matrix(("M1", "M2"))
        cov_inv = np.linalg.inv(MEDIATOR_COV)
        r1 = M - _mediator_means(np.ones(n), L)
        r0 = M - _mediator_means(np.zeros(n), L)
        log_ratio = -0.5 * (np.einsum("ij,jk,ik->i", r1, cov_inv, r1) - np.einsum("ij,jk,ik->i", r0, cov_inv, r0))
        out["propensity"] = ps1
        out["mediator_propensity"] = special.expit(special.logit(ps1) + log_ratio)
        out["outcome_cdf"] = _normal_cdf_curve(n, 3.5 + M.sum(axis=1) + _outcome_index(L), np.exp(1.5))
        m0 = _mediator_means(np.zeros(n), L).sum(axis=1)
        out["cross_world_cdf"] = _normal_cdf_curve(n, 3.5 + m0 + _outcome_index(L),
                                                   math.sqrt(np.exp(3) + MEDIATOR_COV.sum()))
        return OracleNuisance({k: out[k] for k in problem.role_names})
    if family == "example3" and name.startswith("truncation:a="):
        arm = int(name[-1])
        s = _survival_index(L)
        out["survival_control"] = special.expit(-1 + s)
        out["propensity"] = ps1
        out["outcome_cdf"] = _normal_cdf_curve(n, 1 + 1.5 * arm + _outcome_index(L), np.exp((2 + arm) / 2))
        if arm == 1:
            out["survival_treated"] = special.expit(1 + s)
        return OracleNuisance({k: out[k] for k in problem.role_names})
    if family == "longitudinal2" and name.startswith("longitudinal:a="):
        regimen = [int(x) for x in name.split("=")[1].split(",")]
        return _longitudinal_oracle(data, regimen, randomized)
    raise SpecError(f"no oracle nuisance for {name!r} under {family!r}")


def _longitudinal_oracle(data: Dataset, regimen, randomized):
    n = data.n
    T = len(regimen)
    L1 = data.role_vector("time-varying-covariate[1]")
    p1 = np.full(n, 0.5) if randomized else special.expit(_LONG["a1"][0] + _LONG["a1"][1] * L1)
    out = OracleNuisance()
    out["propensity[1]"] = p1 if regimen[0] == 1 else 1 - p1
    b = _LONG["y"]
    a1 = regimen[0]
    if T != 2:
        raise SpecError("the longitudinal oracle covers the two-period regimen only")
    L2 = data.role_vector("time-varying-covariate[2]")
    c = _LONG["a2"]
    p2 = np.full(n, 0.5) if randomized else special.expit(c[0] + c[1] * L2 + c[2] * L1 + c[3] * a1)
    a2 = regimen[1]
    out["propensity[2]"] = p2 if a2 == 1 else 1 - p2
    base = b[0] + b[1] * a1 + b[2] * a2
    out["nested_cdf[1]"] = _normal_cdf_curve(
        n, base + b[3] * L1 + b[4] * (_LONG["l2"][0] * L1 + _LONG["l2"][1] * a1), math.sqrt(1 + b[4] ** 2)
    )
    out["nested_cdf[2]"] = _normal_cdf_curve(n, base + b[3] * L1 + b[4] * L2, 1.0)
    return out


# ---------------------------------------------------------------------------
# oracle truths


def _normal_quantile(mean, var, q):
    return float(mean + math.sqrt(var) * stats.norm.ppf(q))


def _weighted_mixture_quantile(weights, means, sd, q):
    w = weights / weights.sum()

    def cdf(t):
        return float(np.dot(w, special.ndtr((t - means) / sd))) - q

    lo, hi = means.min() - 10 * sd, means.max() + 10 * sd
    return float(optimize.brentq(cdf, lo, hi, xtol=1e-10))


@lru_cache(maxsize=None)
def _example3_draws():
    rng = np.random.default_rng(ORACLE_SEED)
    L = rng.standard_normal((ORACLE_DRAWS, 4))
    return special.expit(-1 + _survival_index(L)), _outcome_index(L)


@lru_cache(maxsize=None)
def _longitudinal_draws(regimen: tuple[int, ...]):
    """Forward simulation of the outcome under the regimen (g-formula)."""
    rng = np.random.default_rng(ORACLE_SEED)
    n = ORACLE_DRAWS
    L1 = rng.standard_normal(n)
    a1, a2 = regimen
    L2 = _LONG["l2"][0] * L1 + _LONG["l2"][1] * a1 + rng.standard_normal(n)
    b = _LONG["y"]
    return np.sort(b[0] + b[1] * a1 + b[2] * a2 + b[3] * L1 + b[4] * L2 + rng.standard_normal(n))


def longitudinal_closed_form(regimen, q) -> float:
    """Y under (a1, a2) is N(1 + 2.2 a1 + 1.5 a2, 2.9^2 + 1.5^2 + 1)."""
    a1, a2 = regimen
    b, l2 = _LONG["y"], _LONG["l2"]
    mean = b[0] + (b[1] + b[4] * l2[1]) * a1 + b[2] * a2
    var = (b[3] + b[4] * l2[0]) ** 2 + b[4] ** 2 + 1
    return _normal_quantile(mean, var, q)


@lru_cache(maxsize=None)
def oracle_truth(family: str, estimand: str, q: float) -> float:
    """True value of an estimand (arm quantile or composite effect) at level q."""
    if not 0 < q < 1:
        raise ArgumentError("q must lie in (0, 1)")
    if family not in FAMILIES:
        raise SpecError(f"unknown DGP family {family!r}")
    e = estimand.strip().lower()
    if e in COMPOSITES:
        first, second = COMPOSITES[e]
        return oracle_truth(family, first, q) - oracle_truth(family, second, q)
    if family == "example1" and re.fullmatch(r"qte:a=[01]", e):
        a = int(e[-1])
        return _normal_quantile(1.5 * a, 175 + math.exp(2 + a), q)
    if family == "null" and re.fullmatch(r"qte:a=[01]", e):
        return float(q)
    if family == "example2":
        if re.fullmatch(r"qte:a=[01]", e):
            a = int(e[-1])
            # Y_a = 2 + 1.5a + M_a,1 + M_a,2 + 10L1 + 5(L2+L3+L4) + e; M sum = 1.5a + L1 + noise(var 2.4)
            return _normal_quantile(2 + 3 * a, 121 + 75 + MEDIATOR_COV.sum() + math.exp(2 + a), q)
        if e in ("mediation:1m0", "mediation"):
            return _normal_quantile(3.5, 121 + 75 + MEDIATOR_COV.sum() + math.exp(3), q)
    if family == "example3" and re.fullmatch(r"truncation:a=[01]", e):
        arm = int(e[-1])
        weights, index = _example3_draws()
        return _weighted_mixture_quantile(weights, 1 + 1.5 * arm + index, math.exp((2 + arm) / 2), q)
    m = re.fullmatch(r"longitudinal:a=([01]),([01])", e)
    if family == "longitudinal2" and m:
        y = _longitudinal_draws((int(m.group(1)), int(m.group(2))))
        return float(np.quantile(y, q))
    raise SpecError(f"no oracle truth for {estimand!r} under {family!r}")


# ---------------------------------------------------------------------------
# scenarios


EX2_MISSPEC = {
    "a": (),
    "b": ("propensity",),
    "c": ("mediator_propensity",),
    "d": ("outcome_cdf",),
    "e": ("cross_world_cdf",),
    "f": ("cross_world_cdf", "propensity", "mediator_propensity", "outcome_cdf"),
}
EX3_MISSPEC = {
    "a": (),
    "b": ("propensity",),
    "c": ("survival_control", "survival_treated"),
    "d": ("outcome_cdf",),
    "e": ("survival_control", "survival_treated", "outcome_cdf", "propensity"),
}
EX4_MISSPEC = {
    "correct": (),
    "robust-t0": ("propensity[1]", "propensity[2]"),
    "robust-t1": ("nested_cdf[1]", "propensity[2]"),
    "robust-t2": ("nested_cdf[1]", "nested_cdf[2]"),
    "all-wrong": ("propensity[1]", "propensity[2]", "nested_cdf[1]", "nested_cdf[2]"),
}


@dataclass(frozen=True)
class ScenarioSpec:
    """One Monte Carlo scenario.

    ``misspecified_roles`` receive transformed covariates. ``learners``
    selects the learner set: ``"pl"`` (parametric working models) or
    ``"ml"`` (the flexible registry). ``k_folds=None`` fits nuisances on the
    full sample.
    """

    dgp: DgpSpec
    estimand: str
    q: float
    method: str = "debiased"
    misspecified_roles: tuple[str, ...] = ()
    k_folds: int | None = 5
    n_reps: int = 200
    base_seed: int = 1
    n_grid: int = 100
    learners: str = "ml"
    label: str = ""

    def __post_init__(self):
        canonical_method(self.method)
        parts = estimand_parts(self.estimand)
        names = set()
        for p in parts:
            names.update(build_problem(p, self.q, self.n_grid).role_names)
        unknown = set(self.misspecified_roles) - names
        if unknown:
            raise SpecError(f"misspecified roles not in the problem: {sorted(unknown)}")
        if self.n_reps < 1:
            raise SpecError("n_reps must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["misspecified_roles"] = list(self.misspecified_roles)
        return d

    @property
    def fit_key(self):
        """Scenarios with equal keys can share nuisance fits within a replication."""
        return (self.dgp, self.estimand, self.misspecified_roles, self.k_folds, self.n_reps, self.base_seed,
                self.n_grid, self.learners)


def learner_bindings(scenario: ScenarioSpec, problem, data: Dataset) -> dict:
    """Learner and feature choice per role for a scenario."""
    family = scenario.dgp.family
    out = {}
    for role in problem.roles:
        if role.kind == "probability":
            spec = LearnerSpec(kind="logistic-glm")
        elif role.kind == "nested":
            spec = LearnerSpec(kind="grid-cdf-family", link="probit", n_grid=scenario.n_grid)
        elif family == "example2" and scenario.learners == "pl":
            spec = LearnerSpec(kind="grid-cdf-family", link="probit", n_grid=scenario.n_grid)
        else:
            residual = "gaussian" if scenario.learners == "pl" or family == "longitudinal2" else "kernel"
            spec = LearnerSpec(kind="additive-cdf", residual=residual)
        feats = None
        if role.name in scenario.misspecified_roles:
            feats = _misspecified_features(role.features, data)
        out[role.name] = RoleBinding(spec, feats)
    return out


_LABEL = re.compile(r"^(ex[1-4])/([^/]+)/q(\d{2})/([^/]+)((?:/[^/]+)*)$")
_EX_FAMILY = {"ex1": "example1", "ex2": "example2", "ex3": "example3", "ex4": "longitudinal2"}
_METHOD_LABELS = {
    "debiased": ("debiased", None),
    "plugin": ("plug-in", None),
    "plug-in": ("plug-in", None),
    "oracle": ("oracle", None),
    "inverse-cdf": ("inverse-cdf", None),
    "de-pl": ("debiased", "pl"),
    "de-ml": ("debiased", "ml"),
    "pi-pl": ("plug-in", "pl"),
    "pi-ml": ("plug-in", "ml"),
    "hsu-pl": ("inverse-cdf", "pl"),
}


def parse_scenario(label: str, n: int = 1000, n_reps: int = 200, base_seed: int = 1) -> ScenarioSpec:
    """Scenario from a catalog id such as ``ex2/scenario-c/q90/de-pl/R=10``.

    * ``ex1/{TT,FT,TF,FF}/qNN/<method>``: first letter is the propensity
      model, second the outcome model (T correct, F transformed covariates);
      the target is the control-arm quantile.
    * ``ex2/scenario-{a..f}/qNN/{de-pl,hsu-pl,de-ml,pi-pl,oracle}[/R=r]``.
    * ``ex3/scenario-{a..e}/qNN/{de-pl,pi-pl,de-ml,oracle}[/target=arm0|arm1|sqce]``.
    * ``ex4/{correct,robust-t0,robust-t1,robust-t2,all-wrong}/qNN/<method>[/regimen=a1,a2]``.
    """
    m = _LABEL.match(label.strip())
    if not m:
        raise SpecError(f"malformed scenario id {label!r}")
    ex, scen, qq, meth, rest = m.groups()
    q = int(qq) / 100
    if not 0 < q < 1:
        raise SpecError(f"bad quantile in {label!r}")
    if meth not in _METHOD_LABELS:
        raise SpecError(f"unknown method {meth!r} in {label!r}")
    method, learners = _METHOD_LABELS[meth]
    opts = {}
    for part in filter(None, rest.split("/")):
        if "=" not in part:
            raise SpecError(f"bad option {part!r} in {label!r}")
        k, v = part.split("=", 1)
        opts[k] = v
    n_grid = 100
    if "R" in opts:
        try:
            n_grid = int(opts.pop("R"))
        except ValueError:
            raise SpecError(f"bad grid size in {label!r}") from None
        if n_grid < 2:
            raise SpecError("R must be at least 2")
    k_folds = 5
    family = _EX_FAMILY[ex]
    if ex == "ex1":
        if scen not in ("TT", "FT", "TF", "FF"):
            raise SpecError(f"unknown Example 1 scenario {scen!r}")
        mis = tuple(r for r, c in zip(("propensity", "outcome_cdf"), scen) if c == "F")
        estimand, learners = "qte:a=0", learners or "ml"
    elif ex == "ex2":
        key = scen.removeprefix("scenario-")
        if key not in EX2_MISSPEC:
            raise SpecError(f"unknown Example 2 scenario {scen!r}")
        mis, estimand, learners = EX2_MISSPEC[key], "mediation:1m0", learners or "pl"
    elif ex == "ex3":
        key = scen.removeprefix("scenario-")
        if key not in EX3_MISSPEC:
            raise SpecError(f"unknown Example 3 scenario {scen!r}")
        target = opts.pop("target", "arm0")
        estimand = {"arm0": "truncation:a=0", "arm1": "truncation:a=1", "sqce": "sqce"}.get(target)
        if estimand is None:
            raise SpecError(f"unknown Example 3 target {target!r}")
        roles = set()
        for p in estimand_parts(estimand):
            roles.update(build_problem(p, q).role_names)
        mis = tuple(r for r in EX3_MISSPEC[key] if r in roles)
        learners = learners or "pl"
        if learners == "pl":
            k_folds = None
    else:
        if scen not in EX4_MISSPEC:
            raise SpecError(f"unknown longitudinal scenario {scen!r}")
        regimen = opts.pop("regimen", "1,1")
        if not re.fullmatch(r"[01],[01]", regimen):
            raise SpecError(f"bad regimen {regimen!r}")
        mis, estimand, learners = EX4_MISSPEC[scen], f"longitudinal:a={regimen}", learners or "pl"
    if opts:
        raise SpecError(f"unknown option(s) {sorted(opts)} in {label!r}")
    return ScenarioSpec(DgpSpec(family, n, 0), estimand, q, method, mis, k_folds, n_reps, base_seed, n_grid, learners,
                        label.strip())


def scenario_catalog() -> list[str]:
    """Every built-in scenario id."""
    out = []
    for s in ("TT", "FT", "TF", "FF"):
        for q in (25, 50, 75):
            out.append(f"ex1/{s}/q{q}/debiased")
    for s in "abcdef":
        for q in (10, 25, 50, 75, 90):
            for R in (4, 10, 40, 100):
                out.append(f"ex2/scenario-{s}/q{q}/de-pl/R={R}")
                out.append(f"ex2/scenario-{s}/q{q}/hsu-pl/R={R}")
            out.append(f"ex2/scenario-{s}/q{q}/de-ml")
    for s in "abcde":
        for q in (25, 50, 75):
            for target in ("arm0", "arm1", "sqce"):
                for meth in ("de-pl", "pi-pl", "de-ml"):
                    out.append(f"ex3/scenario-{s}/q{q}/{meth}/target={target}")
    for s in EX4_MISSPEC:
        out.append(f"ex4/{s}/q50/debiased")
    return out


# ---------------------------------------------------------------------------
# Monte Carlo runner


@dataclass
class MCResult:
    """Per-replication records and their summary.

    Each record holds ``rep``, ``seed``, ``status`` (``ok`` or the error
    class), ``estimate``, ``se``, ``lo``, ``hi``, ``hit`` and ``error``.
    """

    scenario: ScenarioSpec
    truth: float
    records: list = field(default_factory=list)

    @property
    def ok(self) -> list:
        return [r for r in self.records if r["status"] == "ok"]

    @property
    def n_success(self) -> int:
        return len(self.ok)

    @property
    def n_failed(self) -> int:
        return len(self.records) - self.n_success

    @property
    def estimates(self) -> np.ndarray:
        return np.array([r["estimate"] for r in self.ok])

    @property
    def ses(self) -> np.ndarray:
        return np.array([r["se"] for r in self.ok])

    def summary(self) -> dict:
        est = self.estimates
        k = len(est)
        out = {
            "scenario": self.scenario.label or self.scenario.estimand,
            "truth": self.truth,
            "n_reps": len(self.records),
            "n_success": k,
            "n_failed": self.n_failed,
        }
        if k == 0:
            return out
        err = est - self.truth
        sd = float(est.std(ddof=1)) if k > 1 else float("nan")
        out.update({
            "mean": float(est.mean()),
            "bias": float(err.mean()),
            "rmse": float(np.sqrt(np.mean(err**2))),
            "mae": float(np.mean(np.abs(err))),
            "sd": sd,
            "mc_se_bias": sd / math.sqrt(k) if k > 1 else float("nan"),
            "mean_se": float(self.ses.mean()),
            "coverage": float(np.mean([r["hit"] for r in self.ok])),
            "skewness": float(stats.skew((est - est.mean()) / self.ses)) if k > 2 else float("nan"),
        })
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        cols = ["rep", "seed", "status", "estimate", "se", "lo", "hi", "hit", "error"]
        w = csv.DictWriter(buf, cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.records:
            w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r.get(k), float) else r[k]))
                        for k in cols})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def summary_json(self) -> str:
        return json.dumps({"scenario": self.scenario.to_dict(), "summary": self.summary(),
                           "learner_note": LEARNER_NOTE}, indent=2, sort_keys=True)

    def long_rows(self) -> list[dict]:
        s = self.summary()
        est = f"{self.scenario.method}:{self.scenario.learners}"
        if self.scenario.method in ("debiased", "inverse-cdf") and self.scenario.dgp.family == "example2":
            est += f"(R={self.scenario.n_grid})"
        rows = []
        for metric in ("bias", "rmse", "mae", "coverage", "sd", "mean_se"):
            if metric in s:
                rows.append({"scenario": s["scenario"], "estimator": est, "q": self.scenario.q, "metric": metric,
                             "value": s[metric]})
        return rows


LEARNER_NOTE = (
    "nuisances use the built-in learner registry (GLMs, location-scale CDF models and grid CDF families) "
    "in place of Post-Lasso or Super Learner"
)


def _estimate_one(problem, data, nuisance, method, grid):
    if method == "inverse-cdf":
        return inverse_cdf_estimate(problem, data, nuisance, grid)
    return estimate(problem, data, nuisance, method)


def run_replicate(scenarios: Sequence[ScenarioSpec], rep: int) -> list[dict]:
    """One replication for scenarios sharing a fit key; one record per scenario."""
    first = scenarios[0]
    seed = first.base_seed + rep
    records = [{"rep": rep, "seed": seed} for _ in scenarios]
    try:
        data = with_misspecified(first.dgp.generate(seed))
        parts = estimand_parts(first.estimand)
        fits = {}
        grids = {}
        for part in parts:
            problem = build_problem(part, 0.5, first.n_grid)
            grid = outcome_grid(data.defined_outcomes(), first.n_grid)
            grids[part] = grid
            methods = {s.method for s in scenarios}
            if methods - {"oracle"}:
                fits[part] = fit_nuisance(problem, data, learner_bindings(first, problem, data), first.k_folds, seed,
                                          grid=grid)
            if "oracle" in methods:
                fits[(part, "oracle")] = oracle_nuisance(first.dgp.family, data, problem)
    except QieeError as exc:
        for r in records:
            r.update(status=type(exc).__name__, error=str(exc))
        return records
    for rec, s in zip(records, scenarios):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                reports = []
                for part in parts:
                    problem = build_problem(part, s.q, s.n_grid)
                    nuis = fits[(part, "oracle")] if s.method == "oracle" else fits[part]
                    reports.append(_estimate_one(problem, data, nuis, s.method, grids[part]))
                if len(reports) == 2:
                    eff = effect(reports[0], reports[1])
                    est, se, (lo, hi) = eff.estimate, eff.se, eff.ci
                else:
                    rep_ = reports[0]
                    est, se, (lo, hi) = rep_.theta, rep_.se, rep_.ci
            truth = oracle_truth(s.dgp.family, s.estimand, s.q)
            rec.update(status="ok", estimate=est, se=se, lo=lo, hi=hi, hit=bool(lo <= truth <= hi), error=None)
        except QieeError as exc:
            rec.update(status=type(exc).__name__, error=str(exc))
    return records


def _run_group(args):
    scenarios, reps = args
    return [run_replicate(scenarios, r) for r in reps]


def run_campaign(scenarios: Sequence[ScenarioSpec], n_jobs: int = 1, max_failure_rate: float = 0.1,
                 raise_on_failure: bool = True) -> list[MCResult]:
    """Run several scenarios, fitting nuisances once per replication per fit key.

    Replication r of every scenario uses seed ``base_seed + r`` for both the
    data and the fold assignment, so results do not depend on ``n_jobs``.
    """
    results = [MCResult(s, oracle_truth(s.dgp.family, s.estimand, s.q)) for s in scenarios]
    groups: dict = {}
    for i, s in enumerate(scenarios):
        groups.setdefault(s.fit_key, []).append(i)
    for idx in groups.values():
        group = [scenarios[i] for i in idx]
        reps = list(range(group[0].n_reps))
        if n_jobs > 1:
            chunks = [reps[j::n_jobs] for j in range(n_jobs)]
            with ProcessPoolExecutor(n_jobs) as pool:
                done = list(pool.map(_run_group, [(group, c) for c in chunks]))
            per_rep = sorted((recs for chunk in done for recs in chunk), key=lambda recs: recs[0]["rep"])
        else:
            per_rep = _run_group((group, reps))
        for recs in per_rep:
            for i, rec in zip(idx, recs):
                results[i].records.append(rec)
    if raise_on_failure:
        for res in results:
            if res.n_failed > max_failure_rate * len(res.records):
                err = InstabilityError(
                    f"{res.scenario.label or res.scenario.estimand}: {res.n_failed} of {len(res.records)} replications failed"
                )
                err.results = results
                raise err
    return results


def run_monte_carlo(scenario: ScenarioSpec, n_jobs: int = 1) -> MCResult:
    """Run one scenario; more than 10% failed replications raise an instability error."""
    return run_campaign([scenario], n_jobs)[0]


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)
