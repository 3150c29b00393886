"""Built-in estimands, the estimation driver and composite effects.

Each builder returns a :class:`MomentProblem` for one potential-outcome
quantile. Nuisance roles are numbered as in their mixed-bias form so that
``pairs`` can be read off directly.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import Dataset, make_folds
from .ee_engine import (
    MomentProblem,
    ScoreTrace,
    curve_derivative,
    default_bracket,
    estimate_B,
    fd_step,
    mean_score,
    nuisance_values,
    per_unit_score,
    solve_ee,
)
from .errors import ArgumentError, BracketingError, EstimabilityError, InversionError, SchemaError, SpecError
from .nuisance import NuisanceRole, NuisanceSet, check_grid, crossfit, outcome_grid, resolve_bindings

METHODS = ("plug-in", "debiased", "oracle", "inverse-cdf")
_METHOD_ALIASES = {"plugin": "plug-in", "pi": "plug-in", "de": "debiased"}


def canonical_method(method: str) -> str:
    m = _METHOD_ALIASES.get(method, method)
    if m not in METHODS:
        raise ArgumentError(f"unknown method {method!r}")
    return m


class OracleNuisance(NuisanceSet):
    """True nuisance functions supplied by a simulation DGP."""


def _first_covariate(data: Dataset):
    for role in ("covariate", "time-varying-covariate[1]"):
        if data.has_role(role):
            return data.column(data.role_columns(role)[0])
    return None


def _base_units(data: Dataset) -> dict:
    return {"n": data.n, "y": data.outcome, "x1": _first_covariate(data)}


def _require(data: Dataset, *roles):
    missing = [r for r in roles if not data.has_role(r)]
    if missing:
        raise SchemaError(f"estimand needs role(s) {missing} but the schema only has {sorted(data.roles)}")


def _indicator(y, theta):
    return (y <= theta).astype(float)


# ---------------------------------------------------------------------------
# Example 1: arm quantile


def build_qte_problem(a: int, q: float, n_grid: int = 100) -> MomentProblem:
    """Quantile of Y_a under treatment ignorability.

    Roles: ``propensity`` = P(A=a | L) and ``outcome_cdf`` = F(theta | a, L).
    """
    if a not in (0, 1):
        raise ArgumentError("arm must be 0 or 1")

    def units(data):
        _require(data, "outcome", "treatment", "covariate")
        u = _base_units(data)
        u["arm"] = (data.treatment == a).astype(float)
        if u["arm"].sum() == 0:
            raise EstimabilityError(f"no units with treatment = {a}")
        return u

    def moment(u, h, theta, tau):
        return u["arm"] * _indicator(u["y"], theta) / h["propensity"] - tau

    def adjustment(u, h, theta, tau):
        F = h["outcome_cdf"]
        return F - u["arm"] * F / h["propensity"]

    def normalizer(u, nuis, theta):
        return float(np.mean(curve_derivative(nuis["outcome_cdf"], theta, fd_step(u))))

    roles = (
        NuisanceRole("propensity", "probability", ("covariate",), target=lambda d: (d.treatment == a).astype(float),
                     description=f"P(A={a}|L)"),
        NuisanceRole("outcome_cdf", "cdf", ("covariate",), rows=lambda d: d.treatment == a,
                     description=f"F(theta|A={a},L)"),
    )
    return MomentProblem(
        name=f"qte:a={a}", q=q, roles=roles, pairs=((1, 2),), units=units, moment=moment,
        adjustment=adjustment, normalizer=normalizer, plugin_roles=("propensity",), n_grid=n_grid,
        c_value=lambda u, h, theta: -1.0,
    )


def qte_eif_bracket(units, h, theta, q):
    """Example-1 EIF numerator assembled directly as I(A=a)/pi (I - F) + F - q."""
    F = h["outcome_cdf"]
    return units["arm"] / h["propensity"] * (_indicator(units["y"], theta) - F) + F - q


# ---------------------------------------------------------------------------
# Example 2: cross-world quantile Y_{1 M_0}


def build_mediation_problem(q: float, n_grid: int = 100) -> MomentProblem:
    """Quantile of Y_{1 M_0}.

    Roles, in mixed-bias order: ``cross_world_cdf`` mu(L, theta),
    ``propensity`` P(A=1|L), ``mediator_propensity`` P(A=1|M,L) and
    ``outcome_cdf`` F(theta | 1, M, L). mu is a nested role fitted by
    regressing the grid-node predictions of ``outcome_cdf`` on L among A=0.
    """

    def units(data):
        _require(data, "outcome", "treatment", "mediator", "covariate")
        u = _base_units(data)
        u["a"] = data.treatment
        if u["a"].sum() == 0 or u["a"].sum() == data.n:
            raise EstimabilityError("both treatment arms must be present")
        return u

    def moment(u, h, theta, tau):
        return h["cross_world_cdf"] - tau

    def adjustment(u, h, theta, tau):
        a = u["a"]
        h1, h2, h3, h4 = h["cross_world_cdf"], h["propensity"], h["mediator_propensity"], h["outcome_cdf"]
        treated = a * (1 - h3) / (h3 * (1 - h2)) * (_indicator(u["y"], theta) - h4)
        control = (1 - a) / (1 - h2) * (h4 - h1)
        return treated + control

    def normalizer(u, nuis, theta):
        return float(np.mean(curve_derivative(nuis["cross_world_cdf"], theta, fd_step(u))))

    roles = (
        NuisanceRole("cross_world_cdf", "nested", ("covariate",), rows=lambda d: d.treatment == 0,
                     parent="outcome_cdf", description="E[F(theta|1,M,L)|A=0,L]"),
        NuisanceRole("propensity", "probability", ("covariate",), target=lambda d: d.treatment,
                     description="P(A=1|L)"),
        NuisanceRole("mediator_propensity", "probability", ("mediator", "covariate"), target=lambda d: d.treatment,
                     description="P(A=1|M,L)"),
        NuisanceRole("outcome_cdf", "cdf", ("mediator", "covariate"), rows=lambda d: d.treatment == 1,
                     description="F(theta|A=1,M,L)"),
    )
    return MomentProblem(
        name="mediation:1m0", q=q, roles=roles, pairs=((1, 2), (3, 4)), units=units, moment=moment,
        adjustment=adjustment, normalizer=normalizer, plugin_roles=("cross_world_cdf",), n_grid=n_grid,
        c_value=lambda u, h, theta: -1.0,
    )


# ---------------------------------------------------------------------------
# Example 3: survivor quantile in the always-survivor stratum


def build_truncation_problem(arm: int, q: float, n_grid: int = 100) -> MomentProblem:
    """Quantile of Y_arm among always-survivors (monotone survival assumed).

    Arm 0 roles: ``survival_control`` P(M=1|A=0,L), ``outcome_cdf``
    F(theta|0,1,L), ``propensity`` P(A=1|L). Arm 1 adds
    ``survival_treated`` P(M=1|A=1,L) and uses F(theta|1,1,L).
    """
    if arm not in (0, 1):
        raise ArgumentError("arm must be 0 or 1")

    def units(data):
        _require(data, "outcome", "treatment", "survival", "covariate")
        u = _base_units(data)
        u["a"], u["m"] = data.treatment, data.survival
        for cell_a in {0, arm}:
            if not ((u["a"] == cell_a) & (u["m"] == 1)).any():
                raise EstimabilityError(f"no survivors with treatment = {cell_a}")
        return u

    def moment(u, h, theta, tau):
        return h["survival_control"] * (h["outcome_cdf"] - tau)

    if arm == 0:

        def adjustment(u, h, theta, tau):
            a, m = u["a"], u["m"]
            h1, h2, h3 = h["survival_control"], h["outcome_cdf"], h["propensity"]
            return (1 - a) * m / (1 - h3) * (_indicator(u["y"], theta) - h2) + (1 - a) * (h2 - tau) / (1 - h3) * (m - h1)

        roles = (
            NuisanceRole("survival_control", "probability", ("covariate",), rows=lambda d: d.treatment == 0,
                         target=lambda d: d.survival, description="P(M=1|A=0,L)"),
            NuisanceRole("outcome_cdf", "cdf", ("covariate",), rows=lambda d: (d.treatment == 0) & (d.survival == 1),
                         description="F(theta|A=0,M=1,L)"),
            NuisanceRole("propensity", "probability", ("covariate",), target=lambda d: d.treatment,
                         description="P(A=1|L)"),
        )
        pairs = ((1, 2), (1, 3))
    else:

        def adjustment(u, h, theta, tau):
            a, m = u["a"], u["m"]
            h1, h2, h3, h4 = h["survival_control"], h["outcome_cdf"], h["survival_treated"], h["propensity"]
            return h1 * a * m / (h3 * h4) * (_indicator(u["y"], theta) - h2) + (1 - a) * (h2 - tau) / (1 - h4) * (m - h1)

        roles = (
            NuisanceRole("survival_control", "probability", ("covariate",), rows=lambda d: d.treatment == 0,
                         target=lambda d: d.survival, description="P(M=1|A=0,L)"),
            NuisanceRole("outcome_cdf", "cdf", ("covariate",), rows=lambda d: (d.treatment == 1) & (d.survival == 1),
                         description="F(theta|A=1,M=1,L)"),
            NuisanceRole("survival_treated", "probability", ("covariate",), rows=lambda d: d.treatment == 1,
                         target=lambda d: d.survival, description="P(M=1|A=1,L)"),
            NuisanceRole("propensity", "probability", ("covariate",), target=lambda d: d.treatment,
                         description="P(A=1|L)"),
        )
        pairs = ((1, 2), (1, 4), (2, 3), (2, 4))

    def normalizer(u, nuis, theta):
        dens = curve_derivative(nuis["outcome_cdf"], theta, fd_step(u))
        return float(np.mean(nuis["survival_control"] * dens))

    def c_value(u, h, theta):
        return -float(np.mean(h["survival_control"]))

    return MomentProblem(
        name=f"truncation:a={arm}", q=q, roles=roles, pairs=pairs, units=units, moment=moment,
        adjustment=adjustment, normalizer=normalizer, plugin_roles=("survival_control", "outcome_cdf"),
        n_grid=n_grid, c_value=c_value,
    )


# ---------------------------------------------------------------------------
# Example 4: longitudinal regimen quantile


def _history(t):
    return tuple(f"time-varying-covariate[{s}]" for s in range(1, t + 1))


def _follows(data: Dataset, regimen, t):
    ok = np.ones(data.n, dtype=bool)
    for s in range(1, t + 1):
        ok &= data.role_vector(f"time-varying-treatment[{s}]") == regimen[s - 1]
    return ok


def build_longitudinal_problem(regimen: Sequence[int], q: float, n_grid: int = 100, clip: float = 0.01) -> MomentProblem:
    """Quantile of Y under the static regimen ``regimen`` (length T >= 1).

    Roles ``propensity[t]`` = P(A_t = a_t | followed so far, L-history) for
    t = 1..T, then ``nested_cdf[t]`` = mu_t for t = 1..T where mu_T is the
    outcome CDF among full followers and mu_t (t < T) regresses the grid-node
    values of mu_{t+1} on the history among followers up to t.
    """
    regimen = tuple(int(a) for a in regimen)
    T = len(regimen)
    if T < 1 or any(a not in (0, 1) for a in regimen):
        raise ArgumentError("regimen must be a non-empty 0/1 sequence")

    def units(data):
        _require(data, "outcome")
        for t in range(1, T + 1):
            _require(data, f"time-varying-treatment[{t}]", f"time-varying-covariate[{t}]")
        u = _base_units(data)
        u["follow"] = [_follows(data, regimen, t).astype(float) for t in range(1, T + 1)]
        if u["follow"][-1].sum() == 0:
            raise EstimabilityError("no unit follows the regimen")
        return u

    def cum_prob(h):
        out, acc = [], None
        for t in range(1, T + 1):
            p = h[f"propensity[{t}]"]
            acc = p if acc is None else acc * p
            out.append(acc)
        return out

    def moment(u, h, theta, tau):
        pi = cum_prob(h)
        return u["follow"][-1] * _indicator(u["y"], theta) / pi[-1] - tau

    def adjustment(u, h, theta, tau):
        pi = cum_prob(h)
        mu = [h[f"nested_cdf[{t}]"] for t in range(1, T + 1)]
        out = -u["follow"][-1] * mu[-1] / pi[-1]
        for t in range(T - 1):
            out = out + u["follow"][t] / pi[t] * (mu[t + 1] - mu[t])
        return out + mu[0]

    def normalizer(u, nuis, theta):
        pi = cum_prob(nuis)
        dens = curve_derivative(nuis[f"nested_cdf[{T}]"], theta, fd_step(u))
        return float(np.mean(u["follow"][-1] / pi[-1] * dens))

    roles = []
    for t in range(1, T + 1):
        prev = regimen[: t - 1]
        roles.append(NuisanceRole(
            f"propensity[{t}]", "probability", _history(t),
            rows=(lambda d, prev=prev, t=t: _follows(d, prev, t - 1)),
            target=(lambda d, t=t: (d.role_vector(f"time-varying-treatment[{t}]") == regimen[t - 1]).astype(float)),
            description=f"P(A_{t}={regimen[t - 1]}|history)",
        ))
    for t in range(1, T + 1):
        rows = lambda d, t=t: _follows(d, regimen, t)
        if t == T:
            roles.append(NuisanceRole(f"nested_cdf[{t}]", "cdf", _history(t), rows=rows, description="F(theta|regimen,history)"))
        else:
            roles.append(NuisanceRole(f"nested_cdf[{t}]", "nested", _history(t), rows=rows, parent=f"nested_cdf[{t + 1}]",
                                      description=f"mu_{t}"))
    name = "longitudinal:a=" + ",".join(str(a) for a in regimen)

    def check(u, nuis):
        pi = cum_prob(nuis)[-1]
        followers = u["follow"][-1] == 1
        low = np.mean(pi[followers] < clip**T)
        if low > 0.5:
            warnings.warn(f"{name}: cumulative treatment probability below {clip**T:g} for {low:.0%} of followers",
                          RuntimeWarning, stacklevel=2)

    return MomentProblem(
        name=name, q=q, roles=tuple(roles), pairs=tuple((t, T + t) for t in range(1, T + 1)), units=units,
        moment=moment, adjustment=adjustment, normalizer=normalizer,
        plugin_roles=tuple(f"propensity[{t}]" for t in range(1, T + 1)), n_grid=n_grid,
        c_value=lambda u, h, theta: -1.0, check=check,
    )


# ---------------------------------------------------------------------------
# estimand strings


COMPOSITES = {
    "qte": ("qte:a=1", "qte:a=0"),
    "sqce": ("truncation:a=1", "truncation:a=0"),
    "nqie": ("qte:a=1", "mediation:1m0"),
    "nqde": ("mediation:1m0", "qte:a=0"),
}


def build_problem(estimand: str, q: float, n_grid: int = 100) -> MomentProblem:
    """Build an arm-level problem from its string label."""
    s = estimand.strip().lower()
    m = re.fullmatch(r"qte:a=([01])", s)
    if m:
        return build_qte_problem(int(m.group(1)), q, n_grid)
    if s in ("mediation:1m0", "mediation"):
        return build_mediation_problem(q, n_grid)
    m = re.fullmatch(r"truncation:a=([01])", s)
    if m:
        return build_truncation_problem(int(m.group(1)), q, n_grid)
    m = re.fullmatch(r"longitudinal:a=([01](?:,[01])*)", s)
    if m:
        return build_longitudinal_problem([int(x) for x in m.group(1).split(",")], q, n_grid)
    raise SpecError(f"unknown estimand {estimand!r}")


def estimand_parts(estimand: str) -> tuple[str, ...]:
    """Arm-level components of an estimand string (one for arm quantiles)."""
    s = estimand.strip().lower()
    if s in COMPOSITES:
        return COMPOSITES[s]
    build_problem(s, 0.5)
    return (s,)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EstimateReport:
    """Point estimate with normalizer, standard error, CI and provenance."""

    estimand: str
    q: float
    method: str
    theta: float
    B: float
    se: float
    ci: tuple[float, float]
    level: float
    variance_method: str = "eif"
    degenerate: bool = False
    provenance: dict = field(default_factory=dict)
    trace: ScoreTrace | None = None
    influence: np.ndarray | None = field(default=None, repr=False)
    extra: dict = field(default_factory=dict)

    def to_dict(self, include_trace=False) -> dict:
        d = {
            "estimand": self.estimand,
            "q": self.q,
            "method": self.method,
            "theta": self.theta,
            "B": self.B,
            "se": self.se,
            "ci": list(self.ci),
            "level": self.level,
            "variance_method": self.variance_method,
            "degenerate": self.degenerate,
            "provenance": self.provenance,
        }
        if self.extra:
            d["extra"] = self.extra
        if include_trace and self.trace is not None:
            d["trace"] = self.trace.to_dict()
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw))


@dataclass
class EffectReport:
    """Difference of two quantile estimates at the same level."""

    name: str
    q: float
    estimate: float
    se: float
    ci: tuple[float, float]
    level: float
    variance_method: str
    first: EstimateReport
    second: EstimateReport

    def to_dict(self) -> dict:
        return {
            "estimand": self.name,
            "q": self.q,
            "estimate": self.estimate,
            "se": self.se,
            "ci": list(self.ci),
            "level": self.level,
            "variance_method": self.variance_method,
            "components": [self.first.to_dict(), self.second.to_dict()],
        }


# ---------------------------------------------------------------------------
# estimation driver


def fit_nuisance(problem: MomentProblem, data: Dataset, bindings=None, k_folds: int | None = 5, seed: int = 0,
                 grid=None):
    """Cross-fit (or, with ``k_folds=None``, full-sample fit) every role."""
    problem.units(data)  # surfaces missing roles before any fitting
    resolved = resolve_bindings(problem.roles, bindings)
    if grid is None and problem.needs_grid(resolved):
        grid = outcome_grid(data.defined_outcomes(), problem.n_grid)
    folds = None if not k_folds else make_folds(data.n, int(k_folds), seed)
    return crossfit(data, folds, problem.roles, resolved, grid=grid)


def estimate(problem: MomentProblem, data, nuisance, method: str = "debiased", level: float = 0.95,
             bracket=None, tol=None) -> EstimateReport:
    """Solve the IEE (``plug-in``/``oracle``) or the debiased IEE and attach inference."""
    from .inference import eif_variance, wald_ci

    method = canonical_method(method)
    if method == "inverse-cdf":
        raise ArgumentError("use inverse_cdf_estimate for the inverse-CDF comparator")
    if method == "oracle" and not isinstance(nuisance, OracleNuisance):
        raise SpecError("the oracle method needs DGP-supplied true nuisance functions")
    units = data if isinstance(data, dict) else problem.units(data)
    nuis = nuisance_values(nuisance)
    if problem.check is not None:
        problem.check(units, nuis)
    y = units["y"]
    bracket = default_bracket(y) if bracket is None else bracket

    def plugin(theta):
        return mean_score(problem, units, nuis, theta, debiased=False)

    debiased = method == "debiased"
    if debiased:
        try:
            anchor, _ = solve_ee(plugin, bracket, tol, observed=y)
        except BracketingError:
            anchor = None
        theta, trace = solve_ee(lambda t: mean_score(problem, units, nuis, t, debiased=True), bracket, tol,
                                observed=y, anchor=anchor)
    else:
        theta, trace = solve_ee(plugin, bracket, tol, observed=y)
    B = estimate_B(problem, units, theta, nuis)
    var = eif_variance(problem, units, nuis, theta, B, debiased=debiased)
    infl = -per_unit_score(problem, units, nuis, theta, debiased=debiased) / B
    return EstimateReport(
        estimand=problem.name, q=problem.q, method=method, theta=theta, B=B, se=var.se,
        ci=wald_ci(theta, var.se, level), level=level, variance_method="eif", degenerate=var.degenerate,
        provenance=_provenance(nuisance), trace=trace, influence=np.array(infl),
    )


def _provenance(nuisance):
    if isinstance(nuisance, OracleNuisance):
        return {"oracle": True}
    prov = getattr(nuisance, "provenance", None)
    return prov if prov is not None else {}


def invert_piecewise_linear(nodes, values, q) -> float:
    """Smallest theta at which the linear interpolant of (nodes, values) reaches q."""
    nodes = check_grid(nodes)
    values = np.asarray(values, dtype=float)
    if not (values.min() <= q <= values.max()):
        raise InversionError(f"q={q} outside the estimated CDF range [{values.min():.4g}, {values.max():.4g}]")
    if values[0] >= q:
        return float(nodes[0])
    r = int(np.flatnonzero(values >= q)[0])
    lo_v, hi_v = values[r - 1], values[r]
    return float(nodes[r - 1] + (q - lo_v) / (hi_v - lo_v) * (nodes[r] - nodes[r - 1]))


def inverse_cdf_estimate(problem: MomentProblem, data, nuisance, grid, level: float = 0.95) -> EstimateReport:
    """Solve the debiased equation for tau at every grid node, then invert.

    ``g + phi`` is affine in tau, so ``tau_r = -P_n[s(0)] / P_n[s(1) - s(0)]``
    with ``s(tau)`` the per-unit score at node r.
    """
    from .inference import eif_variance, wald_ci

    grid = check_grid(grid)
    units = data if isinstance(data, dict) else problem.units(data)
    nuis = nuisance_values(nuisance)
    s0 = mean_score(problem, units, nuis, grid, tau=0.0, debiased=True)
    s1 = mean_score(problem, units, nuis, grid, tau=1.0, debiased=True)
    tau = -s0 / (s1 - s0)
    theta = invert_piecewise_linear(grid, tau, problem.q)
    B = estimate_B(problem, units, theta, nuis)
    var = eif_variance(problem, units, nuis, theta, B, debiased=True)
    infl = -per_unit_score(problem, units, nuis, theta, debiased=True) / B
    return EstimateReport(
        estimand=problem.name, q=problem.q, method="inverse-cdf", theta=theta, B=B, se=var.se,
        ci=wald_ci(theta, var.se, level), level=level, degenerate=var.degenerate,
        provenance=_provenance(nuisance), influence=np.array(infl),
        extra={"grid": grid.tolist(), "tau": tau.tolist()},
    )


def effect(first: EstimateReport, second: EstimateReport, name: str | None = None, level: float | None = None,
           se: float | None = None) -> EffectReport:
    """``first.theta - second.theta`` with a delta-method SE from the joint EIF.

    Pass ``se`` to override (for example with a joint bootstrap SE).
    """
    from .inference import wald_ci

    if first.q != second.q:
        raise ArgumentError(f"quantile levels differ: {first.q} vs {second.q}")
    level = first.level if level is None else level
    est = first.theta - second.theta
    method = "bootstrap" if se is not None else "eif-delta"
    if se is None:
        if first.influence is None or second.influence is None or len(first.influence) != len(second.influence):
            raise ArgumentError("joint EIF needs per-unit influence values from the same data")
        d = first.influence - second.influence
        se = float(np.sqrt(np.mean(d**2) / len(d)))
    return EffectReport(name or f"{first.estimand} - {second.estimand}", first.q, est, se, wald_ci(est, se, level),
                        level, method, first, second)


# ---------------------------------------------------------------------------
# estimator front end


class QuantileIEE(BaseEstimator):
    """Estimator object for one arm-level quantile estimand.

    Parameters
    ----------
    estimand : str
        ``"qte:a=1"``, ``"mediation:1m0"``, ``"truncation:a=0"`` or
        ``"longitudinal:a=1,1"``.
    q : float
        Quantile level.
    method : {'debiased', 'plug-in', 'inverse-cdf'}
    k_folds : int or None
        Cross-fitting folds; ``None`` fits nuisances on the full sample.
    learners : mapping role -> LearnerSpec or RoleBinding, optional
    n_grid : int
        Grid size for grid-family and nested roles.
    level : float
        Confidence level of the Wald interval.
    random_state : int
        Seed of the fold assignment.

    Attributes
    ----------
    theta_, se_, ci_, B_ : fitted estimate, standard error, interval, normalizer.
    report_ : EstimateReport
    nuisance_ : CrossFitNuisance
    """

    def __init__(self, estimand="qte:a=1", q=0.5, method="debiased", k_folds=5, learners=None, n_grid=100,
                 level=0.95, random_state=0):
        self.estimand = estimand
        self.q = q
        self.method = method
        self.k_folds = k_folds
        self.learners = learners
        self.n_grid = n_grid
        self.level = level
        self.random_state = random_state

    def fit(self, data: Dataset, y=None):
        if not isinstance(data, Dataset):
            raise ArgumentError("fit expects a Dataset")
        method = canonical_method(self.method)
        if method == "oracle":
            raise SpecError("the oracle method needs DGP-supplied true nuisance functions")
        problem = build_problem(self.estimand, self.q, self.n_grid)
        self.problem_ = problem
        grid = None
        if method == "inverse-cdf":
            grid = outcome_grid(data.defined_outcomes(), self.n_grid)
        self.nuisance_ = fit_nuisance(problem, data, self.learners, self.k_folds, self.random_state, grid=grid)
        if method == "inverse-cdf":
            self.report_ = inverse_cdf_estimate(problem, data, self.nuisance_, grid, self.level)
        else:
            self.report_ = estimate(problem, data, self.nuisance_, method, self.level)
        self.theta_ = self.report_.theta
        self.se_ = self.report_.se
        self.ci_ = self.report_.ci
        self.B_ = self.report_.B
        return self

    def summary(self) -> dict:
        check_is_fitted(self, "report_")
        return self.report_.to_dict()
