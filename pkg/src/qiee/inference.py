"""Standard errors, Wald intervals and quantile rearrangement."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .ee_engine import MomentProblem, nuisance_values, per_unit_score
from .errors import (
    ArgumentError,
    BracketingError,
    DegeneracyError,
    InstabilityError,
    RuntimeInstabilityError,
    SpecError,
)
from .nuisance import resolve_bindings


@dataclass(frozen=True)
class VarianceEstimate:
    """Standard error of a quantile estimate.

    ``b_used`` is the normalizer the score-scale variance was divided by;
    ``replicates`` counts successful bootstrap roots (0 for the EIF route).
    """

    se: float
    method: str
    b_used: float
    replicates: int = 0
    degenerate: bool = False


def eif_variance(problem: MomentProblem, data, nuisance, theta: float, B: float, debiased: bool = True) -> VarianceEstimate:
    """``sqrt(P_n[(g + phi)^2]) / (B sqrt(n))`` at ``theta``.

    With ``debiased=False`` the adjustment term is dropped, which is the
    known-nuisance variance of the plain IEE.
    """
    if not np.isfinite(B) or B <= 0:
        raise DegeneracyError(f"normalizer B = {B:.3g} must be positive")
    units = data if isinstance(data, dict) else problem.units(data)
    s = per_unit_score(problem, units, nuisance_values(nuisance), float(theta), debiased=debiased)
    n = len(s)
    se = float(np.sqrt(np.mean(s**2)) / (B * np.sqrt(n)))
    return VarianceEstimate(se=se, method="eif", b_used=float(B), degenerate=se == 0.0)


def wald_ci(theta: float, se: float, level: float = 0.95) -> tuple[float, float]:
    """``theta -/+ z_{(1 + level)/2} se``; a zero ``se`` gives a flagged point interval."""
    if not 0 < level < 1:
        raise ArgumentError(f"level must lie in (0, 1), got {level}")
    if se == 0:
        warnings.warn("standard error is zero; the confidence interval has zero width", RuntimeWarning, stacklevel=2)
    z = float(stats.norm.ppf((1 + level) / 2))
    return (float(theta - z * se), float(theta + z * se))


def _check_parametric(problem, specs):
    bindings = resolve_bindings(problem.roles, specs)
    for name, b in bindings.items():
        if not b.spec.parametric:
            raise SpecError(
                f"bootstrap is only justified for parametric working models; role {name!r} uses {b.spec.kind}"
            )
    return bindings


def bootstrap_variance(
    problem: MomentProblem,
    data,
    specs,
    theta: float,
    n_boot: int = 200,
    seed: int = 0,
    method: str = "debiased",
    k_folds=None,
    max_failure_rate: float = 0.2,
) -> VarianceEstimate:
    """Nonparametric bootstrap SE: resample units, refit nuisances, re-solve.

    Replicate ``b`` draws its indices from ``default_rng([seed, b])``, so the
    result does not depend on evaluation order. Nuisances are refitted on
    the full resample with the original learner specs.
    """
    from .estimands import estimate, fit_nuisance

    if k_folds:
        raise SpecError("bootstrap is not justified with cross-fitted nuisances; use the EIF variance")
    if n_boot < 50:
        raise ArgumentError("n_boot must be at least 50")
    bindings = _check_parametric(problem, specs)
    roots, failures = [], 0
    for b in range(n_boot):
        idx = np.random.default_rng([seed, b]).integers(0, data.n, data.n)
        try:
            sample = data.take(idx)
            nuis = fit_nuisance(problem, sample, bindings, k_folds=None)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                roots.append(estimate(problem, sample, nuis, method).theta)
        except (RuntimeInstabilityError, BracketingError):
            failures += 1
    if failures > max_failure_rate * n_boot:
        raise InstabilityError(f"{failures} of {n_boot} bootstrap replicates failed")
    roots = np.asarray(roots)
    se = float(np.std(roots, ddof=1))
    return VarianceEstimate(se=se, method="bootstrap", b_used=float("nan"), replicates=len(roots), degenerate=se == 0.0)


def joint_bootstrap_se(problems, data, specs, n_boot=200, seed=0, method="debiased", max_failure_rate=0.2) -> float:
    """Bootstrap SE of ``theta_first - theta_second`` from shared resamples."""
    from .estimands import estimate, fit_nuisance

    first, second = problems
    b1, b2 = _check_parametric(first, specs.get(first.name)), _check_parametric(second, specs.get(second.name))
    diffs, failures = [], 0
    for b in range(n_boot):
        idx = np.random.default_rng([seed, b]).integers(0, data.n, data.n)
        try:
            sample = data.take(idx)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                t1 = estimate(first, sample, fit_nuisance(first, sample, b1, None), method).theta
                t2 = estimate(second, sample, fit_nuisance(second, sample, b2, None), method).theta
            diffs.append(t1 - t2)
        except (RuntimeInstabilityError, BracketingError):
            failures += 1
    if failures > max_failure_rate * n_boot:
        raise InstabilityError(f"{failures} of {n_boot} bootstrap replicates failed")
    return float(np.std(diffs, ddof=1))


def rearrange(qs, estimates, atol: float = 1e-12) -> np.ndarray:
    """Monotone rearrangement of a quantile curve.

    ``Q_R(q_j) = inf{y : sum_l I(Q(q_l) <= y) (q_l - q_{l-1}) >= q_j}`` with
    ``q_0 = 0``. The infimum is attained at one of the input values, so it
    is found by scanning the sorted estimates. ``atol`` absorbs rounding in
    the cumulative weights.
    """
    qs = np.asarray(qs, dtype=float).reshape(-1)
    est = np.asarray(estimates, dtype=float).reshape(-1)
    if qs.shape != est.shape:
        raise ArgumentError(f"{qs.size} levels but {est.size} estimates")
    if qs.size == 0:
        return est.copy()
    if not np.all(np.diff(qs) > 0) or qs[0] <= 0 or qs[-1] >= 1:
        raise ArgumentError("levels must be strictly increasing inside (0, 1)")
    weights = np.diff(np.concatenate([[0.0], qs]))
    order = np.argsort(est, kind="stable")
    values = est[order]
    cum = np.cumsum(weights[order])
    # ties: the mass at y includes every estimate equal to y
    last_of_tie = np.searchsorted(values, values, side="right") - 1
    cum = cum[last_of_tie]
    out = np.empty_like(est)
    for j, q in enumerate(qs):
        k = int(np.flatnonzero(cum >= q - atol)[0])
        out[j] = values[k]
    return out
