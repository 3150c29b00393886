"""Moment problems, score evaluation, root finding, normalizers and probes.

A :class:`MomentProblem` bundles an identifying moment ``g`` and its
adjustment term ``phi``. Both are written against per-unit arrays and a dict
of nuisance values evaluated at a threshold, and both broadcast over a
vector of thresholds so the solver can scan a grid in one pass.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import Dataset
from .errors import (
    ArgumentError,
    BracketingError,
    DegeneracyError,
    EvaluationError,
    PerturbationError,
)
from .nuisance import CrossFitNuisance, FunctionCurve, LocationScaleCurve, NuisanceRole, NuisanceSet

_CHUNK_CELLS = 2_000_000


@dataclass(frozen=True)
class MomentProblem:
    """A fully wired estimand.

    Parameters
    ----------
    name : short label such as ``"qte:a=0"``.
    q : quantile level in (0, 1).
    roles : nuisance roles ``h_1..h_J`` in mixed-bias numbering.
    pairs : 1-based index pairs ``(a_k, b_k)`` of the mixed-bias form.
    units : extracts the per-unit arrays the moment functions need.
    moment : ``g(units, h, theta, tau)``.
    adjustment : ``phi(units, h, theta, tau)``.
    normalizer : ``B(units, nuisance_set, theta)``, the theta-derivative of
        the expected moment.
    plugin_roles : roles the identifying moment depends on (gamma).
    n_grid : grid size for grid-family and nested roles.
    c_value : optional ``C(units, h, theta)``, the tau-derivative of
        ``E[g + phi]``.
    check : optional ``check(units, nuisance_set)`` run before solving, for
        diagnostics such as positivity warnings.
    """

    name: str
    q: float
    roles: tuple[NuisanceRole, ...]
    pairs: tuple[tuple[int, int], ...]
    units: Callable[[Dataset], dict]
    moment: Callable
    adjustment: Callable
    normalizer: Callable
    plugin_roles: tuple[str, ...] = ()
    n_grid: int = 100
    c_value: Callable | None = None
    check: Callable | None = None
    notes: str = ""

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ArgumentError(f"q must lie in (0, 1), got {self.q}")
        covered = {i for pair in self.pairs for i in pair}
        if covered != set(range(1, len(self.roles) + 1)):
            raise ArgumentError("mixed-bias pairs must cover every nuisance role")

    @property
    def role_names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.roles)

    def role_index(self, name: str) -> int:
        return self.role_names.index(name) + 1

    def with_q(self, q: float) -> "MomentProblem":
        return replace(self, q=q)

    def needs_grid(self, bindings=None) -> bool:
        if any(r.kind == "nested" for r in self.roles):
            return True
        if bindings:
            return any(b.spec.kind == "grid-cdf-family" for b in bindings.values())
        return False


@dataclass
class ScoreTrace:
    """Diagnostics of one root search."""

    grid: list
    values: list
    intervals: list
    root: float
    iterations: int
    width: float
    rule: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# ---------------------------------------------------------------------------
# score evaluation


def nuisance_values(nuisance) -> NuisanceSet:
    if isinstance(nuisance, CrossFitNuisance):
        return nuisance.predictions
    if isinstance(nuisance, NuisanceSet):
        return nuisance
    return NuisanceSet(nuisance)


def _prepared(problem, data):
    return data if isinstance(data, dict) else problem.units(data)


def per_unit_score(problem, units, nuis: NuisanceSet, theta, tau=None, debiased=True):
    """Per-unit ``g`` (+ ``phi``) at one or several thresholds."""
    tau = problem.q if tau is None else tau
    t = np.asarray(theta, dtype=float)
    tc = t if t.ndim == 0 else t.reshape(-1, 1)
    h = nuis.at(t)
    val = problem.moment(units, h, tc, tau)
    if debiased:
        val = val + problem.adjustment(units, h, tc, tau)
    return np.broadcast_to(val, (units["n"],) if t.ndim == 0 else (t.size, units["n"]))


def _check_finite(vals, thetas):
    if np.isfinite(vals).all():
        return
    bad = np.argwhere(~np.isfinite(np.atleast_2d(vals)))[0]
    th = np.atleast_1d(thetas)[bad[0]] if np.ndim(thetas) else float(thetas)
    raise EvaluationError(f"non-finite score for unit {int(bad[-1])} at theta={float(th):.6g}")


def mean_score(problem, units, nuis, theta, tau=None, debiased=True):
    """``P_n`` of the score; vectorized over ``theta`` in memory-bounded chunks."""
    t = np.asarray(theta, dtype=float)
    if t.ndim == 0:
        vals = per_unit_score(problem, units, nuis, t, tau, debiased)
        _check_finite(vals, t)
        return float(vals.mean())
    out = np.empty(t.size)
    step = max(1, _CHUNK_CELLS // max(units["n"], 1))
    for s in range(0, t.size, step):
        chunk = t[s : s + step]
        vals = per_unit_score(problem, units, nuis, chunk, tau, debiased)
        _check_finite(vals, chunk)
        out[s : s + step] = vals.mean(axis=1)
    return out


def eval_plugin_score(problem: MomentProblem, data, nuisance, theta) -> float:
    """``G_n(theta) = P_n[g(W, q, theta, h)]``."""
    return mean_score(problem, _prepared(problem, data), nuisance_values(nuisance), theta, debiased=False)


def eval_debiased_score(problem: MomentProblem, data, nuisance, theta) -> float:
    """``P_n[g + phi]`` at ``theta``."""
    return mean_score(problem, _prepared(problem, data), nuisance_values(nuisance), theta, debiased=True)


def score_function(problem, data, nuisance, debiased=True, tau=None):
    units = _prepared(problem, data)
    nuis = nuisance_values(nuisance)
    return lambda theta: mean_score(problem, units, nuis, theta, tau, debiased)


# ---------------------------------------------------------------------------
# root finding


def default_bracket(y) -> tuple[float, float]:
    """Observed outcome range widened by 10% on each side."""
    y = np.asarray(y, dtype=float)
    y = y[np.isfinite(y)]
    if y.size == 0:
        raise ArgumentError("no defined outcomes")
    lo, hi = float(y.min()), float(y.max())
    pad = 0.1 * (hi - lo) if hi > lo else max(1.0, abs(lo)) * 0.1
    return lo - pad, hi + pad


def _vector_call(score, thetas):
    try:
        out = np.asarray(score(thetas), dtype=float)
        if out.shape == thetas.shape:
            return out
    except (TypeError, ValueError):
        pass
    return np.array([float(score(t)) for t in thetas])


def solve_ee(score, bracket, tol=None, *, observed=None, anchor=None, n_scan=256, max_observed=256):
    """Find a root of a possibly discontinuous scalar estimating function.

    The bracket is scanned on ``n_scan`` uniform points plus the observed
    outcomes inside it, thinned to ``max_observed`` evenly spaced order
    statistics. Sign-change intervals are those where ``score < 0``
    flips. With several of them, the one whose midpoint is closest to
    ``anchor`` is refined when an anchor is given, otherwise the smallest.
    Bisection stops once the interval is narrower than ``tol`` (default
    ``1e-6`` times the bracket width) and the midpoint is returned.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not lo < hi:
        raise ArgumentError("bracket must satisfy lo < hi")
    tol = 1e-6 * (hi - lo) if tol is None else float(tol)
    grid = np.linspace(lo, hi, n_scan)
    if observed is not None:
        obs = np.asarray(observed, dtype=float)
        obs = np.sort(obs[np.isfinite(obs) & (obs > lo) & (obs < hi)])
        if obs.size > max_observed:
            obs = obs[np.linspace(0, obs.size - 1, max_observed).astype(int)]
        grid = np.unique(np.concatenate([grid, obs]))
    vals = _vector_call(score, grid)
    if not np.isfinite(vals).all():
        j = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise EvaluationError(f"non-finite score at theta={grid[j]:.6g}")
    neg = vals < 0
    idx = np.flatnonzero(neg[:-1] != neg[1:])
    if idx.size == 0:
        j = int(np.argmin(np.abs(vals)))
        raise BracketingError(
            f"no sign change on [{lo:.6g}, {hi:.6g}]; min |G_n| = {abs(vals[j]):.3g} at theta={grid[j]:.6g}",
            min_abs=float(abs(vals[j])),
            theta_at_min=float(grid[j]),
        )
    intervals = [(float(grid[i]), float(grid[i + 1])) for i in idx]
    if anchor is not None and len(idx) > 1:
        mids = 0.5 * (grid[idx] + grid[idx + 1])
        pick = int(idx[np.argmin(np.abs(mids - anchor))])
        rule = "closest-to-anchor"
    else:
        pick = int(idx[0])
        rule = "smallest"
    a, b = float(grid[pick]), float(grid[pick + 1])
    neg_a = bool(neg[pick])
    it = 0
    while b - a > tol:
        m = 0.5 * (a + b)
        if m <= a or m >= b:
            break
        g = float(score(m))
        if not np.isfinite(g):
            raise EvaluationError(f"non-finite score at theta={m:.6g}")
        if (g < 0) == neg_a:
            a = m
        else:
            b = m
        it += 1
    root = 0.5 * (a + b)
    trace = ScoreTrace(grid.tolist(), vals.tolist(), intervals, root, it, b - a, rule)
    return root, trace


# ---------------------------------------------------------------------------
# normalizer


def curve_derivative(curve, theta, delta):
    """Analytic slope where the curve has one, else a central difference."""
    if isinstance(curve, LocationScaleCurve) or (isinstance(curve, FunctionCurve) and curve.dfn is not None):
        return curve.slope(theta)
    return (curve.value(theta + delta) - curve.value(theta - delta)) / (2 * delta)


def fd_step(units) -> float:
    """Rule-of-thumb difference step on the outcome scale: 1.06 sd n^(-1/5)."""
    y = units["y"]
    y = y[np.isfinite(y)]
    return 1.06 * float(np.std(y)) * len(y) ** (-0.2)


def estimate_B(problem: MomentProblem, data, theta, nuisance) -> float:
    """Plug-in estimate of ``d/dtheta E[g]`` at ``theta``; must be positive."""
    units = _prepared(problem, data)
    b = float(problem.normalizer(units, nuisance_values(nuisance), float(theta)))
    if not np.isfinite(b) or b <= 0:
        raise DegeneracyError(f"normalizer B = {b:.3g} is not positive at theta={theta:.6g}")
    return b


# ---------------------------------------------------------------------------
# orthogonality probe


@dataclass
class ProbeResult:
    """Bias curve of the EIF under additive nuisance perturbations.

    ``delta`` is the paired Monte Carlo mean of ``psi(h_eps) - psi(h)`` and
    ``noise`` its standard error. With several perturbed roles, ``remainder``
    subtracts the single-role curves from ``delta``: each of those has mean
    zero when the mixed-bias property holds, so they act as control variates
    and leave the cross (product) term. ``slope`` is the log-log slope of
    ``|remainder|`` (of ``|delta|`` for one role) against ``eps``.
    """

    roles: tuple[str, ...]
    eps: np.ndarray
    delta: np.ndarray
    noise: np.ndarray
    slope: float
    theta: float
    remainder: np.ndarray | None = None
    remainder_noise: np.ndarray | None = None

    def to_dict(self):
        d = {
            "roles": list(self.roles),
            "eps": self.eps.tolist(),
            "delta": self.delta.tolist(),
            "noise": self.noise.tolist(),
            "slope": self.slope,
            "theta": self.theta,
        }
        if self.remainder is not None:
            d["remainder"] = self.remainder.tolist()
            d["remainder_noise"] = self.remainder_noise.tolist()
        return d


def default_direction(units) -> np.ndarray:
    """Bounded positive weight ``0.5 + 0.5 tanh(x1)`` of the first covariate."""
    x = units.get("x1")
    if x is None:
        return np.full(units["n"], 0.75)
    return 0.5 + 0.5 * np.tanh(x)


def _loglog_slope(eps, values) -> float:
    ok = np.abs(values) > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(eps[ok]), np.log(np.abs(values[ok])), 1)[0])


def orthogonality_probe(
    problem: MomentProblem,
    data,
    truth: Mapping,
    theta: float,
    roles: Sequence[str],
    eps_grid=None,
    direction=None,
    clip: float = 0.01,
) -> ProbeResult:
    """Perturb ``roles`` of the true nuisance by ``eps * u`` and track the EIF mean.

    Each role value ``h`` is shifted by ``eps * h (1 - h) * s(W)`` with ``s``
    the bounded ``direction`` (default :func:`default_direction`), which keeps
    probabilities inside (0, 1) for ``eps < 1``. Probability roles are then
    clipped to ``[clip, 1 - clip]``. See :class:`ProbeResult` for the output.
    """
    units = _prepared(problem, data)
    truth = nuisance_values(truth)
    eps_grid = np.geomspace(0.01, 0.1, 6) if eps_grid is None else np.asarray(eps_grid, dtype=float)
    s = default_direction(units) if direction is None else np.asarray(direction, dtype=float)
    kinds = {r.name: r.kind for r in problem.roles}
    roles = tuple(roles)
    for name in roles:
        if name not in kinds:
            raise ArgumentError(f"unknown role {name!r}")
    theta = float(theta)
    values = truth.at(theta)
    h0 = {name: values[name] for name in truth}
    for name, kind in kinds.items():
        if kind == "probability":
            h0[name] = np.clip(h0[name], clip, 1 - clip)
    B = float(problem.normalizer(units, truth, theta))

    def psi(h):
        return (problem.moment(units, h, theta, problem.q) + problem.adjustment(units, h, theta, problem.q)) / -B

    def shifted(e, names):
        h = dict(h0)
        for name in names:
            v = h0[name]
            pert = v + e * v * (1 - v) * s
            if kinds[name] == "probability":
                if (pert <= 0).any() or (pert >= 1).any():
                    raise PerturbationError(f"eps={e:g} pushes {name!r} outside (0, 1)")
                pert = np.clip(pert, clip, 1 - clip)
            h[name] = pert
        return psi(h)

    base = psi(h0)
    deltas, noise, rem, rem_noise = [], [], [], []
    for e in eps_grid:
        d = shifted(e, roles) - base
        deltas.append(d.mean())
        noise.append(d.std(ddof=1) / np.sqrt(len(d)))
        if len(roles) > 1:
            r = d - sum(shifted(e, (name,)) - base for name in roles)
            rem.append(r.mean())
            rem_noise.append(r.std(ddof=1) / np.sqrt(len(r)))
    deltas, noise = np.array(deltas), np.array(noise)
    if len(roles) > 1:
        rem, rem_noise = np.array(rem), np.array(rem_noise)
        return ProbeResult(roles, eps_grid, deltas, noise, _loglog_slope(eps_grid, rem), theta, rem, rem_noise)
    return ProbeResult(roles, eps_grid, deltas, noise, _loglog_slope(eps_grid, deltas), theta)
