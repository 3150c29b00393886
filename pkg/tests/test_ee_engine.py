import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special, stats

from qiee.dataset import Dataset
from qiee.ee_engine import (
    ScoreTrace,
    default_bracket,
    estimate_B,
    eval_debiased_score,
    eval_plugin_score,
    orthogonality_probe,
    per_unit_score,
    score_function,
    solve_ee,
)
from qiee.errors import ArgumentError, BracketingError, DegeneracyError, EvaluationError
from qiee.estimands import (
    OracleNuisance,
    build_mediation_problem,
    build_qte_problem,
    estimate,
    qte_eif_bracket,
)
from qiee.nuisance import FunctionCurve, GridCurve
from qiee.simlab import dgp_example1, dgp_example2, oracle_nuisance


def _all_treated(y, ps=1.0):
    y = np.asarray(y, dtype=float)
    n = len(y)
    data = Dataset({"Y": y, "A": np.ones(n), "L1": np.zeros(n)},
                   {"outcome": "Y", "treatment": "A", "covariate": ["L1"]})
    nuis = OracleNuisance({"propensity": np.full(n, ps),
                           "outcome_cdf": FunctionCurve(n, lambda t: special.ndtr(t) + 0 * y)})
    return data, nuis


# -- score evaluation ------------------------------------------------------------

def test_plugin_score_is_centered_empirical_cdf():
    rng = np.random.default_rng(0)
    y = rng.normal(size=57)
    data, nuis = _all_treated(y)
    problem = build_qte_problem(1, 0.3)
    for theta in (-1.0, 0.0, 0.4, 2.0):
        assert eval_plugin_score(problem, data, nuis, theta) == pytest.approx(np.mean(y <= theta) - 0.3, abs=1e-15)


def test_plugin_score_with_half_propensity_doubles_the_cdf():
    # with every unit treated but the propensity fixed at 0.5 the weight is 2
    y = np.arange(10.0)
    data, nuis = _all_treated(y, ps=0.5)
    problem = build_qte_problem(1, 0.5)
    assert eval_plugin_score(problem, data, nuis, 4.5) == pytest.approx(2 * 0.5 - 0.5)


def test_plugin_score_below_support_is_minus_q():
    data, nuis = _all_treated([1.0, 2.0, 3.0])
    assert eval_plugin_score(build_qte_problem(1, 0.35), data, nuis, 0.0) == pytest.approx(-0.35)


def test_non_finite_score_names_unit():
    data, nuis = _all_treated([1.0, 2.0, 3.0])
    nuis["propensity"] = np.array([1.0, 0.0, 1.0])
    with pytest.raises(EvaluationError, match="unit 1"):
        eval_plugin_score(build_qte_problem(1, 0.5), data, nuis, 2.5)


@pytest.fixture(scope="module")
def big_example1():
    data = dgp_example1(100_000, 2024)
    problem = build_qte_problem(0, 0.5)
    return data, problem, oracle_nuisance("example1", data, problem)


def test_oracle_plugin_score_at_true_median(big_example1):
    data, problem, nuis = big_example1
    assert abs(eval_plugin_score(problem, data, nuis, 0.0)) <= 0.01


def test_adjustment_term_has_mean_zero(big_example1):
    data, problem, nuis = big_example1
    units = problem.units(data)
    h = nuis.at(0.0)
    phi = problem.adjustment(units, h, 0.0, problem.q)
    assert abs(phi.mean()) <= 3 * phi.std(ddof=1) / np.sqrt(len(phi))


def test_oracle_plugin_and_debiased_roots_agree():
    data = dgp_example1(10_000, 77)
    problem = build_qte_problem(0, 0.5)
    nuis = oracle_nuisance("example1", data, problem)
    plug = estimate(problem, data, nuis, "plug-in")
    de = estimate(problem, data, nuis, "debiased")
    # the debiased root is efficient, so the gap has variance se_plug^2 - se_de^2
    gap_sd = np.sqrt(plug.se**2 - de.se**2)
    assert abs(plug.theta - de.theta) <= 3 * gap_sd
    assert abs(plug.theta - de.theta) <= 3 * plug.se


def test_mediation_score_saturates():
    data = dgp_example2(2000, 5)
    problem = build_mediation_problem(0.4)
    nuis = oracle_nuisance("example2", data, problem)
    far = 1e6
    assert eval_plugin_score(problem, data, nuis, far) == pytest.approx(0.6, abs=1e-9)
    assert eval_debiased_score(problem, data, nuis, far) == pytest.approx(0.6, abs=1e-9)


def test_strategy_one_bracket_matches_g_plus_phi(big_example1):
    data, problem, nuis = big_example1
    units = problem.units(data)
    for theta in (-7.3, 0.0, 4.2):
        direct = qte_eif_bracket(units, nuis.at(theta), theta, problem.q)
        assembled = per_unit_score(problem, units, nuis, theta)
        np.testing.assert_allclose(assembled, direct, atol=1e-12, rtol=0)


def test_plugin_estimate_is_debiased_run_without_adjustment():
    data = dgp_example1(800, 3)
    problem = build_qte_problem(1, 0.5)
    nuis = oracle_nuisance("example1", data, problem)
    plug = estimate(problem, data, nuis, "plug-in")
    from dataclasses import replace
    silent = replace(problem, adjustment=lambda u, h, theta, tau: 0.0 * u["y"])
    de_no_phi = estimate(silent, data, nuis, "debiased")
    assert de_no_phi.theta == plug.theta
    assert plug.method == "plug-in" and de_no_phi.method == "debiased"


# -- root finding ----------------------------------------------------------------

def test_solver_empirical_median():
    y = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    data, nuis = _all_treated(y)
    problem = build_qte_problem(1, 0.5)
    f = score_function(problem, data, nuis, debiased=False)
    root, trace = solve_ee(f, default_bracket(y), observed=y)
    assert root == pytest.approx(3.0, abs=1e-6 * 4.8)
    assert isinstance(trace, ScoreTrace)


def test_solver_smooth_root():
    root, trace = solve_ee(lambda t: np.tanh(np.asarray(t) - 1.234), (-5, 5), tol=1e-9)
    assert root == pytest.approx(1.234, abs=1e-9)
    assert trace.width <= 1e-9


def test_solver_no_crossing():
    y = np.linspace(0, 1, 200)
    data, nuis = _all_treated(y)
    f = score_function(build_qte_problem(1, 0.999), data, nuis, debiased=False)
    with pytest.raises(BracketingError) as exc:
        solve_ee(f, (0.0, 0.99), observed=y)
    assert exc.value.min_abs > 0


def test_solver_rejects_empty_bracket():
    with pytest.raises(ArgumentError):
        solve_ee(lambda t: t, (1.0, 1.0))


def test_solver_anchor_rule():
    # crossings near -2, 0 and 2; the anchor picks the middle one
    f = lambda t: np.sin(np.pi * np.asarray(t) / 2) * -1.0
    root, trace = solve_ee(f, (-3, 3), anchor=0.1)
    assert root == pytest.approx(0.0, abs=1e-5)
    assert trace.rule == "closest-to-anchor"
    root2, trace2 = solve_ee(f, (-3, 3))
    assert root2 == pytest.approx(-2.0, abs=1e-5) and trace2.rule == "smallest"


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=60), st.floats(0.05, 0.95))
def test_root_lies_in_a_recorded_sign_change_interval(ys, q):
    y = np.array(ys)
    if np.ptp(y) == 0:
        y = y + np.arange(len(y))
    data, nuis = _all_treated(y)
    f = score_function(build_qte_problem(1, q), data, nuis, debiased=False)
    lo, hi = default_bracket(y)
    root, trace = solve_ee(f, (lo, hi), observed=y)
    assert any(a <= root <= b for a, b in trace.intervals)
    assert trace.width <= 1e-6 * (hi - lo)
    eps = trace.width
    assert f(root - eps) < 0 <= f(root + eps) or f(root - eps) >= 0 > f(root + eps)


def test_scale_equivariance():
    data = dgp_example1(3000, 8)
    problem = build_qte_problem(0, 0.6)
    nuis = oracle_nuisance("example1", data, problem)
    base = estimate(problem, data, nuis, "debiased")
    c, d = 2.5, -4.0
    L = data.matrix(("L1", "L2", "L3", "L4"))
    loc = 10 * L[:, 0] + 5 * L[:, 1:].sum(axis=1)
    moved = Dataset({**data.columns, "Y": c * data.outcome + d}, data.roles)
    n = data.n
    nuis2 = OracleNuisance({
        "propensity": nuis["propensity"],
        "outcome_cdf": FunctionCurve(n, lambda t: special.ndtr((t - (c * loc + d)) / (c * np.e)),
                                     lambda t: stats.norm.pdf((t - (c * loc + d)) / (c * np.e)) / (c * np.e)),
    })
    shifted = estimate(problem, moved, nuis2, "debiased")
    width = np.ptp(moved.outcome) * 1.2
    assert shifted.theta == pytest.approx(c * base.theta + d, abs=2e-6 * width)


# -- normalizer ------------------------------------------------------------------

def test_B_closed_form_normal_density():
    rng = np.random.default_rng(1)
    n = 5000
    y = rng.normal(scale=np.e, size=n)
    data = Dataset({"Y": y, "A": np.zeros(n), "L1": rng.normal(size=n)},
                   {"outcome": "Y", "treatment": "A", "covariate": ["L1"]})
    nuis = OracleNuisance({"propensity": np.ones(n),
                           "outcome_cdf": FunctionCurve(n, lambda t: special.ndtr(t / np.e) + 0 * y,
                                                        lambda t: stats.norm.pdf(t / np.e) / np.e + 0 * y)})
    B = estimate_B(build_qte_problem(0, 0.5), data, 0.0, nuis)
    assert B == pytest.approx(1 / (np.e * np.sqrt(2 * np.pi)), rel=1e-12)
    assert B == pytest.approx(0.1468, abs=1e-4)


def test_B_degenerate_on_flat_cdf():
    n = 50
    data = Dataset({"Y": np.ones(n), "A": np.ones(n), "L1": np.zeros(n)},
                   {"outcome": "Y", "treatment": "A", "covariate": ["L1"]})
    curve = GridCurve(np.array([0.0, 0.5, 2.0, 3.0]), np.tile([0.0, 0.0, 1.0, 1.0], (n, 1)))
    nuis = OracleNuisance({"propensity": np.ones(n), "outcome_cdf": curve})
    with pytest.raises(DegeneracyError):
        estimate_B(build_qte_problem(1, 0.5), data, 2.5, nuis)


def test_B_matches_central_difference_of_plugin_score():
    data = dgp_example1(10_000, 12)
    problem = build_qte_problem(1, 0.5)
    nuis = oracle_nuisance("example1", data, problem)
    rep = estimate(problem, data, nuis, "debiased")
    f = score_function(problem, data, nuis, debiased=False)
    delta = 0.5
    fd = (f(rep.theta + delta) - f(rep.theta - delta)) / (2 * delta)
    assert rep.B == pytest.approx(fd, rel=0.05)


# -- orthogonality probe ---------------------------------------------------------

@pytest.fixture(scope="module")
def probe_setup():
    data = dgp_example1(200_000, 99)
    problem = build_qte_problem(0, 0.5)
    return data, problem, oracle_nuisance("example1", data, problem)


def test_probe_single_role_is_flat(probe_setup):
    data, problem, truth = probe_setup
    for role in ("propensity", "outcome_cdf"):
        res = orthogonality_probe(problem, data, truth, 0.0, [role])
        assert np.all(np.abs(res.delta) <= 4 * res.noise + 1e-15)


def test_probe_joint_perturbation_is_quadratic(probe_setup):
    data, problem, truth = probe_setup
    res = orthogonality_probe(problem, data, truth, 0.0, ["propensity", "outcome_cdf"])
    assert res.slope == pytest.approx(2.0, abs=0.3)
    ratio = res.remainder / res.eps**2
    assert np.ptp(ratio) <= 0.2 * np.abs(ratio).mean()
    assert np.all(np.abs(res.remainder) > 4 * res.remainder_noise)


def test_probe_rejects_unknown_role(probe_setup):
    data, problem, truth = probe_setup
    with pytest.raises(ArgumentError):
        orthogonality_probe(problem, data, truth, 0.0, ["nope"])
