import itertools
import numpy as np
import pytest
from hypothesis import given, strategies as st

from qiee.errors import ArgumentError, DegeneracyError, SpecError
from qiee.estimands import build_qte_problem, build_truncation_problem, estimate, fit_nuisance
from qiee.inference import bootstrap_variance, eif_variance, rearrange, wald_ci
from qiee.nuisance import LearnerSpec
from qiee.simlab import dgp_example1, dgp_example3, dgp_null, oracle_nuisance


# -- Wald intervals ------------------------------------------------------------

def test_wald_95():
    lo, hi = wald_ci(0.0, 1.0, 0.95)
    assert lo == pytest.approx(-1.959964, abs=1e-6) and hi == pytest.approx(1.959964, abs=1e-6)


def test_wald_50():
    lo, hi = wald_ci(3.0, 2.0, 0.5)
    assert hi - 3.0 == pytest.approx(0.6744898 * 2.0, abs=1e-6)
    assert 3.0 - lo == pytest.approx(hi - 3.0)


def test_wald_zero_se_flagged():
    with pytest.warns(RuntimeWarning, match="zero width"):
        assert wald_ci(1.0, 0.0) == (1.0, 1.0)


@pytest.mark.parametrize("level", [0.0, 1.0, 1.5])
def test_wald_level_range(level):
    with pytest.raises(ArgumentError):
        wald_ci(0.0, 1.0, level)


# -- EIF variance --------------------------------------------------------------

def test_eif_variance_rejects_nonpositive_B():
    data = dgp_null(200, 1)
    p = build_qte_problem(1, 0.5)
    with pytest.raises(DegeneracyError):
        eif_variance(p, data, oracle_nuisance("null", data, p), 0.5, 0.0)


def test_eif_variance_all_zero_scores_is_degenerate():
    data = dgp_null(200, 1)
    p = build_qte_problem(1, 0.5)
    nuis = oracle_nuisance("null", data, p)
    # nobody in the arm and the outcome CDF equals q at theta -> every score vanishes
    zero = {**nuis, "propensity": np.full(data.n, 0.5)}
    units = p.units(data)
    units["arm"] = np.zeros(data.n)
    v = eif_variance(p, units, zero, 0.5, 1.0)
    assert v.se == 0.0 and v.degenerate


def test_median_se_matches_sample_median_asymptotics():
    # known-PS randomized design, Y ~ U(0,1): the treated arm of n/2 units
    # has median SE 1 / (2 f sqrt(n/2)) with f = 1
    n = 10_000
    data = dgp_null(n, 2024)
    p = build_qte_problem(1, 0.5)
    rep = estimate(p, data, fit_nuisance(p, data, k_folds=5, seed=1))
    classical = 1 / (2 * 1.0 * np.sqrt(n / 2))
    assert rep.se == pytest.approx(classical, rel=0.10)


def test_eif_variance_equals_report_se():
    data = dgp_example1(800, 3)
    p = build_qte_problem(0, 0.5)
    nuis = fit_nuisance(p, data, k_folds=5, seed=1)
    rep = estimate(p, data, nuis)
    v = eif_variance(p, data, nuis, rep.theta, rep.B)
    assert v.se == pytest.approx(rep.se, rel=1e-12) and v.method == "eif"


# -- bootstrap -----------------------------------------------------------------

def test_bootstrap_is_deterministic():
    data = dgp_example1(300, 4)
    p = build_qte_problem(1, 0.5)
    a = bootstrap_variance(p, data, None, 1.5, n_boot=50, seed=9)
    b = bootstrap_variance(p, data, None, 1.5, n_boot=50, seed=9)
    assert a.se == b.se and a.replicates == 50 and a.method == "bootstrap"
    assert bootstrap_variance(p, data, None, 1.5, n_boot=50, seed=10).se != a.se


def test_bootstrap_rejects_flexible_learners():
    data = dgp_example1(300, 4)
    p = build_qte_problem(1, 0.5)
    with pytest.raises(SpecError, match="parametric"):
        bootstrap_variance(p, data, {"outcome_cdf": LearnerSpec(kind="grid-cdf-family")}, 1.5)


def test_bootstrap_rejects_cross_fitting():
    data = dgp_example1(300, 4)
    with pytest.raises(SpecError, match="cross-fitted"):
        bootstrap_variance(build_qte_problem(1, 0.5), data, None, 1.5, k_folds=5)


def test_bootstrap_needs_50_replicates():
    data = dgp_example1(300, 4)
    with pytest.raises(ArgumentError):
        bootstrap_variance(build_qte_problem(1, 0.5), data, None, 1.5, n_boot=49)


def test_bootstrap_default_is_200():
    import inspect
    assert inspect.signature(bootstrap_variance).parameters["n_boot"].default == 200


def test_bootstrap_agrees_with_eif_on_example3():
    # the weighted step score makes a single bootstrap SE noisy, so the two
    # routes are compared on average over independent samples
    p = build_truncation_problem(1, 0.5)
    boot, eif = [], []
    for seed in (77, 78, 79, 80):
        data = dgp_example3(1000, seed)
        rep = estimate(p, data, fit_nuisance(p, data, k_folds=None))
        eif.append(rep.se)
        boot.append(bootstrap_variance(p, data, None, rep.theta, n_boot=200, seed=3).se)
    assert 0.8 <= np.mean(boot) / np.mean(eif) <= 1.25


# -- rearrangement -------------------------------------------------------------

def _rearrange_brute(qs, est):
    """Direct evaluation of the infimum over the finite candidate set."""
    qs, est = np.asarray(qs, float), np.asarray(est, float)
    w = np.diff(np.concatenate([[0.0], qs]))
    out = []
    for q in qs:
        ok = [y for y in sorted(set(est)) if (w * (est <= y)).sum() >= q - 1e-12]
        out.append(min(ok))
    return np.array(out)


def test_rearrange_examples():
    np.testing.assert_array_equal(rearrange([0.25, 0.5, 0.75], [1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(rearrange([0.25, 0.5, 0.75], [2, 1, 3]), _rearrange_brute([0.25, 0.5, 0.75], [2, 1, 3]))
    np.testing.assert_array_equal(rearrange([0.25, 0.5, 0.75], [2, 1, 3]), [1, 2, 3])
    np.testing.assert_array_equal(rearrange([0.4], [7.0]), [7.0])


def test_rearrange_unequal_spacing():
    # mass below y=1 is 0.1 (from q=0.1 at value 1), level 0.2 needs value 5
    qs = [0.1, 0.2, 0.9]
    est = [1.0, 5.0, 2.0]
    np.testing.assert_array_equal(rearrange(qs, est), _rearrange_brute(qs, est))


def test_rearrange_matches_brute_force_on_all_small_permutations():
    rng = np.random.default_rng(0)
    for m in range(1, 7):
        qs = np.sort(rng.choice(np.arange(1, 20), m, replace=False)) / 20
        for perm in itertools.permutations(range(m)):
            est = np.array(perm, float) + rng.integers(0, 2, m)
            np.testing.assert_array_equal(rearrange(qs, est), _rearrange_brute(qs, est))


def test_rearrange_errors():
    with pytest.raises(ArgumentError):
        rearrange([0.2, 0.5], [1.0])
    with pytest.raises(ArgumentError):
        rearrange([0.5, 0.2], [1.0, 2.0])


@st.composite
def _curves(draw):
    m = draw(st.integers(1, 12))
    qs = sorted(draw(st.sets(st.integers(1, 99), min_size=m, max_size=m)))
    est = draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=m, max_size=m))
    return np.array(qs) / 100, np.array(est)


@given(_curves())
def test_rearrange_monotone_and_idempotent(curve):
    qs, est = curve
    r = rearrange(qs, est)
    assert np.all(np.diff(r) >= 0)
    np.testing.assert_array_equal(rearrange(qs, r), r)
    assert set(r) <= set(est)


@given(_curves())
def test_rearrange_keeps_monotone_input(curve):
    qs, est = curve
    est = np.sort(est)
    np.testing.assert_array_equal(rearrange(qs, est), est)
