"""Nuisance learners and the cross-fitting engine.

Three learner families cover every nuisance role:

* ``BinaryGLM``: logit or probit regression fitted by ridge-penalized IRLS.
  It is used for propensities and survival probabilities. Fractional targets
  in [0, 1] are accepted (quasi-likelihood), which the grid family uses for
  nested regressions.
* ``LocationScaleCDF``: Y = m(x) + sqrt(v(x)) * eps, with m and v fitted by
  least squares and the law of eps estimated by a Gaussian-kernel-smoothed
  empirical CDF of the standardized residuals.
* ``GridCdfFamily``: one regression per threshold on a grid, linearly
  interpolated in the threshold.

Fitted conditional CDFs are exposed to the estimating-equation engine as
*curves*: objects that map a threshold (scalar or vector) to the per-unit
value and slope, so the solver never refits anything.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import special
from scipy.signal import fftconvolve
from sklearn.base import BaseEstimator
from sklearn.isotonic import isotonic_regression
from sklearn.preprocessing import PolynomialFeatures
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import Dataset, FoldAssignment, make_folds
from .errors import (
    ArgumentError,
    ConvergenceError,
    CrossFitError,
    DegenerateLabelError,
    FitError,
    SampleSizeError,
    SpecError,
    VarianceDegeneracyError,
)

LEARNER_KINDS = ("logistic-glm", "linear-glm", "additive-cdf", "grid-cdf-family")
LINKS = ("logit", "probit")

# ---------------------------------------------------------------------------
# learner specification


@dataclass(frozen=True)
class LearnerSpec:
    """Serializable description of a learner.

    ``kind`` selects the family. ``degree``/``interaction_only`` control the
    polynomial basis, ``ridge`` the penalty on non-intercept coefficients.
    ``base`` is the per-node regression used by ``grid-cdf-family``.
    """

    kind: str = "logistic-glm"
    degree: int = 1
    interaction_only: bool = False
    ridge: float = 0.0
    link: str = "logit"
    clip: float = 0.01
    bandwidth: str = "silverman"
    residual: str = "kernel"
    n_grid: int = 100
    base: str = "logistic-glm"
    isotonic: bool = False

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise SpecError(f"unknown learner kind {self.kind!r}")
        if self.degree < 1:
            raise SpecError("degree must be >= 1")
        if self.ridge < 0:
            raise SpecError("ridge penalty must be >= 0")
        if self.link not in LINKS:
            raise SpecError(f"unknown link {self.link!r}")
        if not 0 <= self.clip < 0.5:
            raise SpecError("clip must lie in [0, 0.5)")
        if self.bandwidth != "silverman":
            raise SpecError("only the 'silverman' bandwidth rule is available")
        if self.residual not in ("kernel", "gaussian"):
            raise SpecError(f"unknown residual law {self.residual!r}")
        if self.kind == "grid-cdf-family" and self.n_grid < 2:
            raise SpecError("grid-cdf-family needs n_grid >= 2")
        if self.base not in ("logistic-glm", "linear-glm"):
            raise SpecError(f"grid base learner must be a GLM, got {self.base!r}")

    @property
    def parametric(self) -> bool:
        """Finite-dimensional working model (bootstrap is justified)."""
        return self.kind != "grid-cdf-family"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LearnerSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown learner spec key(s): {sorted(extra)}")
        return cls(**d)

    def binary_learner(self, clip=None) -> "BinaryGLM":
        return BinaryGLM(
            link=self.link,
            ridge=self.ridge,
            degree=self.degree,
            interaction_only=self.interaction_only,
            clip=self.clip if clip is None else clip,
        )


# ---------------------------------------------------------------------------
# basis expansion


class _Basis:
    """Polynomial expansion followed by column standardization."""

    def __init__(self, degree, interaction_only):
        self.poly = PolynomialFeatures(degree, interaction_only=interaction_only, include_bias=False)

    def fit(self, X):
        P = self.poly.fit_transform(X)
        self.mean_ = P.mean(axis=0)
        sd = P.std(axis=0)
        self.scale_ = np.where(sd > 1e-12 * (1 + np.abs(self.mean_)), sd, 1.0)
        return self

    def transform(self, X):
        P = (self.poly.transform(X) - self.mean_) / self.scale_
        return np.column_stack([np.ones(len(P)), P])


def _design(X, degree, interaction_only):
    X = check_array(X, ensure_min_features=0)
    if X.shape[1] == 0:
        return None, np.ones((X.shape[0], 1))
    basis = _Basis(degree, interaction_only).fit(X)
    return basis, basis.transform(X)


def _apply_design(basis, X):
    X = check_array(X, ensure_min_features=0)
    if basis is None:
        return np.ones((X.shape[0], 1))
    return basis.transform(X)


# ---------------------------------------------------------------------------
# IRLS for binomial GLMs (batched over target columns)


def _link_parts(eta, link):
    """Mean, score weight factor and Fisher weight for each linear predictor."""
    if link == "logit":
        mu = special.expit(eta)
        return mu, None, mu * (1 - mu)
    log_phi = -0.5 * eta**2 - 0.5 * np.log(2 * np.pi)
    m_pos = np.exp(log_phi - special.log_ndtr(eta))  # phi / Phi(eta)
    m_neg = np.exp(log_phi - special.log_ndtr(-eta))  # phi / Phi(-eta)
    return special.ndtr(eta), (m_pos, m_neg), m_pos * m_neg


def _score_term(y, mu, extra, link):
    if link == "logit":
        return y - mu
    m_pos, m_neg = extra
    return y * m_pos - (1 - y) * m_neg


def _nll(y, eta, link):
    if link == "logit":
        lp, ln = -np.logaddexp(0, -eta), -np.logaddexp(0, eta)
    else:
        lp, ln = special.log_ndtr(eta), special.log_ndtr(-eta)
    return -(y * lp + (1 - y) * ln).sum(axis=0)


def _irls(Z, Y, link="logit", ridge=0.0, max_iter=100, tol=1e-8):
    """Fit independent binomial GLMs sharing the design ``Z`` (n x p).

    ``Y`` is n x R with entries in [0, 1]. Returns coefficients (p x R), the
    final gradient norms and the iteration count. Iteration stops once the
    gradient norm is below ``tol * n``.
    """
    n, p = Z.shape
    R = Y.shape[1]
    D = np.ones(p)
    D[0] = 0.0
    pen = ridge * D
    # start from the link-transformed linear-probability fit
    lin = np.clip(Z @ np.linalg.lstsq(Z, Y, rcond=None)[0], 0.02, 0.98)
    beta = np.linalg.lstsq(Z, special.logit(lin) if link == "logit" else special.ndtri(lin), rcond=None)[0]
    ZZ = (Z[:, :, None] * Z[:, None, :]).reshape(n, p * p)

    def objective(b, cols=slice(None)):
        return _nll(Y[:, cols], Z @ b, link) + 0.5 * (pen[:, None] * b**2).sum(axis=0)

    obj = objective(beta)
    active = np.ones(R, dtype=bool)
    gnorm = np.full(R, np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        eta = Z @ beta[:, idx]
        Yi = Y[:, idx]
        mu, extra, W = _link_parts(eta, link)
        if link == "probit":
            # observed information; log-concavity keeps it positive
            m_pos, m_neg = extra
            W = Yi * m_pos * (eta + m_pos) + (1 - Yi) * m_neg * (m_neg - eta)
        grad = Z.T @ _score_term(Yi, mu, extra, link) - pen[:, None] * beta[:, idx]
        gnorm[idx] = np.linalg.norm(grad, axis=0)
        still = gnorm[idx] > tol * n
        active[idx[~still]] = False
        if not active.any():
            break
        idx, grad, W = idx[still], grad[:, still], W[:, still]
        H = (ZZ.T @ W).T.reshape(len(idx), p, p)
        H += np.diag(pen + 1e-10)[None]
        try:
            step = np.linalg.solve(H, grad.T[..., None])[..., 0].T
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(H[j], grad[:, j], rcond=None)[0] for j in range(len(idx))], axis=1)
        t = np.ones(len(idx))
        for _ in range(30):
            cand = beta[:, idx] + t * step
            new = objective(cand, idx)
            worse = ~(new <= obj[idx] + 1e-10 * (1 + np.abs(obj[idx])))
            if not worse.any():
                break
            t = np.where(worse, t / 2, t)
        beta[:, idx] = cand
        obj[idx] = new
        if not np.isfinite(beta).all():
            raise ConvergenceError("IRLS produced non-finite coefficients")
    return beta, gnorm, it


# ---------------------------------------------------------------------------
# binary-probability learner


class BinaryGLM(BaseEstimator):
    """Binomial GLM for P(y = 1 | x) with clipped predictions.

    Parameters
    ----------
    link : {'logit', 'probit'}
    ridge : float
        Penalty ``ridge/2 * ||beta||^2`` on the standardized non-intercept
        coefficients.
    degree, interaction_only : polynomial basis options.
    clip : float
        Predictions are clipped to ``[clip, 1 - clip]``.
    max_iter, tol : IRLS controls (gradient-norm stopping rule).
    """

    def __init__(self, link="logit", ridge=0.0, degree=1, interaction_only=False, clip=0.01, max_iter=100, tol=1e-8):
        self.link = link
        self.ridge = ridge
        self.degree = degree
        self.interaction_only = interaction_only
        self.clip = clip
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        y = np.asarray(y, dtype=float).reshape(-1)
        X = check_array(X, ensure_min_features=0)
        if len(y) != X.shape[0]:
            raise ArgumentError("X and y have different numbers of rows")
        if not np.isfinite(y).all() or (y < 0).any() or (y > 1).any():
            raise ArgumentError("targets must lie in [0, 1]")
        if np.all(y == y[0]):
            raise DegenerateLabelError(f"all {len(y)} labels equal {y[0]:g}")
        self.basis_, Z = _design(X, self.degree, self.interaction_only)
        beta, gnorm, it = _irls(Z, y[:, None], self.link, self.ridge, self.max_iter, self.tol)
        self.coef_ = beta[:, 0]
        self.n_iter_ = it
        self.grad_norm_ = float(gnorm[0])
        binary = np.isin(y, (0.0, 1.0)).all()
        if binary and self.ridge == 0:
            mu = _link_parts(Z @ self.coef_, self.link)[0]
            if np.max(np.abs(y - mu)) < 1e-3:
                raise ConvergenceError("labels are perfectly separated; use a ridge penalty")
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return _apply_design(self.basis_, X) @ self.coef_

    def predict(self, X):
        """Clipped probability that the label is 1."""
        mu = _link_parts(self.decision_function(X), self.link)[0]
        return np.clip(mu, self.clip, 1 - self.clip)


def fit_logistic_glm(features, labels, spec: LearnerSpec | None = None) -> BinaryGLM:
    """Fit a binary-probability model; labels must be 0/1."""
    spec = spec or LearnerSpec()
    labels = np.asarray(labels, dtype=float)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ArgumentError("labels must be 0/1")
    if not np.isfinite(np.asarray(features, dtype=float)).all():
        raise ArgumentError("features must be finite")
    return spec.binary_learner().fit(features, labels)


class LinearGLM(BaseEstimator):
    """Ridge least squares on a polynomial basis (intercept unpenalized)."""

    def __init__(self, ridge=0.0, degree=1, interaction_only=False):
        self.ridge = ridge
        self.degree = degree
        self.interaction_only = interaction_only

    def fit(self, X, y):
        Y = np.asarray(y, dtype=float)
        self.basis_, Z = _design(X, self.degree, self.interaction_only)
        self.coef_ = _ridge_solve(Z, Y, self.ridge)
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return _apply_design(self.basis_, X) @ self.coef_


def _ridge_solve(Z, Y, ridge):
    if ridge == 0:
        return np.linalg.lstsq(Z, Y, rcond=None)[0]
    D = np.ones(Z.shape[1])
    D[0] = 0
    return np.linalg.solve(Z.T @ Z + ridge * np.diag(D), Z.T @ Y)


# ---------------------------------------------------------------------------
# residual laws for the location-scale model

_NORMAL_LOG_NORM = -0.5 * np.log(2 * np.pi)


class GaussianResidualLaw:
    """Standard normal errors."""

    def cdf(self, z):
        return special.ndtr(z)

    def pdf(self, z):
        return np.exp(-0.5 * z * z + _NORMAL_LOG_NORM)


class KernelResidualLaw:
    """Gaussian-kernel smoothed ECDF of standardized residuals.

    ``F(z) = mean_i Phi((z - z_i) / h)`` with ``h = 1.06 * sd(z) * n^(-1/5)``.
    The sum is tabulated once on a fine grid using linear binning and an FFT
    convolution; evaluation interpolates the table. Binning error is
    O((grid step / h)^2), far below the statistical error.
    """

    def __init__(self, z, size=4096):
        z = np.asarray(z, dtype=float)
        n = len(z)
        sd = z.std(ddof=1)
        self.bandwidth = 1.06 * sd * n ** (-0.2)
        h = self.bandwidth
        lo, hi = z.min() - 8 * h, z.max() + 8 * h
        self.grid = np.linspace(lo, hi, size)
        step = self.grid[1] - self.grid[0]
        pos = (z - lo) / step
        i = np.clip(np.floor(pos).astype(int), 0, size - 2)
        frac = pos - i
        counts = np.bincount(i, 1 - frac, minlength=size) + np.bincount(i + 1, frac, minlength=size)
        offsets = np.arange(-(size - 1), size) * step / h
        cdf = fftconvolve(counts, special.ndtr(offsets))[size - 1 : 2 * size - 1] / n
        pdf = fftconvolve(counts, np.exp(-0.5 * offsets**2 + _NORMAL_LOG_NORM))[size - 1 : 2 * size - 1] / (n * h)
        cdf = np.maximum.accumulate(np.clip(cdf, 0.0, 1.0))
        cdf[0], cdf[-1] = 0.0, 1.0
        self.cdf_table = cdf
        self.pdf_table = np.clip(pdf, 0.0, None)

    def cdf(self, z):
        return np.interp(z, self.grid, self.cdf_table, left=0.0, right=1.0)

    def pdf(self, z):
        return np.interp(z, self.grid, self.pdf_table, left=0.0, right=0.0)


# ---------------------------------------------------------------------------
# theta-indexed per-unit curves


def _theta_column(theta):
    t = np.asarray(theta, dtype=float)
    return t if t.ndim == 0 else t.reshape(-1, 1)


class ThetaCurve:
    """Per-unit function of a threshold.

    ``value(theta)`` returns shape (n,) for scalar ``theta`` and (m, n) for a
    vector of m thresholds; ``slope`` is the derivative in ``theta``.
    """

    n: int

    def value(self, theta):
        raise NotImplementedError

    def slope(self, theta):
        raise NotImplementedError


class LocationScaleCurve(ThetaCurve):
    """``F((theta - loc) / scale)`` with a residual law chosen per unit."""

    def __init__(self, loc, scale, laws, law_of=None):
        self.loc = np.asarray(loc, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        self.laws = list(laws)
        self.law_of = np.zeros(len(self.loc), dtype=int) if law_of is None else np.asarray(law_of)
        self.n = len(self.loc)

    def _apply(self, theta, which):
        t = _theta_column(theta)
        z = (t - self.loc) / self.scale
        if len(self.laws) == 1:
            out = getattr(self.laws[0], which)(z)
        else:
            out = np.empty(z.shape)
            for j, law in enumerate(self.laws):
                cols = self.law_of == j
                out[..., cols] = getattr(law, which)(z[..., cols])
        if which == "pdf":
            out = out / self.scale
        return out

    def value(self, theta):
        return self._apply(theta, "cdf")

    def slope(self, theta):
        return self._apply(theta, "pdf")


class GridCurve(ThetaCurve):
    """Linear interpolation between per-unit node values, flat outside the grid."""

    def __init__(self, nodes, values):
        self.nodes = np.asarray(nodes, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape[1] != len(self.nodes):
            raise ArgumentError("node values do not match the grid")
        self.n = self.values.shape[0]

    def _locate(self, theta):
        t = np.asarray(theta, dtype=float)
        R = len(self.nodes)
        k = np.clip(np.searchsorted(self.nodes, t, side="right") - 1, 0, R - 2)
        w = np.clip((t - self.nodes[k]) / (self.nodes[k + 1] - self.nodes[k]), 0.0, 1.0)
        return t, k, w

    def value(self, theta):
        t, k, w = self._locate(theta)
        lo, hi = self.values[:, k], self.values[:, k + 1]
        out = lo * (1 - w) + hi * w
        out = out if t.ndim == 0 else out.T
        return np.clip(out, 0.0, 1.0)

    def slope(self, theta):
        t, k, w = self._locate(theta)
        inside = (t > self.nodes[0]) & (t < self.nodes[-1])
        d = (self.values[:, k + 1] - self.values[:, k]) / (self.nodes[k + 1] - self.nodes[k])
        d = d * inside
        return d if t.ndim == 0 else d.T


class FunctionCurve(ThetaCurve):
    """Curve given by closed-form callables (used for DGP oracles)."""

    def __init__(self, n, fn, dfn=None):
        self.n = n
        self.fn = fn
        self.dfn = dfn

    def value(self, theta):
        return np.broadcast_to(self.fn(_theta_column(theta)), self._shape(theta)).copy()

    def slope(self, theta):
        if self.dfn is None:
            raise ArgumentError("this curve has no derivative")
        return np.broadcast_to(self.dfn(_theta_column(theta)), self._shape(theta)).copy()

    def _shape(self, theta):
        t = np.asarray(theta)
        return (self.n,) if t.ndim == 0 else (t.size, self.n)


class StackedCurve(ThetaCurve):
    """Curves for disjoint unit subsets assembled into one."""

    def __init__(self, parts, n):
        self.parts = list(parts)
        self.n = n

    def _apply(self, theta, which):
        t = np.asarray(theta)
        out = np.empty((self.n,) if t.ndim == 0 else (t.size, self.n))
        for idx, curve in self.parts:
            out[..., idx] = getattr(curve, which)(theta)
        return out

    def value(self, theta):
        return self._apply(theta, "value")

    def slope(self, theta):
        return self._apply(theta, "slope")


def stack_curves(parts, n) -> ThetaCurve:
    """Merge ``[(unit_index, curve), ...]`` into a single curve over n units."""
    curves = [c for _, c in parts]
    if all(isinstance(c, LocationScaleCurve) for c in curves):
        loc, scale, law_of = np.empty(n), np.empty(n), np.empty(n, dtype=int)
        laws = []
        for idx, c in parts:
            loc[idx], scale[idx] = c.loc, c.scale
            law_of[idx] = c.law_of + len(laws)
            laws.extend(c.laws)
        return LocationScaleCurve(loc, scale, laws, law_of)
    if all(isinstance(c, GridCurve) for c in curves) and all(
        np.array_equal(c.nodes, curves[0].nodes) for c in curves
    ):
        values = np.empty((n, len(curves[0].nodes)))
        for idx, c in parts:
            values[idx] = c.values
        return GridCurve(curves[0].nodes, values)
    return StackedCurve(parts, n)


# ---------------------------------------------------------------------------
# conditional CDF learners


class LocationScaleCDF(BaseEstimator):
    """Additive location-scale model for the conditional law of y given x.

    Parameters
    ----------
    degree, interaction_only : polynomial basis for both the mean and the
        variance regressions.
    residual : {'kernel', 'gaussian'}
        Kernel-smoothed residual law (default) or a standard normal one.
    var_floor : float
        Fitted variances are floored at ``var_floor * Var(y)``.
    """

    def __init__(self, degree=1, interaction_only=False, residual="kernel", var_floor=1e-6, table_size=4096):
        self.degree = degree
        self.interaction_only = interaction_only
        self.residual = residual
        self.var_floor = var_floor
        self.table_size = table_size

    def fit(self, X, y):
        y = np.asarray(y, dtype=float).reshape(-1)
        X = check_array(X, ensure_min_features=0)
        if len(y) < 20:
            raise SampleSizeError(f"additive CDF model needs >= 20 rows, got {len(y)}")
        if not np.isfinite(y).all():
            raise ArgumentError("outcomes must be finite")
        self.basis_, Z = _design(X, self.degree, self.interaction_only)
        self.mean_coef_ = np.linalg.lstsq(Z, y, rcond=None)[0]
        r = y - Z @ self.mean_coef_
        self.var_coef_ = np.linalg.lstsq(Z, r**2, rcond=None)[0]
        v = Z @ self.var_coef_
        if not (v > 0).any():
            raise VarianceDegeneracyError("fitted variance is nonpositive at every training point")
        self.floor_ = self.var_floor * y.var()
        if self.floor_ <= 0:
            raise VarianceDegeneracyError("outcome has zero variance")
        z = r / np.sqrt(np.maximum(v, self.floor_))
        z = z - z.mean()
        self.law_ = GaussianResidualLaw() if self.residual == "gaussian" else KernelResidualLaw(z, self.table_size)
        return self

    def location_scale(self, X):
        check_is_fitted(self, "law_")
        Z = _apply_design(self.basis_, X)
        v = np.maximum(Z @ self.var_coef_, self.floor_)
        return Z @ self.mean_coef_, np.sqrt(v)

    def curve(self, X) -> LocationScaleCurve:
        loc, scale = self.location_scale(X)
        return LocationScaleCurve(loc, scale, [self.law_])

    def cdf(self, X, theta):
        return self.curve(X).value(theta)

    def pdf(self, X, theta):
        return self.curve(X).slope(theta)


def fit_additive_cdf(features, outcomes, spec: LearnerSpec | None = None) -> LocationScaleCDF:
    spec = spec or LearnerSpec(kind="additive-cdf")
    return LocationScaleCDF(degree=spec.degree, interaction_only=spec.interaction_only, residual=spec.residual).fit(
        features, outcomes
    )


def check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float).reshape(-1)
    if g.size < 2 or not np.all(np.diff(g) > 0) or not np.isfinite(g).all():
        raise ArgumentError("grid must be finite, strictly increasing and have >= 2 nodes")
    return g


def outcome_grid(y, n_grid=100) -> np.ndarray:
    """Nodes at the 0.05 + 0.9 (r - 1) / (R - 1) empirical quantiles of y."""
    y = np.asarray(y, dtype=float)
    y = y[np.isfinite(y)]
    if n_grid < 2:
        raise ArgumentError("need at least two grid nodes")
    levels = 0.05 + 0.9 * np.arange(n_grid) / (n_grid - 1)
    return check_grid(np.unique(np.quantile(y, levels)))


class GridCdfFamily(BaseEstimator):
    """One GLM per grid node; node targets are given as an n x R matrix.

    Columns whose targets are constant are stored as constants rather than
    fitted. Predictions are clipped to [0, 1] and optionally made monotone
    across nodes by isotonic regression.
    """

    def __init__(self, nodes=None, base="logistic-glm", link="logit", ridge=0.0, degree=1, interaction_only=False, isotonic=False):
        self.nodes = nodes
        self.base = base
        self.link = link
        self.ridge = ridge
        self.degree = degree
        self.interaction_only = interaction_only
        self.isotonic = isotonic

    def fit(self, X, targets):
        nodes = check_grid(self.nodes)
        T = np.asarray(targets, dtype=float)
        if T.ndim != 2 or T.shape[1] != len(nodes):
            raise ArgumentError("targets must be n x len(nodes)")
        self.nodes_ = nodes
        self.basis_, Z = _design(X, self.degree, self.interaction_only)
        p, R = Z.shape[1], len(nodes)
        coef = np.zeros((p, R))
        const = T.min(axis=0) == T.max(axis=0)
        self.constant_ = np.where(const, T[0], np.nan)
        fit_cols = np.flatnonzero(~const)
        if self.base == "linear-glm":
            if fit_cols.size:
                coef[:, fit_cols] = _ridge_solve(Z, T[:, fit_cols], self.ridge)
        elif fit_cols.size:
            beta, _, _ = _irls(Z, np.clip(T[:, fit_cols], 0, 1), self.link, self.ridge)
            coef[:, fit_cols] = beta
        self.coef_ = coef
        return self

    def predict_nodes(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        eta = _apply_design(self.basis_, X) @ self.coef_
        out = eta if self.base == "linear-glm" else _link_parts(eta, self.link)[0]
        const = np.isfinite(self.constant_)
        out[:, const] = self.constant_[const]
        out = np.clip(out, 0.0, 1.0)
        if self.isotonic:
            out = np.array([isotonic_regression(row) for row in out])
        return out

    def curve(self, X) -> GridCurve:
        return GridCurve(self.nodes_, self.predict_nodes(X))


def fit_grid_cdf_family(base_learner: LearnerSpec, targets_per_theta: Callable, grid, features) -> GridCdfFamily:
    """Fit a grid family; ``targets_per_theta(grid)`` returns the n x R targets."""
    grid = check_grid(grid)
    model = GridCdfFamily(
        nodes=grid,
        base=base_learner.base if base_learner.kind == "grid-cdf-family" else base_learner.kind,
        link=base_learner.link,
        ridge=base_learner.ridge,
        degree=base_learner.degree,
        interaction_only=base_learner.interaction_only,
        isotonic=base_learner.isotonic,
    )
    return model.fit(features, targets_per_theta(grid))


# ---------------------------------------------------------------------------
# nuisance roles and cross-fitting


@dataclass(frozen=True)
class NuisanceRole:
    """One nuisance function of an estimating equation.

    kind
        ``probability`` (binary regression of ``target`` on ``features``),
        ``cdf`` (conditional CDF of the outcome), or ``nested`` (regression of
        the ``parent`` role's grid-node predictions, the regression
        imputation device for nested conditional expectations).
    rows
        Training-row selector; predictions are always made for every unit.
    """

    name: str
    kind: str
    features: tuple[str, ...]
    rows: Callable[[Dataset], np.ndarray] | None = None
    target: Callable[[Dataset], np.ndarray] | None = None
    parent: str | None = None
    description: str = ""

    def with_features(self, features: Sequence[str]) -> "NuisanceRole":
        return NuisanceRole(self.name, self.kind, tuple(features), self.rows, self.target, self.parent, self.description)


@dataclass(frozen=True)
class RoleBinding:
    """Learner and feature columns assigned to a role."""

    spec: LearnerSpec
    features: tuple[str, ...] | None = None


def default_spec(role: NuisanceRole) -> LearnerSpec:
    if role.kind == "probability":
        return LearnerSpec(kind="logistic-glm")
    if role.kind == "cdf":
        return LearnerSpec(kind="additive-cdf")
    return LearnerSpec(kind="grid-cdf-family", link="probit")


class _FittedRole:
    def __init__(self, role: NuisanceRole, spec: LearnerSpec, model, grid):
        self.role = role
        self.spec = spec
        self.model = model
        self.grid = grid

    def predict(self, data: Dataset):
        X = data.matrix(self.role.features)
        if self.role.kind == "probability":
            return self.model.predict(X)
        return self.model.curve(X)

    def node_values(self, data: Dataset, grid):
        X = data.matrix(self.role.features)
        if isinstance(self.model, GridCdfFamily):
            return self.model.predict_nodes(X)
        return self.model.curve(X).value(grid).T


def _rows(role, data):
    if role.rows is None:
        return np.ones(data.n, dtype=bool)
    return np.asarray(role.rows(data), dtype=bool)


def _fit_role(role: NuisanceRole, spec: LearnerSpec, train: Dataset, fitted: dict, grid):
    rows = _rows(role, train)
    sub = train.take(rows)
    X = sub.matrix(role.features)
    if role.kind == "probability":
        if spec.kind != "logistic-glm":
            raise SpecError(f"role {role.name!r} needs a logistic-glm learner, got {spec.kind}")
        y = role.target(sub)
        return _FittedRole(role, spec, spec.binary_learner().fit(X, y), grid)
    if role.kind == "cdf":
        y = sub.outcome
        if spec.kind == "additive-cdf":
            return _FittedRole(role, spec, fit_additive_cdf(X, y, spec), grid)
        if spec.kind == "grid-cdf-family":
            if grid is None:
                raise SpecError("grid-cdf-family roles need an outcome grid")
            model = fit_grid_cdf_family(spec, lambda g: (y[:, None] <= g[None, :]).astype(float), grid, X)
            return _FittedRole(role, spec, model, grid)
        raise SpecError(f"role {role.name!r} needs a CDF learner, got {spec.kind}")
    if role.kind == "nested":
        if grid is None:
            raise SpecError("nested roles need an outcome grid")
        if spec.kind != "grid-cdf-family":
            raise SpecError(f"nested role {role.name!r} needs a grid-cdf-family learner")
        parent = fitted[role.parent]
        targets = parent.node_values(sub, grid)
        model = fit_grid_cdf_family(spec, lambda g: targets, grid, X)
        return _FittedRole(role, spec, model, grid)
    raise SpecError(f"unknown role kind {role.kind!r}")


def _fit_order(roles):
    """Roles with every nested role placed after its parent."""
    names = {r.name for r in roles}
    done, order, pending = set(), [], list(roles)
    while pending:
        progressed = False
        for r in list(pending):
            if r.kind != "nested" or r.parent in done:
                order.append(r)
                done.add(r.name)
                pending.remove(r)
                progressed = True
        if not progressed:
            missing = [r.parent for r in pending if r.parent not in names]
            raise SpecError(f"nested roles with unknown or cyclic parents: {missing or [r.name for r in pending]}")
    return order


def _fit_all(roles, bindings, train, grid, fold_label):
    fitted = {}
    for role in _fit_order(roles):
        spec = bindings[role.name].spec
        try:
            fitted[role.name] = _fit_role(role, spec, train, fitted, grid)
        except FitError as exc:
            raise CrossFitError(f"fold {fold_label}, role {role.name!r}: {exc}", fold=fold_label, role=role.name) from exc
    return fitted


class NuisanceSet(dict):
    """Per-unit nuisance values keyed by role: arrays (theta-free) or curves."""

    def at(self, theta) -> "_ValuesAt":
        """Values at ``theta``; curves are evaluated lazily on first access."""
        return _ValuesAt(self, theta)

    def slope(self, name, theta):
        v = self[name]
        if not isinstance(v, ThetaCurve):
            raise ArgumentError(f"role {name!r} does not depend on theta")
        return v.slope(theta)


class _ValuesAt(dict):
    def __init__(self, source, theta):
        super().__init__()
        self._source = source
        self._theta = theta

    def __missing__(self, name):
        v = self._source[name]
        v = v.value(self._theta) if isinstance(v, ThetaCurve) else v
        self[name] = v
        return v

    def __contains__(self, name):
        return name in self._source

    def keys(self):
        return self._source.keys()

    def __iter__(self):
        return iter(self._source)

    def __len__(self):
        return len(self._source)


def resolve_bindings(roles, bindings: Mapping | None) -> dict:
    """Fill in default learners and features; apply feature overrides."""
    bindings = dict(bindings or {})
    out = {}
    for role in roles:
        b = bindings.pop(role.name, None)
        if b is None:
            b = RoleBinding(default_spec(role))
        elif isinstance(b, LearnerSpec):
            b = RoleBinding(b)
        out[role.name] = b
    if bindings:
        raise SpecError(f"bindings for unknown role(s): {sorted(bindings)}")
    return out


def expand_features(features: Sequence[str], dataset: Dataset) -> tuple[str, ...]:
    """Replace role names (``covariate``, ``mediator``, ...) by their columns."""
    out = []
    for f in features:
        cols = dataset.role_columns(f) if dataset.has_role(f) else (f,)
        for c in cols:
            dataset.column(c)
            if c not in out:
                out.append(c)
    return tuple(out)


def bind_roles(roles, bindings, dataset: Dataset) -> tuple[NuisanceRole, ...]:
    """Apply feature overrides and expand role names into dataset columns."""
    out = []
    for r in roles:
        feats = r.features if bindings[r.name].features is None else bindings[r.name].features
        out.append(r.with_features(expand_features(feats, dataset)))
    return tuple(out)


@dataclass
class CrossFitNuisance:
    """Per-fold models for every role plus assembled out-of-fold predictions.

    With ``folds=None`` a single model per role is trained on all units and
    predictions are in-sample (the classical parametric route).
    """

    roles: tuple[NuisanceRole, ...]
    bindings: dict
    folds: FoldAssignment | None
    grid: np.ndarray | None
    models: list = field(default_factory=list)
    predictions: NuisanceSet = field(default_factory=NuisanceSet)

    @property
    def provenance(self) -> dict:
        return {
            "cross_fitted": self.folds is not None,
            "k_folds": None if self.folds is None else self.folds.k,
            "fold_seed": None if self.folds is None else self.folds.seed,
            "n_grid": None if self.grid is None else len(self.grid),
            "roles": {r.name: {"features": list(r.features), **self.bindings[r.name].spec.to_dict()} for r in self.roles},
        }


def crossfit(dataset: Dataset, folds, roles, specs=None, grid=None, seed=0) -> CrossFitNuisance:
    """Train every role out-of-fold.

    Parameters
    ----------
    folds : FoldAssignment, int or None
        An integer k builds ``make_folds(n, k, seed)``. ``None`` fits each role
        once on the full sample.
    specs : mapping role name -> LearnerSpec or RoleBinding, optional
    grid : outcome grid for grid-family and nested roles.
    """
    if isinstance(folds, (int, np.integer)) and not isinstance(folds, bool):
        folds = make_folds(dataset.n, int(folds), seed)
    bindings = resolve_bindings(roles, specs)
    roles = bind_roles(roles, bindings, dataset)
    n = dataset.n
    result = CrossFitNuisance(roles, bindings, folds, None if grid is None else check_grid(grid))
    if folds is None:
        fitted = _fit_all(roles, bindings, dataset, result.grid, "all")
        result.models = [fitted]
        result.predictions = NuisanceSet({r.name: fitted[r.name].predict(dataset) for r in roles})
        return result
    if folds.n != n:
        raise ArgumentError("fold assignment does not match the dataset size")
    parts = {r.name: [] for r in roles}
    for k in range(folds.k):
        train_idx, test_idx = folds.training(k), folds.members(k)
        fitted = _fit_all(roles, bindings, dataset.take(train_idx), result.grid, k)
        result.models.append(fitted)
        test = dataset.take(test_idx)
        for r in roles:
            parts[r.name].append((test_idx, fitted[r.name].predict(test)))
    preds = NuisanceSet()
    for r in roles:
        if r.kind == "probability":
            arr = np.empty(n)
            for idx, v in parts[r.name]:
                arr[idx] = v
            preds[r.name] = arr
        else:
            preds[r.name] = stack_curves(parts[r.name], n)
    result.predictions = preds
    return result


def warn_positivity(message):
    warnings.warn(message, RuntimeWarning, stacklevel=3)
