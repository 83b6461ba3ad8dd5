"""Population-wise error rate: correlation structure, calibration, intervals.

Given a realized Design, the joint law of the population test statistics is a
multivariate normal (known variances) or t (unknown homogeneous variances)
with the correlation matrix determined by the cell sizes and variances. This
module builds that model, evaluates PWER(c) = sum_J pi_J (1 - F_J(c_J)),
calibrates the shared critical value, and turns the PWER gradient into the
delta-method prediction interval for the true PWER.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import mvprob
from .design import CONTROL, Design, PrevalenceVector
from .errors import ConfigError, InfeasibleDesignError, NumericalError

DEFAULT_SOLVER_TOL = 1e-8
DEFAULT_CDF_TOL = 1e-6
DEFAULT_VERIFY_TOL = 1e-7


@dataclass(frozen=True)
class TestModel:
    """Joint distribution of the population test statistics.

    kind is "normal" or "t" (df = N minus the number of populated cells);
    full_corr is the m x m correlation matrix and stratum_corr its principal
    submatrices in stratum order. population_variances holds the V_i used to
    standardize the statistics.
    """

    kind: str
    df: float | None
    m: int
    strata: tuple[frozenset[int], ...]
    full_corr: np.ndarray
    stratum_corr: tuple[mvprob.CorrelationMatrix | None, ...]
    population_variances: np.ndarray

    @property
    def stratum_ok(self) -> np.ndarray:
        """Strata whose joint law is defined (all member populations populated)."""
        return np.array([corr is not None for corr in self.stratum_corr])

    def stratum_cdf(
        self,
        stratum_index: int,
        c: np.ndarray,
        tol: float,
        rng: np.random.Generator | None,
        fixed_n: int | None = None,
        method: str = "auto",
    ) -> mvprob.ProbResult:
        """F_J(c_J) for one stratum: the no-rejection probability at c."""
        members = sorted(self.strata[stratum_index])
        upper = c[[i - 1 for i in members]]
        corr = self.stratum_corr[stratum_index]
        if corr is None:
            raise InfeasibleDesignError(
                f"stratum {members} involves a population with an empty arm"
            )
        if self.kind == "t":
            return mvprob.mvt_cdf(upper, corr, self.df, tol, rng, fixed_n=fixed_n, method=method)
        return mvprob.mvn_cdf(upper, corr, tol, rng, fixed_n=fixed_n, method=method)

    def tail_quantile(self, p: float) -> float:
        """c with P(single statistic > c) = p under the marginal law."""
        if self.kind == "t":
            return mvprob.t_quantile(1.0 - p, self.df)
        return mvprob.std_normal_quantile(1.0 - p)


def _population_cells(
    design: Design, allow_empty: bool = False
) -> list[tuple[np.ndarray, np.ndarray, int, int] | None]:
    out = []
    for i in range(1, design.m + 1):
        t_idx = design.treatment_cells(i)
        c_idx = design.control_cells(i)
        n_t = int(design.cell_sizes[t_idx].sum())
        n_c = int(design.cell_sizes[c_idx].sum())
        if n_t == 0 or n_c == 0:
            if allow_empty:
                out.append(None)
                continue
            raise InfeasibleDesignError(
                f"population {i} has an empty {'treatment' if n_t == 0 else 'control'} arm"
            )
        out.append((t_idx, c_idx, n_t, n_c))
    return out


def population_variances(design: Design, cell_variances: np.ndarray | None = None) -> np.ndarray:
    """V_i: variance of the pooled treatment-control contrast per population."""
    s2 = design.cell_variances if cell_variances is None else np.asarray(cell_variances, float)
    sizes = design.cell_sizes.astype(float)
    v = np.empty(design.m)
    for i, (t_idx, c_idx, n_t, n_c) in enumerate(_population_cells(design)):
        v[i] = (sizes[t_idx] * s2[t_idx]).sum() / n_t**2 + (sizes[c_idx] * s2[c_idx]).sum() / n_c**2
    return v


def arm_weight_matrix(design: Design) -> np.ndarray:
    """Signed pooling weights W with Z = (cell_means @ W.T) / sqrt(V).

    Row i carries n_cell/n_{i,T_i} on population i's treatment cells and
    -n_cell/n_{i,C} on its control cells.
    """
    sizes = design.cell_sizes.astype(float)
    w = np.zeros((design.m, len(design.cells)))
    for i, (t_idx, c_idx, n_t, n_c) in enumerate(_population_cells(design)):
        w[i, t_idx] = sizes[t_idx] / n_t
        w[i, c_idx] = -sizes[c_idx] / n_c
    return w


def build_full_correlation(
    design: Design,
    cell_variances: np.ndarray | None = None,
    allow_empty_populations: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Correlation matrix of the population statistics and the variances V_i.

    With allow_empty_populations, rows/columns of populations with an empty
    arm hold NaN off-diagonal and NaN variance instead of raising.
    """
    s2 = design.cell_variances if cell_variances is None else np.asarray(cell_variances, float)
    sizes = design.cell_sizes.astype(float)
    pop = _population_cells(design, allow_empty=allow_empty_populations)
    m = design.m
    v = np.full(m, np.nan)
    for i, cells in enumerate(pop):
        if cells is None:
            continue
        t_idx, c_idx, n_t, n_c = cells
        v[i] = (sizes[t_idx] * s2[t_idx]).sum() / n_t**2 + (sizes[c_idx] * s2[c_idx]).sum() / n_c**2
    corr = np.where(np.isnan(v)[:, None] | np.isnan(v)[None, :], np.nan, np.eye(m))
    np.fill_diagonal(corr, 1.0)
    lookup = design._cell_lookup
    for j, stratum in enumerate(design.strata):
        members = sorted(stratum)
        if len(members) < 2:
            continue
        ctrl = lookup[(j, CONTROL)]
        for a_pos, i in enumerate(members):
            for k in members[a_pos + 1:]:
                if pop[i - 1] is None or pop[k - 1] is None:
                    continue
                n_ic, n_kc = pop[i - 1][3], pop[k - 1][3]
                cov = sizes[ctrl] * s2[ctrl] / (n_ic * n_kc)
                if design.treatments[i - 1] == design.treatments[k - 1]:
                    cell = lookup[(j, design.treatments[i - 1])]
                    n_it, n_kt = pop[i - 1][2], pop[k - 1][2]
                    cov += sizes[cell] * s2[cell] / (n_it * n_kt)
                corr[i - 1, k - 1] += cov / np.sqrt(v[i - 1] * v[k - 1])
                corr[k - 1, i - 1] = corr[i - 1, k - 1]
    return corr, v


def build_test_model(
    design: Design,
    *,
    cell_variances: np.ndarray | None = None,
    kind: str | None = None,
    df: float | None = None,
    allow_empty_populations: bool = False,
) -> TestModel:
    """Assemble the TestModel implied by the design's variance mode.

    The keyword overrides let approximation engines (e.g. Satterthwaite)
    substitute observed variances and their own reference distribution. With
    allow_empty_populations, strata touching a population with an empty arm
    get no joint law (stratum_corr entry None) instead of raising; they can
    only ever be evaluated with zero weight.
    """
    if kind is None:
        mode = design.variance_mode
        if mode in ("known_homogeneous", "known_heterogeneous"):
            kind = "normal"
        elif mode == "unknown_homogeneous":
            kind = "t"
            df = float(design.N - design.positive_cell_count())
        else:
            raise ConfigError(
                "unknown heterogeneous variances have no closed-form joint law; "
                "use the bootstrap engine"
            )
    if kind == "t":
        if df is None or df < 1.0:
            raise InfeasibleDesignError(f"t reference needs df >= 1, got {df}")
    elif kind != "normal":
        raise ConfigError(f"unknown model kind {kind!r}")

    corr, v = build_full_correlation(design, cell_variances, allow_empty_populations)
    ok = ~np.isnan(v)
    subs = []
    for stratum in design.strata:
        idx = [i - 1 for i in sorted(stratum)]
        if not ok[idx].all():
            subs.append(None)
            continue
        subs.append(mvprob.CorrelationMatrix(corr[np.ix_(idx, idx)]))
    return TestModel(
        kind=kind,
        df=df if kind == "t" else None,
        m=design.m,
        strata=design.strata,
        full_corr=corr,
        stratum_corr=tuple(subs),
        population_variances=v,
    )


def test_statistics(
    design: Design,
    cell_means: np.ndarray,
    cell_variances: np.ndarray | None = None,
) -> np.ndarray:
    """Standardized pooled treatment-control contrasts per population.

    cell_means is aligned with design.cells; a leading batch axis is allowed
    and preserved. Cells with no patients carry weight zero.
    """
    means = np.asarray(cell_means, dtype=float)
    w = arm_weight_matrix(design)
    v = population_variances(design, cell_variances)
    return (means @ w.T) / np.sqrt(v)


def _weights_of(pi) -> np.ndarray:
    if isinstance(pi, PrevalenceVector):
        return pi.values
    w = np.asarray(pi, dtype=float)
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise ConfigError("prevalence weights must be finite and nonnegative")
    return w


def _c_vector(c, m: int) -> np.ndarray:
    if isinstance(c, CriticalValues):
        return c.c
    arr = np.asarray(c, dtype=float).reshape(-1)
    if arr.shape[0] == 1:
        return np.full(m, float(arr[0]))
    if arr.shape[0] != m:
        raise ConfigError(f"critical value vector has length {arr.shape[0]}, expected {m}")
    return arr


def stratum_cdf_values(
    c,
    model: TestModel,
    tol: float = DEFAULT_VERIFY_TOL,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
    fixed_n: int | None = None,
    method: str = "auto",
) -> np.ndarray:
    """F_J(c_J) for every stratum (masked or undefined entries return NaN).

    Without a mask, strata whose joint law is undefined (empty member
    population) are skipped; with a mask, requesting such a stratum raises.
    """
    c_vec = _c_vector(c, model.m)
    ok = model.stratum_ok
    out = np.full(len(model.strata), np.nan)
    for j in range(len(model.strata)):
        if mask is None:
            if not ok[j]:
                continue
        elif not mask[j]:
            continue
        out[j] = model.stratum_cdf(j, c_vec, tol, rng, fixed_n=fixed_n, method=method).value
    return out


def pwer_value(
    c,
    pi,
    model: TestModel,
    tol: float = DEFAULT_CDF_TOL,
    rng: np.random.Generator | None = None,
    fixed_n: int | None = None,
) -> float:
    """PWER(c) = sum_J pi_J * (1 - F_J(c_J)); zero-weight strata contribute 0."""
    weights = _weights_of(pi)
    if weights.shape[0] != len(model.strata):
        raise ConfigError("prevalence vector does not match the model's strata")
    mask = weights > 0.0
    cdf = stratum_cdf_values(c, model, tol, rng, mask=mask, fixed_n=fixed_n)
    return float(np.sum(weights[mask] * (1.0 - cdf[mask])))


@dataclass(frozen=True)
class CriticalValues:
    """Equal critical values calibrated so the estimated PWER hits alpha.

    achieved is the solver's PWER at c (frozen integration stream); verified
    re-evaluates it at the tighter verification tolerance with an independent
    stream, and stratum_cdf caches the verification-pass F_J(c_J) for every
    stratum so gradients and true-PWER evaluations can reuse them.
    """

    c: np.ndarray
    alpha: float
    achieved: float
    verified: float
    stratum_cdf: np.ndarray
    evaluations: int

    @property
    def value(self) -> float:
        return float(self.c[0])


def solve_critical_values(
    pi,
    model: TestModel,
    alpha: float,
    solver_tol: float = DEFAULT_SOLVER_TOL,
    cdf_tol: float = DEFAULT_CDF_TOL,
    verify_tol: float = DEFAULT_VERIFY_TOL,
    rng: np.random.Generator | None = None,
    xtol: float = 1e-12,
    max_iter: int = 200,
) -> CriticalValues:
    """Find the shared critical value with PWER(c * 1) = alpha.

    Brackets with the single-test and Bonferroni-like quantiles, verifies both
    ends, then runs an Illinois iteration. All PWER evaluations inside one
    solve reuse one frozen integration seed, which makes the objective a
    smooth deterministic function of c; a final verification pass at
    verify_tol uses an independent stream.
    """
    weights = _weights_of(pi)
    if weights.shape[0] != len(model.strata):
        raise ConfigError("prevalence vector does not match the model's strata")
    if not 0.0 < alpha < 0.5:
        raise ConfigError(f"alpha must lie in (0, 0.5), got {alpha}")
    if not np.any(weights > 0.0):
        raise ConfigError("prevalence vector has no positive component")

    seed = int((rng or np.random.default_rng(0)).integers(0, 2**63 - 1))
    mask = weights > 0.0
    pos_w = weights[mask]
    evaluations = 0

    def f(c: float) -> float:
        nonlocal evaluations
        evaluations += 1
        cdf = stratum_cdf_values(
            np.full(model.m, c), model, cdf_tol, np.random.default_rng(seed), mask=mask
        )
        return float(np.sum(pos_w * (1.0 - cdf[mask]))) - alpha

    lo = model.tail_quantile(alpha)
    hi = model.tail_quantile(alpha / 2**model.m)
    slack = max(10.0 * solver_tol, 3.0 * cdf_tol)
    f_lo = f(lo)
    if f_lo < -slack:
        raise NumericalError(
            f"bracket failure: PWER({lo:.6f}) = {f_lo + alpha:.3e} already below alpha={alpha}"
        )
    if f_lo <= solver_tol:
        # the single-test bound is already exhausted (disjoint-population case)
        return _finish(lo, f_lo + alpha, weights, model, alpha, verify_tol, cdf_tol, seed, evaluations)
    f_hi = f(hi)
    if f_hi > slack:
        raise NumericalError(
            f"bracket failure: PWER({hi:.6f}) = {f_hi + alpha:.3e} still above alpha={alpha}"
        )
    if f_hi >= -solver_tol:
        return _finish(hi, f_hi + alpha, weights, model, alpha, verify_tol, cdf_tol, seed, evaluations)

    a, b, fa, fb = lo, hi, f_lo, f_hi
    side = 0
    c_star, f_star = a, fa
    for _ in range(max_iter):
        denom = fb - fa
        x = (a * fb - b * fa) / denom if denom != 0.0 else 0.5 * (a + b)
        if not a < x < b:
            x = 0.5 * (a + b)
        fx = f(x)
        if abs(fx) <= solver_tol:
            c_star, f_star = x, fx
            break
        if fx > 0.0:
            a, fa = x, fx
            if side == -1:
                fb *= 0.5
            side = -1
        else:
            b, fb = x, fx
            if side == 1:
                fa *= 0.5
            side = 1
        slope = abs(fb - fa) / max(b - a, 1e-300)
        if b - a <= xtol or (b - a) * slope <= solver_tol:
            c_star = 0.5 * (a + b)
            f_star = f(c_star)
            break
    else:
        raise NumericalError(
            f"critical value iteration did not converge within {max_iter} steps "
            f"(bracket [{a:.12f}, {b:.12f}])"
        )
    return _finish(c_star, f_star + alpha, weights, model, alpha, verify_tol, cdf_tol, seed, evaluations)


def _finish(
    c_star: float,
    achieved: float,
    weights: np.ndarray,
    model: TestModel,
    alpha: float,
    verify_tol: float,
    cdf_tol: float,
    seed: int,
    evaluations: int,
) -> CriticalValues:
    c_vec = np.full(model.m, c_star)
    verify_rng = np.random.default_rng(seed ^ 0x9E3779B97F4A7C15)
    cdf = stratum_cdf_values(c_vec, model, verify_tol, verify_rng)
    # strata without a defined law carry NaN and only ever zero weight here
    verified = float(np.nansum(weights * (1.0 - cdf)))
    threshold = 3.0 * cdf_tol + 30.0 * verify_tol + 10.0 * abs(achieved - alpha)
    if abs(verified - alpha) > threshold:
        raise NumericalError(
            f"verification pass disagrees with the calibration: PWER={verified:.3e} vs alpha={alpha}"
        )
    return CriticalValues(
        c=c_vec,
        alpha=alpha,
        achieved=achieved,
        verified=verified,
        stratum_cdf=cdf,
        evaluations=evaluations,
    )


def gradient_pwer(
    c,
    model: TestModel,
    transform_factors: np.ndarray | None = None,
    tol: float = DEFAULT_VERIFY_TOL,
    rng: np.random.Generator | None = None,
    stratum_cdf: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the true-PWER map: factor_J * (F_J(c_J) - 1) per stratum.

    Pass stratum_cdf (e.g. CriticalValues.stratum_cdf) to reuse cached CDF
    values. Every component lies in [-1, 0] since F_J and the transform
    factors live in [0, 1].
    """
    if stratum_cdf is None and isinstance(c, CriticalValues):
        stratum_cdf = c.stratum_cdf
    cdf = stratum_cdf if stratum_cdf is not None else stratum_cdf_values(c, model, tol, rng)
    grad = cdf - 1.0
    if transform_factors is not None:
        grad = np.asarray(transform_factors, float) * grad
    return grad


def delta_gamma(pi, gradient: np.ndarray) -> float:
    """Delta-method standard deviation: sqrt(g' (diag(pi) - pi pi') g).

    The multinomial covariance uses the untransformed prevalence estimate;
    transformations enter through the gradient factors instead.
    """
    w = _weights_of(pi)
    g = np.asarray(gradient, dtype=float)
    if w.shape != g.shape:
        raise ConfigError("gradient and prevalence vector shapes differ")
    # zero-weight strata cannot influence the covariance; this also keeps the
    # NaN gradients of strata without a defined law out of the quadratic form
    g = np.where(w > 0.0, g, 0.0)
    quad = float(np.dot(w, g * g) - np.dot(w, g) ** 2)
    if quad < -1e-14:
        raise NumericalError(f"negative delta-method quadratic form: {quad:.3e}")
    return float(np.sqrt(max(quad, 0.0)))


@dataclass(frozen=True)
class PredictionInterval:
    """Interval [alpha - z*gamma/sqrt(N), alpha + z*gamma/sqrt(N)]."""

    center: float
    half_width: float
    gamma: float
    alpha_prime: float
    N: int

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    @property
    def length(self) -> float:
        return 2.0 * self.half_width

    def contains(self, x: float, atol: float = 1e-12) -> bool:
        # atol guards degenerate zero-width intervals against float rounding
        return self.lower - atol <= x <= self.upper + atol


def prediction_interval(alpha: float, alpha_prime: float, gamma: float, N: int) -> PredictionInterval:
    if not 0.0 < alpha < 1.0 or not 0.0 < alpha_prime < 1.0:
        raise ConfigError("alpha and alpha_prime must lie in (0, 1)")
    if N < 1:
        raise ConfigError(f"sample size must be >= 1, got {N}")
    if gamma < 0.0:
        raise ConfigError(f"gamma must be nonnegative, got {gamma}")
    z = mvprob.std_normal_quantile(1.0 - alpha_prime / 2.0)
    return PredictionInterval(
        center=float(alpha),
        half_width=float(z * gamma) / math.sqrt(N),
        gamma=float(gamma),
        alpha_prime=float(alpha_prime),
        N=int(N),
    )


def true_pwer(
    c_hat,
    pi_true,
    model: TestModel,
    tol: float = DEFAULT_CDF_TOL,
    rng: np.random.Generator | None = None,
) -> float:
    """PWER at the calibrated critical values but the true prevalences."""
    return pwer_value(c_hat, pi_true, model, tol, rng)
