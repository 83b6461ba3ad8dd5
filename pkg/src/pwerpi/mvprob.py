"""Multivariate normal and t orthant probabilities.

Low dimensions use deterministic quadrature: the Drezner-Wesolowsky /
Gauss-Legendre bivariate normal, a conditioned one-dimensional reduction for
the trivariate normal, and chi-scale mixtures of those for the t cases.
Higher dimensions integrate the separation-of-variables transform with
randomized quasi-Monte Carlo (randomly shifted Fibonacci lattices in two
integrand dimensions, scrambled Sobol streams beyond), where the spread
across randomizations yields the error estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import special
from scipy.stats import qmc

from .errors import ConfigError, NumericalError

_TINY = 1e-300
_ONE = 1.0 - 1e-16

TOL_MIN = 1e-8
TOL_MAX = 1e-3

_EIG_CLIP = -1e-10  # most negative eigenvalue tolerated before hard failure

# conditioning in the trivariate reduction degenerates near |rho| = 1
_COND_RHO_MAX = 0.999

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class ProbResult(NamedTuple):
    """A probability with its estimated absolute error and work counter."""

    value: float
    error_estimate: float
    points_used: int


def std_normal_cdf(x: float) -> float:
    return float(special.ndtr(x))


def std_normal_quantile(q: float) -> float:
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile argument must lie in (0, 1), got {q}")
    return float(special.ndtri(q))


def t_cdf(x: float, df: float) -> float:
    """Univariate Student-t CDF, real degrees of freedom allowed."""
    return float(special.stdtr(df, x))


def t_quantile(q: float, df: float) -> float:
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile argument must lie in (0, 1), got {q}")
    return float(special.stdtrit(df, q))


@dataclass(frozen=True)
class CorrelationMatrix:
    """A validated correlation matrix with a cached Cholesky factor.

    Symmetry is required within 1e-12 (then symmetrized exactly), the diagonal
    must be 1 within 1e-12, and eigenvalues in [-1e-10, 0) are clipped to zero;
    anything more negative is rejected.
    """

    values: np.ndarray

    def __post_init__(self):
        mat = np.array(self.values, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ConfigError("correlation matrix must be square")
        if not np.all(np.isfinite(mat)):
            raise ConfigError("correlation matrix has non-finite entries")
        if np.max(np.abs(mat - mat.T)) > 1e-12:
            raise ConfigError("correlation matrix must be symmetric within 1e-12")
        if mat.shape[0] and np.max(np.abs(np.diag(mat) - 1.0)) > 1e-12:
            raise ConfigError("correlation matrix diagonal must be 1")
        mat = 0.5 * (mat + mat.T)
        np.fill_diagonal(mat, 1.0)
        if np.max(np.abs(mat)) > 1.0 + 1e-12:
            raise ConfigError("correlation entries must lie in [-1, 1]")
        mat = np.clip(mat, -1.0, 1.0)
        eigvals = np.linalg.eigvalsh(mat)
        if eigvals[0] < _EIG_CLIP:
            raise ConfigError(
                f"correlation matrix is not positive semidefinite (min eigenvalue {eigvals[0]:.3e})"
            )
        mat.setflags(write=False)
        object.__setattr__(self, "values", mat)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor; a tiny ridge is added for semidefinite inputs."""
        cached = self.__dict__.get("_chol")
        if cached is not None:
            return cached
        mat = self.values
        chol = None
        for ridge in (0.0, 1e-12, 1e-10):
            try:
                chol = np.linalg.cholesky(mat + ridge * np.eye(self.dim))
                break
            except np.linalg.LinAlgError:
                continue
        if chol is None:
            raise NumericalError("Cholesky factorization failed after ridge repair")
        chol.setflags(write=False)
        object.__setattr__(self, "_chol", chol)
        return chol


# ---------------------------------------------------------------------------
# deterministic quadratures

_GL_RULES = {n: leggauss(n) for n in (6, 12, 20, 32, 48, 64, 96)}


def _gl_on(lo: float, hi: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = _GL_RULES[n]
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w


def _bvn_upper(h, k, r: float) -> np.ndarray:
    """P(X > h, Y > k) elementwise for standard bivariate normal, scalar r.

    Drezner-Wesolowsky quadrature with Genz's near-singular expansion for
    |r| >= 0.925; |r| must be < 1.
    """
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    if abs(r) < 0.3:
        x, w = _GL_RULES[6]
    elif abs(r) < 0.75:
        x, w = _GL_RULES[12]
    else:
        x, w = _GL_RULES[20]

    hk = h * k
    if abs(r) < 0.925:
        hs = (h * h + k * k) / 2.0
        asr = math.asin(r)
        sn = np.sin(asr * (x + 1.0) / 2.0)
        expo = (hk[..., None] * sn - hs[..., None]) / (1.0 - sn * sn)
        bvn = np.exp(expo) @ w
        return bvn * asr / (4.0 * math.pi) + special.ndtr(-h) * special.ndtr(-k)

    # integrate the difference from the perfectly dependent case
    if r < 0.0:
        k = -k
        hk = -hk
    a_sq = (1.0 - r) * (1.0 + r)
    a = math.sqrt(a_sq)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 16.0
    asr0 = -(bs / a_sq + hk) / 2.0
    bvn = np.where(
        asr0 > -100.0,
        a * np.exp(np.maximum(asr0, -700.0))
        * (1.0 - c * (bs - a_sq) * (1.0 - d * bs / 5.0) / 3.0 + c * d * a_sq * a_sq / 5.0),
        0.0,
    )
    b = np.sqrt(bs)
    sp = _SQRT_2PI * special.ndtr(-b / a)
    tail = np.exp(np.maximum(-hk / 2.0, -700.0)) * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
    bvn = bvn - np.where(-hk < 100.0, tail, 0.0)
    half = a / 2.0
    xs = (half * (x + 1.0)) ** 2
    rs = np.sqrt(1.0 - xs)
    asr_v = -(bs[..., None] / xs + hk[..., None]) / 2.0
    sp_v = 1.0 + c[..., None] * xs * (1.0 + d[..., None] * xs)
    ep_v = np.exp(-hk[..., None] * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
    contrib = np.where(asr_v > -100.0, np.exp(np.maximum(asr_v, -700.0)) * (ep_v - sp_v), 0.0)
    bvn = bvn + half * (contrib @ w)
    bvn = -bvn / (2.0 * math.pi)
    if r > 0.0:
        return bvn + special.ndtr(-np.maximum(h, k))
    return -bvn + np.where(k > h, special.ndtr(k) - special.ndtr(h), 0.0)


def bvn_cdf_many(b1, b2, rho: float) -> np.ndarray:
    """P(X <= b1, Y <= b2) elementwise, standard bivariate normal, scalar rho."""
    b1 = np.asarray(b1, dtype=float)
    b2 = np.asarray(b2, dtype=float)
    if rho >= 1.0 - 1e-13:
        return special.ndtr(np.minimum(b1, b2))
    if rho <= -1.0 + 1e-13:
        return np.maximum(0.0, special.ndtr(b1) + special.ndtr(b2) - 1.0)
    return np.clip(_bvn_upper(-b1, -b2, rho), 0.0, 1.0)


def bvn_cdf(b1: float, b2: float, rho: float) -> float:
    return float(bvn_cdf_many(np.float64(b1), np.float64(b2), rho))


def _tvn_quad(upper: np.ndarray, corr: np.ndarray, n_nodes: int) -> np.ndarray:
    """Trivariate normal CDF by conditioning on the first variable.

    upper may be a single limit vector or a stack of them (rows); all rows
    share `corr`. The conditioned pair is a bivariate normal evaluated with
    the deterministic rule, integrated over Gauss-Legendre nodes in y.
    """
    upper = np.atleast_2d(upper)
    r12, r13, r23 = corr[0, 1], corr[0, 2], corr[1, 2]
    s2 = math.sqrt(1.0 - r12 * r12)
    s3 = math.sqrt(1.0 - r13 * r13)
    rc = min(max((r23 - r12 * r13) / (s2 * s3), -1.0), 1.0)
    lo = -8.6
    hi = np.minimum(upper[:, 0], 8.6)
    width = np.maximum(hi - lo, 0.0)
    x, w = _GL_RULES[n_nodes]
    y = lo + (x[None, :] + 1.0) / 2.0 * width[:, None]
    wt = w[None, :] * width[:, None] / 2.0
    h = (upper[:, 1][:, None] - r12 * y) / s2
    k = (upper[:, 2][:, None] - r13 * y) / s3
    inner = bvn_cdf_many(h, k, rc)
    phi = np.exp(-0.5 * y * y) / _SQRT_2PI
    return (inner * phi * wt).sum(axis=1)


def _tvn_det(upper: np.ndarray, corr: np.ndarray) -> ProbResult | None:
    """Deterministic trivariate normal, or None when conditioning degenerates."""
    # pivot on the variable least correlated with the others
    best, best_score = None, np.inf
    for pivot in range(3):
        others = [i for i in range(3) if i != pivot]
        score = max(abs(corr[pivot, others[0]]), abs(corr[pivot, others[1]]))
        if score < best_score:
            best, best_score = pivot, score
    if best_score > _COND_RHO_MAX:
        return None
    order = [best] + [i for i in range(3) if i != best]
    perm = corr[np.ix_(order, order)]
    up = upper[order]
    coarse = float(_tvn_quad(up, perm, 48)[0])
    fine = float(_tvn_quad(up, perm, 96)[0])
    err = max(3.0 * abs(fine - coarse), 1e-10)
    return ProbResult(min(1.0, max(0.0, fine)), err, 144)


def _chi_scale_nodes(df: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes in s = chi_df / sqrt(df), weighted by its density."""
    lo = math.sqrt(2.0 * special.gammaincinv(df / 2.0, 1e-16) / df)
    hi = math.sqrt(2.0 * special.gammaincinv(df / 2.0, 1.0 - 1e-16) / df)
    s, wt = _gl_on(lo, hi, n)
    xs = s * math.sqrt(df)
    log_pdf = (
        (df - 1.0) * np.log(xs)
        - 0.5 * xs * xs
        - (df / 2.0 - 1.0) * math.log(2.0)
        - special.gammaln(df / 2.0)
        + 0.5 * math.log(df)
    )
    return s, wt * np.exp(log_pdf)


def _bvt_det(upper: np.ndarray, rho: float, df: float) -> ProbResult:
    """Bivariate t as a chi-scale mixture of deterministic bivariate normals."""
    values = []
    for n in (32, 64):
        s, w = _chi_scale_nodes(df, n)
        inner = bvn_cdf_many(s * upper[0], s * upper[1], rho)
        values.append(float(np.sum(w * inner)))
    err = max(3.0 * abs(values[1] - values[0]), 1e-10)
    return ProbResult(min(1.0, max(0.0, values[1])), err, 96)


def _tvt_det(upper: np.ndarray, corr: np.ndarray) -> Callable[[float], ProbResult] | None:
    """Deterministic trivariate t factory, or None when conditioning degenerates."""
    best, best_score = None, np.inf
    for pivot in range(3):
        others = [i for i in range(3) if i != pivot]
        score = max(abs(corr[pivot, others[0]]), abs(corr[pivot, others[1]]))
        if score < best_score:
            best, best_score = pivot, score
    if best_score > _COND_RHO_MAX:
        return None
    order = [best] + [i for i in range(3) if i != best]
    perm = corr[np.ix_(order, order)]
    up = upper[order]

    def compute(df: float) -> ProbResult:
        values = []
        for n_chi, n_y in ((32, 48), (64, 96)):
            s, w = _chi_scale_nodes(df, n_chi)
            inner = _tvn_quad(s[:, None] * up[None, :], perm, n_y)
            values.append(float(np.sum(w * inner)))
        err = max(3.0 * abs(values[1] - values[0]), 1e-9)
        return ProbResult(min(1.0, max(0.0, values[1])), err, 96 * 144)

    return compute


# ---------------------------------------------------------------------------
# randomized quasi-Monte Carlo over the separation-of-variables transform


def _sov_product(chol: np.ndarray, upper_rows: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Conditional-probability product of the transformed integrand.

    upper_rows has one row of integration limits per point (rows differ only
    for the t case, where limits are scaled by the chi draw); w holds the
    uniforms driving dimensions 2..d.
    """
    n, d = upper_rows.shape
    e = special.ndtr(upper_rows[:, 0] / chol[0, 0])
    prod = e.copy()
    if d == 1:
        return prod
    y = np.empty((n, d - 1))
    for i in range(1, d):
        z = np.clip(w[:, i - 1] * e, _TINY, _ONE)
        y[:, i - 1] = special.ndtri(z)
        num = upper_rows[:, i] - y[:, :i] @ chol[i, :i]
        e = special.ndtr(num / chol[i, i])
        prod *= e
    return prod


# Fibonacci numbers used as lattice sizes for two-dimensional integrands.
_FIB = [987, 1597, 2584, 4181, 6765, 10946, 17711, 28657, 46368, 75025,
        121393, 196418, 317811, 514229, 832040, 1346269, 2178309, 3524578,
        5702887, 9227465]


def _qmc_fibonacci(
    integrand: Callable[[np.ndarray], np.ndarray],
    tol: float,
    rng: np.random.Generator,
    n_shifts: int,
    max_points: int,
    fixed_n: int | None,
) -> ProbResult:
    """Randomly shifted Fibonacci lattice rule on [0,1]^2 with baker transform."""
    shifts = rng.random((n_shifts, 2))
    if fixed_n is None:
        idx = 0
    else:
        idx = next((i for i, n in enumerate(_FIB) if n >= fixed_n), len(_FIB) - 1)
    points_used = 0
    while True:
        n = _FIB[idx]
        gen = np.array([1.0, _FIB[idx - 1] if idx > 0 else 610.0]) / n
        base = np.arange(n)[:, None] * gen[None, :]
        base -= np.floor(base)
        x = base[None, :, :] + shifts[:, None, :]
        x -= np.floor(x)
        np.abs(2.0 * x - 1.0, out=x)
        means = integrand(x.reshape(-1, 2)).reshape(n_shifts, n).mean(axis=1)
        points_used += n * n_shifts
        estimate = float(means.mean())
        error = float(3.0 * means.std(ddof=1) / math.sqrt(n_shifts))
        if fixed_n is not None or error <= tol:
            return ProbResult(min(1.0, max(0.0, estimate)), error, points_used)
        if points_used >= max_points or idx + 1 >= len(_FIB):
            raise NumericalError(
                f"QMC budget exhausted at error {error:.2e} > tol {tol:.2e}"
            )
        idx = min(idx + 2, len(_FIB) - 1)


class _SobolBlocks:
    """Owen-scrambled Sobol point streams, cached per (dim, seed).

    Per-seed caching makes repeated calls with a frozen stream (as the
    critical-value solver issues) reuse their point sets instead of paying the
    engine construction cost every call.
    """

    def __init__(self, max_entries: int = 8):
        self._cache: dict[tuple[int, int], tuple[qmc.Sobol, np.ndarray]] = {}
        self._max_entries = max_entries

    def take(self, dim: int, seed: int, stop: int) -> np.ndarray:
        key = (dim, int(seed))
        if key not in self._cache:
            if len(self._cache) >= self._max_entries:
                self._cache.pop(next(iter(self._cache)))
            engine = qmc.Sobol(dim, scramble=True, seed=int(seed))
            self._cache[key] = (engine, np.empty((0, dim)))
        engine, points = self._cache[key]
        while points.shape[0] < stop:
            grown = max(stop - points.shape[0], points.shape[0] or stop)
            points = np.vstack([points, engine.random(int(grown))])
            self._cache[key] = (engine, points)
        return points[:stop]


_SOBOL_BLOCKS = _SobolBlocks()


def _qmc_sobol(
    dim: int,
    integrand: Callable[[np.ndarray], np.ndarray],
    tol: float,
    rng: np.random.Generator,
    n_shifts: int,
    n_start: int,
    max_points: int,
    fixed_n: int | None,
) -> ProbResult:
    """Scrambled-Sobol integration on [0,1]^dim.

    Independent scramblings play the role of the random shifts; the estimate
    is their mean and the error three standard errors of their spread.
    Refinement extends each scrambled stream, so cumulative counts stay powers
    of two and every prefix remains a digital net.
    """
    seeds = rng.integers(0, 2**63 - 1, size=n_shifts)
    totals = np.zeros(n_shifts)
    count = 0
    n_next = fixed_n if fixed_n is not None else n_start
    n_next = 1 << max(4, (int(n_next) - 1).bit_length())
    while True:
        for s, seed in enumerate(seeds):
            block = _SOBOL_BLOCKS.take(dim, seed, count + n_next)[count:]
            totals[s] += integrand(block).sum()
        count += n_next
        means = totals / count
        estimate = float(means.mean())
        error = float(3.0 * means.std(ddof=1) / math.sqrt(n_shifts))
        if fixed_n is not None or error <= tol:
            return ProbResult(min(1.0, max(0.0, estimate)), error, count * n_shifts)
        if count * n_shifts >= max_points:
            raise NumericalError(
                f"QMC budget of {max_points} points exhausted at error {error:.2e} > tol {tol:.2e}"
            )
        n_next = count


def _randomized_qmc(
    dim: int,
    integrand: Callable[[np.ndarray], np.ndarray],
    tol: float,
    rng: np.random.Generator,
    n_shifts: int,
    n_start: int,
    max_points: int,
    fixed_n: int | None,
) -> ProbResult:
    if dim <= 2:
        if dim == 1:
            inner = integrand

            def integrand(w, _inner=inner):  # noqa: F811 - lift to a dummy dim
                return _inner(w[:, :1])

        return _qmc_fibonacci(integrand, tol, rng, n_shifts, max_points, fixed_n)
    return _qmc_sobol(dim, integrand, tol, rng, n_shifts, n_start, max_points, fixed_n)


def _check_tol(tol: float) -> None:
    if not TOL_MIN <= tol <= TOL_MAX:
        raise ConfigError(f"tol must lie in [{TOL_MIN}, {TOL_MAX}], got {tol}")


def _check_upper(upper, corr: CorrelationMatrix) -> np.ndarray:
    upper = np.asarray(upper, dtype=float).reshape(-1)
    if upper.shape[0] != corr.dim:
        raise ConfigError(f"limit vector has length {upper.shape[0]}, matrix dimension is {corr.dim}")
    if not np.all(np.isfinite(upper)):
        raise ConfigError("integration limits must be finite")
    return upper


def mvn_cdf(
    upper,
    corr: CorrelationMatrix,
    tol: float = 1e-6,
    rng: np.random.Generator | None = None,
    *,
    n_shifts: int = 12,
    n_start: int = 128,
    max_points: int = 1 << 26,
    fixed_n: int | None = None,
    method: str = "auto",
) -> ProbResult:
    """P(Z <= upper componentwise) for Z ~ N(0, corr).

    Dimensions up to three are deterministic under method="auto"; larger
    dimensions (or method="qmc") use randomized QMC driven by `rng` (a seed-0
    stream when omitted), so identical inputs and stream state give
    bit-identical results.
    """
    _check_tol(tol)
    upper = _check_upper(upper, corr)
    d = corr.dim
    if d == 1:
        return ProbResult(float(special.ndtr(upper[0])), 1e-16, 1)
    if d == 2 and method == "auto":
        value = bvn_cdf(upper[0], upper[1], corr.values[0, 1])
        return ProbResult(value, 5e-15, 20)
    if d == 3 and method == "auto":
        result = _tvn_det(upper, corr.values)
        if result is not None:
            return result
    if rng is None:
        rng = np.random.default_rng(0)
    chol = corr.cholesky()

    def integrand(w):
        rows = np.broadcast_to(upper, (w.shape[0], d))
        return _sov_product(chol, rows, w)

    return _randomized_qmc(d - 1, integrand, tol, rng, n_shifts, n_start, max_points, fixed_n)


def mvt_cdf(
    upper,
    corr: CorrelationMatrix,
    df: float,
    tol: float = 1e-6,
    rng: np.random.Generator | None = None,
    *,
    n_shifts: int = 12,
    n_start: int = 128,
    max_points: int = 1 << 26,
    fixed_n: int | None = None,
    method: str = "auto",
) -> ProbResult:
    """P(T <= upper componentwise) for multivariate t with scale `corr`.

    df may be any real >= 1 (Satterthwaite produces non-integral values).
    Converges to mvn_cdf as df grows.
    """
    _check_tol(tol)
    if df < 1.0:
        raise ConfigError(f"degrees of freedom must be >= 1, got {df}")
    upper = _check_upper(upper, corr)
    d = corr.dim
    if d == 1:
        return ProbResult(float(special.stdtr(df, upper[0])), 1e-14, 1)
    if d == 2:
        rho = corr.values[0, 1]
        if rho >= 1.0 - 1e-13:
            return ProbResult(float(special.stdtr(df, min(upper))), 1e-14, 1)
        if rho <= -1.0 + 1e-13:
            value = max(0.0, float(special.stdtr(df, upper[0]) + special.stdtr(df, upper[1]) - 1.0))
            return ProbResult(value, 1e-14, 1)
        if method == "auto":
            return _bvt_det(upper, rho, df)
    if d == 3 and method == "auto":
        compute = _tvt_det(upper, corr.values)
        if compute is not None:
            return compute(df)
    if rng is None:
        rng = np.random.default_rng(0)
    chol = corr.cholesky()
    half_df = df / 2.0

    def integrand(w):
        # first coordinate drives the chi scaling, the rest the normal SOV
        u = np.clip(w[:, 0], _TINY, _ONE)
        scale = np.sqrt(2.0 * special.gammaincinv(half_df, u) / df)
        rows = scale[:, None] * upper[None, :]
        return _sov_product(chol, rows, w[:, 1:])

    return _randomized_qmc(d, integrand, tol, rng, n_shifts, n_start, max_points, fixed_n)
