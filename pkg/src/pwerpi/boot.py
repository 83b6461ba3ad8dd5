"""Resampling engines for the cases without a closed-form joint law.

Covers unknown heterogeneous variances under homogeneous null effects (a
Satterthwaite t-approximation and a parametric bootstrap of the global null)
and qualitative null-effect heterogeneity (a projection bootstrap that
redraws strata sizes and projects observed effects onto the null space).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pwer
from .design import CONTROL, Design, PrevalenceVector
from .errors import ConfigError, InfeasibleDesignError, NumericalError


@dataclass(frozen=True)
class EmpiricalNull:
    """Resampled test statistics under the global null hypothesis."""

    statistics: np.ndarray  # (B, m)
    provenance: str  # "parametric_D" | "projection_E"
    rejected_resamples: int = 0

    def __post_init__(self):
        stats = np.asarray(self.statistics, dtype=float)
        if stats.ndim != 2 or stats.shape[0] < 1000:
            raise ConfigError("empirical null needs a (B, m) matrix with B >= 1000")
        if not np.all(np.isfinite(stats)):
            raise NumericalError("empirical null contains non-finite statistics")
        stats.setflags(write=False)
        object.__setattr__(self, "statistics", stats)

    @property
    def B(self) -> int:
        return self.statistics.shape[0]


class FwerCurve:
    """Empirical FWER of one stratum: c -> fraction of resample maxima above c."""

    def __init__(self, maxima: np.ndarray):
        self.sorted_maxima = np.sort(np.asarray(maxima, dtype=float))

    def value(self, c: float) -> float:
        n = self.sorted_maxima.shape[0]
        return float(n - np.searchsorted(self.sorted_maxima, c, side="right")) / n


def fwer_curves(null: EmpiricalNull, strata) -> list[FwerCurve]:
    """Per-stratum curves from the shared resample matrix."""
    curves = []
    for stratum in strata:
        idx = [i - 1 for i in sorted(stratum)]
        curves.append(FwerCurve(null.statistics[:, idx].max(axis=1)))
    return curves


def welch_df(variances: np.ndarray, weights: np.ndarray, cell_dfs: np.ndarray) -> float:
    """Welch-Satterthwaite effective degrees of freedom of sum_k w_k s_k^2."""
    num = float(np.dot(weights, variances)) ** 2
    den = float(np.sum((weights * variances) ** 2 / cell_dfs))
    return num / den


def satterthwaite_df(design: Design, sample_variances: np.ndarray) -> float:
    """Shared t degrees of freedom: the minimum of the per-population Welch dfs.

    Population i combines the cells feeding V_i with weights n_cell/n_arm^2;
    every contributing cell needs at least two patients.
    """
    s2 = np.asarray(sample_variances, dtype=float)
    sizes = design.cell_sizes.astype(float)
    dfs = []
    for i in range(1, design.m + 1):
        t_idx = design.treatment_cells(i)
        c_idx = design.control_cells(i)
        idx = np.concatenate([t_idx, c_idx])
        idx = idx[sizes[idx] > 0]
        if np.any(sizes[idx] < 2):
            raise InfeasibleDesignError(
                f"population {i} has a cell with fewer than 2 patients; "
                "sample variances are undefined"
            )
        n_t = sizes[t_idx].sum()
        n_c = sizes[c_idx].sum()
        weights = np.where(
            np.isin(idx, t_idx), sizes[idx] / n_t**2, sizes[idx] / n_c**2
        )
        dfs.append(welch_df(s2[idx], weights, sizes[idx] - 1.0))
    return float(min(dfs))


def build_satterthwaite_model(design: Design, sample_variances: np.ndarray) -> pwer.TestModel:
    """Multivariate t model with observed variances and the shared Welch df."""
    df = satterthwaite_df(design, sample_variances)
    return pwer.build_test_model(
        design, cell_variances=np.asarray(sample_variances, float), kind="t", df=max(df, 1.0)
    )


def bootstrap_null_D(
    design: Design,
    observed_cell_variances: np.ndarray,
    B: int,
    rng: np.random.Generator,
) -> EmpiricalNull:
    """Parametric bootstrap of the global null with observed cell variances.

    Each resample draws every populated cell mean from N(0, s^2/n) and
    studentizes with the V_i built from the same observed variances.
    """
    s2 = np.asarray(observed_cell_variances, dtype=float)
    sizes = design.cell_sizes.astype(float)
    scale = np.where(sizes > 0, np.sqrt(s2 / np.maximum(sizes, 1.0)), 0.0)
    means = rng.standard_normal((int(B), len(design.cells))) * scale[None, :]
    stats = pwer.test_statistics(design, means, cell_variances=s2)
    return EmpiricalNull(statistics=stats, provenance="parametric_D")


def _weights_of(pi, n_strata: int) -> np.ndarray:
    w = pi.values if isinstance(pi, PrevalenceVector) else np.asarray(pi, dtype=float)
    if w.shape != (n_strata,):
        raise ConfigError("prevalence vector does not match the strata list")
    return w


def solve_critical_empirical(null: EmpiricalNull, strata, pi_hat, alpha: float) -> pwer.CriticalValues:
    """Smallest shared c with empirical PWER(c) <= alpha.

    The empirical PWER is the pi-weighted mix of the per-stratum rejection
    step functions; the root is reported as the midpoint of the bracketing
    order statistics, so the conservative side of the step is guaranteed.
    """
    weights = _weights_of(pi_hat, len(strata))
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    curves = fwer_curves(null, strata)
    if alpha >= 1.0:
        c_star = float(null.statistics.min()) - 1.0
        return _empirical_result(c_star, curves, weights, strata, alpha)
    if null.B * alpha < 20.0:
        raise ConfigError(
            f"B*alpha = {null.B * alpha:.1f} < 20: not enough resamples to resolve the tail"
        )
    live = weights > 0.0
    values = np.concatenate([curves[j].sorted_maxima for j in np.flatnonzero(live)])
    atom_w = np.concatenate(
        [np.full(null.B, weights[j] / null.B) for j in np.flatnonzero(live)]
    )
    order = np.argsort(values, kind="stable")
    values = values[order]
    atom_w = atom_w[order]
    uniq, inverse = np.unique(values, return_inverse=True)
    group_w = np.bincount(inverse, weights=atom_w)
    above = np.concatenate([np.cumsum(group_w[::-1])[::-1], [0.0]])[1:]  # weight > uniq[g]
    feasible = above <= alpha + 1e-15
    g = int(np.argmax(feasible))  # `above` is nonincreasing, so first True
    if not feasible[g]:
        raise NumericalError("empirical PWER never falls below alpha")
    c_star = float(0.5 * (uniq[g] + uniq[g + 1])) if g + 1 < uniq.shape[0] else float(uniq[g] + 1.0)
    return _empirical_result(c_star, curves, weights, strata, alpha)


def _empirical_result(c_star, curves, weights, strata, alpha) -> pwer.CriticalValues:
    fwer = np.array([curve.value(c_star) for curve in curves])
    achieved = float(np.dot(weights, fwer))
    m = max(max(s) for s in strata)
    return pwer.CriticalValues(
        c=np.full(m, c_star),
        alpha=alpha,
        achieved=achieved,
        verified=achieved,
        stratum_cdf=1.0 - fwer,
        evaluations=0,
    )


def empirical_gradient_and_true_pwer(
    null: EmpiricalNull,
    strata,
    c_hat,
    pi_true,
    transform_factors: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Gradient -FWER_J(c) (with transform factors) and the true-weighted PWER."""
    c = float(c_hat.c[0]) if isinstance(c_hat, pwer.CriticalValues) else float(c_hat)
    weights = _weights_of(pi_true, len(strata))
    fwer = np.array([curve.value(c) for curve in fwer_curves(null, strata)])
    grad = -fwer
    if transform_factors is not None:
        grad = np.asarray(transform_factors, float) * grad
    return grad, float(np.dot(weights, fwer))


def project_to_null(effects: np.ndarray, weights: np.ndarray, strata, m: int) -> np.ndarray:
    """Euclidean projection onto {theta : sum_{J containing i} w_J theta_J = 0}."""
    theta = np.asarray(effects, dtype=float)
    w = np.asarray(weights, dtype=float)
    constraint = np.zeros((m, len(strata)))
    for j, stratum in enumerate(strata):
        for i in stratum:
            constraint[i - 1, j] = w[j]
    return theta - np.linalg.pinv(constraint) @ (constraint @ theta)


def _arm_layout(design: Design):
    """Cell metadata: stratum index, arm count, slot in arm order, is-control."""
    k_of_stratum = np.zeros(design.n_strata, dtype=np.int64)
    stratum_of_cell = np.zeros(len(design.cells), dtype=np.intp)
    slot_of_cell = np.zeros(len(design.cells), dtype=np.int64)
    is_control = np.zeros(len(design.cells), dtype=bool)
    for j, stratum in enumerate(design.strata):
        arms = design.arms_of(stratum)
        k_of_stratum[j] = len(arms)
        for slot, arm in enumerate(arms):
            k = design._cell_lookup[(j, arm)]
            stratum_of_cell[k] = j
            slot_of_cell[k] = slot
            is_control[k] = arm == CONTROL
    return k_of_stratum, stratum_of_cell, slot_of_cell, is_control


def bootstrap_null_E(
    design: Design,
    pi_hat,
    observed_effects: np.ndarray,
    pooled_variance: float,
    B: int,
    rng: np.random.Generator,
    max_redraw_rounds: int = 1000,
) -> EmpiricalNull:
    """Projection bootstrap for qualitative effect heterogeneity (two populations).

    Every resample redraws the strata sizes from multinomial(N, pi_hat),
    reallocates arms evenly, and draws cell means around the observed effects
    projected onto the null space, studentized with the observed pooled
    variance. Resamples with an empty population arm are redrawn and counted.
    """
    if design.m != 2:
        raise ConfigError("the projection bootstrap supports exactly two populations")
    if pooled_variance <= 0.0:
        raise ConfigError(f"pooled variance must be positive, got {pooled_variance}")
    weights = _weights_of(pi_hat, design.n_strata)
    theta = project_to_null(observed_effects, weights, design.strata, design.m)

    k_of_stratum, stratum_of_cell, slot_of_cell, is_control = _arm_layout(design)
    n_cells = len(design.cells)
    centers = np.where(is_control, 0.0, theta[stratum_of_cell])

    t_member = np.zeros((design.m, n_cells), dtype=bool)
    c_member = np.zeros((design.m, n_cells), dtype=bool)
    for i in range(1, design.m + 1):
        t_member[i - 1, design.treatment_cells(i)] = True
        c_member[i - 1, design.control_cells(i)] = True

    B = int(B)
    counts = rng.multinomial(design.N, weights, size=B)
    rejected = 0
    for _ in range(max_redraw_rounds):
        cell_n = counts[:, stratum_of_cell] // k_of_stratum[stratum_of_cell] + (
            slot_of_cell < counts[:, stratum_of_cell] % k_of_stratum[stratum_of_cell]
        )
        pop_t = cell_n @ t_member.T
        pop_c = cell_n @ c_member.T
        bad = ((pop_t == 0) | (pop_c == 0)).any(axis=1)
        if not bad.any():
            break
        rejected += int(bad.sum())
        counts[bad] = rng.multinomial(design.N, weights, size=int(bad.sum()))
    else:
        raise NumericalError("projection bootstrap kept producing empty population arms")

    cell_n = cell_n.astype(float)
    scale = np.sqrt(np.divide(pooled_variance, cell_n, out=np.zeros_like(cell_n), where=cell_n > 0))
    means = centers[None, :] + rng.standard_normal((B, n_cells)) * scale

    # pooled contrasts with the redrawn sizes; homogeneous pooled variance
    z = np.empty((B, design.m))
    for i in range(design.m):
        n_t = cell_n[:, t_member[i]].sum(axis=1)
        n_c = cell_n[:, c_member[i]].sum(axis=1)
        pooled_t = (means[:, t_member[i]] * cell_n[:, t_member[i]]).sum(axis=1) / n_t
        pooled_c = (means[:, c_member[i]] * cell_n[:, c_member[i]]).sum(axis=1) / n_c
        v = pooled_variance * (1.0 / n_t + 1.0 / n_c)
        z[:, i] = (pooled_t - pooled_c) / np.sqrt(v)
    return EmpiricalNull(statistics=z, provenance="projection_E", rejected_resamples=rejected)


def generate_setting_E_study(
    pi_true: PrevalenceVector,
    design: Design,
    sigma: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Draw one qualitatively heterogeneous study at the global null boundary.

    The overlap-stratum effect is uniform on (-1, 1); the singleton effects
    solve the prevalence-weighted zero-mean constraints. Returns the observed
    per-stratum effect estimates and a pooled sample variance.
    """
    if design.m != 2:
        raise ConfigError("setting E studies are defined for exactly two populations")
    if sigma <= 0.0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    pi = _weights_of(pi_true, design.n_strata)
    if pi[0] <= 0.0 or pi[1] <= 0.0:
        raise ConfigError("both singleton strata need positive true prevalence")
    theta = np.empty(3)
    theta[2] = rng.uniform(-1.0, 1.0)
    theta[0] = -pi[2] / pi[0] * theta[2]
    theta[1] = -pi[2] / pi[1] * theta[2]

    _, stratum_of_cell, _, is_control = _arm_layout(design)
    sizes = design.cell_sizes.astype(float)
    centers = np.where(is_control, 0.0, theta[stratum_of_cell])
    scale = np.sqrt(np.divide(sigma**2, sizes, out=np.zeros_like(sizes), where=sizes > 0))
    means = centers + rng.standard_normal(len(design.cells)) * scale

    observed = np.zeros(design.n_strata)
    for j, stratum in enumerate(design.strata):
        if design.strata_counts[j] == 0:
            continue
        t_cells = [
            k for k in range(len(design.cells))
            if stratum_of_cell[k] == j and not is_control[k] and sizes[k] > 0
        ]
        c_cell = design._cell_lookup[(j, CONTROL)]
        if not t_cells or sizes[c_cell] == 0:
            raise InfeasibleDesignError(
                f"stratum {sorted(stratum)} has patients but an empty arm"
            )
        observed[j] = means[t_cells].mean() - means[c_cell]

    df = design.N - design.positive_cell_count()
    if df < 1:
        raise InfeasibleDesignError("no residual degrees of freedom for the pooled variance")
    pooled_variance = sigma**2 * rng.chisquare(df) / df
    return observed, float(pooled_variance)
