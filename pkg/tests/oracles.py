"""Brute-force oracles, independent of the package's integration engine."""

import numpy as np


def mvn_orthant_mc(upper, corr, n_draws, seed, chunk=1_000_000):
    """Plain Monte Carlo estimate of P(Z <= upper); returns (p, se)."""
    upper = np.asarray(upper, float)
    chol = np.linalg.cholesky(np.asarray(corr, float))
    rng = np.random.default_rng(seed)
    hits, remaining = 0, int(n_draws)
    while remaining:
        n = min(chunk, remaining)
        z = rng.standard_normal((n, upper.shape[0])) @ chol.T
        hits += int(np.all(z <= upper, axis=1).sum())
        remaining -= n
    p = hits / n_draws
    return p, np.sqrt(p * (1.0 - p) / n_draws)


def mvt_orthant_mc(upper, corr, df, n_draws, seed, chunk=1_000_000):
    """Plain Monte Carlo estimate of P(T <= upper), T multivariate t."""
    upper = np.asarray(upper, float)
    chol = np.linalg.cholesky(np.asarray(corr, float))
    rng = np.random.default_rng(seed)
    hits, remaining = 0, int(n_draws)
    while remaining:
        n = min(chunk, remaining)
        z = rng.standard_normal((n, upper.shape[0])) @ chol.T
        s = np.sqrt(rng.chisquare(df, size=n) / df)
        hits += int(np.all(z / s[:, None] <= upper, axis=1).sum())
        remaining -= n
    p = hits / n_draws
    return p, np.sqrt(p * (1.0 - p) / n_draws)


def pwer_event_mc(c, weights, members, full_corr, n_draws, seed, chunk=1_000_000):
    """Event-level PWER oracle: weighted rejection frequencies per stratum.

    members maps each stratum to its population indices (1-based); rejection
    in a stratum means any member statistic exceeds its critical value.
    """
    c = np.asarray(c, float)
    weights = np.asarray(weights, float)
    chol = np.linalg.cholesky(np.asarray(full_corr, float))
    rng = np.random.default_rng(seed)
    total = np.zeros(())
    total_sq = 0.0
    remaining = int(n_draws)
    while remaining:
        n = min(chunk, remaining)
        z = rng.standard_normal((n, chol.shape[0])) @ chol.T
        per_draw = np.zeros(n)
        for w, mem in zip(weights, members):
            idx = [i - 1 for i in sorted(mem)]
            per_draw += w * np.any(z[:, idx] > c[idx], axis=1)
        total = total + per_draw.sum()
        total_sq += float((per_draw**2).sum())
        remaining -= n
    mean = float(total) / n_draws
    var = total_sq / n_draws - mean**2
    return mean, np.sqrt(max(var, 0.0) / n_draws)


def random_correlation(dim, rng, extra=2):
    """A nonsingular random correlation matrix."""
    a = rng.normal(size=(dim, dim + extra))
    cov = a @ a.T
    s = np.sqrt(np.diag(cov))
    return cov / np.outer(s, s)


def solved_true_pwer(weights, pi_ref, model, alpha, cdf_tol=1e-8):
    """h(w) = sum_J pi_ref_J (1 - F_J(c(w))) with c re-solved at weights w.

    The finite-difference oracle for the PWER gradient differentiates this map
    numerically; it deliberately goes through the full calibration.
    """
    from pwerpi import pwer

    cv = pwer.solve_critical_values(
        weights,
        model,
        alpha,
        solver_tol=1e-12,
        cdf_tol=cdf_tol,
        verify_tol=cdf_tol,
        rng=np.random.default_rng(0),
    )
    return float(np.nansum(np.asarray(pi_ref) * (1.0 - cv.stratum_cdf)))


def fd_gradient(pi0, model, alpha, step=1e-4, cdf_tol=1e-8):
    """Central finite differences of the re-solved true-PWER map at pi0."""
    pi0 = np.asarray(pi0, float)
    grad = np.empty(pi0.shape[0])
    for j in range(pi0.shape[0]):
        up = pi0.copy()
        up[j] += step
        down = pi0.copy()
        down[j] -= step
        grad[j] = (
            solved_true_pwer(up, pi0, model, alpha, cdf_tol)
            - solved_true_pwer(down, pi0, model, alpha, cdf_tol)
        ) / (2.0 * step)
    return grad
