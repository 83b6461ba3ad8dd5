"""Coverage simulations for the true-PWER prediction interval.

A scenario fixes true prevalences, a treatment scheme, and a distributional
setting; each run draws strata counts, calibrates critical values on the
estimated prevalences, builds the interval, and checks whether the realized
true PWER is covered. Aggregations reproduce the coverage/length tables and
the per-study distribution data.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import boot, pwer
from .design import (
    PrevalenceVector,
    TRANSFORM_NONE,
    TRANSFORMS,
    build_design,
    enumerate_strata,
    shift_values,
    floor_values,
    transform_gradient_factor,
)
from .errors import ConfigError, InfeasibleDesignError, NumericalError, PwerError

SETTINGS = ("A", "B", "C", "D_satterthwaite", "D_bootstrap", "E")
PREVALENCE_SCHEMES = ("equal", "one_large", "one_small", "random_biomarker", "explicit")

SETTING_E_SIGMA = 0.5


@dataclass(frozen=True)
class SimScenario:
    """One simulation configuration at a fixed true prevalence vector."""

    N: int
    m: int
    setting: str
    prevalence_scheme: str = "equal"
    treatment_scheme: str = "pairwise_different"
    explicit_prevalences: tuple[float, ...] | None = None
    alpha: float = 0.025
    alpha_prime: float = 0.05
    runs: int = 2000
    B: int = 2000
    pi_min: float = 0.0
    transform: str = TRANSFORM_NONE
    master_seed: int = 0
    cdf_tol: float = 1e-6
    solver_tol: float = 1e-8

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.prevalence_scheme not in PREVALENCE_SCHEMES:
            raise ConfigError(f"unknown prevalence scheme {self.prevalence_scheme!r}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}")
        if self.setting == "E" and self.m != 2:
            raise ConfigError("setting E is defined for m = 2 only")
        if self.runs < 1 or self.N < 1:
            raise ConfigError("runs and N must be positive")


def scheme_prevalences(m: int, scheme: str, explicit: Sequence[float] | None = None) -> np.ndarray:
    """True prevalences over the canonical strata for the named scheme.

    one_large puts 0.5 on the all-populations stratum, one_small puts
    1/(2^(m+4) - 16) there; the remaining strata share the rest equally.
    """
    n_s = 2**m - 1
    if scheme == "equal":
        return np.full(n_s, 1.0 / n_s)
    if scheme == "one_large":
        values = np.full(n_s, 0.5 / (n_s - 1))
        values[-1] = 0.5
        return values
    if scheme == "one_small":
        small = 1.0 / (2 ** (m + 4) - 16)
        values = np.full(n_s, (1.0 - small) / (n_s - 1))
        values[-1] = small
        return values
    if scheme == "explicit":
        if explicit is None:
            raise ConfigError("explicit prevalence scheme needs a vector")
        values = np.asarray(explicit, dtype=float)
        if values.shape != (n_s,):
            raise ConfigError(f"explicit prevalences must have length {n_s}")
        return values
    raise ConfigError(
        f"prevalence scheme {scheme!r} has no fixed vector; draw it per study"
    )


def prevalences_from_biomarkers(p: Sequence[float]) -> np.ndarray:
    """Strata weights proportional to products of biomarker probabilities."""
    p = np.asarray(p, dtype=float)
    strata = enumerate_strata(p.shape[0])
    raw = np.empty(len(strata))
    for j, stratum in enumerate(strata):
        mask = np.zeros(p.shape[0], dtype=bool)
        mask[[i - 1 for i in stratum]] = True
        raw[j] = np.prod(np.where(mask, p, 1.0 - p))
    total = raw.sum()
    if total <= 0.0:
        raise ConfigError("all biomarker probabilities vanish")
    return raw / total


def generate_random_study(m: int, rng: np.random.Generator) -> PrevalenceVector:
    """Random-biomarker prevalences: expression probabilities ~ U(0,1)."""
    for _ in range(100):
        p = rng.uniform(size=m)
        if np.any(p > 0.0):
            return PrevalenceVector(
                strata=enumerate_strata(m), values=prevalences_from_biomarkers(p)
            )
    raise NumericalError("random biomarker draw kept returning zeros")


class RunRecord(NamedTuple):
    true_pwer: float
    lower: float
    upper: float
    covered: bool
    length: float
    gamma: float
    gamma_true: float
    c_star: float
    achieved: float
    rejected_resamples: int


@dataclass
class SimResult:
    """Per-run records plus aggregate coverage and length statistics."""

    scenario: SimScenario
    records: list[RunRecord]
    failures: int = 0

    def __post_init__(self):
        if not self.records:
            raise NumericalError("scenario produced no successful runs")

    @property
    def coverage(self) -> float:
        return float(np.mean([r.covered for r in self.records]))

    @property
    def mean_length(self) -> float:
        return float(np.mean([r.length for r in self.records]))

    @property
    def sd_length(self) -> float:
        return float(np.std([r.length for r in self.records], ddof=1))

    @property
    def mean_true_pwer(self) -> float:
        return float(np.mean([r.true_pwer for r in self.records]))

    def length_quantiles(self, qs=(0.25, 0.5, 0.75)) -> list[float]:
        return [float(v) for v in np.quantile([r.length for r in self.records], qs)]

    def aggregate_row(self) -> dict:
        sc = self.scenario
        return {
            "N": sc.N,
            "m": sc.m,
            "setting": sc.setting,
            "prevalence_scheme": sc.prevalence_scheme,
            "treatment_scheme": sc.treatment_scheme,
            "transform": sc.transform,
            "pi_min": repr(sc.pi_min),
            "runs": len(self.records),
            "failures": self.failures,
            "coverage": repr(self.coverage),
            "mean_length_e3": repr(self.mean_length * 1e3),
            "sd_length_e3": repr(self.sd_length * 1e3),
            "mean_true_pwer": repr(self.mean_true_pwer),
        }


def _apply_transform(values: np.ndarray, transform: str, pi_min: float) -> np.ndarray:
    if transform == TRANSFORM_NONE or pi_min == 0.0:
        return values
    if transform == "floor":
        return floor_values(values, pi_min)[0]
    return shift_values(values, pi_min)


def _run_single(scenario: SimScenario, pi_true: np.ndarray, run_index: int) -> RunRecord:
    """One simulation run; raises PwerError subtypes on failure."""
    strata = enumerate_strata(scenario.m)
    seed = np.random.SeedSequence((scenario.master_seed, run_index))
    data_ss, boot_ss, solve_ss = seed.spawn(3)
    rng_data = np.random.default_rng(data_ss)

    counts = rng_data.multinomial(scenario.N, pi_true)

    setting = scenario.setting
    if setting in ("A", "B"):
        mode = "known_homogeneous" if setting == "A" else "known_heterogeneous"
    elif setting in ("C", "E"):
        mode = "unknown_homogeneous"
    else:
        mode = "unknown_heterogeneous"

    design = build_design(scenario.m, scenario.treatment_scheme, counts, 1.0, mode)
    if setting == "B":
        # one U(0,1) variance per stratum, shared by its arms
        per_stratum = rng_data.uniform(size=len(strata))
        strat_of_cell = np.array([j for j, _arm in design.cells])
        design = replace(design, cell_variances=per_stratum[strat_of_cell])

    pi_hat = counts / scenario.N
    pi_hat_t = _apply_transform(pi_hat, scenario.transform, scenario.pi_min)
    pi_true_t = _apply_transform(pi_true, scenario.transform, scenario.pi_min)
    factors = transform_gradient_factor(pi_hat, scenario.pi_min, scenario.transform)
    factors_true = transform_gradient_factor(pi_true, scenario.pi_min, scenario.transform)

    rejected = 0
    if setting in ("A", "B", "C"):
        model = pwer.build_test_model(design, allow_empty_populations=True)
        if np.any(~model.stratum_ok & (pi_true_t > 0)):
            raise InfeasibleDesignError(
                "true prevalence weights a stratum without a defined joint law"
            )
        cv = pwer.solve_critical_values(
            pi_hat_t,
            model,
            scenario.alpha,
            solver_tol=scenario.solver_tol,
            cdf_tol=scenario.cdf_tol,
            rng=np.random.default_rng(solve_ss),
        )
        grad = pwer.gradient_pwer(cv, model, transform_factors=factors)
        grad_true = factors_true * (cv.stratum_cdf - 1.0)
        tp = float(np.nansum(pi_true_t * (1.0 - cv.stratum_cdf)))
    else:
        rng_boot = np.random.default_rng(boot_ss)
        if setting in ("D_satterthwaite", "D_bootstrap"):
            sizes = design.cell_sizes.astype(float)
            true_vars = rng_data.uniform(size=len(design.cells))
            if np.any((sizes > 0) & (sizes < 2)):
                raise InfeasibleDesignError("a populated cell has a single patient")
            chi = rng_data.chisquare(np.maximum(sizes - 1.0, 1.0))
            s2_obs = np.where(sizes > 0, true_vars * chi / np.maximum(sizes - 1.0, 1.0), 1.0)
            null = boot.bootstrap_null_D(design, s2_obs, scenario.B, rng_boot)
            if setting == "D_satterthwaite":
                model_s = boot.build_satterthwaite_model(design, s2_obs)
                cv = pwer.solve_critical_values(
                    pi_hat_t,
                    model_s,
                    scenario.alpha,
                    solver_tol=scenario.solver_tol,
                    cdf_tol=scenario.cdf_tol,
                    rng=np.random.default_rng(solve_ss),
                )
            else:
                cv = boot.solve_critical_empirical(null, strata, pi_hat_t, scenario.alpha)
        else:  # setting E
            pv_true = PrevalenceVector(strata=strata, values=pi_true)
            effects, pooled = boot.generate_setting_E_study(
                pv_true, design, SETTING_E_SIGMA, rng_data
            )
            null = boot.bootstrap_null_E(design, pi_hat, effects, pooled, scenario.B, rng_boot)
            rejected = null.rejected_resamples
            cv = boot.solve_critical_empirical(null, strata, pi_hat_t, scenario.alpha)
        grad, tp = boot.empirical_gradient_and_true_pwer(
            null, strata, cv, pi_true_t, transform_factors=factors
        )
        grad_true, _ = boot.empirical_gradient_and_true_pwer(
            null, strata, cv, pi_true_t, transform_factors=factors_true
        )

    gamma = pwer.delta_gamma(pi_hat, grad)
    gamma_true = pwer.delta_gamma(pi_true, grad_true)
    interval = pwer.prediction_interval(scenario.alpha, scenario.alpha_prime, gamma, scenario.N)
    return RunRecord(
        true_pwer=float(tp),
        lower=float(interval.lower),
        upper=float(interval.upper),
        covered=bool(interval.contains(tp)),
        length=float(interval.length),
        gamma=float(gamma),
        gamma_true=float(gamma_true),
        c_star=float(cv.c[0]),
        achieved=float(cv.achieved),
        rejected_resamples=int(rejected),
    )


def _run_block(scenario: SimScenario, pi_true: np.ndarray, indices: Sequence[int]):
    out = []
    for run_index in indices:
        try:
            out.append((run_index, _run_single(scenario, pi_true, run_index)))
        except (PwerError, np.linalg.LinAlgError) as exc:
            out.append((run_index, f"{type(exc).__name__}: {exc}"))
    return out


def resolve_true_prevalences(scenario: SimScenario) -> np.ndarray:
    if scenario.prevalence_scheme == "random_biomarker":
        raise ConfigError(
            "random_biomarker has no fixed truth; use run_study_distribution "
            "or pass an explicit vector"
        )
    return scheme_prevalences(
        scenario.m, scenario.prevalence_scheme, scenario.explicit_prevalences
    )


def run_scenario(
    scenario: SimScenario, threads: int = 1, max_failure_fraction: float = 0.01
) -> SimResult:
    """Execute all runs of a scenario; deterministic for a given master seed.

    Per-run streams derive from (master_seed, run_index), so results do not
    depend on the worker count. Runs that fail calibration are excluded and
    counted; more than max_failure_fraction failures (default 1%) fails the
    whole scenario.
    """
    pi_true = resolve_true_prevalences(scenario)
    indices = list(range(scenario.runs))
    if threads <= 1:
        blocks = [_run_block(scenario, pi_true, indices)]
    else:
        chunks = np.array_split(np.asarray(indices), threads)
        with ProcessPoolExecutor(max_workers=threads) as pool:
            blocks = list(
                pool.map(_run_block, *zip(*[(scenario, pi_true, chunk.tolist()) for chunk in chunks]))
            )
    collected: dict[int, RunRecord | str] = {}
    for block in blocks:
        for run_index, payload in block:
            collected[run_index] = payload
    records, failures = [], []
    for run_index in indices:
        payload = collected[run_index]
        if isinstance(payload, RunRecord):
            records.append(payload)
        else:
            failures.append((run_index, payload))
    if len(failures) > max_failure_fraction * scenario.runs:
        raise NumericalError(
            f"{len(failures)}/{scenario.runs} runs failed; first: {failures[0]}"
        )
    return SimResult(scenario=scenario, records=records, failures=len(failures))


@dataclass
class StudyRow:
    study: int
    coverage: float
    mean_length: float
    failures: int = 0


@dataclass
class StudyDistribution:
    """Coverage distribution over studies with random prevalences."""

    rows: list[StudyRow]

    def summary(self) -> dict:
        cov = np.array([r.coverage for r in self.rows])
        lengths = np.array([r.mean_length for r in self.rows])
        q1, med, q3 = np.quantile(cov, [0.25, 0.5, 0.75])
        return {
            "mean": float(cov.mean()),
            "sd": float(cov.std(ddof=1)) if cov.shape[0] > 1 else 0.0,
            "min": float(cov.min()),
            "q1": float(q1),
            "median": float(med),
            "q3": float(q3),
            "max": float(cov.max()),
            "mean_length_e3": float(np.nanmean(lengths) * 1e3),
        }


def _derived_seed(*entropy) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def run_study_distribution(
    m: int,
    setting: str,
    N: int,
    studies: int,
    runs_per_study: int,
    master_seed: int,
    treatment_scheme: str = "pairwise_different",
    alpha: float = 0.025,
    alpha_prime: float = 0.05,
    B: int = 2000,
    threads: int = 1,
) -> StudyDistribution:
    """Coverage over `studies` random-biomarker prevalence draws.

    Study streams derive only from (master_seed, study index), so different
    settings run against identical prevalence draws and count streams.
    Extreme draws can leave a population without both arms in most runs; a
    run whose design cannot support the interval at all counts as not
    covered (the prediction certainly failed), so every study yields a row.
    Mean lengths average over the runs that produced an interval.
    """
    rows = []
    for s in range(studies):
        rng_study = np.random.default_rng(np.random.SeedSequence((master_seed, 7001, s)))
        pv = generate_random_study(m, rng_study)
        scenario = SimScenario(
            N=N,
            m=m,
            setting=setting,
            prevalence_scheme="explicit",
            explicit_prevalences=tuple(pv.values),
            treatment_scheme=treatment_scheme,
            alpha=alpha,
            alpha_prime=alpha_prime,
            runs=runs_per_study,
            B=B,
            master_seed=_derived_seed(master_seed, 7002, s),
        )
        try:
            result = run_scenario(scenario, threads=threads, max_failure_fraction=1.0)
            covered = sum(rec.covered for rec in result.records)
            mean_length, failures = result.mean_length, result.failures
        except NumericalError:  # every run failed: nothing to average
            covered, mean_length, failures = 0, float("nan"), runs_per_study
        rows.append(StudyRow(
            study=s,
            coverage=covered / runs_per_study,
            mean_length=mean_length,
            failures=failures,
        ))
    return StudyDistribution(rows=rows)


PI_MIN_LABELS = ("0", "1/(2^(m+2)-4)", "1/(2^(m+1)-2)")


def resolve_pi_min(label, m: int) -> float:
    """Map a grid label (or plain number) to the pi_min value for m populations."""
    if isinstance(label, str):
        key = label.replace(" ", "")
        if key == "0":
            return 0.0
        if key == "1/(2^(m+2)-4)":
            return 1.0 / (2 ** (m + 2) - 4)
        if key == "1/(2^(m+1)-2)":
            return 1.0 / (2 ** (m + 1) - 2)
        raise ConfigError(f"unknown pi_min label {label!r}")
    value = float(label)
    if value < 0.0:
        raise ConfigError(f"pi_min must be nonnegative, got {value}")
    return value


def run_min_prevalence_grid(
    N_list: Sequence[int],
    m_list: Sequence[int],
    pi_min_list: Sequence = PI_MIN_LABELS,
    transform_list: Sequence[str] = ("floor", "shift"),
    runs: int = 2000,
    master_seed: int = 0,
    setting: str = "A",
    treatment_scheme: str = "pairwise_different",
    alpha: float = 0.025,
    alpha_prime: float = 0.05,
    threads: int = 1,
) -> list[dict]:
    """Coverage and mean-length grid under the one_small truth.

    Cell seeds depend only on (master_seed, N, m): rows of one (N, m) cell are
    paired draws, and pi_min = 0 reproduces the untransformed scenario
    bit-identically under either transform.
    """
    rows = []
    for N in N_list:
        for m in m_list:
            cell_seed = _derived_seed(master_seed, 7100, N, m)
            for transform in transform_list:
                for label in pi_min_list:
                    pi_min = resolve_pi_min(label, m)
                    scenario = SimScenario(
                        N=N,
                        m=m,
                        setting=setting,
                        prevalence_scheme="one_small",
                        treatment_scheme=treatment_scheme,
                        alpha=alpha,
                        alpha_prime=alpha_prime,
                        runs=runs,
                        pi_min=pi_min,
                        transform=transform if pi_min > 0.0 else TRANSFORM_NONE,
                        master_seed=cell_seed,
                    )
                    result = run_scenario(scenario, threads=threads)
                    rows.append(
                        {
                            "N": N,
                            "m": m,
                            "transform": transform,
                            "pi_min_label": label if isinstance(label, str) else repr(label),
                            "pi_min": pi_min,
                            "coverage": result.coverage,
                            "mean_length_e3": result.mean_length * 1e3,
                            "failures": result.failures,
                        }
                    )
    return rows


# ---------------------------------------------------------------------------
# CSV output


def write_records_csv(result: SimResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RunRecord._fields)
        for rec in result.records:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in rec])


def write_aggregate_csv(results: Sequence[SimResult], path: Path) -> None:
    rows = [r.aggregate_row() for r in results]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def write_study_csv(dist: StudyDistribution, path: Path) -> None:
    """Per-study coverage and mean interval length (the length-distribution data)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["study", "coverage", "mean_length", "failures"])
        for row in dist.rows:
            writer.writerow([row.study, repr(row.coverage), repr(row.mean_length), row.failures])


def write_grid_csv(rows: Sequence[dict], path: Path, value_key: str) -> None:
    """Wide table: one row per (N, pi_min), one column per (transform, m)."""
    transforms = sorted({r["transform"] for r in rows})
    ms = sorted({r["m"] for r in rows})
    keys = list(dict.fromkeys((r["N"], r["pi_min_label"]) for r in rows))  # input order
    index = {(r["N"], r["pi_min_label"], r["transform"], r["m"]): r[value_key] for r in rows}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "pi_min"] + [f"{t}_m{m}" for t in transforms for m in ms])
        for N, label in keys:
            row = [N, label]
            for t in transforms:
                for m in ms:
                    value = index.get((N, label, t, m))
                    row.append("" if value is None else repr(value))
            writer.writerow(row)
