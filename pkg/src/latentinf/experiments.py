"""Replicated fit-and-infer runs: consistency rates, coverage, distribution and
the score-norm dependence diagnostic.

Each replication is generated, fitted, canonicalised and aligned to the truth
independently, so replications can be farmed out to worker processes; the
results are always reduced in replication order.
"""

from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy import stats

from .estimation import FitConfig, FitError, estimate_rho, fit_pgd, svt_init
from .inference import (
    InferenceUnavailable,
    ci_individual,
    ci_link_probability,
    covariance_bundle,
    default_wn,
)
from .model import DimensionError, LatentState, ModelSpec
from .simulation import SimKind, SimSetting, gen_replication_stream

log = logging.getLogger(__name__)

THREADS_ENV = "LATENTINF_THREADS"
DESK_GRID = (200, 400, 800)
FULL_GRID = (500, 1000, 2000, 4000, 8000)
QQ_PROBS = np.round(np.arange(1, 100) / 100.0, 2)


def align_truth_estimate(truth: LatentState, est: LatentState, method: str = "sign") -> LatentState:
    """Resolve the orientation left free by the identifiability constraints.

    ``"sign"`` tries all 2^r column sign flips of ``est.Z`` and keeps the one
    closest to ``truth.Z`` in Frobenius norm. ``"procrustes"`` applies the
    orthogonal matrix minimising ``|truth.Z - est.Z O|_F``; it is needed when
    Z^T Z / n has (nearly) repeated eigenvalues, as with i.i.d. columns.
    alpha and rho are untouched either way.
    """
    if truth.Z.shape != est.Z.shape:
        raise DimensionError(f"shape mismatch {truth.Z.shape} vs {est.Z.shape}")
    if method == "procrustes":
        U, _, Vt = np.linalg.svd(est.Z.T @ truth.Z)
        return LatentState(est.Z @ (U @ Vt), est.alpha.copy(), est.rho)
    if method != "sign":
        raise ValueError("method must be 'sign' or 'procrustes'")
    best, best_err = None, np.inf
    for signs in itertools.product((1.0, -1.0), repeat=est.r):
        cand = est.Z * np.array(signs)
        err = np.sum((truth.Z - cand) ** 2)
        if err < best_err - 1e-15:
            best, best_err = cand, err
    return LatentState(best, est.alpha.copy(), est.rho)


@dataclass
class RepOutcome:
    """Everything one replication contributes to the experiment tables."""

    setting: str
    n: int
    rep: int
    ok: bool = True
    error: str = ""
    delta_Z: float = np.nan
    delta_alpha: float = np.nan
    delta_rho: float = np.nan
    mse_Z: float = np.nan
    mse_alpha: float = np.nan
    rho_hat: float = np.nan
    z11_hat: float = np.nan
    z11_true: float = np.nan
    z11_var_hat: float = np.nan      # already divided by w_n n
    z11_covered: Optional[bool] = None
    theta12_hat: float = np.nan
    theta12_true: float = np.nan
    theta12_covered: Optional[bool] = None
    score_norm: float = np.nan
    iterations: int = 0
    converged: bool = False
    # identifiability residuals of the canonicalised fit
    center_norm: float = np.nan
    offdiag_max: float = np.nan
    canonical_shift: float = np.nan


@dataclass
class RunOptions:
    fit: FitConfig = field(default_factory=FitConfig)
    level: float = 0.95
    align: str = "procrustes"
    workers: Optional[int] = None


def resolve_workers(workers: Optional[int]) -> int:
    if workers is None:
        env = os.environ.get(THREADS_ENV)
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


def run_replication(setting: SimSetting, rep: int, opts: RunOptions) -> RepOutcome:
    net, truth = gen_replication_stream(setting, rep)
    spec = setting.model_spec()
    out = RepOutcome(setting.kind.value, setting.n, rep)
    try:
        res = fit_pgd(net, spec, opts.fit, svt_init(net, spec))
    except FitError as exc:
        out.ok, out.error = False, f"fit: {exc}"
        return out
    Zc = res.state.Z
    out.center_norm = float(np.linalg.norm(Zc.sum(axis=0)))
    G = Zc.T @ Zc / setting.n
    out.offdiag_max = float(np.max(np.abs(G - np.diag(np.diag(G)))))
    out.canonical_shift = res.canonical_shift
    rho_hat, est = estimate_rho(res.state)
    est = align_truth_estimate(truth.state, est, opts.align)
    n = setting.n
    t = truth.state
    out.iterations, out.converged, out.score_norm = res.iterations, res.converged, res.score_norm
    out.rho_hat = rho_hat
    sq_z = float(np.sum((t.Z - est.Z) ** 2))
    sq_a = float(np.sum((t.alpha - est.alpha) ** 2))
    out.delta_Z, out.delta_alpha = sq_z / n**2, sq_a / n**2
    out.mse_Z, out.mse_alpha = sq_z / n, sq_a / n
    out.delta_rho = (t.rho - rho_hat) ** 2
    out.z11_hat, out.z11_true = float(est.Z[0, 0]), float(t.Z[0, 0])

    w_n = default_wn(est, spec)
    try:
        bundle = covariance_bundle(net, est, spec, (0,), w_n)
        intervals, _ = ci_individual(bundle, 0, opts.level)
        out.z11_var_hat = float(bundle.scaled_covariance(0)[0, 0])
        out.z11_covered = bool(intervals[0, 0] <= out.z11_true <= intervals[0, 1])
    except InferenceUnavailable as exc:
        out.error = f"z11: {exc}"
    if setting.family.value == "bernoulli":
        out.theta12_true = float(truth.theta[0, 1])
        try:
            li = ci_link_probability(net, est, spec, 0, 1, opts.level, w_n)
            out.theta12_hat = li.theta_hat
            out.theta12_covered = li.contains(out.theta12_true)
        except InferenceUnavailable as exc:
            out.error = (out.error + "; " if out.error else "") + f"theta12: {exc}"
    return out


def _run_one(args):
    return run_replication(*args)


def run_replications(setting: SimSetting, reps: int, opts: Optional[RunOptions] = None) -> List[RepOutcome]:
    opts = opts or RunOptions()
    jobs = [(setting, k, opts) for k in range(reps)]
    workers = min(resolve_workers(opts.workers), reps)
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs, chunksize=max(1, reps // (4 * workers))))


# ---------------------------------------------------------------- consistency

@dataclass
class ConsistencyRecord:
    setting: str
    n: int
    rep: int
    delta_Z: float
    delta_alpha: float
    delta_rho: float
    delta_var: float
    mse_Z: float
    mse_alpha: float


CONSISTENCY_METRICS = ("delta_Z", "delta_alpha", "delta_rho", "delta_var", "mse_Z", "mse_alpha")


@dataclass
class ConsistencyResult:
    setting: str
    records: List[ConsistencyRecord]
    means: dict            # metric -> {n: mean}
    slopes: dict           # metric -> OLS slope of log(mean) on log(n)
    excluded: dict         # n -> count


def loglog_slope(ns: Sequence[float], values: Sequence[float]) -> float:
    x, y = np.log(np.asarray(ns, float)), np.log(np.asarray(values, float))
    return float(np.polyfit(x, y, 1)[0])


def consistency_records(outcomes: Sequence[RepOutcome]) -> List[ConsistencyRecord]:
    """Per-replication metrics; the variance error uses the across-replication variance of z11."""
    good = [o for o in outcomes if o.ok and np.isfinite(o.z11_var_hat)]
    mc_var = float(np.var([o.z11_hat for o in good], ddof=1)) if len(good) > 1 else np.nan
    return [ConsistencyRecord(o.setting, o.n, o.rep, o.delta_Z, o.delta_alpha, o.delta_rho,
                              (mc_var - o.z11_var_hat) ** 2, o.mse_Z, o.mse_alpha)
            for o in good]


def run_consistency(setting: SimSetting, n_grid: Sequence[int] = DESK_GRID, reps: int = 100,
                    opts: Optional[RunOptions] = None) -> ConsistencyResult:
    if reps < 2:
        raise ValueError("consistency runs need reps >= 2")
    records, means, excluded = [], {m: {} for m in CONSISTENCY_METRICS}, {}
    for n in n_grid:
        outs = run_replications(setting.with_(n=n), reps, opts)
        recs = consistency_records(outs)
        excluded[n] = reps - len(recs)
        records.extend(recs)
        for m in CONSISTENCY_METRICS:
            means[m][n] = float(np.mean([getattr(r, m) for r in recs]))
    slopes = {}
    if len(n_grid) >= 2:
        for m in CONSISTENCY_METRICS:
            vals = [means[m][n] for n in n_grid]
            slopes[m] = loglog_slope(n_grid, vals) if all(v > 0 for v in vals) else np.nan
    return ConsistencyResult(setting.kind.value, records, means, slopes, excluded)


# ---------------------------------------------------------------- coverage

@dataclass
class CoverageRecord:
    setting: str
    n: int
    target: str
    covered: int
    total: int
    rate: float
    se: float
    excluded: int


def coverage_record(setting: str, n: int, target: str, flags: Iterable[Optional[bool]]) -> CoverageRecord:
    flags = list(flags)
    valid = [f for f in flags if f is not None]
    total = len(valid)
    covered = int(sum(valid))
    rate = covered / total if total else np.nan
    se = float(np.sqrt(rate * (1 - rate) / total)) if total else np.nan
    return CoverageRecord(setting, n, target, covered, total, rate, se, len(flags) - total)


def coverage_from_outcomes(outcomes: Sequence[RepOutcome]) -> List[CoverageRecord]:
    if not outcomes:
        return []
    s, n = outcomes[0].setting, outcomes[0].n
    recs = [coverage_record(s, n, "z11", [o.z11_covered if o.ok else None for o in outcomes])]
    if any(o.theta12_covered is not None for o in outcomes):
        recs.append(coverage_record(s, n, "theta12",
                                    [o.theta12_covered if o.ok else None for o in outcomes]))
    return recs


def run_coverage(setting: SimSetting, n_grid: Sequence[int] = (500,), reps: int = 200,
                 level: float = 0.95, opts: Optional[RunOptions] = None) -> List[CoverageRecord]:
    if reps < 50:
        raise ValueError("coverage runs need reps >= 50")
    opts = opts or RunOptions()
    opts = RunOptions(opts.fit, level, opts.align, opts.workers)
    out = []
    for n in n_grid:
        out.extend(coverage_from_outcomes(run_replications(setting.with_(n=n), reps, opts)))
    return out


# ---------------------------------------------------------------- distribution

@dataclass
class DistributionResult:
    setting: str
    n: int
    standardized: np.ndarray
    qq: np.ndarray           # columns: probability, theoretical, empirical
    ks_statistic: float
    ks_pvalue: float
    excluded: int


def distribution_from_outcomes(outcomes: Sequence[RepOutcome]) -> DistributionResult:
    good = [o for o in outcomes if o.ok and np.isfinite(o.z11_var_hat)]
    z = np.array([(o.z11_hat - o.z11_true) / np.sqrt(o.z11_var_hat) for o in good])
    qq = np.column_stack([QQ_PROBS, stats.norm.ppf(QQ_PROBS), np.quantile(z, QQ_PROBS)])
    ks = stats.kstest(z, "norm")
    o = outcomes[0]
    return DistributionResult(o.setting, o.n, z, qq, float(ks.statistic), float(ks.pvalue),
                              len(outcomes) - len(good))


def run_distribution(setting: SimSetting, n: int = 800, reps: int = 200,
                     opts: Optional[RunOptions] = None) -> DistributionResult:
    if reps < 100:
        raise ValueError("distribution runs need reps >= 100")
    return distribution_from_outcomes(run_replications(setting.with_(n=n), reps, opts))


# ---------------------------------------------------------------- dependence

@dataclass
class ScoreNormRecord:
    setting: str
    label: str
    n: int
    reps: int
    raw_mean: float
    normalized_mean: float
    flagged: bool


def setting_label(s: SimSetting) -> str:
    if s.kind is SimKind.DEPENDENT2:
        return f"dependent2(p={s.hidden_prop:g})"
    if s.kind is SimKind.DEPENDENT1:
        return f"dependent1(kappa={s.dep_kappa:g})"
    return s.kind.value


def run_dependence_diagnostic(settings: Sequence[SimSetting], n_grid: Sequence[int] = DESK_GRID,
                              reps: int = 10, opts: Optional[RunOptions] = None,
                              flag_ratio: float = 3.0) -> List[ScoreNormRecord]:
    """Mean score norm at the estimate per setting and n, flagged against the independent baseline.

    A bounded-independent baseline with the same seed is run if none of
    ``settings`` provides one.
    """
    if reps < 10:
        raise ValueError("dependence diagnostic needs reps >= 10")
    settings = list(settings)
    if not any(s.kind is SimKind.BOUNDED_INDEP for s in settings):
        settings.insert(0, SimSetting(SimKind.BOUNDED_INDEP, seed=settings[0].seed))
    rows = []
    for n in n_grid:
        cells = []
        for s in settings:
            outs = [o for o in run_replications(s.with_(n=n), reps, opts) if o.ok]
            raw = float(np.mean([o.score_norm for o in outs])) if outs else np.nan
            cells.append((s, len(outs), raw))
        base = [raw / n for s, _, raw in cells if s.kind is SimKind.BOUNDED_INDEP][0]
        for s, k, raw in cells:
            norm = raw / n
            rows.append(ScoreNormRecord(s.kind.value, setting_label(s), n, k, raw, norm,
                                        bool(norm > flag_ratio * base)))
    return rows


def records_to_rows(records) -> List[dict]:
    return [asdict(r) for r in records]
