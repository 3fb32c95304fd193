"""Leave-one-worker-out deviance distances tested against chi-squared."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from collections.abc import Sequence
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import gammaincc, gammainccinv

from .core import Dataset, ScaleKind
from .errors import ConvergenceWarning, RefitNonConvergence, SeparationWarning, WorkerNotFound
from .glrm import FitConfig, FittedGlrm, _optimize, _Problem, fit_glrm, nominal_contrasts
from .laplace import CrossedDesign


def chi_squared_upper_quantile(alpha: float, df: float) -> float:
    """``x`` with ``P(chi2_df > x) = alpha``, via the inverse regularized upper gamma."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if df < 1:
        raise ValueError("df must be at least 1")
    return float(2.0 * gammainccinv(0.5 * df, alpha))


def chi_squared_sf(x: float, df: float) -> float:
    if x <= 0:
        return 1.0
    return float(gammaincc(0.5 * df, 0.5 * x))


@dataclass(frozen=True)
class DeletionConfig:
    alpha: float = 0.05
    fit: FitConfig = field(default_factory=FitConfig)
    warm_rhobeg: float = 0.05
    warm_maxfun: int = 10_000
    n_jobs: int = 1

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d) -> "DeletionConfig":
        d = dict(d)
        fit = FitConfig.from_dict(d.pop("fit", {}))
        known = set(cls.__dataclass_fields__) - {"fit"}
        return cls(fit=fit, **{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class DevianceResult:
    """Deviance distance for one deleted worker.

    Non-converged refits carry ``converged=False`` and are never flagged.
    """

    worker_id: str
    deviance: float
    df: int
    p_value: float
    critical: float
    flagged: bool
    alpha: float = 0.05
    converged: bool = True
    error: str = ""

    def at_alpha(self, alpha: float) -> "DevianceResult":
        crit = chi_squared_upper_quantile(alpha, self.df)
        flagged = self.converged and self.p_value < alpha
        return DevianceResult(self.worker_id, self.deviance, self.df, self.p_value, crit, flagged, alpha, self.converged, self.error)


def _make_result(worker_id, deviance, df, alpha, converged=True, error="") -> DevianceResult:
    crit = chi_squared_upper_quantile(alpha, df)
    if not converged or not math.isfinite(deviance):
        return DevianceResult(worker_id, float(deviance), df, float("nan"), crit, False, alpha, False, error)
    p = chi_squared_sf(deviance, df)
    # Decide on the p-value; the statistic comparison agrees up to rounding in the quantile.
    return DevianceResult(worker_id, float(deviance), df, p, crit, bool(p < alpha), alpha, True, error)


# -- reduced problems ------------------------------------------------------------


def _reduce(problem: _Problem, keep: np.ndarray):
    """Sub-problem on the rows in ``keep`` with levels re-indexed densely.

    Returns the problem and a function mapping a full-problem ``u`` vector
    to a warm start for the reduced one.
    """
    des = problem.design
    w_old = des.worker[keep]
    t_old = des.task[keep]
    w_levels, wi = np.unique(w_old, return_inverse=True)
    t_levels, tj = np.unique(t_old, return_inverse=True)
    design = CrossedDesign(wi, tj, w_levels.size, t_levels.size)
    reduced = _Problem(design, problem.y[keep], problem.kind, problem.n_categories)
    nw, nt = des.n_workers, des.n_tasks

    def map_u(u):
        if u is None:
            return None
        return np.concatenate((u[:nw][w_levels], u[nw:nw + nt][t_levels], u[nw + nt:][keep]))

    return reduced, map_u


def _refit(problem: _Problem, theta, u0, config: DeletionConfig):
    """Warm refit, then one cold restart if it does not converge."""
    out = _optimize(problem, config.fit, theta0=theta, u0=u0, rhobeg=config.warm_rhobeg, maxfun=config.warm_maxfun)
    if not out[2]:
        out = _optimize(problem, config.fit)
    return out


def _full_problem(d: Dataset) -> _Problem:
    design = CrossedDesign(d.worker_idx, d.task_idx, d.n_workers, d.n_tasks)
    y = d.responses.astype(float) if d.scale.kind is ScaleKind.BINARY else d.responses.copy()
    return _Problem(design, y, d.scale.kind, d.scale.num_categories)


def _reduced_loglik(d: Dataset, full_fit: FittedGlrm, worker: int, config: DeletionConfig):
    """Laplace log-likelihood of the refit without ``worker``; returns (loglik, converged, message)."""
    if d.scale.kind is ScaleKind.NOMINAL:
        keep = np.flatnonzero(d.worker_idx != worker)
        contrasts = nominal_contrasts(d.worker_idx[keep], d.task_idx[keep], d.responses[keep], d.scale.num_categories)
        total, ok_all, msgs = 0.0, True, []
        by_cat = {}
        for comp in full_fit.components:
            by_cat[len(by_cat) + 1] = comp
        for c in contrasts:
            comp = by_cat.get(c.category)
            theta = None if comp is None else comp.theta
            _, mode, ok, *_rest = _refit(c.problem, theta, None, config)
            total += mode.loglik
            ok_all &= ok
            if not ok:
                msgs.append(f"contrast {c.category}: {_rest[-1]}")
        return total, ok_all, "; ".join(msgs)
    problem = _full_problem(d)
    keep = np.flatnonzero(problem.design.worker != worker)
    reduced, map_u = _reduce(problem, keep)
    _, mode, ok, _nf, _trace, msg = _refit(reduced, full_fit.theta, map_u(full_fit.u), config)
    return mode.loglik, ok, "" if ok else msg


def deviance_distance(d: Dataset, full_fit: FittedGlrm, worker_id: str, config: Optional[DeletionConfig] = None) -> DevianceResult:
    """``-2 (loglik_full - loglik_without_worker)`` and its chi-squared test.

    ``df`` is the number of records the worker contributed. The reduced model
    re-estimates every parameter, starting from the full fit.
    """
    config = config or DeletionConfig()
    if worker_id not in d.worker_index:
        raise WorkerNotFound(f"worker {worker_id!r} not in dataset")
    i = d.worker_index[worker_id]
    df = int((d.worker_idx == i).sum())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        ll_red, ok, msg = _reduced_loglik(d, full_fit, i, config)
    deviance = -2.0 * (full_fit.loglik - ll_red)
    if not ok:
        warnings.warn(f"refit without worker {worker_id!r} did not converge: {msg}", ConvergenceWarning, stacklevel=2)
    return _make_result(worker_id, deviance, df, config.alpha, ok, msg)


@dataclass(frozen=True, eq=False)
class DeletionAnalysis(Sequence):
    """Per-worker results (dataset worker order) plus a chi-squared shape diagnostic.

    ``ks_distance`` is the largest gap between the empirical CDF of the
    probability-integral transforms ``F_df(deviance)`` and the uniform CDF,
    which equals the KS distance to chi-squared(df) when all dfs agree.
    """

    results: tuple
    full_fit: FittedGlrm
    ks_distance: float
    ks_pvalue: float

    def __getitem__(self, i):
        return self.results[i]

    def __len__(self):
        return len(self.results)

    @property
    def flagged(self) -> list:
        return [r.worker_id for r in self.results if r.flagged]

    @property
    def failures(self) -> list:
        return [r for r in self.results if not r.converged]


def chi_squared_shape(results: Sequence[DevianceResult]):
    """KS distance and p-value of the deviances against their chi-squared references."""
    ok = [r for r in results if r.converged]
    if len(ok) < 2:
        return float("nan"), float("nan")
    u = np.array([stats.chi2.cdf(r.deviance, r.df) for r in ok])
    res = stats.kstest(u, "uniform")
    return float(res.statistic), float(res.pvalue)


def _worker_task(args):
    d, full_fit, wid, config = args
    try:
        return deviance_distance(d, full_fit, wid, config)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError, RefitNonConvergence) as exc:
        df = int((d.worker_idx == d.worker_index[wid]).sum())
        return _make_result(wid, float("nan"), df, config.alpha, False, f"{type(exc).__name__}: {exc}")


def deletion_analysis(
    d: Dataset,
    config: Optional[DeletionConfig] = None,
    full_fit: Optional[FittedGlrm] = None,
    workers: Optional[Sequence[str]] = None,
) -> DeletionAnalysis:
    """Deviance distance for every worker (or ``workers``), sharing one full-data fit.

    Failures on single workers are recorded on their result rather than
    aborting the batch. ``config.n_jobs > 1`` spreads the refits over
    processes; results do not depend on the schedule.
    """
    config = config or DeletionConfig()
    if full_fit is None:
        full_fit = fit_glrm(d, config.fit)
    if workers is None:
        selected = d.worker_ids
    else:
        wanted = set(workers)
        missing = wanted - set(d.worker_index)
        if missing:
            raise WorkerNotFound(f"workers not in dataset: {sorted(missing)}")
        selected = [w for w in d.worker_ids if w in wanted]
    jobs = [(d, full_fit, wid, config) for wid in selected]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        if config.n_jobs > 1:
            with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
                results = list(pool.map(_worker_task, jobs))
        else:
            results = [_worker_task(j) for j in jobs]
    n_bad = sum(not r.converged for r in results)
    if n_bad:
        warnings.warn(f"{n_bad} leave-one-out refit(s) failed and were excluded from decisions", ConvergenceWarning, stacklevel=2)
    ks_d, ks_p = chi_squared_shape(results)
    return DeletionAnalysis(tuple(results), full_fit, ks_d, ks_p)
