"""Crossed random-effects logit models and the variance-ratio consistency metrics.

Three model flavours share one Laplace engine (:mod:`crowdqc.laplace`):

* binary:  ``logit p_ij = b0 + w_i + t_j + wt_ij``
* ordinal: ``logit P(y_ij <= k) = r_k - (w_i + t_j + wt_ij)``
* nominal: K-1 one-vs-reference binary fits, one variance triple per category

The outer maximization over the intercept/thresholds and the log standard
deviations uses BOBYQA, a derivative-free bounded trust-region method.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pybobyqa

from .core import Dataset, ScaleKind
from .errors import (
    AllZeroComponents,
    ConvergenceWarning,
    DegenerateCategoryWarning,
    EmptyContrast,
    InsufficientRaters,
    ScaleMismatch,
    SeparationWarning,
)
from .laplace import INNER_TOL, CrossedDesign, binary_terms, cumulative_logit_terms, find_mode

LOGISTIC_VARIANCE = math.pi ** 2 / 3

LOG_SD_BOUNDS = (-13.0, 5.0)
# SDs under exp(-12) are reported as exactly zero.
LOG_SD_ZERO = -12.0
FIXED_BOUND = 50.0
LOG_GAP_BOUNDS = (-10.0, 5.0)


@dataclass(frozen=True)
class FitConfig:
    max_outer_evals: int = 1_000_000
    tol_objective: float = 1e-6
    tol_param: float = 1e-5
    inner_tol: float = INNER_TOL
    seed: int = 0
    rhobeg: float = 0.5

    @classmethod
    def from_dict(cls, d) -> "FitConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in dict(d).items() if k in known})


@dataclass(frozen=True)
class VarianceComponents:
    sigma2_workers: float
    sigma2_tasks: float
    sigma2_interaction: float

    def __post_init__(self):
        for name in ("sigma2_workers", "sigma2_tasks", "sigma2_interaction"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")

    def as_tuple(self):
        return (self.sigma2_workers, self.sigma2_tasks, self.sigma2_interaction)

    def total(self) -> float:
        return sum(self.as_tuple())

    def scaled(self, c: float) -> "VarianceComponents":
        return VarianceComponents(*(c * v for v in self.as_tuple()))

    def to_dict(self):
        return {
            "sigma2_workers": self.sigma2_workers,
            "sigma2_tasks": self.sigma2_tasks,
            "sigma2_interaction": self.sigma2_interaction,
        }


@dataclass(frozen=True)
class NominalVarianceComponents:
    per_category: tuple

    def __post_init__(self):
        object.__setattr__(self, "per_category", tuple(self.per_category))
        if not self.per_category:
            raise ValueError("need at least one non-reference category")

    def to_dict(self):
        return {"per_category": [vc.to_dict() for vc in self.per_category]}


@dataclass(frozen=True)
class RandomEffectModes:
    workers: np.ndarray
    tasks: np.ndarray
    interactions: np.ndarray


@dataclass(frozen=True, eq=False)
class FittedGlrm:
    """Converged (or flagged non-converged) crossed random-effects fit."""

    scale: object
    vc: object
    loglik: float
    converged: bool
    n_obs: int
    intercept: Optional[float] = None
    thresholds: Optional[np.ndarray] = None
    ranef_modes: Optional[RandomEffectModes] = None
    boundary: tuple = ()
    n_evals: int = 0
    trace: tuple = ()
    theta: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    components: tuple = ()
    notes: tuple = ()
    message: str = ""

    @property
    def spammer_index(self) -> float:
        if isinstance(self.vc, NominalVarianceComponents):
            return spammer_index_nominal(self.vc)
        return spammer_index(self.vc)


# -- metrics -------------------------------------------------------------------


def spammer_index(vc: VarianceComponents) -> float:
    """Worker share of the random-effect variance (no residual term)."""
    total = vc.total()
    if total <= 0:
        raise AllZeroComponents("all variance components are zero; the Spammer Index is undefined")
    return vc.sigma2_workers / total


def spammer_index_nominal(nvc: NominalVarianceComponents) -> float:
    num = sum(vc.sigma2_workers for vc in nvc.per_category)
    den = sum(vc.total() for vc in nvc.per_category)
    if den <= 0:
        raise AllZeroComponents("all variance components are zero; the Spammer Index is undefined")
    return num / den


def icc_fixed_error(vc: VarianceComponents) -> float:
    """Worker variance over total random-effect variance plus pi^2/3."""
    return vc.sigma2_workers / (vc.total() + LOGISTIC_VARIANCE)


def fleiss_kappa_counts(counts) -> float:
    """Fleiss' kappa from a (subjects x categories) count matrix with equal row sums."""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum(axis=1)
    if counts.ndim != 2 or counts.shape[0] == 0:
        raise InsufficientRaters("no rated tasks")
    if not np.all(n == n[0]):
        raise ValueError("every task must have the same number of ratings")
    n = n[0]
    if n < 2:
        raise InsufficientRaters("each task needs at least 2 ratings")
    N = counts.shape[0]
    p_j = counts.sum(axis=0) / (N * n)
    P_i = ((counts * counts).sum(axis=1) - n) / (n * (n - 1))
    P_bar = P_i.mean()
    P_e = (p_j * p_j).sum()
    if P_e == 1.0:
        return 1.0 if P_bar == 1.0 else float("nan")
    return float((P_bar - P_e) / (1.0 - P_e))


def fleiss_kappa(d: Dataset, seed: int = 0) -> float:
    """Fleiss' kappa over the task x category table.

    Tasks with more ratings than the smallest per-task count are subsampled
    (seeded) down to that count so every row has the same number of raters.
    """
    task_counts = np.bincount(d.task_idx, minlength=d.n_tasks)
    m = int(task_counts.min()) if d.n_tasks else 0
    if m < 2:
        raise InsufficientRaters(f"every task needs at least 2 raters; smallest task has {m}")
    k = d.scale.num_categories
    counts = np.zeros((d.n_tasks, k), dtype=int)
    rng = np.random.default_rng(seed)
    order = np.argsort(d.task_idx, kind="stable")
    starts = np.concatenate(([0], np.cumsum(task_counts)))
    resp = d.responses[order]
    for j in range(d.n_tasks):
        r = resp[starts[j]:starts[j + 1]]
        if r.size > m:
            r = rng.choice(r, size=m, replace=False)
        counts[j] = np.bincount(r, minlength=k)
    return fleiss_kappa_counts(counts)


# -- fitting -------------------------------------------------------------------


@dataclass
class _Problem:
    """Arrays and family for one fit; kept separate from Dataset so nominal
    contrasts and leave-one-out refits can reuse the optimizer."""

    design: CrossedDesign
    y: np.ndarray
    kind: ScaleKind
    n_categories: int

    @property
    def n_fixed(self) -> int:
        return 1 if self.kind is ScaleKind.BINARY else self.n_categories - 1

    def fixed_from_theta(self, theta):
        if self.kind is ScaleKind.BINARY:
            return float(theta[0])
        k1 = self.n_categories - 1
        return theta[0] + np.concatenate(([0.0], np.cumsum(np.exp(theta[1:k1]))))

    def terms_and_offset(self, theta):
        if self.kind is ScaleKind.BINARY:
            y = self.y
            return (lambda eta: binary_terms(eta, y)), float(theta[0])
        thr = self.fixed_from_theta(theta)
        y = self.y
        return (lambda eta: cumulative_logit_terms(eta, y, thr)), 0.0

    def bounds(self):
        lo = [-FIXED_BOUND]
        hi = [FIXED_BOUND]
        if self.kind is not ScaleKind.BINARY:
            lo += [LOG_GAP_BOUNDS[0]] * (self.n_categories - 2)
            hi += [LOG_GAP_BOUNDS[1]] * (self.n_categories - 2)
        lo += [LOG_SD_BOUNDS[0]] * 3
        hi += [LOG_SD_BOUNDS[1]] * 3
        return np.array(lo), np.array(hi)

    def initial_theta(self):
        if self.kind is ScaleKind.BINARY:
            p = (self.y.sum() + 0.5) / (self.y.size + 1.0)
            fixed = [math.log(p / (1 - p))]
        else:
            k = self.n_categories
            counts = np.bincount(self.y, minlength=k) + 0.5
            cum = np.cumsum(counts)[:-1] / counts.sum()
            r = np.log(cum / (1 - cum))
            gaps = np.maximum(np.diff(r), math.exp(LOG_GAP_BOUNDS[0] + 1))
            fixed = [r[0], *np.log(gaps)]
        return np.array(fixed + [0.0, 0.0, 0.0])


def _optimize(problem: _Problem, config: FitConfig, theta0=None, u0=None, rhobeg=None, maxfun=None):
    lo, hi = problem.bounds()
    theta0 = problem.initial_theta() if theta0 is None else np.clip(np.asarray(theta0, float), lo, hi)
    nfix = problem.n_fixed
    state = {"u": None if u0 is None else np.asarray(u0, float), "best": math.inf, "trace": [], "best_u": None, "best_mode": None}

    def objective(theta):
        terms, offset = problem.terms_and_offset(theta)
        res = find_mode(problem.design, terms, offset, np.exp(theta[nfix:]), state["u"], tol=config.inner_tol)
        state["u"] = res.u
        f = -res.loglik
        if not math.isfinite(f):
            return 1e300
        if f < state["best"]:
            state["best"] = f
            state["best_u"] = res.u
            state["best_mode"] = res
        state["trace"].append(-state["best"])
        return f

    rhobeg = config.rhobeg if rhobeg is None else rhobeg
    maxfun = int(config.max_outer_evals if maxfun is None else maxfun)
    soln = pybobyqa.solve(
        objective,
        theta0,
        bounds=(lo, hi),
        rhobeg=rhobeg,
        rhoend=config.tol_param,
        maxfun=maxfun,
        do_logging=False,
    )
    theta = np.asarray(soln.x, float)
    # Re-evaluate at the returned point so modes and loglik are consistent.
    terms, offset = problem.terms_and_offset(theta)
    mode = find_mode(problem.design, terms, offset, np.exp(theta[nfix:]), state["best_u"], tol=config.inner_tol)
    ok = soln.flag in (soln.EXIT_SUCCESS, soln.EXIT_SLOW_WARNING) and mode.converged
    return theta, mode, ok, int(soln.nf), tuple(state["trace"]), str(soln.msg)


def _problem_from_dataset(d: Dataset) -> _Problem:
    design = CrossedDesign(d.worker_idx, d.task_idx, d.n_workers, d.n_tasks)
    y = d.responses.astype(float) if d.scale.kind is ScaleKind.BINARY else d.responses.copy()
    return _Problem(design, y, d.scale.kind, d.scale.num_categories)


def _build_fit(problem: _Problem, scale, theta, mode, ok, nf, trace, msg, notes=()) -> FittedGlrm:
    nfix = problem.n_fixed
    log_sd = theta[nfix:]
    boundary = tuple(bool(v < LOG_SD_ZERO) for v in log_sd)
    sd = np.where(np.array(boundary), 0.0, np.exp(log_sd))
    vc = VarianceComponents(*(float(s * s) for s in sd))
    nw, nt = problem.design.n_workers, problem.design.n_tasks
    u = mode.u
    sd_raw = np.exp(log_sd)
    modes = RandomEffectModes(
        workers=sd_raw[0] * u[:nw],
        tasks=sd_raw[1] * u[nw:nw + nt],
        interactions=sd_raw[2] * u[nw + nt:],
    )
    fixed = problem.fixed_from_theta(theta)
    if not ok:
        warnings.warn(f"GLRM fit did not converge: {msg}", ConvergenceWarning, stacklevel=3)
    return FittedGlrm(
        scale=scale,
        vc=vc,
        loglik=float(mode.loglik),
        converged=bool(ok),
        n_obs=problem.design.n_obs,
        intercept=fixed if problem.kind is ScaleKind.BINARY else None,
        thresholds=None if problem.kind is ScaleKind.BINARY else np.asarray(fixed),
        ranef_modes=modes,
        boundary=boundary,
        n_evals=nf,
        trace=trace,
        theta=theta,
        u=u,
        notes=tuple(notes),
        message=msg,
    )


def _check_separation(problem: _Problem):
    y = problem.y
    des = problem.design
    for idx, n, name in ((des.worker, des.n_workers, "worker"), (des.task, des.n_tasks, "task")):
        tot = np.bincount(idx, minlength=n)
        pos = np.bincount(idx, y, minlength=n)
        sep = (pos == 0) | (pos == tot)
        if sep.any():
            warnings.warn(
                f"{int(sep.sum())} {name} level(s) with all-identical responses; "
                f"the {name} variance may shrink toward the boundary",
                SeparationWarning,
                stacklevel=3,
            )


def fit_binary_glrm(d: Dataset, config: Optional[FitConfig] = None) -> FittedGlrm:
    """Fit ``logit p_ij = b0 + w_i + t_j + wt_ij`` by Laplace-approximated ML."""
    if d.scale.kind is not ScaleKind.BINARY:
        raise ScaleMismatch(f"fit_binary_glrm needs a binary scale, got {d.scale.kind.value}")
    config = config or FitConfig()
    problem = _problem_from_dataset(d)
    _check_separation(problem)
    out = _optimize(problem, config)
    return _build_fit(problem, d.scale, *out)


def fit_ordinal_glrm(d: Dataset, config: Optional[FitConfig] = None) -> FittedGlrm:
    """Cumulative-logit model with one variance per random effect."""
    if d.scale.kind is not ScaleKind.ORDINAL or d.scale.num_categories < 3:
        raise ScaleMismatch("fit_ordinal_glrm needs an ordinal scale with at least 3 categories")
    config = config or FitConfig()
    problem = _problem_from_dataset(d)
    notes = []
    counts = np.bincount(problem.y, minlength=d.scale.num_categories)
    empty = [d.scale.labels[k] for k in np.flatnonzero(counts == 0)]
    if empty:
        msg = f"categories never observed: {empty}; adjacent thresholds pushed outward"
        warnings.warn(msg, DegenerateCategoryWarning, stacklevel=2)
        notes.append(msg)
    out = _optimize(problem, config)
    return _build_fit(problem, d.scale, *out, notes=notes)


@dataclass(frozen=True)
class _Contrast:
    category: int
    rows: np.ndarray
    problem: _Problem


def nominal_contrasts(worker_idx, task_idx, responses, n_categories, reference=0, min_records=2):
    """One-vs-reference binary problems on the records answering ``reference`` or ``k``.

    Worker/task levels are re-indexed densely within each contrast; levels with
    fewer than ``min_records`` records are dropped.
    """
    out = []
    for k in range(n_categories):
        if k == reference:
            continue
        rows = np.flatnonzero((responses == reference) | (responses == k))
        for _ in range(3):
            if rows.size == 0:
                break
            wc = np.bincount(worker_idx[rows])
            tc = np.bincount(task_idx[rows])
            keep = (wc[worker_idx[rows]] >= min_records) & (tc[task_idx[rows]] >= min_records)
            if keep.all():
                break
            rows = rows[keep]
        if rows.size < 2 * min_records or np.unique(worker_idx[rows]).size < 2 or np.unique(task_idx[rows]).size < 2:
            raise EmptyContrast(f"too few records contrasting category {k} with reference {reference}")
        _, wi = np.unique(worker_idx[rows], return_inverse=True)
        _, tj = np.unique(task_idx[rows], return_inverse=True)
        design = CrossedDesign(wi, tj, int(wi.max()) + 1, int(tj.max()) + 1)
        y = (responses[rows] == k).astype(float)
        out.append(_Contrast(k, rows, _Problem(design, y, ScaleKind.BINARY, 2)))
    return out


def fit_nominal_glrm(d: Dataset, config: Optional[FitConfig] = None, reference: int = 0) -> FittedGlrm:
    """Per-category variance components from K-1 one-vs-reference binary fits.

    This approximates a joint multinomial mixed model; the summed
    log-likelihood is that of the separate contrasts.
    """
    if d.scale.num_categories < 3 or d.scale.kind is ScaleKind.BINARY:
        raise ScaleMismatch("fit_nominal_glrm needs at least 3 categories; use fit_binary_glrm for 2")
    config = config or FitConfig()
    contrasts = nominal_contrasts(d.worker_idx, d.task_idx, d.responses, d.scale.num_categories, reference)
    fits = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        for c in contrasts:
            out = _optimize(c.problem, config)
            fits.append(_build_fit(c.problem, d.scale, *out))
    return _combine_nominal(d.scale, fits, d.n_records)


def _combine_nominal(scale, fits, n_obs) -> FittedGlrm:
    nvc = NominalVarianceComponents(tuple(f.vc for f in fits))
    return FittedGlrm(
        scale=scale,
        vc=nvc,
        loglik=float(sum(f.loglik for f in fits)),
        converged=all(f.converged for f in fits),
        n_obs=n_obs,
        n_evals=sum(f.n_evals for f in fits),
        components=tuple(fits),
        notes=("nominal model approximated by one-vs-reference binary contrasts",),
    )


def fit_glrm(d: Dataset, config: Optional[FitConfig] = None) -> FittedGlrm:
    """Dispatch on the dataset's scale kind."""
    kind = d.scale.kind
    if kind is ScaleKind.BINARY:
        return fit_binary_glrm(d, config)
    if kind is ScaleKind.ORDINAL:
        return fit_ordinal_glrm(d, config)
    return fit_nominal_glrm(d, config)
