"""End-to-end quality evaluation: consistency gate, behaviour match, deletion analysis, risk tiers."""

from __future__ import annotations

import enum
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .chains import (
    DEFAULT_EPS,
    Strategy,
    check_threshold_context,
    classify_worker,
    matches,
    score_all,
)
from .core import Dataset, PopulationCutoffs, WorkerSummary, population_cutoffs, worker_summaries
from .deletion import DeletionAnalysis, DeletionConfig, deletion_analysis
from .errors import InsufficientRaters
from .glrm import FitConfig, FittedGlrm, NominalVarianceComponents, fit_glrm, fleiss_kappa, icc_fixed_error
from .simulate import ThresholdSet, calibrate_thresholds

SCHEMA_VERSION = "1.0"


class AuxRule(str, enum.Enum):
    BELOW_MEAN = "below_mean"
    BELOW_1SD = "below_1sd"


class RiskTier(str, enum.Enum):
    HIGH = "HighRisk"
    MODERATE = "ModerateRisk"
    UNDETERMINED = "UndeterminedRisk"


class Rank(float, enum.Enum):
    """Position of a worker's time or accuracy relative to the population."""

    ABOVE_MEAN = 0.0
    BELOW_MEAN = 0.5
    BELOW_1SD = 1.0


AUX_FIELDS = ("time", "accuracy")


@dataclass(frozen=True)
class PipelineConfig:
    si_threshold: float = 0.10
    alpha_c1: float = 0.05
    alpha_c2: float = 0.05
    kld_strategy: Strategy = Strategy.ALL_ROWS_BELOW
    aux_rule: AuxRule = AuxRule.BELOW_MEAN
    aux_fields: tuple = ("time",)
    thresholds: Optional[ThresholdSet] = None
    calibration_sims: int = 30_000
    seed: int = 0
    conjunctive: bool = False
    c2_first: bool = False
    eps: float = DEFAULT_EPS
    transition_alpha: float = 0.0
    fit: FitConfig = field(default_factory=FitConfig)
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kld_strategy", Strategy(self.kld_strategy))
        object.__setattr__(self, "aux_rule", AuxRule(self.aux_rule))
        object.__setattr__(self, "aux_fields", tuple(self.aux_fields))
        bad = set(self.aux_fields) - set(AUX_FIELDS)
        if bad:
            raise ValueError(f"unknown auxiliary fields {sorted(bad)}; choose from {AUX_FIELDS}")
        for name in ("alpha_c1", "alpha_c2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("thresholds", "fit")}
        d["kld_strategy"] = self.kld_strategy.value
        d["aux_rule"] = self.aux_rule.value
        d["aux_fields"] = list(self.aux_fields)
        d["fit"] = asdict(self.fit)
        d["thresholds"] = None if self.thresholds is None else self.thresholds.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        d = dict(d)
        fit = FitConfig.from_dict(d.pop("fit", {}) or {})
        thr = d.pop("thresholds", None)
        thresholds = ThresholdSet.from_dict(thr) if thr else None
        known = set(cls.__dataclass_fields__) - {"fit", "thresholds"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline config fields: {sorted(unknown)}")
        return cls(fit=fit, thresholds=thresholds, **d)


@dataclass(frozen=True)
class RiskAssessment:
    worker_id: str
    behavior_score: float
    time_score: float
    accuracy_score: float
    total: float
    tier: RiskTier

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tier"] = self.tier.value
        return d


def tier_for(total: float) -> RiskTier:
    # Totals are multiples of 0.5, so the rubric has no gaps.
    if total >= 2.5:
        return RiskTier.HIGH
    if total >= 1.5:
        return RiskTier.MODERATE
    return RiskTier.UNDETERMINED


def risk_score(
    worker_id: str,
    archetype_matched: bool,
    pattern_confirmed: bool,
    time_rank: Optional[Rank] = None,
    accuracy_rank: Optional[Rank] = None,
) -> RiskAssessment:
    """Score behaviour, time and accuracy on the 0 / 0.5 / 1 rubric.

    Behaviour earns 0.5 for a lenient archetype match (minimum row KLD
    below the cutoff) and another 0.5 when every row is below the cutoff.
    A missing rank scores 0.
    """
    behavior = 0.5 * bool(archetype_matched) + 0.5 * bool(pattern_confirmed)
    t = float(Rank(time_rank)) if time_rank is not None else 0.0
    a = float(Rank(accuracy_rank)) if accuracy_rank is not None else 0.0
    total = behavior + t + a
    return RiskAssessment(worker_id, behavior, t, a, total, tier_for(total))


def rank_of(value: Optional[float], mean: Optional[float], mean_minus_sd: Optional[float]) -> Optional[Rank]:
    if value is None or mean is None:
        return None
    if mean_minus_sd is not None and value < mean_minus_sd:
        return Rank.BELOW_1SD
    if value < mean:
        return Rank.BELOW_MEAN
    return Rank.ABOVE_MEAN


def _field_values(s: WorkerSummary, cutoffs: PopulationCutoffs, name: str):
    if name == "time":
        return s.mean_duration, cutoffs.time_mean, cutoffs.time_mean_minus_1sd
    return s.accuracy, cutoffs.acc_mean, cutoffs.acc_mean_minus_1sd


def auxiliary_evidence_available(cutoffs: PopulationCutoffs, fields: Iterable[str]) -> bool:
    return any(_field_values(WorkerSummary("", 0), cutoffs, f)[1] is not None for f in fields)


def apply_auxiliary_filter(
    candidates: Iterable[str],
    summaries: Sequence[WorkerSummary],
    cutoffs: PopulationCutoffs,
    rule: AuxRule = AuxRule.BELOW_MEAN,
    fields: Iterable[str] = ("time",),
) -> set:
    """Keep candidates whose time or accuracy (any selected field) is below the rule's cutoff.

    When no selected field has population cutoffs, every candidate passes.
    """
    rule = AuxRule(rule)
    fields = tuple(fields)
    candidates = set(candidates)
    if not auxiliary_evidence_available(cutoffs, fields):
        return candidates
    by_id = {s.worker_id: s for s in summaries}
    kept = set()
    for w in candidates:
        s = by_id.get(w)
        if s is None:
            continue
        for f in fields:
            value, mean, lo = _field_values(s, cutoffs, f)
            cut = mean if rule is AuxRule.BELOW_MEAN else lo
            if value is not None and cut is not None and value < cut:
                kept.add(w)
                break
    return kept


# -- report ------------------------------------------------------------------------


@dataclass(frozen=True)
class C1Match:
    worker_id: str
    archetype: Optional[str]
    lenient: bool
    strict: bool
    scores: tuple

    def to_dict(self) -> dict:
        return {
            "worker_id": self.worker_id,
            "archetype": self.archetype,
            "min_kld_match": self.lenient,
            "all_rows_match": self.strict,
            "scores": [
                {"archetype": s.archetype.name, "akld": s.akld, "mkld": s.mkld, "row_klds": [float(v) for v in s.row_klds]}
                for s in self.scores
            ],
        }


@dataclass(frozen=True, eq=False)
class QualityReport:
    spammer_index: float
    estimated_spammer_count: int
    n_workers: int
    baselines: dict
    variance_components: dict
    gate_passed: bool
    c1_matches: tuple = ()
    c2_flags: tuple = ()
    aux_flags: dict = field(default_factory=dict)
    final_spammers: tuple = ()
    risk: tuple = ()
    provenance: dict = field(default_factory=dict)
    notes: tuple = ()
    errors: tuple = ()
    ks_chi2: Optional[dict] = None

    @property
    def stopped(self) -> bool:
        return not self.gate_passed

    @property
    def has_numeric_failure(self) -> bool:
        return bool(self.errors)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "spammer_index": self.spammer_index,
            "estimated_spammer_count": self.estimated_spammer_count,
            "n_workers": self.n_workers,
            "gate_passed": self.gate_passed,
            "baselines": self.baselines,
            "variance_components": self.variance_components,
            "c1_matches": [m.to_dict() for m in self.c1_matches],
            "c2_flags": [asdict(r) for r in self.c2_flags],
            "deviance_chi2_ks": self.ks_chi2,
            "aux_flags": self.aux_flags,
            "final_spammers": list(self.final_spammers),
            "risk": [r.to_dict() for r in self.risk],
            "provenance": self.provenance,
            "notes": list(self.notes),
            "errors": list(self.errors),
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, allow_nan=True) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, enum.Enum):
        return x.value
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


# -- orchestration -----------------------------------------------------------------


def _thresholds_for(d: Dataset, cfg: PipelineConfig, n_tasks: float, notes: list) -> ThresholdSet:
    k = d.scale.num_categories
    if cfg.thresholds is not None:
        check_threshold_context(cfg.thresholds, n_tasks, k)
        return cfg.thresholds
    n = int(round(n_tasks))
    notes.append(f"thresholds calibrated on the fly for n_tasks={n}, k={k}, n_sims={cfg.calibration_sims}")
    return calibrate_thresholds(n, k, cfg.alpha_c1, cfg.calibration_sims, cfg.seed, kind=d.scale.kind)


def _score_workers(d: Dataset, cfg: PipelineConfig, thresholds: ThresholdSet, workers) -> dict:
    k = d.scale.num_categories
    out = {}
    for w in workers:
        scores = score_all(d.response_sequence(w), k, w, cfg.eps, cfg.transition_alpha)
        hit = classify_worker(scores, thresholds, cfg.kld_strategy)
        out[w] = C1Match(
            worker_id=w,
            archetype=None if hit is None else hit.name,
            lenient=any(matches(s, thresholds, Strategy.MIN_KLD_BELOW) for s in scores),
            strict=any(matches(s, thresholds, Strategy.ALL_ROWS_BELOW) for s in scores),
            scores=tuple(scores),
        )
    return out


def _baselines(d: Dataset, fit: FittedGlrm, seed: int, notes: list) -> dict:
    out = {"fleiss_kappa": None, "icc_fixed_error": None}
    try:
        out["fleiss_kappa"] = fleiss_kappa(d, seed)
    except InsufficientRaters as exc:
        notes.append(f"Fleiss' kappa unavailable: {exc}")
    if isinstance(fit.vc, NominalVarianceComponents):
        notes.append("ICC with fixed logistic error is reported for binary and ordinal fits only")
    else:
        out["icc_fixed_error"] = icc_fixed_error(fit.vc)
    return out


def run_pipeline(d: Dataset, cfg: Optional[PipelineConfig] = None, fit: Optional[FittedGlrm] = None) -> QualityReport:
    """Run the consistency gate, then behaviour matching (C1) and deletion analysis (C2).

    Workers without a C1 match go to C2 (or the reverse with ``c2_first``).
    Spammers are the C1 and C2 candidates that survive the auxiliary rule;
    with ``conjunctive`` both criteria run on every worker and a spammer
    must fail both.
    """
    cfg = cfg or PipelineConfig()
    notes: list = []
    errors: list = []
    fit = fit if fit is not None else fit_glrm(d, cfg.fit)
    if not fit.converged:
        errors.append(f"full-data fit did not converge: {fit.message}")
    si = fit.spammer_index
    n = d.n_workers
    vc = fit.vc.to_dict()
    provenance = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "threshold_cache_id": None,
        "behavior_score": "0.5 for a min-row-KLD match plus 0.5 when every row matches",
        "deviance": "Laplace-approximated marginal log-likelihoods",
    }
    common = dict(
        spammer_index=si,
        estimated_spammer_count=int(round(si * n)),
        n_workers=n,
        baselines=_baselines(d, fit, cfg.seed, notes),
        variance_components=vc,
    )
    if si < cfg.si_threshold:
        notes.append(f"Spammer Index {si:.4g} below gate {cfg.si_threshold:g}; detection skipped")
        return QualityReport(gate_passed=False, provenance=provenance, notes=tuple(notes), errors=tuple(errors), **common)

    summaries = worker_summaries(d)
    cutoffs = population_cutoffs(summaries, require=())
    if not auxiliary_evidence_available(cutoffs, cfg.aux_fields):
        notes.append("no auxiliary evidence: auxiliary filter passes every candidate")

    seq_len = statistics.median(len(d.response_sequence(w)) for w in d.worker_ids)
    thresholds = _thresholds_for(d, cfg, seq_len, notes)
    provenance["threshold_cache_id"] = thresholds.cache_id
    if thresholds.low_precision:
        notes.append("thresholds are low precision (few calibration simulations)")

    del_cfg = DeletionConfig(alpha=cfg.alpha_c2, fit=cfg.fit, n_jobs=cfg.n_jobs)
    everyone = list(d.worker_ids)

    def run_c2(workers) -> DeletionAnalysis:
        return deletion_analysis(d, del_cfg, fit, workers=workers)

    if cfg.conjunctive:
        c1 = _score_workers(d, cfg, thresholds, everyone)
        c2 = run_c2(everyone)
    elif cfg.c2_first:
        c2 = run_c2(everyone)
        flagged = set(c2.flagged)
        c1 = _score_workers(d, cfg, thresholds, [w for w in everyone if w not in flagged])
    else:
        c1 = _score_workers(d, cfg, thresholds, everyone)
        c2 = run_c2([w for w in everyone if c1[w].archetype is None])

    for r in c2.failures:
        errors.append(f"refit without worker {r.worker_id} failed: {r.error}")

    c1_hits = {w for w, m in c1.items() if m.archetype is not None}
    c2_hits = set(c2.flagged)
    c1_pass = apply_auxiliary_filter(c1_hits, summaries, cutoffs, cfg.aux_rule, cfg.aux_fields)
    c2_pass = apply_auxiliary_filter(c2_hits, summaries, cutoffs, cfg.aux_rule, cfg.aux_fields)
    final = (c1_pass & c2_pass) if cfg.conjunctive else (c1_pass | c2_pass)
    candidates = c1_hits | c2_hits

    by_id = {s.worker_id: s for s in summaries}
    risk = []
    for w in everyone:
        if w not in candidates:
            continue
        m = c1.get(w)
        s = by_id[w]
        risk.append(
            risk_score(
                w,
                archetype_matched=bool(m and m.lenient),
                pattern_confirmed=bool(m and m.strict),
                time_rank=rank_of(s.mean_duration, cutoffs.time_mean, cutoffs.time_mean_minus_1sd),
                accuracy_rank=rank_of(s.accuracy, cutoffs.acc_mean, cutoffs.acc_mean_minus_1sd),
            )
        )
    aux_flags = {w: (w in c1_pass or w in c2_pass) for w in everyone if w in candidates}
    return QualityReport(
        gate_passed=True,
        c1_matches=tuple(c1[w] for w in everyone if w in c1),
        c2_flags=tuple(c2.results),
        aux_flags=aux_flags,
        final_spammers=tuple(w for w in everyone if w in final),
        risk=tuple(risk),
        provenance=provenance,
        notes=tuple(notes),
        errors=tuple(errors),
        ks_chi2={"distance": c2.ks_distance, "p_value": c2.ks_pvalue},
        **common,
    )
