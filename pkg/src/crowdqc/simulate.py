"""Synthetic credible/spammer response data and simulation-calibrated KLD cutoffs.

Random streams are derived from one integer seed with :class:`numpy.random.SeedSequence`
spawn keys, one stream per task block, per credible worker and per spammer, so
a worker's responses do not depend on how many other workers are generated.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, kolmogorov, softmax
from scipy.stats import norm

from .chains import DEFAULT_EPS, ArchetypeKind, BehaviorArchetype, batch_row_klds
from .core import Dataset, ResponseRecord, ResponseScale, ScaleKind
from .errors import CalibrationFailure, ScaleMismatch
from .glrm import FitConfig, VarianceComponents, fit_glrm

REPEAT_SWITCH_PROB = 0.8
LOW_PRECISION_SIMS = 10_000
CALIBRATION_CHUNK = 2_000
ACCURACY_MARGIN = 0.02
MAX_LOG_MULTIPLIER = math.log(1e3)

# Credible-worker prior used for threshold calibration. A worker SD of 1 with
# task SD 2 puts the credible Random Guessing cutoff near 0.0022 at 80 tasks.
CALIBRATION_VC = VarianceComponents(1.0, 4.0, 0.0)

_TASK_KEY = 0
_CREDIBLE_KEY = 1
_SPAMMER_KEY = 2
_CALIBRATION_KEY = 3


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


@dataclass(frozen=True)
class SimConfig:
    n_workers: int
    n_tasks: int
    scale: ResponseScale = field(default_factory=ResponseScale.binary)
    vc: VarianceComponents = VarianceComponents(0.04, 3.0, 0.04)
    spammer_mix: tuple = ()
    seed: int = 0
    accuracy_band: tuple = (0.75, 0.9)
    intercept: float = 0.0
    task_mean: float = 0.0
    calibrate_accuracy: bool = True

    def __post_init__(self):
        object.__setattr__(self, "spammer_mix", tuple((a, int(c)) for a, c in self.spammer_mix))
        if self.n_tasks < 2 or self.n_workers < 1:
            raise ValueError("need at least 1 worker and 2 tasks")
        if any(c < 0 for _, c in self.spammer_mix):
            raise ValueError("spammer counts must be nonnegative")
        lo, hi = self.accuracy_band
        if not lo < hi:
            raise ValueError("accuracy band must satisfy lo < hi")

    @property
    def n_spammers(self) -> int:
        return sum(c for _, c in self.spammer_mix)

    def spammer_list(self) -> list:
        return [a for a, c in self.spammer_mix for _ in range(c)]


def paper_mix() -> tuple:
    """Four spammers of each archetype; Primary Choice occupies IDs 5-8."""
    return (
        (BehaviorArchetype.repeated_pattern(), 4),
        (BehaviorArchetype.primary_choice(0), 4),
        (BehaviorArchetype.random_guessing(), 4),
    )


# -- longest run ---------------------------------------------------------------


@dataclass(frozen=True)
class LongestRun:
    r: float
    sd: float
    threshold: int


def expected_longest_run(n: int, p: float = 0.5) -> LongestRun:
    """Expected longest run of one outcome in ``n`` Bernoulli(``p``) trials.

    ``threshold`` is the run length used to synthesize Primary Choice
    behaviour: the expectation rounded up plus two standard deviations
    rounded up.
    """
    if n < 2 or not 0 < p < 1:
        raise ValueError("need n >= 2 and 0 < p < 1")
    r = math.log(n * (1 - p)) / math.log(1 / p)
    sd = math.sqrt(math.pi ** 2 / (6 * math.log(1 / p) ** 2) + 1 / 12)
    threshold = max(math.ceil(r - 1e-12), 0) + math.ceil(2 * sd)
    return LongestRun(r, sd, int(threshold))


# -- spammers ------------------------------------------------------------------


def simulate_spammer(archetype: BehaviorArchetype, n_tasks: int, seed=0, k: int = 2) -> np.ndarray:
    """Response sequence (completion order) of one spammer.

    ``seed`` may be an int or a :class:`numpy.random.Generator`.
    """
    if n_tasks < 2:
        raise ValueError("n_tasks must be at least 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kind = archetype.kind
    if kind is ArchetypeKind.RANDOM_GUESSING:
        return rng.integers(0, k, n_tasks)
    if kind is ArchetypeKind.REPEATED_PATTERN:
        seq = np.empty(n_tasks, dtype=np.intp)
        seq[0] = rng.integers(0, k)
        switch = rng.random(n_tasks) < REPEAT_SWITCH_PROB
        offsets = rng.integers(1, k, n_tasks)
        for i in range(1, n_tasks):
            seq[i] = (seq[i - 1] + offsets[i]) % k if switch[i] else seq[i - 1]
        return seq
    pref = archetype.preferred
    if pref >= k:
        raise ValueError(f"preferred category {pref} out of range for k={k}")
    run = expected_longest_run(n_tasks, 1.0 / k).threshold
    seq = np.full(n_tasks, pref, dtype=np.intp)
    pos = 0
    while True:
        pos += run + int(rng.geometric(0.5)) - 1
        # A break is only placed if a full-length run still fits after it.
        if pos + 1 + run > n_tasks:
            break
        other = int(rng.integers(0, k - 1))
        seq[pos] = other if other < pref else other + 1
        pos += 1
    return seq


# -- credible workers ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CredibleEffects:
    task: np.ndarray
    worker: np.ndarray
    interaction: np.ndarray
    uniforms: np.ndarray
    orders: np.ndarray
    truth: np.ndarray
    multiplier: float
    cuts: Optional[np.ndarray] = None


def _draw_credible(config: SimConfig, n_workers: int, n_categories: int):
    """Raw effect draws; per-category arrays carry a trailing category axis."""
    sw, st, si = (math.sqrt(v) for v in config.vc.as_tuple())
    m = max(n_categories - 1, 1) if config.scale.kind is ScaleKind.NOMINAL else 1
    trng = _stream(config.seed, _TASK_KEY)
    task = config.task_mean + st * trng.standard_normal((config.n_tasks, m))
    worker = np.empty((n_workers, m))
    inter = np.empty((n_workers, config.n_tasks, m))
    unif = np.empty((n_workers, config.n_tasks))
    orders = np.empty((n_workers, config.n_tasks), dtype=np.intp)
    for i in range(n_workers):
        rng = _stream(config.seed, _CREDIBLE_KEY, i)
        worker[i] = sw * rng.standard_normal(m)
        inter[i] = si * rng.standard_normal((config.n_tasks, m))
        unif[i] = rng.random(config.n_tasks)
        orders[i] = rng.permutation(config.n_tasks)
    return task, worker, inter, unif, orders


def _ordinal_cuts(vc: VarianceComponents, k: int, mult: float = 1.0) -> np.ndarray:
    """Cut points giving roughly balanced categories under the latent marginal."""
    s1, s2, s3 = vc.as_tuple()
    total_sd = math.sqrt(s1 + mult * mult * s2 + s3 + math.pi ** 2 / 3)
    return total_sd * norm.ppf(np.arange(1, k) / k)


def _category_probs(kind: ScaleKind, eta: np.ndarray, intercept: float = 0.0, cuts=None) -> np.ndarray:
    """Response probabilities, shape ``eta.shape[:2] + (K,)``; ``eta`` has a trailing category axis."""
    if kind is ScaleKind.BINARY:
        p1 = expit(intercept + eta[:, :, 0])
        return np.stack([1.0 - p1, p1], axis=2)
    if kind is ScaleKind.ORDINAL:
        cdf = expit(cuts[None, None, :] - eta[:, :, 0][:, :, None])
        cdf = np.concatenate([np.zeros(cdf.shape[:2] + (1,)), cdf, np.ones(cdf.shape[:2] + (1,))], axis=2)
        return np.diff(cdf, axis=2)
    return softmax(np.concatenate([np.zeros(eta.shape[:2] + (1,)), eta], axis=2), axis=2)


def _truth(kind: ScaleKind, task: np.ndarray, cuts=None) -> np.ndarray:
    if kind is ScaleKind.BINARY:
        return (task[:, 0] > 0).astype(np.intp)
    if kind is ScaleKind.ORDINAL:
        return np.searchsorted(cuts, task[:, 0]).astype(np.intp)
    return np.argmax(np.column_stack([np.zeros(task.shape[0]), task]), axis=1)


def _scaled(config: SimConfig, task, mult):
    cuts = _ordinal_cuts(config.vc, config.scale.num_categories, mult) if config.scale.kind is ScaleKind.ORDINAL else None
    return mult * task, cuts


def _expected_accuracy(config: SimConfig, task, worker, inter, mult) -> np.ndarray:
    """Per-worker mean probability of answering the true category."""
    kind = config.scale.kind
    task, cuts = _scaled(config, task, mult)
    eta = worker[:, None, :] + task[None, :, :] + inter
    probs = _category_probs(kind, eta, config.intercept, cuts)
    truth = _truth(kind, task, cuts)
    return np.take_along_axis(probs, truth[None, :, None].repeat(probs.shape[0], axis=0), axis=2)[:, :, 0].mean(axis=1)


def _band_fraction(acc, band):
    return float(((acc >= band[0]) & (acc <= band[1])).mean())


def _band_multiplier(config, task, worker, inter) -> float:
    lo_acc, hi_acc = config.accuracy_band
    margin = ACCURACY_MARGIN * (hi_acc - lo_acc)

    def acc(logm):
        return _expected_accuracy(config, task, worker, inter, math.exp(logm))

    if _band_fraction(acc(0.0), config.accuracy_band) >= 0.9:
        return 1.0
    below = np.mean(acc(0.0) < lo_acc) > np.mean(acc(0.0) > hi_acc)
    if below:
        # Raise task strength until 90% of workers clear the lower edge.
        q, target, lo, hi = 10, lo_acc + margin, 0.0, MAX_LOG_MULTIPLIER
    else:
        q, target, lo, hi = 90, hi_acc - margin, -MAX_LOG_MULTIPLIER, 0.0
    f = lambda logm: float(np.percentile(acc(logm), q)) - target
    if f(lo) * f(hi) > 0:
        raise CalibrationFailure(
            f"accuracy band {config.accuracy_band} unreachable by rescaling task effects"
        )
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if (f(mid) < 0) == (f(lo) < 0):
            lo = mid
        else:
            hi = mid
    logm = 0.5 * (lo + hi)
    frac = _band_fraction(acc(logm), config.accuracy_band)
    if frac < 0.9:
        raise CalibrationFailure(
            f"only {frac:.0%} of credible workers reach the accuracy band {config.accuracy_band}"
        )
    return math.exp(logm)


def credible_effects(config: SimConfig) -> CredibleEffects:
    """Draw credible-worker effects, rescaling task effects into the accuracy band.

    Accuracy is each worker's expected probability of giving the true
    category (the category implied by the task effect alone). When fewer
    than 90% of workers fall in the band, the task-effect multiplier is
    bisected (log scale) for the smallest change that brings the 10th (or
    90th) accuracy percentile just inside the violated edge.
    """
    task, worker, inter, unif, orders = _draw_credible(config, config.n_workers, config.scale.num_categories)
    mult = _band_multiplier(config, task, worker, inter) if config.calibrate_accuracy else 1.0
    task, cuts = _scaled(config, task, mult)
    truth = _truth(config.scale.kind, task, cuts)
    return CredibleEffects(task, worker, inter, unif, orders, truth, mult, cuts)


def _credible_responses(config: SimConfig, eff: CredibleEffects, rows) -> np.ndarray:
    eta = eff.worker[rows][:, None, :] + eff.task[None, :, :] + eff.interaction[rows]
    probs = _category_probs(config.scale.kind, eta, config.intercept, eff.cuts)
    u = eff.uniforms[rows]
    return (u[:, :, None] > np.cumsum(probs, axis=2)[:, :, :-1]).sum(axis=2)


def _assemble(config: SimConfig, eff: CredibleEffects, credible_rows, spammers, ids) -> Dataset:
    """Dataset with spammers first, then the selected credible workers."""
    k = config.scale.num_categories
    task_ids = [f"t{j + 1}" for j in range(config.n_tasks)]
    records = []
    for s, arch in enumerate(spammers):
        rng = _stream(config.seed, _SPAMMER_KEY, s)
        order = rng.permutation(config.n_tasks)
        seq = simulate_spammer(arch, config.n_tasks, rng, k)
        wid = ids[s]
        for pos, j in enumerate(order):
            records.append(ResponseRecord(wid, task_ids[j], int(seq[pos]), pos, None, int(eff.truth[j])))
    credible_rows = np.asarray(credible_rows, dtype=np.intp)
    resp = _credible_responses(config, eff, credible_rows) if credible_rows.size else np.empty((0, config.n_tasks))
    for r, i in enumerate(credible_rows):
        wid = ids[len(spammers) + r]
        for pos, j in enumerate(eff.orders[i]):
            records.append(ResponseRecord(wid, task_ids[j], int(resp[r, j]), pos, None, int(eff.truth[j])))
    return Dataset.from_records(config.scale, records)


def simulate_credible(config: SimConfig) -> Dataset:
    """``n_workers`` credible workers under the crossed random-effects generator."""
    if config.scale.kind is not ScaleKind.BINARY:
        raise ScaleMismatch("use simulate_multiclass for ordinal or nominal scales")
    eff = credible_effects(config)
    ids = [str(i + 1) for i in range(config.n_workers)]
    return _assemble(config, eff, range(config.n_workers), [], ids)


def simulate_contaminated(config: SimConfig) -> Dataset:
    """Credible data with the first ``m`` workers replaced by spammers (IDs 1..m)."""
    m = config.n_spammers
    if m > config.n_workers:
        raise ValueError("more spammers than workers")
    eff = credible_effects(config)
    ids = [str(i + 1) for i in range(config.n_workers)]
    return _assemble(config, eff, range(m, config.n_workers), config.spammer_list(), ids)


def simulate_multiclass(config: SimConfig) -> Dataset:
    """Ordinal (cumulative-logit) or nominal (baseline-category logit) data.

    Spammers from ``spammer_mix`` replace the first workers, as in the binary
    generator. Task effects are rescaled toward the accuracy band exactly as
    for binary data, with truth taken as the category the task effect alone
    implies.
    """
    if config.scale.kind is ScaleKind.BINARY or config.scale.num_categories < 3:
        raise ScaleMismatch("simulate_multiclass needs K >= 3; use simulate_credible/simulate_contaminated for binary data")
    return simulate_contaminated(config)


def simulate_dataset(config: SimConfig) -> Dataset:
    if config.scale.kind is ScaleKind.BINARY:
        return simulate_contaminated(config)
    return simulate_multiclass(config)


# -- threshold calibration -----------------------------------------------------


@dataclass(frozen=True)
class ThresholdSet:
    beta_pc: float
    beta_rp: float
    beta_rg: float
    n_tasks: int
    k: int
    alpha: float = 0.05
    n_sims: int = 30_000
    type2_pc: float = float("nan")
    type2_rp: float = float("nan")
    type2_rg: float = float("nan")
    seed: int = 0
    kind: str = "binary"
    eps: float = DEFAULT_EPS
    log_base: str = "e"

    def __post_init__(self):
        if min(self.beta_pc, self.beta_rp, self.beta_rg) < 0:
            raise ValueError("cutoffs must be nonnegative")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")

    @property
    def low_precision(self) -> bool:
        return self.n_sims < LOW_PRECISION_SIMS

    @property
    def cache_id(self) -> str:
        ctx = f"{self.n_tasks}|{self.k}|{self.kind}|{self.alpha!r}|{self.n_sims}|{self.seed}|{self.eps!r}|{self.log_base}"
        return hashlib.sha256(ctx.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["low_precision"] = self.low_precision
        d["cache_id"] = self.cache_id
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "ThresholdSet":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_json(cls, text: str) -> "ThresholdSet":
        return cls.from_dict(json.loads(text))


def _credible_sequences(rng, n, n_tasks, k, kind, vc, task_mean=0.0):
    sw, st, si = (math.sqrt(v) for v in vc.as_tuple())
    if kind is ScaleKind.NOMINAL:
        m = k - 1
        eta = (
            sw * rng.standard_normal((n, 1, m))
            + task_mean + st * rng.standard_normal((n, n_tasks, m))
            + si * rng.standard_normal((n, n_tasks, m))
        )
        probs = softmax(np.concatenate([np.zeros((n, n_tasks, 1)), eta], axis=2), axis=2)
        u = rng.random((n, n_tasks, 1))
        return (u > np.cumsum(probs, axis=2)[:, :, :-1]).sum(axis=2)
    eta = sw * rng.standard_normal((n, 1)) + task_mean + st * rng.standard_normal((n, n_tasks)) + si * rng.standard_normal((n, n_tasks))
    u = rng.random((n, n_tasks))
    if kind is ScaleKind.BINARY:
        return (u < expit(eta)).astype(np.intp)
    total_sd = math.sqrt(vc.total() + math.pi ** 2 / 3)
    cuts = total_sd * norm.ppf(np.arange(1, k) / k)
    return (u[:, :, None] > expit(cuts[None, None, :] - eta[:, :, None])).sum(axis=2)


def _spammer_sequences(rng, archetype_kind, n, n_tasks, k):
    kind = ArchetypeKind(archetype_kind)
    if kind is ArchetypeKind.RANDOM_GUESSING:
        return rng.integers(0, k, (n, n_tasks))
    if kind is ArchetypeKind.REPEATED_PATTERN:
        out = np.empty((n, n_tasks), dtype=np.intp)
        out[:, 0] = rng.integers(0, k, n)
        switch = rng.random((n, n_tasks)) < REPEAT_SWITCH_PROB
        offsets = rng.integers(1, k, (n, n_tasks))
        for i in range(1, n_tasks):
            out[:, i] = np.where(switch[:, i], (out[:, i - 1] + offsets[:, i]) % k, out[:, i - 1])
        return out
    prefs = rng.integers(0, k, n)
    return np.stack([simulate_spammer(BehaviorArchetype.primary_choice(int(p)), n_tasks, rng, k) for p in prefs])


def akld_samples(
    n_tasks: int,
    k: int = 2,
    n_sims: int = 30_000,
    seed: int = 0,
    kind=None,
    credible_vc: VarianceComponents = CALIBRATION_VC,
    eps: float = DEFAULT_EPS,
    task_mean: float = 0.0,
) -> dict:
    """Simulated aKLD samples keyed by archetype kind.

    Each value is ``(credible_akld, spammer_akld)``: credible workers and
    spammers of that archetype, both scored against the archetype's target.
    The credible block is shared across archetypes.
    """
    kind = ScaleKind(kind) if kind is not None else (ScaleKind.BINARY if k == 2 else ScaleKind.ORDINAL)
    out = {}
    cred = {a: [] for a in ArchetypeKind}
    spam = {a: [] for a in ArchetypeKind}
    n_chunks = math.ceil(n_sims / CALIBRATION_CHUNK)
    for c in range(n_chunks):
        size = min(CALIBRATION_CHUNK, n_sims - c * CALIBRATION_CHUNK)
        seqs = _credible_sequences(_stream(seed, _CALIBRATION_KEY, 0, c), size, n_tasks, k, kind, credible_vc, task_mean)
        for a in ArchetypeKind:
            cred[a].append(np.nanmean(batch_row_klds(seqs, k, a, eps), axis=1))
        for ai, a in enumerate(ArchetypeKind):
            sp = _spammer_sequences(_stream(seed, _CALIBRATION_KEY, 1 + ai, c), a, size, n_tasks, k)
            spam[a].append(np.nanmean(batch_row_klds(sp, k, a, eps), axis=1))
    for a in ArchetypeKind:
        out[a] = (np.concatenate(cred[a]), np.concatenate(spam[a]))
    return out


def calibrate_thresholds(
    n_tasks: int,
    k: int = 2,
    alpha: float = 0.05,
    n_sims: int = 30_000,
    seed: int = 0,
    kind=None,
    credible_vc: VarianceComponents = CALIBRATION_VC,
    eps: float = DEFAULT_EPS,
) -> ThresholdSet:
    """Per-archetype cutoffs at the ``alpha`` quantile of simulated credible aKLDs.

    The type II error of each cutoff is the fraction of simulated spammers of
    that archetype whose aKLD is not below it.
    """
    if n_sims < 1000:
        raise ValueError("n_sims must be at least 1000")
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    kind = ScaleKind(kind) if kind is not None else (ScaleKind.BINARY if k == 2 else ScaleKind.ORDINAL)
    samples = akld_samples(n_tasks, k, n_sims, seed, kind, credible_vc, eps)
    fields = {}
    for a, (cred, spam) in samples.items():
        beta = float(np.quantile(cred, alpha))
        fields[f"beta_{a.short}"] = beta
        fields[f"type2_{a.short}"] = float((spam >= beta).mean())
    return ThresholdSet(
        n_tasks=int(n_tasks), k=int(k), alpha=float(alpha), n_sims=int(n_sims), seed=int(seed),
        kind=kind.value, eps=float(eps), **fields,
    )


# -- distribution comparison -----------------------------------------------------


def ks_test(x, y):
    """Two-sample Kolmogorov-Smirnov statistic with the asymptotic p-value.

    Returns ``(d_stat, p_value)``.
    """
    x = np.sort(np.asarray(x, dtype=float))
    y = np.sort(np.asarray(y, dtype=float))
    n, m = x.size, y.size
    if n < 2 or m < 2:
        raise ValueError("each sample needs at least 2 values")
    grid = np.concatenate([x, y])
    cdf_x = np.searchsorted(x, grid, side="right") / n
    cdf_y = np.searchsorted(y, grid, side="right") / m
    d = float(np.max(np.abs(cdf_x - cdf_y)))
    en = n * m / (n + m)
    p = float(kolmogorov(math.sqrt(en) * d)) if d > 0 else 1.0
    return d, min(max(p, 0.0), 1.0)


# -- sensitivity -----------------------------------------------------------------


def sensitivity_sweep(base: SimConfig, archetype: BehaviorArchetype, fractions: Sequence[float], fit_config: Optional[FitConfig] = None) -> list:
    """Spammer Index as ``round(f * N)`` spammers are added to a fixed credible base.

    The same spammer streams are reused across fractions, so larger
    fractions extend the smaller contaminations.
    """
    if base.scale.kind is not ScaleKind.BINARY:
        raise ScaleMismatch("sensitivity_sweep supports binary scales")
    eff = credible_effects(base)
    out = []
    for f in fractions:
        if not 0 <= f < 1:
            raise ValueError("fractions must lie in [0, 1)")
        m = int(round(f * base.n_workers))
        ids = [f"s{s + 1}" for s in range(m)] + [str(i + 1) for i in range(base.n_workers)]
        d = _assemble(base, eff, range(base.n_workers), [archetype] * m, ids)
        out.append((float(f), fit_glrm(d, fit_config).spammer_index))
    return out
