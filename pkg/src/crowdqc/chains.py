"""First-order Markov transition matrices and KL-divergence scores against spammer archetypes."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, NotADistribution, SequenceTooShort, ThresholdMismatch

DEFAULT_EPS = 1e-9
THRESHOLD_TASK_TOLERANCE = 0.25


class ArchetypeKind(str, enum.Enum):
    PRIMARY_CHOICE = "primary_choice"
    REPEATED_PATTERN = "repeated_pattern"
    RANDOM_GUESSING = "random_guessing"

    @property
    def short(self) -> str:
        return {"primary_choice": "pc", "repeated_pattern": "rp", "random_guessing": "rg"}[self.value]


class Strategy(str, enum.Enum):
    ALL_ROWS_BELOW = "all_rows_below"
    MIN_KLD_BELOW = "min_kld_below"


@dataclass(frozen=True)
class BehaviorArchetype:
    kind: ArchetypeKind
    preferred: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ArchetypeKind(self.kind))
        if self.kind is ArchetypeKind.PRIMARY_CHOICE:
            if self.preferred is None or self.preferred < 0:
                raise ValueError("PrimaryChoice needs a nonnegative preferred category")
        elif self.preferred is not None:
            raise ValueError(f"{self.kind.value} takes no preferred category")

    @classmethod
    def primary_choice(cls, preferred: int = 0) -> "BehaviorArchetype":
        return cls(ArchetypeKind.PRIMARY_CHOICE, int(preferred))

    @classmethod
    def repeated_pattern(cls) -> "BehaviorArchetype":
        return cls(ArchetypeKind.REPEATED_PATTERN)

    @classmethod
    def random_guessing(cls) -> "BehaviorArchetype":
        return cls(ArchetypeKind.RANDOM_GUESSING)

    @property
    def name(self) -> str:
        if self.kind is ArchetypeKind.PRIMARY_CHOICE:
            return f"primary_choice({self.preferred})"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "BehaviorArchetype":
        text = text.strip().lower()
        if text.startswith("primary_choice") or text in ("pc",):
            pref = 0
            if "(" in text:
                pref = int(text[text.index("(") + 1:text.index(")")])
            return cls.primary_choice(pref)
        if text in ("repeated_pattern", "rp"):
            return cls.repeated_pattern()
        if text in ("random_guessing", "rg"):
            return cls.random_guessing()
        raise ValueError(f"unknown archetype {text!r}")


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Row-stochastic ``k x k`` matrix; ``visited`` marks rows backed by observed transitions."""

    k: int
    rows: np.ndarray
    visited: Optional[np.ndarray] = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.shape != (self.k, self.k):
            raise DimensionMismatch(f"expected a {self.k}x{self.k} matrix, got shape {rows.shape}")
        if (rows < 0).any() or not np.allclose(rows.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise NotADistribution("transition matrix rows must be nonnegative and sum to 1")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        visited = np.ones(self.k, dtype=bool) if self.visited is None else np.asarray(self.visited, dtype=bool)
        object.__setattr__(self, "visited", visited)

    def __eq__(self, other):
        return isinstance(other, TransitionMatrix) and self.k == other.k and np.array_equal(self.rows, other.rows)


@dataclass(frozen=True, eq=False)
class KldScore:
    """Row KLDs (NaN for unvisited rows) with their mean ``akld`` and minimum ``mkld``."""

    worker_id: str
    archetype: BehaviorArchetype
    row_klds: np.ndarray
    akld: float
    mkld: float


# -- estimation ----------------------------------------------------------------


def transition_counts(seq, k: int) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.intp)
    return np.bincount(seq[:-1] * k + seq[1:], minlength=k * k).reshape(k, k).astype(float)


def normalize_counts(counts, alpha: float = 0.0) -> np.ndarray:
    """Row-normalize transition counts (any leading batch dims).

    Rows without transitions become uniform when ``alpha`` is 0.
    """
    counts = np.asarray(counts, dtype=float)
    k = counts.shape[-1]
    tot = counts.sum(axis=-1, keepdims=True) + k * alpha
    with np.errstate(invalid="ignore", divide="ignore"):
        rows = (counts + alpha) / tot
    return np.where(tot > 0, rows, 1.0 / k)


def estimate_transition_matrix(seq: Sequence[int], k: int, alpha: float = 0.0) -> TransitionMatrix:
    if len(seq) < 2:
        raise SequenceTooShort(f"need at least 2 responses to estimate transitions, got {len(seq)}")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    seq = np.asarray(seq, dtype=np.intp)
    if seq.min() < 0 or seq.max() >= k:
        raise ValueError(f"sequence entries must lie in [0, {k})")
    counts = transition_counts(seq, k)
    rows = normalize_counts(counts, alpha)
    # Renormalize so each row sums to 1 to within rounding.
    rows = rows / rows.sum(axis=1, keepdims=True)
    return TransitionMatrix(k, rows, counts.sum(axis=1) > 0)


def target_rows(archetype: BehaviorArchetype, k: int) -> np.ndarray:
    if k < 2:
        raise ValueError("k must be at least 2")
    kind = archetype.kind
    if kind is ArchetypeKind.PRIMARY_CHOICE:
        if archetype.preferred >= k:
            raise ValueError(f"preferred category {archetype.preferred} out of range for k={k}")
        rows = np.zeros((k, k))
        rows[:, archetype.preferred] = 1.0
    elif kind is ArchetypeKind.REPEATED_PATTERN:
        rows = (1.0 - np.eye(k)) / (k - 1)
    else:
        rows = np.full((k, k), 1.0 / k)
    return rows


def target_matrix(archetype: BehaviorArchetype, k: int) -> TransitionMatrix:
    return TransitionMatrix(k, target_rows(archetype, k))


# -- divergence ----------------------------------------------------------------


def _smooth(v, eps):
    k = v.shape[-1]
    return (v + eps) / (1.0 + k * eps)


def kld_rows(p, q, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Row-wise KL(p || q) in nats after smoothing both sides by ``eps``.

    Broadcasts over leading dimensions.
    """
    p = _smooth(np.asarray(p, dtype=float), eps)
    q = _smooth(np.asarray(q, dtype=float), eps)
    return np.maximum((p * (np.log(p) - np.log(q))).sum(axis=-1), 0.0)


def kld_row(p, q, eps: float = DEFAULT_EPS) -> float:
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    for name, v in (("p", p), ("q", q)):
        if v.ndim != 1 or (v < 0).any() or abs(v.sum() - 1.0) > 1e-9:
            raise NotADistribution(f"{name} is not a probability vector: {v}")
    if p.shape != q.shape:
        raise DimensionMismatch("p and q have different lengths")
    return float(kld_rows(p, q, eps))


def modal_category(seq, k: int) -> int:
    """Most frequent response; ties go to the lowest index."""
    return int(np.argmax(np.bincount(np.asarray(seq, dtype=np.intp), minlength=k)))


def score_worker(obs: TransitionMatrix, archetype: BehaviorArchetype, eps: float = DEFAULT_EPS, worker_id: str = "") -> KldScore:
    if archetype.kind is ArchetypeKind.PRIMARY_CHOICE and archetype.preferred >= obs.k:
        raise DimensionMismatch(f"archetype {archetype.name} does not fit a {obs.k}-category matrix")
    target = target_rows(archetype, obs.k)
    # Rows never left carry no evidence about the worker's behaviour.
    row_klds = np.where(obs.visited, kld_rows(obs.rows, target, eps), np.nan)
    return KldScore(worker_id, archetype, row_klds, float(np.nanmean(row_klds)), float(np.nanmin(row_klds)))


def worker_archetypes(seq, k: int) -> list:
    """Archetypes a worker is scored against; PrimaryChoice uses the worker's mode."""
    return [
        BehaviorArchetype.primary_choice(modal_category(seq, k)),
        BehaviorArchetype.repeated_pattern(),
        BehaviorArchetype.random_guessing(),
    ]


def score_all(seq, k: int, worker_id: str = "", eps: float = DEFAULT_EPS, alpha: float = 0.0) -> list:
    obs = estimate_transition_matrix(seq, k, alpha)
    return [score_worker(obs, a, eps, worker_id) for a in worker_archetypes(seq, k)]


def batch_row_klds(sequences: np.ndarray, k: int, kind: ArchetypeKind, eps: float = DEFAULT_EPS, alpha: float = 0.0) -> np.ndarray:
    """Row KLDs for many equal-length sequences at once, shape (n, k).

    PrimaryChoice targets are instantiated per sequence at its modal response.
    Rows without observed transitions are NaN.
    """
    seqs = np.asarray(sequences, dtype=np.intp)
    n, length = seqs.shape
    codes = seqs[:, :-1] * k + seqs[:, 1:]
    flat = codes + (np.arange(n) * k * k)[:, None]
    counts = np.bincount(flat.ravel(), minlength=n * k * k).reshape(n, k, k)
    rows = normalize_counts(counts, alpha)
    if kind is ArchetypeKind.PRIMARY_CHOICE:
        freq = np.zeros((n, k), dtype=np.intp)
        for c in range(k):
            freq[:, c] = (seqs == c).sum(axis=1)
        mode = np.argmax(freq, axis=1)
        target = np.zeros((n, k, k))
        target[np.arange(n), :, mode] = 1.0
    else:
        archetype = BehaviorArchetype(kind)
        target = target_rows(archetype, k)[None, :, :]
    return np.where(counts.sum(axis=2) > 0, kld_rows(rows, target, eps), np.nan)


# -- classification ------------------------------------------------------------


def _beta_for(thresholds, kind: ArchetypeKind) -> float:
    return getattr(thresholds, f"beta_{kind.short}")


def matches(score: KldScore, thresholds, strategy: Strategy) -> bool:
    beta = _beta_for(thresholds, score.archetype.kind)
    if Strategy(strategy) is Strategy.ALL_ROWS_BELOW:
        rows = score.row_klds[~np.isnan(score.row_klds)]
        return bool((rows < beta).all())
    return bool(score.mkld < beta)


def check_threshold_context(thresholds, n_tasks: float, k: int) -> None:
    if thresholds.k != k:
        raise ThresholdMismatch(f"thresholds calibrated for k={thresholds.k}, data has k={k}")
    if abs(n_tasks - thresholds.n_tasks) > THRESHOLD_TASK_TOLERANCE * thresholds.n_tasks:
        raise ThresholdMismatch(
            f"thresholds calibrated for {thresholds.n_tasks} tasks, worker sequences have {n_tasks:g}"
        )


def classify_worker(
    scores: Iterable[KldScore],
    thresholds,
    strategy: Strategy = Strategy.ALL_ROWS_BELOW,
    n_tasks: Optional[float] = None,
) -> Optional[BehaviorArchetype]:
    """Matched archetype with the smallest aKLD, or ``None``.

    ``n_tasks`` (the worker's sequence length) is checked against the
    calibration context when given.
    """
    scores = list(scores)
    if n_tasks is not None and scores:
        check_threshold_context(thresholds, n_tasks, scores[0].row_klds.shape[0])
    hits = [s for s in scores if matches(s, thresholds, strategy)]
    if not hits:
        return None
    return min(hits, key=lambda s: s.akld).archetype
