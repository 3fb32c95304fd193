"""Data model, CSV ingestion, validation and per-worker descriptive statistics."""

from __future__ import annotations

import csv
import enum
import io
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    DuplicateWorkerTaskPair,
    InsufficientData,
    MissingColumn,
    TooFewObservations,
    UnknownCategoryLabel,
)

REQUIRED_COLUMNS = ("worker_id", "task_id", "response")
OPTIONAL_COLUMNS = ("order", "duration_seconds", "truth")


class ScaleKind(str, enum.Enum):
    BINARY = "binary"
    ORDINAL = "ordinal"
    NOMINAL = "nominal"


@dataclass(frozen=True)
class ResponseScale:
    """Declared response categories.

    ``labels[k]`` is the text label of category index ``k``. For binary data
    index 1 is the "event" coded as ``Y = 1`` in the logit model.
    """

    kind: ScaleKind
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "kind", ScaleKind(self.kind))
        labels = tuple(str(x) for x in self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise ValueError("a response scale needs at least 2 categories")
        if any(not lab for lab in labels):
            raise ValueError("category labels must be nonempty")
        if len(set(labels)) != len(labels):
            raise ValueError(f"category labels must be unique: {labels}")
        if self.kind is ScaleKind.BINARY and len(labels) != 2:
            raise ValueError("a binary scale has exactly 2 categories")

    @property
    def num_categories(self) -> int:
        return len(self.labels)

    @classmethod
    def binary(cls, labels=("0", "1")) -> "ResponseScale":
        return cls(ScaleKind.BINARY, tuple(labels))

    @classmethod
    def ordinal(cls, k: int = 5, labels=None) -> "ResponseScale":
        return cls(ScaleKind.ORDINAL, tuple(labels) if labels is not None else tuple(str(i) for i in range(k)))

    @classmethod
    def nominal(cls, k: int = 3, labels=None) -> "ResponseScale":
        return cls(ScaleKind.NOMINAL, tuple(labels) if labels is not None else tuple(str(i) for i in range(k)))

    def index_of(self, label: str) -> int:
        try:
            return self._lookup[label]
        except KeyError:
            raise UnknownCategoryLabel(label, self.labels) from None

    @cached_property
    def _lookup(self):
        return {lab: i for i, lab in enumerate(self.labels)}

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "num_categories": self.num_categories, "labels": list(self.labels)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ResponseScale":
        return cls(ScaleKind(d["kind"]), tuple(d["labels"]))


@dataclass(frozen=True)
class ResponseRecord:
    worker_id: str
    task_id: str
    response: int
    order: Optional[int] = None
    duration_seconds: Optional[float] = None
    truth: Optional[int] = None


@dataclass(frozen=True)
class WorkerSummary:
    worker_id: str
    n_tasks: int
    mean_duration: Optional[float] = None
    accuracy: Optional[float] = None


@dataclass(frozen=True, eq=True)
class Dataset:
    """Validated long-form worker x task response table.

    Instances are immutable; derived numpy views are computed lazily and
    cached. Build through :meth:`from_records` or :func:`parse_dataset` so the
    identifiability checks run.
    """

    scale: ResponseScale
    records: tuple
    worker_index: Mapping[str, int] = field(compare=True)
    task_index: Mapping[str, int] = field(compare=True)

    @classmethod
    def from_records(cls, scale: ResponseScale, records: Iterable[ResponseRecord]) -> "Dataset":
        records = tuple(records)
        k = scale.num_categories
        worker_index: dict = {}
        task_index: dict = {}
        seen = set()
        for rec in records:
            if not 0 <= rec.response < k:
                raise UnknownCategoryLabel(rec.response, scale.labels)
            if rec.truth is not None and not 0 <= rec.truth < k:
                raise UnknownCategoryLabel(rec.truth, scale.labels)
            if rec.duration_seconds is not None and not rec.duration_seconds >= 0:
                raise ValueError(f"negative duration for worker {rec.worker_id!r}, task {rec.task_id!r}")
            if rec.order is not None and rec.order < 0:
                raise ValueError(f"negative order for worker {rec.worker_id!r}, task {rec.task_id!r}")
            key = (rec.worker_id, rec.task_id)
            if key in seen:
                raise DuplicateWorkerTaskPair(*key)
            seen.add(key)
            worker_index.setdefault(rec.worker_id, len(worker_index))
            task_index.setdefault(rec.task_id, len(task_index))
        ds = cls(scale, records, worker_index, task_index)
        ds._check_counts()
        return ds

    def _check_counts(self):
        wc = np.bincount(self.worker_idx, minlength=self.n_workers)
        tc = np.bincount(self.task_idx, minlength=self.n_tasks)
        workers = list(self.worker_index)
        tasks = list(self.task_index)
        for i in np.flatnonzero(wc < 2):
            raise TooFewObservations("worker", workers[i], int(wc[i]))
        for j in np.flatnonzero(tc < 2):
            raise TooFewObservations("task", tasks[j], int(tc[j]))

    def __hash__(self):
        return hash((self.scale, self.records))

    @property
    def n_workers(self) -> int:
        return len(self.worker_index)

    @property
    def n_tasks(self) -> int:
        return len(self.task_index)

    @property
    def n_records(self) -> int:
        return len(self.records)

    @cached_property
    def worker_ids(self) -> list:
        return list(self.worker_index)

    @cached_property
    def task_ids(self) -> list:
        return list(self.task_index)

    @cached_property
    def worker_idx(self) -> np.ndarray:
        return np.fromiter((self.worker_index[r.worker_id] for r in self.records), dtype=np.intp, count=len(self.records))

    @cached_property
    def task_idx(self) -> np.ndarray:
        return np.fromiter((self.task_index[r.task_id] for r in self.records), dtype=np.intp, count=len(self.records))

    @cached_property
    def responses(self) -> np.ndarray:
        return np.fromiter((r.response for r in self.records), dtype=np.intp, count=len(self.records))

    @cached_property
    def has_order(self) -> bool:
        return any(r.order is not None for r in self.records)

    @cached_property
    def has_durations(self) -> bool:
        return any(r.duration_seconds is not None for r in self.records)

    @cached_property
    def has_truth(self) -> bool:
        return any(r.truth is not None for r in self.records)

    def worker_records(self, worker_id: str) -> list:
        return [r for r in self.records if r.worker_id == worker_id]

    @cached_property
    def _sequences(self) -> dict:
        grouped: dict = {w: [] for w in self.worker_index}
        for pos, rec in enumerate(self.records):
            grouped[rec.worker_id].append((pos, rec))
        out = {}
        for w, items in grouped.items():
            if self.has_order:
                # Missing order values sort after explicit ones, by file position.
                items.sort(key=lambda pr: (pr[1].order is None, pr[1].order if pr[1].order is not None else 0, pr[0]))
            out[w] = np.array([rec.response for _, rec in items], dtype=np.intp)
        return out

    def response_sequence(self, worker_id: str) -> np.ndarray:
        """Worker's responses in completion order.

        Uses the ``order`` column when present, otherwise the file row order.
        """
        return self._sequences[worker_id]

    def without_worker(self, worker_id: str) -> "Dataset":
        """Dataset minus one worker's records. Skips the >= 2 record checks."""
        recs = tuple(r for r in self.records if r.worker_id != worker_id)
        widx: dict = {}
        tidx: dict = {}
        for r in recs:
            widx.setdefault(r.worker_id, len(widx))
            tidx.setdefault(r.task_id, len(tidx))
        return Dataset(self.scale, recs, widx, tidx)


def parse_dataset(
    path,
    scale: ResponseScale,
    columns: Optional[Mapping[str, str]] = None,
) -> Dataset:
    """Read a CSV response table.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV with a header row.
    scale : ResponseScale
        Declared categories; ``response`` and ``truth`` cells hold labels.
    columns : mapping, optional
        Maps canonical column names (``worker_id``, ``task_id``, ``response``,
        ``order``, ``duration_seconds``, ``truth``) to the header names used in
        the file.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_dataset_text(fh, scale, columns)


def parse_dataset_text(fh, scale: ResponseScale, columns: Optional[Mapping[str, str]] = None) -> Dataset:
    colmap = {c: c for c in REQUIRED_COLUMNS + OPTIONAL_COLUMNS}
    if columns:
        colmap.update(columns)
    reader = csv.DictReader(fh)
    header = reader.fieldnames or []
    for c in REQUIRED_COLUMNS:
        if colmap[c] not in header:
            raise MissingColumn(colmap[c], header)
    present = {c for c in OPTIONAL_COLUMNS if colmap[c] in header}

    records = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        worker = row[colmap["worker_id"]]
        task = row[colmap["task_id"]]
        label = row[colmap["response"]]
        if label not in scale._lookup:
            raise UnknownCategoryLabel(label, scale.labels, lineno)
        key = (worker, task)
        if key in seen:
            raise DuplicateWorkerTaskPair(worker, task, lineno)
        seen.add(key)
        order = duration = truth = None
        if "order" in present and row[colmap["order"]] != "":
            order = int(row[colmap["order"]])
        if "duration_seconds" in present and row[colmap["duration_seconds"]] != "":
            duration = float(row[colmap["duration_seconds"]])
        if "truth" in present and row[colmap["truth"]] != "":
            t = row[colmap["truth"]]
            if t not in scale._lookup:
                raise UnknownCategoryLabel(t, scale.labels, lineno)
            truth = scale._lookup[t]
        records.append(ResponseRecord(worker, task, scale._lookup[label], order, duration, truth))
    return Dataset.from_records(scale, records)


def dataset_to_csv(d: Dataset) -> str:
    """Serialize to CSV text that :func:`parse_dataset` reads back identically."""
    cols = list(REQUIRED_COLUMNS)
    if d.has_order:
        cols.append("order")
    if d.has_durations:
        cols.append("duration_seconds")
    if d.has_truth:
        cols.append("truth")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    labels = d.scale.labels
    for r in d.records:
        row = [r.worker_id, r.task_id, labels[r.response]]
        if d.has_order:
            row.append("" if r.order is None else str(r.order))
        if d.has_durations:
            row.append(format_float(r.duration_seconds))
        if d.has_truth:
            row.append("" if r.truth is None else labels[r.truth])
        writer.writerow(row)
    return buf.getvalue()


def write_dataset(d: Dataset, path) -> None:
    atomic_write_text(path, dataset_to_csv(d))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def worker_summaries(d: Dataset) -> list:
    """One :class:`WorkerSummary` per worker, in dense-index order."""
    n = np.zeros(d.n_workers, dtype=int)
    dur_sum = np.zeros(d.n_workers)
    dur_n = np.zeros(d.n_workers, dtype=int)
    hit = np.zeros(d.n_workers, dtype=int)
    truth_n = np.zeros(d.n_workers, dtype=int)
    for r in d.records:
        i = d.worker_index[r.worker_id]
        n[i] += 1
        if r.duration_seconds is not None:
            dur_sum[i] += r.duration_seconds
            dur_n[i] += 1
        if r.truth is not None:
            truth_n[i] += 1
            hit[i] += r.response == r.truth
    out = []
    for w, i in d.worker_index.items():
        out.append(
            WorkerSummary(
                worker_id=w,
                n_tasks=int(n[i]),
                mean_duration=float(dur_sum[i] / dur_n[i]) if dur_n[i] else None,
                accuracy=float(hit[i] / truth_n[i]) if truth_n[i] else None,
            )
        )
    return out


@dataclass(frozen=True)
class PopulationCutoffs:
    time_mean: Optional[float] = None
    time_mean_minus_1sd: Optional[float] = None
    acc_mean: Optional[float] = None
    acc_mean_minus_1sd: Optional[float] = None


def _mean_minus_sd(values: Sequence[float]):
    x = np.asarray(values, dtype=float)
    m = float(x.mean())
    return m, m - float(x.std(ddof=1))


def population_cutoffs(summaries: Sequence[WorkerSummary], *, require: Iterable[str] = ("time", "accuracy")) -> PopulationCutoffs:
    """Mean and mean minus one sample SD of per-worker time and accuracy.

    Fields named in ``require`` raise :class:`InsufficientData` when fewer than
    two workers carry them; other fields are left as ``None``.
    """
    require = set(require)
    times = [s.mean_duration for s in summaries if s.mean_duration is not None]
    accs = [s.accuracy for s in summaries if s.accuracy is not None]
    out = {}
    for name, vals in (("time", times), ("acc", accs)):
        full = "accuracy" if name == "acc" else name
        if len(vals) < 2:
            if full in require:
                raise InsufficientData(f"{full} cutoffs need at least 2 workers with that field, got {len(vals)}")
            continue
        m, lo = _mean_minus_sd(vals)
        out[f"{name}_mean"] = m
        out[f"{name}_mean_minus_1sd"] = lo
    return PopulationCutoffs(**out)


def format_float(x) -> str:
    """Float formatting used in every CSV output (9 significant digits)."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.9g}"
