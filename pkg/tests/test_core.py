import math

import numpy as np
import pytest

from crowdqc.core import (
    Dataset,
    ResponseRecord,
    ResponseScale,
    dataset_to_csv,
    format_float,
    parse_dataset,
    population_cutoffs,
    worker_summaries,
)
from crowdqc.errors import (
    DuplicateWorkerTaskPair,
    InsufficientData,
    MissingColumn,
    TooFewObservations,
    UnknownCategoryLabel,
)


def write_csv(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def grid_records(n_workers, n_tasks, fn=lambda i, j: (i + j) % 2, **extra):
    out = []
    for i in range(n_workers):
        for j in range(n_tasks):
            kw = {k: f(i, j) for k, f in extra.items()}
            out.append(ResponseRecord(f"w{i}", f"t{j}", fn(i, j), **kw))
    return out


class TestResponseScale:
    def test_binary_needs_two_labels(self):
        with pytest.raises(ValueError):
            ResponseScale("binary", ("a", "b", "c"))

    def test_duplicate_labels_rejected(self):
        with pytest.raises(ValueError):
            ResponseScale.nominal(labels=("x", "x", "y"))

    def test_empty_label_rejected(self):
        with pytest.raises(ValueError):
            ResponseScale.ordinal(labels=("a", "", "c"))

    def test_round_trip_dict(self):
        s = ResponseScale.ordinal(5)
        assert ResponseScale.from_dict(s.to_dict()) == s
        assert s.to_dict()["num_categories"] == 5


class TestParse:
    def test_minimal_invalid_input(self, tmp_path):
        p = write_csv(tmp_path, "worker_id,task_id,response\na,t1,0\nb,t1,1\na,t2,1\n")
        with pytest.raises(TooFewObservations) as exc:
            parse_dataset(p, ResponseScale.binary())
        assert exc.value.level in ("worker", "task")

    def test_complete_grid(self, tmp_path):
        rows = ["worker_id,task_id,response"]
        rows += [f"w{i},t{j},{(i * j) % 2}" for i in range(10) for j in range(10)]
        d = parse_dataset(write_csv(tmp_path, "\n".join(rows) + "\n"), ResponseScale.binary())
        assert d.n_records == 100
        assert sorted(set(d.worker_idx)) == list(range(10))
        assert sorted(set(d.task_idx)) == list(range(10))

    def test_label_mapping(self, tmp_path):
        text = "worker_id,task_id,response\n" + "".join(
            f"w{i},t{j},{'Same' if (i + j) % 2 else 'Different'}\n" for i in range(2) for j in range(2)
        )
        d = parse_dataset(write_csv(tmp_path, text), ResponseScale.binary(("Different", "Same")))
        by_key = {(r.worker_id, r.task_id): r.response for r in d.records}
        assert by_key[("w0", "t1")] == 1
        assert by_key[("w0", "t0")] == 0

    def test_missing_column(self, tmp_path):
        p = write_csv(tmp_path, "worker,task_id,response\na,t,0\n")
        with pytest.raises(MissingColumn) as exc:
            parse_dataset(p, ResponseScale.binary())
        assert exc.value.column == "worker_id"

    def test_column_map(self, tmp_path):
        text = "annotator,item,label\n" + "".join(f"w{i},t{j},{j % 2}\n" for i in range(2) for j in range(2))
        d = parse_dataset(
            write_csv(tmp_path, text),
            ResponseScale.binary(),
            {"worker_id": "annotator", "task_id": "item", "response": "label"},
        )
        assert d.n_workers == 2

    def test_duplicate_pair(self, tmp_path):
        p = write_csv(tmp_path, "worker_id,task_id,response\na,t,0\na,t,1\n")
        with pytest.raises(DuplicateWorkerTaskPair) as exc:
            parse_dataset(p, ResponseScale.binary())
        assert "a" in str(exc.value) and "t" in str(exc.value)

    def test_unknown_label_lists_declared(self, tmp_path):
        p = write_csv(tmp_path, "worker_id,task_id,response\na,t,maybe\n")
        with pytest.raises(UnknownCategoryLabel) as exc:
            parse_dataset(p, ResponseScale.binary(("no", "yes")))
        assert "yes" in str(exc.value)

    def test_csv_round_trip(self, tmp_path):
        recs = grid_records(3, 4, order=lambda i, j: 3 - j, duration_seconds=lambda i, j: 1.5 * (i + 1) + j / 7, truth=lambda i, j: j % 2)
        d = Dataset.from_records(ResponseScale.binary(), recs)
        p = write_csv(tmp_path, dataset_to_csv(d))
        back = parse_dataset(p, ResponseScale.binary())
        assert [r.response for r in back.records] == [r.response for r in d.records]
        assert [r.order for r in back.records] == [r.order for r in d.records]
        np.testing.assert_allclose(
            [r.duration_seconds for r in back.records], [r.duration_seconds for r in d.records], rtol=1e-8
        )


class TestDataset:
    def test_order_column_drives_sequence(self):
        recs = grid_records(2, 4, fn=lambda i, j: j % 2, order=lambda i, j: 3 - j)
        d = Dataset.from_records(ResponseScale.binary(), recs)
        # Order reversed: tasks t3, t2, t1, t0.
        assert d.response_sequence("w0").tolist() == [1, 0, 1, 0]

    def test_file_order_without_order_column(self):
        d = Dataset.from_records(ResponseScale.binary(), grid_records(2, 4, fn=lambda i, j: int(j == 0)))
        assert d.response_sequence("w1").tolist() == [1, 0, 0, 0]

    def test_without_worker(self):
        d = Dataset.from_records(ResponseScale.binary(), grid_records(3, 3))
        r = d.without_worker("w1")
        assert r.n_workers == 2 and r.n_records == 6

    def test_response_out_of_range(self):
        with pytest.raises(UnknownCategoryLabel):
            Dataset.from_records(ResponseScale.binary(), [ResponseRecord("w", "t", 2)])

    def test_negative_duration(self):
        with pytest.raises(ValueError):
            Dataset.from_records(
                ResponseScale.binary(), grid_records(2, 2, duration_seconds=lambda i, j: -1.0)
            )


class TestSummaries:
    def test_accuracy_ratio(self):
        recs = [ResponseRecord("a", f"t{j}", int(j < 60), truth=1) for j in range(80)]
        recs += [ResponseRecord("b", f"t{j}", 1, truth=1) for j in range(80)]
        s = worker_summaries(Dataset.from_records(ResponseScale.binary(), recs))
        assert s[0].accuracy == pytest.approx(0.75)
        assert s[0].mean_duration is None

    def test_mean_durations(self):
        times = {("a", 0): 10, ("a", 1): 20, ("b", 0): 30, ("b", 1): 40}
        recs = [ResponseRecord(w, f"t{j}", 0, duration_seconds=float(t)) for (w, j), t in times.items()]
        s = worker_summaries(Dataset.from_records(ResponseScale.binary(), recs))
        assert [x.mean_duration for x in s] == [15.0, 35.0]

    @pytest.mark.parametrize(
        "values, mean, lo",
        [((10.0, 20.0, 30.0), 20.0, 10.0), ((4.0, 4.0, 4.0), 4.0, 4.0)],
    )
    def test_population_cutoffs(self, values, mean, lo):
        from crowdqc.core import WorkerSummary

        sums = [WorkerSummary(str(i), 2, v, None) for i, v in enumerate(values)]
        c = population_cutoffs(sums, require=("time",))
        assert c.time_mean == pytest.approx(mean)
        assert c.time_mean_minus_1sd == pytest.approx(lo)
        assert c.acc_mean is None

    def test_single_worker_insufficient(self):
        from crowdqc.core import WorkerSummary

        with pytest.raises(InsufficientData):
            population_cutoffs([WorkerSummary("a", 2, 5.0, None)], require=("time",))


@pytest.mark.parametrize(
    "x, text", [(0.1, "0.1"), (1 / 3, "0.333333333"), (None, ""), (math.nan, "nan"), (101.87947, "101.87947")]
)
def test_format_float(x, text):
    assert format_float(x) == text
