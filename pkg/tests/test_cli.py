import csv
import json

import pytest

from crowdqc.cli import main, resolve_seed


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def thresholds(workdir):
    out = workdir / "thr.json"
    assert main(["calibrate", "--n-tasks", "30", "--n-sims", "2000", "--seed", "1", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def dirty_csv(workdir):
    out = workdir / "dirty.csv"
    assert main(["simulate", "--n-workers", "50", "--n-tasks", "30", "--mix", "paper", "--seed", "3", "--out", str(out)]) == 0
    return out


class TestValidate:
    def test_summary_line(self, dirty_csv, capsys):
        assert main(["validate", str(dirty_csv)]) == 0
        assert capsys.readouterr().out.strip() == "50 workers, 30 tasks, 1500 records"

    def test_duplicate_pair(self, tmp_path, capsys):
        p = tmp_path / "dup.csv"
        p.write_text("worker_id,task_id,response\na,t1,0\na,t1,1\n")
        assert main(["validate", str(p)]) == 2
        err = capsys.readouterr().err
        assert "a" in err and "t1" in err

    def test_unknown_label(self, tmp_path, capsys):
        p = tmp_path / "bad.csv"
        p.write_text("worker_id,task_id,response\na,t1,maybe\n")
        assert main(["validate", str(p), "--labels", "no,yes"]) == 2
        diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "yes" in json.dumps(diag)


class TestCalibrate:
    def test_cache_contents(self, thresholds):
        doc = json.loads(thresholds.read_text())
        assert doc["low_precision"] is True
        assert doc["n_tasks"] == 30 and doc["k"] == 2
        assert doc["beta_rg"] < min(doc["beta_pc"], doc["beta_rp"])

    def test_byte_identical(self, thresholds, tmp_path):
        again = tmp_path / "again.json"
        main(["calibrate", "--n-tasks", "30", "--n-sims", "2000", "--seed", "1", "--out", str(again)])
        assert again.read_bytes() == thresholds.read_bytes()

    def test_histogram(self, tmp_path):
        hist = tmp_path / "hist.csv"
        main(["calibrate", "--n-tasks", "20", "--n-sims", "1000", "--seed", "0", "--out", str(tmp_path / "t.json"), "--histogram", str(hist)])
        got = rows(hist)
        assert {r["archetype"] for r in got} == {"pc", "rp", "rg"}


class TestSimulate:
    def test_paper_mix_size(self, tmp_path):
        out = tmp_path / "paper.csv"
        assert main(["simulate", "--mix", "paper", "--seed", "0", "--out", str(out)]) == 0
        assert len(rows(out)) == 9600

    def test_seed_printed_and_reproducible(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("CROWDQC_SEED", raising=False)
        a = tmp_path / "a.csv"
        main(["simulate", "--n-workers", "20", "--n-tasks", "10", "--out", str(a)])
        seed = int(capsys.readouterr().err.split("seed:")[1].split()[0])
        b = tmp_path / "b.csv"
        main(["simulate", "--n-workers", "20", "--n-tasks", "10", "--seed", str(seed), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_env_seed(self, monkeypatch):
        monkeypatch.setenv("CROWDQC_SEED", "77")
        assert resolve_seed(None) == 77
        assert resolve_seed(5) == 5


class TestSweep:
    def test_row_count(self, tmp_path):
        out = tmp_path / "sweep.csv"
        args = ["sweep", "--n-workers", "20", "--n-tasks", "20", "--seed", "1", "--out", str(out)]
        assert main(args) == 0
        got = rows(out)
        assert len(got) == 21
        assert {r["archetype"] for r in got} == {"primary_choice(0)", "repeated_pattern", "random_guessing"}


class TestDetect:
    def test_clean_input_stops(self, workdir, thresholds, tmp_path):
        clean = workdir / "clean.csv"
        main(["simulate", "--n-workers", "50", "--n-tasks", "30", "--seed", "4", "--out", str(clean)])
        out = tmp_path / "clean_out"
        code = main(["detect", str(clean), "--thresholds", str(thresholds), "--out-dir", str(out), "--seed", "0"])
        assert code == 3
        report = json.loads((out / "report.json").read_text())
        assert report["spammer_index"] < 0.10 and report["final_spammers"] == []

    def test_lowered_gate(self, dirty_csv, thresholds, tmp_path):
        out = tmp_path / "dirty_out"
        code = main(
            ["detect", str(dirty_csv), "--thresholds", str(thresholds), "--si-threshold", "0", "--out-dir", str(out), "--seed", "0"]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["final_spammers"]
        for name in ("risk.csv", "deviance.csv", "deviance_plot.csv", "akld.csv"):
            assert (out / name).exists()
        plot = rows(out / "deviance_plot.csv")
        idx = [int(r["worker_index"]) for r in plot]
        # Only workers without a behaviour match reach the deletion stage.
        assert idx == sorted(idx) and idx[0] >= 1 and idx[-1] <= 50

    def test_missing_cache_is_usage_error(self, dirty_csv, tmp_path):
        assert main(["detect", str(dirty_csv), "--out-dir", str(tmp_path / "x"), "--seed", "0"]) == 2


def test_score(dirty_csv, thresholds, tmp_path):
    out = tmp_path / "score.csv"
    assert main(["score", str(dirty_csv), "--thresholds", str(thresholds), "--out", str(out)]) == 0
    got = rows(out)
    assert len(got) == 150
    pc = [r for r in got if r["worker_id"] == "5" and r["matched"] == "true"]
    assert pc and pc[0]["archetype"].startswith("primary_choice")


def test_fit(dirty_csv, tmp_path, capsys):
    out = tmp_path / "fit.json"
    assert main(["fit", str(dirty_csv), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert 0 <= doc["spammer_index"] <= 1
