import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from crowdqc.chains import ArchetypeKind, BehaviorArchetype
from crowdqc.core import ResponseScale, worker_summaries
from crowdqc.errors import CalibrationFailure, ScaleMismatch
from crowdqc.glrm import VarianceComponents, fit_binary_glrm
from crowdqc.simulate import (
    SimConfig,
    ThresholdSet,
    akld_samples,
    calibrate_thresholds,
    credible_effects,
    expected_longest_run,
    ks_test,
    paper_mix,
    sensitivity_sweep,
    simulate_contaminated,
    simulate_credible,
    simulate_multiclass,
    simulate_spammer,
)

PC0 = BehaviorArchetype.primary_choice(0)
RP = BehaviorArchetype.repeated_pattern()
RG = BehaviorArchetype.random_guessing()


def runs(seq, value):
    out, n = [], 0
    for x in seq:
        if x == value:
            n += 1
        elif n:
            out.append(n)
            n = 0
    if n:
        out.append(n)
    return out


class TestLongestRun:
    def test_eighty_tasks(self):
        lr = expected_longest_run(80, 0.5)
        assert lr.r == pytest.approx(5.3219, abs=1e-4)
        assert lr.sd == pytest.approx(1.8727, abs=1e-4)
        assert lr.threshold == 10

    def test_two_tasks(self):
        lr = expected_longest_run(2, 0.5)
        assert lr.r == 0.0
        assert lr.threshold == 4

    def test_hundred_sixty_tasks(self):
        lr = expected_longest_run(160, 0.5)
        assert lr.r == pytest.approx(math.log2(80))
        # r is rounded up, as in the 80-task case: 7 + 4.
        assert lr.threshold == 11

    @pytest.mark.parametrize("n, p", [(1, 0.5), (10, 0.0), (10, 1.0)])
    def test_domain(self, n, p):
        with pytest.raises(ValueError):
            expected_longest_run(n, p)


class TestSpammers:
    @given(st.integers(0, 2 ** 32))
    @settings(max_examples=50, deadline=None)
    def test_primary_choice_runs(self, seed):
        seq = simulate_spammer(PC0, 80, seed)
        assert all(r >= 10 for r in runs(seq, 0))
        # Breaks are single responses.
        assert all(r == 1 for r in runs(seq != 0, True))

    def test_primary_choice_multiclass(self):
        seq = simulate_spammer(BehaviorArchetype.primary_choice(2), 200, 1, k=3)
        assert np.bincount(seq, minlength=3).argmax() == 2

    def test_repeated_pattern_switch_rate(self):
        seq = simulate_spammer(RP, 10_000, 0)
        assert np.mean(seq[1:] != seq[:-1]) == pytest.approx(0.8, abs=0.01)

    def test_random_guessing_balance(self):
        seq = simulate_spammer(RG, 10_000, 0)
        assert seq.mean() == pytest.approx(0.5, abs=0.015)

    def test_deterministic(self):
        np.testing.assert_array_equal(simulate_spammer(RP, 50, 9), simulate_spammer(RP, 50, 9))


class TestCredible:
    def test_band_reached(self):
        d = simulate_credible(SimConfig(108, 80, vc=VarianceComponents(0.04, 4.0, 0.04), seed=0))
        acc = np.array([s.accuracy for s in worker_summaries(d)])
        assert 0.75 <= acc.mean() <= 0.90

    def test_no_signal(self):
        with pytest.raises(CalibrationFailure):
            simulate_credible(SimConfig(20, 20, vc=VarianceComponents(0, 0, 0), seed=0))

    def test_expected_accuracy_band(self):
        from crowdqc.simulate import _expected_accuracy

        cfg = SimConfig(108, 80, seed=5)
        eff = credible_effects(cfg)
        acc = _expected_accuracy(cfg, eff.task / eff.multiplier, eff.worker, eff.interaction, eff.multiplier)
        assert np.mean((acc >= 0.75) & (acc <= 0.9)) >= 0.9

    def test_truth_column(self):
        d = simulate_credible(SimConfig(10, 12, seed=2))
        assert d.has_truth and not d.has_durations and d.has_order

    def test_deterministic(self):
        a = simulate_credible(SimConfig(30, 20, seed=42))
        b = simulate_credible(SimConfig(30, 20, seed=42))
        assert a.records == b.records

    def test_multiclass_rejected(self):
        with pytest.raises(ScaleMismatch):
            simulate_credible(SimConfig(10, 10, scale=ResponseScale.ordinal(5)))


class TestContaminated:
    def test_paper_layout(self):
        d = simulate_contaminated(SimConfig(120, 80, spammer_mix=paper_mix(), seed=0))
        assert d.n_records == 9600
        assert d.worker_ids[:12] == [str(i) for i in range(1, 13)]
        for w in map(str, range(5, 9)):
            assert all(r >= 10 for r in runs(d.response_sequence(w), 0))

    def test_zero_spammers_match_credible(self):
        cfg = SimConfig(30, 20, seed=7)
        assert simulate_contaminated(cfg).records == simulate_credible(cfg).records

    def test_credible_rows_unchanged_by_mix(self):
        clean = simulate_credible(SimConfig(30, 20, seed=7))
        dirty = simulate_contaminated(SimConfig(30, 20, seed=7, spammer_mix=((RG, 5),)))
        keep = {str(i) for i in range(6, 31)}
        assert [r for r in clean.records if r.worker_id in keep] == [r for r in dirty.records if r.worker_id in keep]

    def test_all_spammers_raise_index(self):
        clean = fit_binary_glrm(simulate_credible(SimConfig(40, 40, seed=1)))
        mix = ((PC0, 14), (BehaviorArchetype.primary_choice(1), 13), (RP, 13))
        dirty = fit_binary_glrm(simulate_contaminated(SimConfig(40, 40, seed=1, spammer_mix=mix)))
        assert dirty.spammer_index > clean.spammer_index + 0.1

    def test_too_many_spammers(self):
        with pytest.raises(ValueError):
            simulate_contaminated(SimConfig(5, 10, spammer_mix=((RG, 6),)))


class TestMulticlass:
    @pytest.mark.parametrize("scale", [ResponseScale.ordinal(5), ResponseScale.nominal(3)])
    def test_all_categories_used(self, scale):
        d = simulate_multiclass(SimConfig(40, 30, scale=scale, seed=1, spammer_mix=paper_mix()))
        assert set(d.responses) == set(range(scale.num_categories))
        assert d.n_records == 1200

    @pytest.mark.parametrize("scale", [ResponseScale.binary(), ResponseScale.nominal(2)])
    def test_binary_rejected(self, scale):
        with pytest.raises(ScaleMismatch, match="binary"):
            simulate_multiclass(SimConfig(10, 10, scale=scale))


class TestCalibration:
    @pytest.fixture(scope="class")
    @classmethod
    def quick(cls):
        return calibrate_thresholds(80, n_sims=2000, seed=1)

    def test_low_precision_flag(self, quick):
        assert quick.low_precision
        assert not calibrate_thresholds(20, n_sims=10_000, seed=1).low_precision

    def test_random_guessing_cutoff_smallest(self, quick):
        assert quick.beta_rg < min(quick.beta_pc, quick.beta_rp)

    def test_alpha_zero_uses_minimum(self):
        samples = akld_samples(40, n_sims=1000, seed=3)
        thr = calibrate_thresholds(40, alpha=0.0, n_sims=1000, seed=3)
        for kind, (cred, _) in samples.items():
            assert getattr(thr, f"beta_{kind.short}") == pytest.approx(cred.min())
        assert thr.type2_rg > 0.99

    def test_deterministic_json(self, quick):
        again = calibrate_thresholds(80, n_sims=2000, seed=1)
        assert again.to_json() == quick.to_json()

    def test_json_round_trip(self, quick):
        back = ThresholdSet.from_json(quick.to_json())
        assert back == quick
        assert json.loads(quick.to_json())["cache_id"] == quick.cache_id

    def test_seed_changes_cache_id(self, quick):
        assert calibrate_thresholds(80, n_sims=2000, seed=2).cache_id != quick.cache_id

    @pytest.mark.parametrize("kwargs", [{"n_sims": 999}, {"alpha": 1.0}, {"alpha": -0.1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            calibrate_thresholds(80, **kwargs)

    def test_multiclass(self):
        thr = calibrate_thresholds(80, k=3, n_sims=1000, kind="nominal")
        assert thr.k == 3 and thr.kind == "nominal"
        assert thr.beta_rg < thr.beta_rp


class TestKs:
    def test_identical(self):
        x = np.arange(10.0)
        assert ks_test(x, x)[0] == 0.0

    def test_disjoint(self):
        assert ks_test([1, 2, 3], [4, 5, 6])[0] == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_against_scipy(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=300)
        y = rng.normal(0.2, 1.1, size=450)
        ref = stats.ks_2samp(x, y, method="asymp")
        d, p = ks_test(x, y)
        assert d == pytest.approx(ref.statistic, abs=1e-12)
        # Uncorrected limiting distribution of sqrt(nm / (n + m)) * D.
        assert p == pytest.approx(stats.kstwobign.sf(math.sqrt(300 * 450 / 750) * d), rel=1e-9)

    def test_separation_sqrt_akld_quick(self):
        cred, spam = akld_samples(80, n_sims=4000, seed=0)[ArchetypeKind.RANDOM_GUESSING]
        d, p = ks_test(np.sqrt(cred), np.sqrt(spam))
        assert 0.35 < d < 0.55
        assert p < 1e-100


class TestSweep:
    def test_zero_fraction_is_base(self):
        base = SimConfig(40, 30, seed=3)
        (f, si), = sensitivity_sweep(base, RG, [0.0])
        assert si == pytest.approx(fit_binary_glrm(simulate_credible(base)).spammer_index)

    @pytest.mark.slow
    @pytest.mark.parametrize("archetype", [PC0, RP, RG])
    def test_contamination_raises_index(self, archetype):
        gains = []
        for seed in range(3):
            (_, si0), (_, si1) = sensitivity_sweep(SimConfig(100, 80, seed=seed), archetype, [0.0, 0.1])
            gains.append(si1 - si0)
        assert np.median(gains) > 0

    def test_multiclass_rejected(self):
        with pytest.raises(ScaleMismatch):
            sensitivity_sweep(SimConfig(10, 10, scale=ResponseScale.nominal(3)), RG, [0.1])
