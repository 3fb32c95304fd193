import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crowdqc.core import Dataset, ResponseRecord, ResponseScale
from crowdqc.errors import (
    AllZeroComponents,
    DegenerateCategoryWarning,
    InsufficientRaters,
    ScaleMismatch,
)
from crowdqc.glrm import (
    NominalVarianceComponents,
    VarianceComponents,
    fit_binary_glrm,
    fit_glrm,
    fit_nominal_glrm,
    fit_ordinal_glrm,
    fleiss_kappa,
    icc_fixed_error,
    spammer_index,
    spammer_index_nominal,
)
from crowdqc.glrm import fleiss_kappa_counts
from crowdqc.simulate import SimConfig, paper_mix, simulate_credible, simulate_multiclass

VC = VarianceComponents
components = st.floats(0, 100, allow_nan=False)


class TestSpammerIndex:
    @pytest.mark.parametrize(
        "vc, expected",
        [((1, 1, 1), 1 / 3), ((0, 5, 2), 0.0), ((0.2, 2.8, 0.33), 0.2 / 3.33)],
    )
    def test_values(self, vc, expected):
        assert spammer_index(VC(*vc)) == pytest.approx(expected, abs=1e-5)

    def test_all_zero(self):
        with pytest.raises(AllZeroComponents):
            spammer_index(VC(0, 0, 0))

    @given(components, components, components, st.floats(1e-3, 1e3))
    def test_scale_invariant(self, a, b, c, k):
        if a + b + c < 1e-6:
            return
        assert spammer_index(VC(a, b, c)) == pytest.approx(spammer_index(VC(a, b, c).scaled(k)), rel=1e-9, abs=1e-12)

    @given(components, components, components, st.floats(0, 10))
    def test_monotone_in_worker_variance(self, a, b, c, extra):
        if a + b + c < 1e-6:
            return
        si = spammer_index(VC(a, b, c))
        assert 0 <= si <= 1
        assert spammer_index(VC(a + extra, b, c)) >= si - 1e-12
        assert spammer_index(VC(a, b + extra, c)) <= si + 1e-12

    def test_worker_only(self):
        assert spammer_index(VC(2, 0, 0)) == 1.0

    @pytest.mark.parametrize(
        "cats, expected",
        [
            ([(1, 1, 1), (1, 1, 1)], 1 / 3),
            ([(0, 1, 1), (0, 2, 2)], 0.0),
            ([(1, 1, 0), (1, 0, 1)], 0.5),
        ],
    )
    def test_nominal(self, cats, expected):
        assert spammer_index_nominal(NominalVarianceComponents(tuple(VC(*c) for c in cats))) == pytest.approx(expected)


class TestBaselines:
    @pytest.mark.parametrize(
        "vc, expected",
        [((1, 1, 1), 1 / (3 + math.pi ** 2 / 3)), ((0, 1, 1), 0.0), (((math.pi ** 2 / 3) * 3, 0, 0), 0.75)],
    )
    def test_icc(self, vc, expected):
        assert icc_fixed_error(VC(*vc)) == pytest.approx(expected, abs=1e-5)

    def test_fleiss_alternating(self):
        assert fleiss_kappa_counts(np.tile([[2, 2]], (10, 1))) == pytest.approx(-1 / 3)

    def test_fleiss_reference_table(self):
        # Ten subjects, fourteen raters, five categories; kappa = 0.210.
        counts = [
            [0, 0, 0, 0, 14],
            [0, 2, 6, 4, 2],
            [0, 0, 3, 5, 6],
            [0, 3, 9, 2, 0],
            [2, 2, 8, 1, 1],
            [7, 7, 0, 0, 0],
            [3, 2, 6, 3, 0],
            [2, 5, 3, 2, 2],
            [6, 5, 2, 1, 0],
            [0, 2, 2, 3, 7],
        ]
        assert fleiss_kappa_counts(counts) == pytest.approx(0.210, abs=5e-4)

    def test_fleiss_perfect_agreement(self):
        recs = [ResponseRecord(f"w{i}", f"t{j}", j % 2) for i in range(4) for j in range(6)]
        assert fleiss_kappa(Dataset.from_records(ResponseScale.binary(), recs)) == 1.0

    def test_fleiss_single_rater(self):
        with pytest.raises(InsufficientRaters):
            fleiss_kappa_counts([[1, 0]])


def grid(n_workers, n_tasks, fn, scale=None):
    scale = scale or ResponseScale.binary()
    recs = [ResponseRecord(f"w{i}", f"t{j}", int(fn(i, j))) for i in range(n_workers) for j in range(n_tasks)]
    return Dataset.from_records(scale, recs)


class TestBinaryFit:
    def test_identical_workers(self):
        rng = np.random.default_rng(0)
        answers = rng.integers(0, 2, 30)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            f = fit_binary_glrm(grid(20, 30, lambda i, j: answers[j]))
        assert f.vc.sigma2_workers < 1e-3

    def test_pure_noise(self):
        d = simulate_credible(SimConfig(40, 30, vc=VC(0, 0, 0), seed=1, calibrate_accuracy=False))
        f = fit_binary_glrm(d)
        assert max(f.vc.as_tuple()) < 0.05
        assert abs(f.intercept) < 0.1

    def test_recovery_single_seed(self):
        truth = VC(0.25, 4.0, 0.25)
        fits = [
            fit_binary_glrm(simulate_credible(SimConfig(150, 80, vc=truth, seed=s, calibrate_accuracy=False)))
            for s in range(3)
        ]
        # One observation per cell leaves the interaction variance confounded
        # with the logistic residual, so only the two main effects are checked.
        for name in ("sigma2_workers", "sigma2_tasks"):
            got = np.median([getattr(f.vc, name) for f in fits])
            assert got == pytest.approx(getattr(truth, name), rel=0.30)
        assert np.median([f.spammer_index for f in fits]) == pytest.approx(0.25 / 4.5, abs=0.03)

    def test_invariants(self):
        d = simulate_credible(SimConfig(30, 20, seed=4))
        f = fit_binary_glrm(d)
        assert f.loglik <= 0
        assert f.ranef_modes.workers.shape == (30,)
        assert f.ranef_modes.tasks.shape == (20,)
        assert f.ranef_modes.interactions.shape == (600,)
        assert f.converged

    def test_rejects_multiclass(self):
        with pytest.raises(ScaleMismatch):
            fit_binary_glrm(simulate_multiclass(SimConfig(10, 8, scale=ResponseScale.nominal(3), seed=0)))

    @pytest.mark.slow
    def test_recovery_median_over_seeds(self):
        truth = VC(0.25, 4.0, 0.25)
        si = [
            fit_binary_glrm(simulate_credible(SimConfig(150, 80, vc=truth, seed=s, calibrate_accuracy=False))).spammer_index
            for s in range(20)
        ]
        assert np.median(si) == pytest.approx(spammer_index(truth), abs=0.02)


class TestOrdinalFit:
    @pytest.fixture(scope="class")
    @classmethod
    def fit(cls):
        return fit_ordinal_glrm(simulate_multiclass(SimConfig(60, 40, scale=ResponseScale.ordinal(5), seed=2)))

    def test_thresholds_increasing(self, fit):
        assert np.all(np.diff(fit.thresholds) > 0)

    def test_task_dominated(self, fit):
        assert fit.spammer_index < 0.10

    def test_thresholds_roughly_antisymmetric(self, fit):
        r = fit.thresholds
        assert abs(r[0] + r[-1]) < 0.1 * (r[-1] - r[0])

    def test_unobserved_category(self):
        d = grid(8, 8, lambda i, j: (i * j + i + j) % 2, scale=ResponseScale.ordinal(3))
        with pytest.warns(DegenerateCategoryWarning):
            f = fit_ordinal_glrm(d)
        assert f.notes and np.all(np.diff(f.thresholds) > 0)


class TestNominalFit:
    def test_binary_rejected(self):
        with pytest.raises(ScaleMismatch, match="fit_binary_glrm"):
            fit_nominal_glrm(grid(4, 4, lambda i, j: (i + j) % 2))

    def test_spammers_raise_index(self):
        scale = ResponseScale.nominal(3)
        clean = fit_glrm(simulate_multiclass(SimConfig(60, 40, scale=scale, seed=3)))
        dirty = fit_glrm(simulate_multiclass(SimConfig(60, 40, scale=scale, seed=3, spammer_mix=paper_mix())))
        assert dirty.spammer_index > clean.spammer_index
        assert len(clean.components) == 2

    def test_agreed_category_has_no_worker_share(self):
        # Category 2 is given by everyone on every fourth task and by no one elsewhere.
        noise = np.random.default_rng(1).integers(0, 2, (30, 40))
        d = grid(30, 40, lambda i, j: 2 if j % 4 == 0 else noise[i, j], scale=ResponseScale.nominal(3))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            f = fit_nominal_glrm(d)
        assert spammer_index(f.vc.per_category[1]) < 1e-3
