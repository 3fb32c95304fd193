"""Statistical quality evaluation and spammer detection for crowdsourced responses."""

from .chains import (
    ArchetypeKind,
    BehaviorArchetype,
    KldScore,
    Strategy,
    TransitionMatrix,
    classify_worker,
    estimate_transition_matrix,
    kld_row,
    score_worker,
    target_matrix,
)
from .core import (
    Dataset,
    ResponseRecord,
    ResponseScale,
    ScaleKind,
    WorkerSummary,
    parse_dataset,
    population_cutoffs,
    worker_summaries,
)
from .deletion import (
    DeletionConfig,
    DevianceResult,
    chi_squared_upper_quantile,
    deletion_analysis,
    deviance_distance,
)
from .glrm import (
    FitConfig,
    FittedGlrm,
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
from .pipeline import (
    AuxRule,
    PipelineConfig,
    QualityReport,
    RiskAssessment,
    RiskTier,
    apply_auxiliary_filter,
    risk_score,
    run_pipeline,
)
from .simulate import (
    SimConfig,
    ThresholdSet,
    calibrate_thresholds,
    expected_longest_run,
    ks_test,
    paper_mix,
    sensitivity_sweep,
    simulate_contaminated,
    simulate_credible,
    simulate_multiclass,
    simulate_spammer,
)

__version__ = "0.1.0"
