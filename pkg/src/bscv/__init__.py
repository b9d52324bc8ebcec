"""Bootstrap cross-validation for population PK/PD model selection.

Resampling subjects with replacement yields, per replicate, a training
multiset (about 63.2% of subjects) and the omitted out-of-bag testing
set. Fitting every candidate model on each training set and evaluating
it with fixed parameters on the testing set gives ensembles of summary
statistics; models are ranked by the testing-set medians rather than a
single-realization criterion such as the original-data AIC.
"""

from .data import (
    Channel,
    Covariates,
    Dataset,
    DoseEvent,
    Observation,
    Subject,
    fingerprint,
    parse_dataset,
    serialize_dataset,
    transform_covariate,
)
from .structural import (
    IrmParams,
    IrmVariant,
    MacroConstants,
    Pk1Params,
    Pk2Params,
    irm_derivative,
    pk_one_compartment,
    pk_two_compartment_conc,
    pk_two_compartment_macro,
    solve_irm,
)
from .modelspec import (
    CorrelationBlock,
    CovariateEffect,
    ErrorForm,
    ErrorSpec,
    ModelSpec,
    OmegaEntry,
    OmegaSpec,
    ParameterSpec,
    StructuralKind,
    error_sd,
    individual_parameters,
    load_model_config,
    predict_subject,
)
from .estimate import (
    FitOptions,
    FitResult,
    LlMode,
    TestEvaluation,
    evaluate_fixed,
    fit_population,
    importance_sampling_m2ll,
    laplace_m2ll,
    map_etas,
    sample_conditional,
    sequential_pd_prepare,
)
from .bootstrap import (
    BootstrapReplicate,
    ReplicateStore,
    generate_replicates,
    inclusion_fraction,
    load_store,
    materialize,
    run_model,
    save_store,
)
from .metrics import (
    MetricSet,
    assemble_metric_set,
    eps_shrinkage,
    eps_shrinkage_sim,
    iwres,
    residual_metrics,
    smpq,
    zero_intercept_r2,
)
from .report import (
    MetricEnsemble,
    Ranking,
    ReportConfig,
    aggregate,
    emit_outputs,
    rank_models,
)
from .simulate import SimDesign, simulate_dataset

__version__ = "0.1.0"
