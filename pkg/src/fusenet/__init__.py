"""Fused-lasso co-occurrence network inference for grouped abundance data."""

from .data_model import (
    AbundanceTable,
    PreparedDataset,
    assign_folds,
    balance_groups,
    filter_low_prevalence,
    load_dataset,
    load_table,
    log_transform,
    prepare,
    save_dataset,
    sparsity,
)
from .errors import ConfigError, DataError, FusenetError, NumericalError
from .network import (
    DiffNetwork,
    GroupNetwork,
    build_networks,
    coefficient_matrix,
    diff_network,
    export_network,
    load_network_json,
    recovery_metrics,
    symmetrize,
)
from .sac_cv import (
    ComparisonSummary,
    CvRecord,
    GroupedDesign,
    SacConfig,
    SplitPlan,
    aggregate,
    build_taxon_task,
    enumerate_splits,
    mse,
    paired_compare,
    run_sac,
)
from .solver import (
    FeaturelessFit,
    FusedFit,
    LassoFit,
    cv_fused,
    cv_lasso,
    fit_featureless,
    fit_fused,
    fit_lasso,
    fused_lambda_max,
    fused_objective,
    kkt_residual,
    lasso_kkt_residual,
    lasso_lambda_max,
    load_fit,
    predict,
    save_fit,
)
from .synth import SynthSpec, generate

__version__ = "0.1.0"
