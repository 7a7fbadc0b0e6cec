"""Active learning of mechanism functions in structural causal models.

The causal graph is known; the per-node mechanisms are not. Gaussian-process
posteriors over the mechanisms turn interventional draws into a belief whose
expected total risk (importance-weighted integrated posterior variance) can
be priced before an intervention is performed. Policies in
:mod:`scmlearn.strategy` pick the next intervention to shrink that risk the
most per unit cost; :mod:`scmlearn.harness` runs seeded comparisons and
writes CSV traces.
"""

from .belief import (
    BeliefState,
    RiskSpec,
    expected_risk_of_estimate,
    expected_total_risk,
    extract_node_data,
    node_risk_contribution,
    sample_predictive,
    sample_predictive_array,
)
from .gp import (
    ConstantPosterior,
    IllConditionedError,
    Kernel,
    NodePosterior,
    RegressionData,
    constant_posterior,
    fit_posterior,
    kernel_eval,
    posterior_mean_var,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    build_candidates,
    load_config,
    parse_config,
    run_experiment,
    summarize,
)
from .metrics import (
    MetricReport,
    PlugInModel,
    evaluate,
    kl_interventional,
    mmd_from_samples,
    mmd_interventional,
    true_total_risk,
)
from .scm import (
    Draw,
    ExpressionError,
    Graph,
    GraphError,
    Intervention,
    InterventionFamily,
    ScmSpec,
    StructuralFunction,
    log_density,
    parse_expression,
    sample_scm,
    sample_scm_array,
    topo_order,
)
from .strategy import (
    POLICIES,
    CandidateSet,
    CostModel,
    DpTables,
    PolicyParams,
    SelectionResult,
    build_dp_tables,
    dp_null_post_risk,
    dp_single_post_risks,
    dp_upstream_post_risks,
    estimate_post_risk_sampling,
    risk_after_datum,
    select_intervention,
    value_of,
)

__version__ = "0.1.0"
