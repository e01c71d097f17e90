"""Sub-quadratic attention through kNN retrieval and lazy Gumbel sampling.

The forward estimators live in :mod:`knnattn.forward`, the gradient
estimators in :mod:`knnattn.backward`, and the exact reference
implementations in :mod:`knnattn.oracle`.
"""

from .backward import (
    BackwardConfig,
    ErrorBudget,
    approx_pos_prod,
    estimate_dk,
    estimate_dk_part_a,
    estimate_dk_part_b,
    estimate_dq,
    estimate_dv,
    estimate_gradients,
    estimate_product,
)
from .core import (
    DegenerateWeights,
    GumbelParams,
    InsufficientPopulation,
    MoMConfig,
    RngStream,
    binomial_sample,
    gumbel_sample,
    gumbel_sample_conditional_above,
    median_of_means,
    sample_k_distinct_excluding,
)
from .forward import ApproxOutput, ForwardConfig, choose_parameters, knn_attention, knn_attention_mom, knn_attention_weighted
from .mips import AugmentedKeys, KnnIndex, LshParams, augment_keys, augment_query, build_exact_index, build_lsh_index, query_topk
from .oracle import AttentionProblem, GradientSet, exact_attention, exact_dp, exact_gradients, finite_diff_gradients, prefold_scale
from .sampling import (
    CdfTables,
    ShiftBound,
    SoftmaxRowSampler,
    TopKSet,
    build_cdf_tables,
    cdf_sample,
    expected_spill_count,
    lazy_gumbel_sample,
    retrieve_topk,
    sample_shifted_y,
    shift_bound,
)

__version__ = "0.1.0"
