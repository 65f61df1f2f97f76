"""walklab: a numerical laboratory for random walks on finitely generated groups.

Measures convolution powers, word metrics, Markov operators and their
exponentially weighted perturbations, and fits the decay laws they obey
on concrete discrete groups.
"""

__version__ = "0.1.0"

from .centering import (
    CenteringResult,
    center_decompose,
    is_centered,
    moment_vector,
    verify_conjugation,
)
from .density import (
    Density,
    DensitySequence,
    PowerCache,
    adjoint,
    adjoint_and_symmetrize,
    check_assumptions,
    convolve,
    delta,
    power,
    power_sequence,
)
from .groups import (
    CyclicGroup,
    FreeGroup,
    GroupContext,
    Heisenberg3,
    Lamplighter,
    ProductGroup,
    SymmetricGroup,
    ZdGroup,
    abelianize,
    ball,
    growth_fit,
    make_group,
    set_distance,
    word_metric,
)
from .operators import (
    Compose,
    Cutoff,
    Diff,
    GFunction,
    IdentityOp,
    InhomProduct,
    NormEstimate,
    PowerOp,
    PredicateSet,
    SemigroupOp,
    SumOp,
    TOp,
    TPerturbed,
    Translation,
    WeightFn,
    apply_expr,
    conv_kernel,
    delta_minorant,
    gradient,
    in_lambda_delta,
    inhomogeneous_apply,
    norm_restricted,
    numerical_range_sample,
    quadratic_forms,
    semigroup_apply,
    set_to_set_norm,
    t_adjoint,
)
from .oracles import MatrixOracle, MultiplierOracle
from .reporting import FitReport
