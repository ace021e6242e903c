"""Constrained, cost-aware, multi-fidelity Bayesian optimization.

Any number of data sources are fused in one Gaussian-process emulator with
learned latent source embeddings and per-source noise.  Samples are
allocated across sources by a feasibility-aware acquisition value per unit
cost, and the loop halts automatically once the sequence of constrained
surrogate optima stabilizes.
"""

from .acquisition import (
    AcqContext,
    af_constrained,
    af_hf,
    af_lf,
    composite,
    compute_incumbents,
    propose,
)
from .benchmarks import (
    Problem,
    evaluate,
    get_problem,
    initial_design,
    problem_names,
    register_problem,
    rrmse,
    single_fidelity_variant,
)
from .driver import BoState, RunConfig, RunResult, initial_state, observe, run, step, suggest
from .errors import (
    InvalidInputError,
    NumericalFailureError,
    ProposalFailureError,
    ProtocolError,
    TrainingFailureError,
)
from .gp import GpModel, MeanSpec, TrainConfig, fit, interval_score_values, model_from_params
from .kernel import CategoricalSpec, KernelParams, NuggetVector
from .numopt import BoxBounds, fd_gradient, lbfgs_minimize, multistart, sobol_sample
from .stopping import PaoRecord, StopConfig, final_optimum, normalize_history, run_pao, should_stop
from .types import MfDataset, MixedPoint

__version__ = "0.1.0"

__all__ = [
    "AcqContext", "BoState", "BoxBounds", "CategoricalSpec", "GpModel",
    "InvalidInputError", "KernelParams", "MeanSpec", "MfDataset", "MixedPoint",
    "NuggetVector", "NumericalFailureError", "PaoRecord", "Problem",
    "ProposalFailureError", "ProtocolError", "RunConfig", "RunResult",
    "StopConfig", "TrainConfig", "TrainingFailureError",
    "af_constrained", "af_hf", "af_lf", "composite", "compute_incumbents",
    "evaluate", "fd_gradient", "final_optimum", "fit", "get_problem",
    "initial_design", "initial_state", "interval_score_values",
    "lbfgs_minimize", "model_from_params", "multistart", "normalize_history", "observe",
    "problem_names", "propose", "register_problem", "rrmse", "run", "run_pao",
    "should_stop", "single_fidelity_variant", "sobol_sample", "step", "suggest",
]
