"""TMLE of variable-importance parameters on unequal-probability survey sub-samples."""

from .data import BINARY, CONTINUOUS, Dataset, InclusionPlan, SamplingFunction, WeightedSample, ht_integral
from .design import PilotResult, asymptotic_variance, optimal_h, run_pilot
from .exceptions import (
    EstimationError,
    InputError,
    OracleFailure,
    PositivityError,
    RejectiveInfeasible,
    SurveyTmleError,
)
from .io import format_metrics, format_report, load_dataset, read_h_file, to_json, write_h_file
from .oracles import run_oracles, validate
from .report import TmleReport, confidence_interval
from .rng import make_rng
from .sampling import (
    draw_sample,
    exact_rejective_design,
    make_plan,
    pareto_sample,
    poisson_sample,
    rejective_sample,
)
from .simulation import DgpSpec, StudyConfig, StudyMetrics, draw_dataset, run_study, true_psi_c
from .tmle_binary import BinaryTMLE, estimate_binary
from .tmle_continuous import ContinuousTMLE, estimate_continuous, psi_c_ratio

__version__ = "0.1.0"

__all__ = [
    "BINARY", "CONTINUOUS", "Dataset", "InclusionPlan", "SamplingFunction", "WeightedSample", "ht_integral",
    "PilotResult", "asymptotic_variance", "optimal_h", "run_pilot",
    "EstimationError", "InputError", "OracleFailure", "PositivityError", "RejectiveInfeasible", "SurveyTmleError",
    "format_metrics", "format_report", "load_dataset", "read_h_file", "to_json", "write_h_file",
    "run_oracles", "validate", "TmleReport", "confidence_interval", "make_rng",
    "draw_sample", "exact_rejective_design", "make_plan", "pareto_sample", "poisson_sample", "rejective_sample",
    "DgpSpec", "StudyConfig", "StudyMetrics", "draw_dataset", "run_study", "true_psi_c",
    "BinaryTMLE", "estimate_binary", "ContinuousTMLE", "estimate_continuous", "psi_c_ratio",
]
