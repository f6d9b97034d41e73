"""Constant-rate SGD with momentum, an inner-product convergence diagnostic and an automatic step-decay schedule."""
from .core import (CompensatedSum, DegenerateInput, DivergenceError, HyperParams, InsufficientData,
                   InvalidArgument, RngStream, RunRecord, SgdmError, UnsupportedError, cosine_similarity, dot)
from .diagnostic import DiagnosticConfig, DiagnosticState, run_with_diagnostic
from .optimizer import OptimizerState, set_momentum, sgdm_step
from .problems import (Dataset, LossModel, MiniBatch, gen_logistic, gen_phase_retrieval, gen_quadratic,
                       load_csv, load_idx, loss, stochastic_gradient)
from .schedule import ScheduleConfig, auto_lr, decreasing_lr_baseline

__version__ = "0.1.0"
