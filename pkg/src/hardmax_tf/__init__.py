"""Hardmax-attention encoders built by hand from spline and composition-model descriptions."""

from .construct import CapacityError, CompiledHCM, audit_params, compile_hcm
from .encoder import Dims, EncoderParams, count_nonzero, forward, forward_batch, forward_trace, load_params, save_params
from .estimator import AposterioriModel, excess_risk_mc, fit_restricted_ls, sample_data
from .hcm import get_instance
from .splines import TruncPowerBasis, equidistant_basis, eval_tensor_basis, fit_spline_ls

__version__ = "0.1.0"

__all__ = [
    "AposterioriModel",
    "CapacityError",
    "CompiledHCM",
    "Dims",
    "EncoderParams",
    "TruncPowerBasis",
    "audit_params",
    "compile_hcm",
    "count_nonzero",
    "equidistant_basis",
    "eval_tensor_basis",
    "excess_risk_mc",
    "fit_restricted_ls",
    "fit_spline_ls",
    "forward",
    "forward_batch",
    "forward_trace",
    "get_instance",
    "load_params",
    "sample_data",
    "save_params",
]
