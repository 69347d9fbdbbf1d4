"""Selective state space kernel: parameters, discretization, scans, gate traces."""

from vimsvp.ssm.op import selective_scan
from vimsvp.ssm.params import (
    Discretized,
    SelectiveParams,
    SsmLayerWeights,
    compute_selective_params,
    discretize,
    init_ssm_arrays,
    init_ssm_weights,
    ssm_weight_shapes,
)
from vimsvp.ssm.scan import (
    GateTrace,
    extract_gates,
    linear_recurrence_chunked,
    minmax_normalize,
    selective_scan_chunked,
    selective_scan_naive,
)

__all__ = [
    "Discretized", "GateTrace", "SelectiveParams", "SsmLayerWeights", "compute_selective_params",
    "discretize", "extract_gates", "init_ssm_arrays", "init_ssm_weights", "linear_recurrence_chunked",
    "minmax_normalize", "selective_scan", "selective_scan_chunked", "selective_scan_naive",
    "ssm_weight_shapes",
]
