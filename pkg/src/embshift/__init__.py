"""Detect, quantify and correct positional-embedding variance shift in ViT pipelines."""

from .tensor import SeededRng, Stats, concat, crop, load_vspe, randn, save_vspe, shuffle, stats
from .interp import Dims, Method, UpsampleSpec, upsample1d, upsample2d
from .varcal import RatioEstimate, measure_k, rescale_pe
from .auditor import AuditReport, PipelineConfig, audit, parse_config, propagate, verify_empirically

__version__ = "0.1.0"
