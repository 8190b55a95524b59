"""Multi-Narrow transformation workbench: graph IR, the MN rewrite, budget audits,
a small numpy training engine, data harness, diagnostics and sweep runner."""

from .arch import ArchGraph, GraphError, LayerKind, LayerSpec, PreservationClass, build, validate
from .audit import AuditReport, audit, count_macs, count_params
from .transform import TransformConfig, TransformError, mn_transform, path_count

__version__ = "0.1.0"

__all__ = [
    "ArchGraph",
    "AuditReport",
    "GraphError",
    "LayerKind",
    "LayerSpec",
    "PreservationClass",
    "TransformConfig",
    "TransformError",
    "audit",
    "build",
    "count_macs",
    "count_params",
    "mn_transform",
    "path_count",
    "validate",
]
