"""
Core package initialization
"""
from core.io_schema import (
    ADDITIVE,
    MULTIPLICATIVE,
    GridMeasure,
    PeacockFamily,
    CallSurface,
    ClampRecord,
    LocalVolSurface,
    MartingaleKernel,
    PathEnsemble,
    HittingRule,
    GalleryProcessSpec,
    Verdict,
    FpSolveConfig,
)
from core.base_process import BaseProcess
from core.exceptions import (
    PeacockLabError,
    ValidationError,
    NumericalError,
    CflError,
    InfeasibleError,
)

__all__ = [
    'ADDITIVE',
    'MULTIPLICATIVE',
    'GridMeasure',
    'PeacockFamily',
    'CallSurface',
    'ClampRecord',
    'LocalVolSurface',
    'MartingaleKernel',
    'PathEnsemble',
    'HittingRule',
    'GalleryProcessSpec',
    'Verdict',
    'FpSolveConfig',
    'BaseProcess',
    'PeacockLabError',
    'ValidationError',
    'NumericalError',
    'CflError',
    'InfeasibleError',
]
