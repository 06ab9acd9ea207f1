"""
Exception hierarchy for the lab.

Library code raises these; only cli.py turns them into exit codes.
"""
from typing import Any, Dict, List, Optional


class PeacockLabError(Exception):
    """Base class for every error raised by the lab"""

    exit_code = 1

    def __init__(self, message: str, payload: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.payload = payload or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self), **self.payload}


class ValidationError(PeacockLabError):
    """
    输入校验失败 (Validation Failure)

    Raised when an input violates an invariant (convexity, convex order,
    grid monotonicity ...). `violations` lists the offending nodes.
    """

    exit_code = 2

    def __init__(self, message: str, violations: Optional[List[Any]] = None,
                 witness: Any = None, payload: Optional[Dict[str, Any]] = None):
        data = dict(payload or {})
        if violations is not None:
            data["violations"] = violations
        if witness is not None:
            data["witness"] = witness
        super().__init__(message, data)
        self.violations = violations or []
        self.witness = witness


class NumericalError(PeacockLabError):
    """Scheme failure, solver failure or any other numerical breakdown"""

    exit_code = 3


class CflError(NumericalError):
    """Explicit scheme refused: max(sigma^2) dt / dx^2 above the limit"""


class InfeasibleError(NumericalError):
    """
    不可行 (Infeasible)

    A martingale coupling or kernel chain does not exist. `certificate`
    holds the convex-order witness.
    """

    def __init__(self, message: str, certificate: Optional[Dict[str, Any]] = None):
        super().__init__(message, {"certificate": certificate or {}})
        self.certificate = certificate or {}
