"""Exception types raised by the package."""

import math


class QDPLassoError(Exception):
    """Base class for package errors."""


class DegenerateInputError(QDPLassoError, ValueError):
    """Input is well-formed but numerically degenerate (e.g. all-zero X)."""


class DatasetParseError(QDPLassoError, ValueError):
    """A dataset or ground-truth file could not be parsed."""


class CapabilityError(QDPLassoError):
    """The request exceeds a configured capability limit."""


class GateAbort(QDPLassoError):
    """The examination gate rejected the privacy/oracle-error combination.

    Raised before any data-dependent sampling happens, so nothing is released.
    """

    def __init__(self, l1: float, lam: float, varsigma: float):
        self.l1 = l1
        self.lam = lam
        self.varsigma = varsigma
        super().__init__(
            f"examination gate abort: L1/lambda = {l1 / lam:.6g} >= ln(1/varsigma) = "
            f"{-math.log(varsigma):.6g}; the privacy budget is too small for the oracle "
            f"error, acceptance probabilities would collapse and the sampler is ill-posed"
        )


class MechanismFailure(QDPLassoError):
    """Rejection sampling hit its proposal cap without an accepted index."""

    def __init__(self, m_cap: int, t: int | None = None):
        self.m_cap = m_cap
        self.t = t
        where = f" at iteration t={t}" if t is not None else ""
        super().__init__(f"no index accepted within M={m_cap} proposals{where}")

