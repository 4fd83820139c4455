"""Model and inner-solver parameter records shared across modules."""

from __future__ import annotations

from dataclasses import dataclass


class ParamError(ValueError):
    """Raised for inadmissible model or solver parameters."""


@dataclass(frozen=True)
class ModelParams:
    """All PDE and scheme constants.

    The product kap1*kap2*eps1*eps2 must be nonzero (all four are required
    positive here); gam1, gam2 may vanish.  ``regime`` classifies m against
    the threshold exponent 2 - 4/d; runs below it are allowed but labeled.
    """

    m: float
    eps1: float
    eps2: float
    kap1: float
    kap2: float
    gam1: float
    gam2: float
    tau: float
    M: float
    d: int

    def __post_init__(self):
        if not self.m > 1.0:
            raise ParamError(f"diffusion exponent must exceed 1, got {self.m}")
        for name in ("eps1", "eps2", "kap1", "kap2", "tau", "M"):
            if not getattr(self, name) > 0.0:
                raise ParamError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("gam1", "gam2"):
            if getattr(self, name) < 0.0:
                raise ParamError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.d < 1:
            raise ParamError(f"dimension must be positive, got {self.d}")

    @property
    def critical_exponent(self) -> float:
        return 2.0 - 4.0 / self.d

    @property
    def regime(self) -> str:
        thr = self.critical_exponent
        if self.m > thr:
            return "subcritical"
        if self.m == thr:
            return "critical"
        return "unsupported-by-theory"


@dataclass(frozen=True)
class InnerSolveConfig:
    """Settings for the Wasserstein proximal inner solver.

    Convergence requires both the relative L1 change of successive density
    iterates below ``tol_update`` and the row-marginal defect below the
    transport config's marginal tolerance.
    """

    max_outer: int = 20000
    tol_update: float = 1e-8
    tol_obj_rel: float = 1e-8

    def __post_init__(self):
        if self.max_outer < 1:
            raise ParamError(f"max_outer must be >= 1, got {self.max_outer}")
