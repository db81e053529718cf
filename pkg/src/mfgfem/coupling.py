"""Local strongly monotone couplings F acting on nodal densities.

Two families with exact constants:
  LocalLinear      F[m] = kappa*m + F0,                  L_F = c_F = kappa
  LocalSaturating  F[m] = kappa*m + rho*tanh(m) + F0,    L_F = kappa + rho, c_F = kappa
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import fem
from .fem import NodalField, P1Space, ScalarField


class CouplingKind(Enum):
    LOCAL_LINEAR = "local_linear"
    LOCAL_SATURATING = "local_saturating"


@dataclass(frozen=True)
class CouplingF:
    kind: CouplingKind
    kappa: float
    f0: ScalarField = 0.0
    rho_scale: float = 0.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.rho_scale < 0:
            raise ValueError("rho_scale must be nonnegative")
        if self.kind == CouplingKind.LOCAL_LINEAR and self.rho_scale != 0.0:
            raise ValueError("LocalLinear takes no rho_scale")

    @property
    def lipschitz_constant(self) -> float:
        return self.kappa + self.rho_scale

    @property
    def monotonicity_constant(self) -> float:
        return self.kappa

    def apply(self, m_samples: np.ndarray, f0_samples=None) -> np.ndarray:
        """Pointwise application to density samples; f0_samples are the
        background-cost values at the same points (0 when omitted and the
        coupling has a constant F0 of 0)."""
        out = self.kappa * np.asarray(m_samples, dtype=float)
        if self.kind == CouplingKind.LOCAL_SATURATING:
            out = out + self.rho_scale * np.tanh(m_samples)
        if f0_samples is not None:
            out = out + f0_samples
        return out


def eval_f(coupling: CouplingF, m, space: P1Space | None = None) -> np.ndarray:
    """F[m] sampled at quadrature points.

    ``m`` may be a NodalField (its space is used) or precomputed quadrature
    samples, in which case ``space`` is required to evaluate F0.
    """
    if isinstance(m, NodalField):
        space = m.space
        m_q = space.at_quadrature(m.full())
    else:
        if space is None:
            raise ValueError("space is required for raw density samples")
        m_q = np.asarray(m, dtype=float)
    f0_q = fem.sample_scalar(space, coupling.f0)
    return coupling.apply(m_q, f0_q)


def assemble_f_load(space: P1Space, coupling: CouplingF,
                    m: NodalField) -> np.ndarray:
    """Load vector with entries (F[m], xi_i) over the interior dofs."""
    samples = eval_f(coupling, m, space)
    return fem.assemble_load(space, g0=samples)
