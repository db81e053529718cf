"""Nonnegative distributional sources G = g0 - div(g1) for the KFP equation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import fem
from .fem import P1Space, ScalarField, VectorField

logger = logging.getLogger(__name__)


def _is_zero(f) -> bool:
    if f is None:
        return True
    if callable(f):
        return False
    return not np.any(np.asarray(f, dtype=float))


@dataclass(frozen=True)
class SourceG:
    """Source data; g0 must be nonnegative when g1 vanishes.

    With a nonzero g1 the distributional nonnegativity of G cannot be checked
    pointwise; a notice is logged and it remains the caller's responsibility.
    """

    g0: ScalarField = 1.0
    g1: VectorField = None

    def __post_init__(self):
        if not _is_zero(self.g1):
            logger.info("source has a nonzero g1: distributional "
                        "nonnegativity of G is not checked")

    def load_vector(self, space: P1Space) -> np.ndarray:
        """Entries (g0, xi_i) + (g1, grad xi_i); delegates to fem assembly."""
        if _is_zero(self.g1):
            s0 = fem.sample_scalar(space, self.g0)
            if s0 is not None and s0.min() < -1e-12:
                raise ValueError(
                    f"g0 is negative at a quadrature point (min {s0.min():.3e}); "
                    "G must be nonnegative in the sense of distributions")
            return fem.assemble_load(space, g0=s0)
        return fem.assemble_load(space, g0=self.g0, g1=self.g1)


def load_vector(space: P1Space, source: SourceG) -> np.ndarray:
    return source.load_vector(space)
