import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mfgfem import (CouplingF, CouplingKind, DomainTag, P1Space,
                    PolyhedralHamiltonian, SourceG, build_structured,
                    refine_uniform)


def mesh_level(domain: DomainTag, level: int, base_n: int | None = None):
    """Level-k mesh: the structured base refined k times."""
    if base_n is None:
        base_n = 2 if domain == DomainTag.L_SHAPE else 1
    mesh = build_structured(domain, base_n)
    for _ in range(level):
        mesh = refine_uniform(mesh)
    return mesh


@pytest.fixture(scope="session")
def square_chain():
    chain = [build_structured(DomainTag.UNIT_SQUARE, 1)]
    for _ in range(6):
        chain.append(refine_uniform(chain[-1]))
    return chain


@pytest.fixture(scope="session")
def interval_chain():
    chain = [build_structured(DomainTag.UNIT_INTERVAL, 1)]
    for _ in range(8):
        chain.append(refine_uniform(chain[-1]))
    return chain


@pytest.fixture(scope="session")
def abs_hamiltonian():
    """H(x, p) = |p| in one dimension."""
    return PolyhedralHamiltonian([(1.0, 0.0), (-1.0, 0.0)])


@pytest.fixture(scope="session")
def axes_hamiltonian():
    """Max over the four axis drifts in two dimensions, zero costs."""
    return PolyhedralHamiltonian([((1.0, 0.0), 0.0), ((-1.0, 0.0), 0.0),
                                  ((0.0, 1.0), 0.0), ((0.0, -1.0), 0.0)])


@pytest.fixture(scope="session")
def linear_coupling():
    return CouplingF(CouplingKind.LOCAL_LINEAR, kappa=1.0)


@pytest.fixture(scope="session")
def unit_source():
    return SourceG(g0=1.0)
