"""P1 finite elements: spaces, quadrature, assembly, stabilization, norms.

All operators act on the interior degrees of freedom (homogeneous Dirichlet
data is eliminated), but assembled operators keep the full all-vertex matrix
so the discrete maximum principle can be checked with complete row
information, including the eliminated boundary columns.

Quadrature is the lowest-order rule that integrates products of two P1
functions exactly: the 3-point edge-midpoint rule on triangles and 2-point
Gauss on intervals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, element_measures, metrics, prolong_map

ScalarField = Union[None, float, int, np.ndarray, Callable]
VectorField = Union[None, float, int, np.ndarray, Callable]

# 2D: values of the three barycentric coordinates at the three edge midpoints
_TRI_BASIS_AT_QP = np.array([
    [0.5, 0.5, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
])
# 1D: 2-point Gauss on the reference interval [0, 1]
_GAUSS2 = 0.5 + 0.5 / np.sqrt(3.0) * np.array([-1.0, 1.0])
_SEG_BASIS_AT_QP = np.column_stack([1.0 - _GAUSS2, _GAUSS2])

# degree-4 rules, used only for errors against smooth reference functions
_GAUSS4_PTS = 0.5 + 0.5 * np.array([-0.8611363115940526, -0.3399810435848563,
                                    0.3399810435848563, 0.8611363115940526])
_GAUSS4_WTS = 0.5 * np.array([0.3478548451374538, 0.6521451548625461,
                              0.6521451548625461, 0.3478548451374538])
_DUNAVANT4_BARY = np.array([
    [0.108103018168070, 0.445948490915965, 0.445948490915965],
    [0.445948490915965, 0.108103018168070, 0.445948490915965],
    [0.445948490915965, 0.445948490915965, 0.108103018168070],
    [0.816847572980459, 0.091576213509771, 0.091576213509771],
    [0.091576213509771, 0.816847572980459, 0.091576213509771],
    [0.091576213509771, 0.091576213509771, 0.816847572980459],
])
_DUNAVANT4_WTS = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)


class P1Space:
    """Vertex-based P1 space over the interior vertices of a mesh.

    Caches the element geometry needed by assembly: basis gradients (constant
    per element), element volumes, and the quadrature points and weights.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.interior_dofs = mesh.interior_vertices
        self.n_dofs = len(self.interior_dofs)
        self.full_to_dof = np.full(mesh.n_vertices, -1, dtype=int)
        self.full_to_dof[self.interior_dofs] = np.arange(self.n_dofs)
        self.volumes = element_measures(mesh)
        if np.any(self.volumes <= 0):
            raise ValueError("degenerate element (zero measure)")
        self.grads = self._basis_gradients()
        self.basis_at_qp = _SEG_BASIS_AT_QP if mesh.dim == 1 else _TRI_BASIS_AT_QP
        self.quad_points = np.einsum(
            "qi,eid->eqd", self.basis_at_qp, mesh.vertices[mesh.elements])
        nq = self.basis_at_qp.shape[0]
        self.quad_weights = np.repeat(self.volumes[:, None] / nq, nq, axis=1)
        self.h_per_element = metrics(mesh).h_per_element
        self._mass = None
        self._h1 = None

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def n_quad(self) -> int:
        return self.basis_at_qp.shape[0]

    def _basis_gradients(self):
        v, e = self.mesh.vertices, self.mesh.elements
        nel = self.mesh.n_elements
        if self.mesh.dim == 1:
            h = (v[e[:, 1], 0] - v[e[:, 0], 0])
            g = np.empty((nel, 2, 1))
            g[:, 0, 0] = -1.0 / h
            g[:, 1, 0] = 1.0 / h
            return g
        d1 = v[e[:, 1]] - v[e[:, 0]]
        d2 = v[e[:, 2]] - v[e[:, 0]]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        g = np.empty((nel, 3, 2))
        g[:, 1, 0] = d2[:, 1] / det
        g[:, 1, 1] = -d2[:, 0] / det
        g[:, 2, 0] = -d1[:, 1] / det
        g[:, 2, 1] = d1[:, 0] / det
        g[:, 0] = -g[:, 1] - g[:, 2]
        return g

    def full_vector(self, field: "NodalField") -> np.ndarray:
        out = np.zeros(self.mesh.n_vertices)
        out[self.interior_dofs] = field.values
        return out

    def gradient_per_element(self, full_values: np.ndarray) -> np.ndarray:
        """Gradient of the P1 function with the given all-vertex coefficients."""
        return np.einsum("eid,ei->ed", self.grads,
                         full_values[self.mesh.elements])

    def at_quadrature(self, full_values: np.ndarray) -> np.ndarray:
        """Point values of the P1 function at the quadrature points."""
        return np.einsum("qi,ei->eq", self.basis_at_qp,
                         full_values[self.mesh.elements])

    def mass_operator(self) -> "SparseOperator":
        if self._mass is None:
            self._mass = assemble_mass(self)
        return self._mass

    def h1_operator(self) -> "SparseOperator":
        """Operator of the full H1 inner product (mass + unit stiffness)."""
        if self._h1 is None:
            stiff = assemble_stiffness(self, nu=1.0, stab=None)
            mass = self.mass_operator()
            self._h1 = SparseOperator(matrix=(mass.matrix + stiff.matrix).tocsr(),
                                      full=(mass.full + stiff.full).tocsr(),
                                      space=self, symmetric=True)
        return self._h1


@dataclass(eq=False)
class NodalField:
    """Coefficients over the interior dofs; boundary values are implicitly 0."""

    space: P1Space
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.space.n_dofs,):
            raise ValueError("coefficient vector does not match the space")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("nonfinite nodal values")

    @classmethod
    def zeros(cls, space: P1Space) -> "NodalField":
        return cls(space, np.zeros(space.n_dofs))

    def full(self) -> np.ndarray:
        return self.space.full_vector(self)

    def copy(self) -> "NodalField":
        return NodalField(self.space, self.values.copy())


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """Square operator over interior dofs, with the full all-vertex matrix
    retained for full-row diagnostics (DMP row sums, transposes)."""

    matrix: sp.csr_matrix
    full: sp.csr_matrix
    space: P1Space
    symmetric: bool = False

    @property
    def shape(self):
        return self.matrix.shape

    def transpose(self) -> "SparseOperator":
        return SparseOperator(matrix=self.matrix.T.tocsr(),
                              full=self.full.T.tocsr(),
                              space=self.space, symmetric=self.symmetric)

    def __add__(self, other: "SparseOperator") -> "SparseOperator":
        if self.shape != other.shape:
            raise ValueError("operator dimension mismatch")
        return SparseOperator(matrix=(self.matrix + other.matrix).tocsr(),
                              full=(self.full + other.full).tocsr(),
                              space=self.space,
                              symmetric=self.symmetric and other.symmetric)


class StabilizationMode(Enum):
    NONE = "none"
    ISOTROPIC_ARTIFICIAL_DIFFUSION = "isotropic_artificial_diffusion"


@dataclass(frozen=True)
class Stabilization:
    """Isotropic artificial diffusion d_K * I with d_K = sigma * L_H * h_K."""

    mode: StabilizationMode
    sigma: float
    d_per_element: np.ndarray

    @classmethod
    def none(cls, space: P1Space) -> "Stabilization":
        return cls(StabilizationMode.NONE, 0.0,
                   np.zeros(space.mesh.n_elements))


def build_stabilization(space: P1Space, l_h: float, sigma: float) -> Stabilization:
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0.0:
        return Stabilization.none(space)
    d = sigma * l_h * space.h_per_element
    return Stabilization(StabilizationMode.ISOTROPIC_ARTIFICIAL_DIFFUSION,
                         sigma, d)


def _scatter(space: P1Space, local: np.ndarray):
    """Scatter per-element (d+1)x(d+1) blocks; returns (full, interior) csr."""
    e = space.mesh.elements
    npe = e.shape[1]
    rows = np.repeat(e, npe, axis=1).ravel()
    cols = np.tile(e, npe).ravel()
    nv = space.mesh.n_vertices
    full = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
    full.sum_duplicates()
    idx = space.interior_dofs
    matrix = full[idx][:, idx].tocsr()
    return full, matrix


def sample_scalar(space: P1Space, f: ScalarField) -> Optional[np.ndarray]:
    """Scalar field samples at the quadrature points, shape (nel, nq).

    Accepts None (treated as zero), a number, a precomputed (nel, nq) array,
    or a callable taking points of shape (P, d).
    """
    if f is None:
        return None
    shape = (space.mesh.n_elements, space.n_quad)
    if callable(f):
        pts = space.quad_points.reshape(-1, space.dim)
        vals = np.asarray(f(pts), dtype=float)
        return vals.reshape(shape)
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 0:
        return np.full(shape, float(arr))
    if arr.shape == shape:
        return arr
    raise ValueError(f"cannot interpret scalar field with shape {arr.shape}")


def sample_vector(space: P1Space, f: VectorField) -> Optional[np.ndarray]:
    """Vector field samples at quadrature points, shape (nel, nq, d)."""
    if f is None:
        return None
    d = space.dim
    shape = (space.mesh.n_elements, space.n_quad, d)
    if callable(f):
        pts = space.quad_points.reshape(-1, d)
        vals = np.asarray(f(pts), dtype=float)
        return vals.reshape(shape)
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 0:
        if d != 1:
            raise ValueError("scalar given for a vector field with d > 1")
        return np.full(shape, float(arr))
    if arr.shape == (d,):
        return np.broadcast_to(arr, shape).copy()
    if arr.shape == shape:
        return arr
    if arr.shape == (space.mesh.n_elements, d):
        return np.broadcast_to(arr[:, None, :], shape).copy()
    raise ValueError(f"cannot interpret vector field with shape {arr.shape}")


def assemble_stiffness(space: P1Space, nu: float,
                       stab: Optional[Stabilization] = None) -> SparseOperator:
    """Matrix of (A_k grad xi_j, grad xi_i) with A_k = (nu + d_K) I per element."""
    if nu <= 0:
        raise ValueError("diffusion nu must be positive")
    if stab is None:
        stab = Stabilization.none(space)
    if np.any(stab.d_per_element < 0):
        raise ValueError("negative stabilization coefficient")
    coeff = (nu + stab.d_per_element) * space.volumes
    local = np.einsum("e,eid,ejd->eij", coeff, space.grads, space.grads)
    full, matrix = _scatter(space, local)
    return SparseOperator(matrix=matrix, full=full, space=space, symmetric=True)


def assemble_convection(space: P1Space, drift: VectorField,
                        l_h: Optional[float] = None) -> SparseOperator:
    """Matrix of (b . grad xi_j, xi_i) with b sampled at quadrature points."""
    b = sample_vector(space, drift)
    if b is None:
        b = np.zeros((space.mesh.n_elements, space.n_quad, space.dim))
    if l_h is not None:
        bmax = np.sqrt(np.max(np.sum(b * b, axis=2), initial=0.0))
        if bmax > l_h * (1 + 1e-12):
            warnings.warn(f"drift magnitude {bmax:.3e} exceeds L_H={l_h:.3e}",
                          stacklevel=2)
    local = np.einsum("eq,qi,eqd,ejd->eij", space.quad_weights,
                      space.basis_at_qp, b, space.grads)
    full, matrix = _scatter(space, local)
    return SparseOperator(matrix=matrix, full=full, space=space, symmetric=False)


def assemble_mass(space: P1Space) -> SparseOperator:
    local = np.einsum("eq,qi,qj->eij", space.quad_weights,
                      space.basis_at_qp, space.basis_at_qp)
    full, matrix = _scatter(space, local)
    return SparseOperator(matrix=matrix, full=full, space=space, symmetric=True)


def kfp_operator(stiffness: SparseOperator,
                 convection: SparseOperator) -> SparseOperator:
    """Discrete adjoint operator stiffness + convection^T acting on densities.

    (m b, grad w) is the transpose of the convection pairing (b . grad w, m).
    """
    if stiffness.shape != convection.shape:
        raise ValueError("operator dimension mismatch")
    return SparseOperator(
        matrix=(stiffness.matrix + convection.matrix.T).tocsr(),
        full=(stiffness.full + convection.full.T).tocsr(),
        space=stiffness.space, symmetric=False)


def assemble_load(space: P1Space, g0: ScalarField = None,
                  g1: VectorField = None, on_all_vertices: bool = False
                  ) -> np.ndarray:
    """Load vector with entries (g0, xi_i) + (g1, grad xi_i)."""
    nv = space.mesh.n_vertices
    out = np.zeros(nv)
    e = space.mesh.elements
    s0 = sample_scalar(space, g0)
    if s0 is not None:
        contrib = np.einsum("eq,eq,qi->ei", space.quad_weights, s0,
                            space.basis_at_qp)
        np.add.at(out, e, contrib)
    s1 = sample_vector(space, g1)
    if s1 is not None:
        contrib = np.einsum("eq,eqd,eid->ei", space.quad_weights, s1,
                            space.grads)
        np.add.at(out, e, contrib)
    if on_all_vertices:
        return out
    return out[space.interior_dofs]


# spec name for the G = g0 - div g1 pairing
assemble_load_G = assemble_load


def assemble_scalar_samples_load(space: P1Space, samples: np.ndarray,
                                 on_all_vertices: bool = False) -> np.ndarray:
    """Load (s, xi_i) for precomputed quadrature samples s of shape (nel, nq)."""
    return assemble_load(space, g0=samples, on_all_vertices=on_all_vertices)


@dataclass(frozen=True)
class DmpReport:
    """Outcome of the discrete-maximum-principle verification.

    ``m_matrix`` is the classical sufficient criterion: nonpositive
    off-diagonal entries, positive diagonal, and nonnegative full row sums
    (boundary columns included).  When the sign condition fails and the
    system is small enough, an exact inverse-positivity certificate is
    computed instead; ``passed`` is true if either check certifies the DMP.
    """

    sign_ok: bool
    diag_ok: bool
    row_sum_ok: bool
    worst_offdiag: float
    min_diag: float
    worst_row_sum: float
    exact_checked: bool
    exact_ok: bool
    n_dofs: int

    @property
    def m_matrix(self) -> bool:
        return self.sign_ok and self.diag_ok and self.row_sum_ok

    @property
    def passed(self) -> bool:
        return self.m_matrix or self.exact_ok

    @property
    def violation(self) -> float:
        """Magnitude of the worst M-criterion violation (0 when it holds)."""
        v = 0.0
        if not self.sign_ok:
            v = max(v, self.worst_offdiag)
        if not self.row_sum_ok:
            v = max(v, -self.worst_row_sum)
        if not self.diag_ok:
            v = max(v, -self.min_diag if self.min_diag <= 0 else 0.0)
        return v


def verify_dmp(op: SparseOperator, space: P1Space, tol_sign: float = 1e-12,
               exact_cap: int = 2500) -> DmpReport:
    """Check sufficient conditions for inverse positivity of the operator.

    Conditions: (a) off-diagonal entries <= +tol, (b) positive diagonal,
    (c) full row sums (recomputed with the eliminated boundary columns)
    >= -tol.  A pass certifies the DMP via the M-matrix criterion.  If the
    sign condition fails and the interior block has at most ``exact_cap``
    dofs, the inverse is computed and checked entrywise, which decides the
    DMP exactly; structured right-triangle meshes need this route because
    Galerkin convection carries small positive couplings across cell
    diagonals that no isotropic stabilization can cancel.
    """
    a = op.matrix.tocoo()
    scale = 1.0 + (np.abs(a.data).max() if a.nnz else 0.0)
    tol = tol_sign * scale
    off = a.data[a.row != a.col]
    worst_off = float(off.max()) if off.size else 0.0
    sign_ok = worst_off <= tol
    diag = op.matrix.diagonal()
    min_diag = float(diag.min()) if diag.size else 0.0
    diag_ok = min_diag > 0.0
    row_sums = np.asarray(
        op.full[space.interior_dofs].sum(axis=1)).ravel()
    worst_row = float(row_sums.min()) if row_sums.size else 0.0
    row_ok = worst_row >= -tol
    exact_checked = False
    exact_ok = False
    if not (sign_ok and diag_ok and row_ok) and op.shape[0] <= exact_cap:
        exact_checked = True
        try:
            inv = np.linalg.inv(op.matrix.toarray())
            exact_ok = bool(inv.min() >= -1e-12 * (1.0 + np.abs(inv).max()))
        except np.linalg.LinAlgError:
            exact_ok = False
    return DmpReport(sign_ok=sign_ok, diag_ok=diag_ok, row_sum_ok=row_ok,
                     worst_offdiag=worst_off, min_diag=min_diag,
                     worst_row_sum=worst_row, exact_checked=exact_checked,
                     exact_ok=exact_ok, n_dofs=op.shape[0])


def l2_norm(field: NodalField) -> float:
    m = field.space.mass_operator().matrix
    return float(np.sqrt(max(field.values @ (m @ field.values), 0.0)))


def h1_norm(field: NodalField) -> float:
    a = field.space.h1_operator().matrix
    return float(np.sqrt(max(field.values @ (a @ field.values), 0.0)))


def error_between(coarse: NodalField, fine: NodalField) -> tuple[float, float]:
    """(L2, H1) norms of the difference of two nested P1 fields.

    The coarse field is prolonged exactly onto the fine mesh, so the
    difference is a P1 function there and the quadrature is exact.
    """
    if coarse.space.mesh is fine.space.mesh:
        diff = NodalField(fine.space, coarse.values - fine.values)
        return l2_norm(diff), h1_norm(diff)
    p = prolong_map(coarse.space.mesh, fine.space.mesh)
    e_full = p @ coarse.full() - fine.full()
    diff = NodalField(fine.space, e_full[fine.space.interior_dofs])
    return l2_norm(diff), h1_norm(diff)


def error_vs_function(field: NodalField, exact: Callable,
                      exact_grad: Callable) -> tuple[float, float]:
    """(L2, H1) errors against a smooth reference, via a degree-4 rule."""
    space = field.space
    mesh = space.mesh
    if mesh.dim == 1:
        bary = np.column_stack([1.0 - _GAUSS4_PTS, _GAUSS4_PTS])
        wts = _GAUSS4_WTS
    else:
        bary = _DUNAVANT4_BARY
        wts = _DUNAVANT4_WTS
    pts = np.einsum("qi,eid->eqd", bary, mesh.vertices[mesh.elements])
    w = space.volumes[:, None] * wts[None, :]
    vals = field.full()[mesh.elements]
    uh = np.einsum("qi,ei->eq", bary, vals)
    guh = np.einsum("eid,ei->ed", space.grads, vals)
    flat = pts.reshape(-1, mesh.dim)
    ue = np.asarray(exact(flat)).reshape(uh.shape)
    ge = np.asarray(exact_grad(flat)).reshape(pts.shape)
    l2_sq = float(np.sum(w * (ue - uh) ** 2))
    semi_sq = float(np.sum(w[:, :, None] * (ge - guh[:, None, :]) ** 2))
    return np.sqrt(l2_sq), np.sqrt(l2_sq + semi_sq)


def write_field_csv(field: NodalField, path) -> None:
    """Vertex table (vertex_id, coordinates, value) with boundary zeros."""
    mesh = field.space.mesh
    full = field.full()
    cols = ["x", "y"][:mesh.dim]
    with open(path, "w") as fh:
        fh.write("vertex_id," + ",".join(cols) + ",value\n")
        for i in range(mesh.n_vertices):
            coords = ",".join(f"{c:.16e}" for c in mesh.vertices[i])
            fh.write(f"{i},{coords},{full[i]:.16e}\n")
