"""Conforming simplicial meshes with nested uniform refinement.

Supports the unit interval (d=1), the unit square and the L-shaped domain
[0,1]^2 minus (1/2,1]^2 (d=2).  Meshes are immutable; refinement returns a
new mesh that remembers its parent, so coarse P1 functions embed exactly
into fine spaces through :func:`prolong_map`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import scipy.sparse as sp


class DomainTag(Enum):
    UNIT_INTERVAL = "unit_interval"
    UNIT_SQUARE = "unit_square"
    L_SHAPE = "l_shape"


_DOMAIN_MEASURE = {
    DomainTag.UNIT_INTERVAL: 1.0,
    DomainTag.UNIT_SQUARE: 1.0,
    DomainTag.L_SHAPE: 0.75,
}

_GEOM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming simplicial mesh of a polytopal domain.

    vertices : (n_vertices, d) float array
    elements : (n_elements, d+1) int array, positively oriented
    boundary_vertex_flags : bool array marking vertices on the domain boundary
    level : refinement depth (0 for a mesh built by :func:`build_structured`)
    parent : the mesh this one refines, if any
    """

    vertices: np.ndarray
    elements: np.ndarray
    boundary_vertex_flags: np.ndarray
    domain_tag: DomainTag
    level: int = 0
    parent: Optional["Mesh"] = None
    # for vertices created by refinement: indices of the parent edge endpoints
    refined_edges: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def interior_vertices(self) -> np.ndarray:
        return np.nonzero(~self.boundary_vertex_flags)[0]


@dataclass(frozen=True)
class MeshMetrics:
    """Element size and shape quality numbers for one mesh."""

    h_max: float
    h_per_element: np.ndarray
    shape_regularity: float
    max_angle_deg: Optional[float]


def build_structured(domain_tag: DomainTag, n: int) -> Mesh:
    """Build a structured mesh with ``n`` subdivisions per side.

    UnitSquare uses the right-triangle (criss) pattern, 2*n^2 triangles on an
    (n+1)^2 grid.  LShape tiles the three retained quadrant cells the same
    way and therefore requires even ``n`` so the reentrant corner lies on the
    grid.  UnitInterval is n equal segments.
    """
    if n < 1:
        raise ValueError(f"subdivision count must be >= 1, got {n}")
    if domain_tag == DomainTag.UNIT_INTERVAL:
        vertices = np.linspace(0.0, 1.0, n + 1).reshape(-1, 1)
        elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    elif domain_tag == DomainTag.UNIT_SQUARE:
        vertices, elements = _grid_triangulation(n, keep=lambda i, j: True)
    elif domain_tag == DomainTag.L_SHAPE:
        if n % 2 != 0:
            raise ValueError("LShape needs an even subdivision count so the "
                             f"reentrant corner is a grid point, got n={n}")
        half = n // 2
        vertices, elements = _grid_triangulation(
            n, keep=lambda i, j: not (i >= half and j >= half))
    else:
        raise ValueError(f"invalid domain tag {domain_tag!r}")
    flags = _boundary_flags(vertices, elements)
    return Mesh(vertices=vertices, elements=elements,
                boundary_vertex_flags=flags, domain_tag=domain_tag, level=0)


def _grid_triangulation(n, keep):
    """Criss triangulation of the kept cells of the n x n grid on [0,1]^2."""
    xs = np.linspace(0.0, 1.0, n + 1)
    full_idx = np.full((n + 1, n + 1), -1, dtype=int)
    used = np.zeros((n + 1, n + 1), dtype=bool)
    cells = [(i, j) for j in range(n) for i in range(n) if keep(i, j)]
    for i, j in cells:
        used[i:i + 2, j:j + 2] = True
    count = 0
    coords = []
    # vertex numbering follows the grid row-major order (y outer, x inner)
    for j in range(n + 1):
        for i in range(n + 1):
            if used[i, j]:
                full_idx[i, j] = count
                coords.append((xs[i], xs[j]))
                count += 1
    elements = []
    for i, j in cells:
        a = full_idx[i, j]
        b = full_idx[i + 1, j]
        c = full_idx[i + 1, j + 1]
        d = full_idx[i, j + 1]
        # split along the SW-NE diagonal, both children counterclockwise
        elements.append((a, b, c))
        elements.append((a, c, d))
    return np.array(coords, dtype=float), np.array(elements, dtype=int)


def _facets(elements: np.ndarray) -> np.ndarray:
    """All element facets as sorted vertex tuples, one row per facet use."""
    if elements.shape[1] == 2:
        return elements.reshape(-1, 1)
    edges = np.concatenate([elements[:, [0, 1]], elements[:, [1, 2]],
                            elements[:, [2, 0]]], axis=0)
    return np.sort(edges, axis=1)


def _boundary_flags(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Mark boundary vertices topologically: facets used by one element only."""
    facets = _facets(elements)
    uniq, counts = np.unique(facets, axis=0, return_counts=True)
    flags = np.zeros(len(vertices), dtype=bool)
    flags[uniq[counts == 1].ravel()] = True
    return flags


def element_measures(mesh: Mesh) -> np.ndarray:
    """Signed-measure magnitudes of all elements (lengths or areas)."""
    v = mesh.vertices
    e = mesh.elements
    if mesh.dim == 1:
        return np.abs(v[e[:, 1], 0] - v[e[:, 0], 0])
    d1 = v[e[:, 1]] - v[e[:, 0]]
    d2 = v[e[:, 2]] - v[e[:, 0]]
    return 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def refine_uniform(mesh: Mesh) -> Mesh:
    """One sweep of uniform refinement: bisection (d=1) or red refinement (d=2).

    Children are similar to their parents, so the mesh size halves exactly and
    shape regularity is preserved.  The returned mesh records its parent and
    the parent edge behind every new vertex.
    """
    v, e = mesh.vertices, mesh.elements
    nv = mesh.n_vertices
    if mesh.dim == 1:
        mids = 0.5 * (v[e[:, 0]] + v[e[:, 1]])
        vertices = np.vstack([v, mids])
        mid_ids = nv + np.arange(mesh.n_elements)
        elements = np.concatenate([
            np.column_stack([e[:, 0], mid_ids]),
            np.column_stack([mid_ids, e[:, 1]]),
        ], axis=0)
        refined = np.column_stack([e[:, 0], e[:, 1]])
    else:
        edges = np.sort(np.concatenate(
            [e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]], axis=0), axis=1)
        uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
        mids = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
        vertices = np.vstack([v, mids])
        m01, m12, m20 = (nv + inverse[:mesh.n_elements],
                         nv + inverse[mesh.n_elements:2 * mesh.n_elements],
                         nv + inverse[2 * mesh.n_elements:])
        elements = np.concatenate([
            np.column_stack([e[:, 0], m01, m20]),
            np.column_stack([e[:, 1], m12, m01]),
            np.column_stack([e[:, 2], m20, m12]),
            np.column_stack([m01, m12, m20]),
        ], axis=0)
        refined = uniq
    flags = _boundary_flags(vertices, elements)
    return Mesh(vertices=vertices, elements=elements,
                boundary_vertex_flags=flags, domain_tag=mesh.domain_tag,
                level=mesh.level + 1, parent=mesh, refined_edges=refined)


def metrics(mesh: Mesh) -> MeshMetrics:
    """Exact element diameters, the shape-regularity ratio, and (d=2) the
    maximum interior angle."""
    v, e = mesh.vertices, mesh.elements
    if mesh.dim == 1:
        h = np.abs(v[e[:, 1], 0] - v[e[:, 0], 0])
        # inscribed ball of a segment has radius h/2
        return MeshMetrics(h_max=float(h.max()), h_per_element=h,
                           shape_regularity=2.0, max_angle_deg=None)
    p = v[e]  # (nel, 3, 2)
    sides = np.stack([
        np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
        np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
        np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
    ], axis=1)
    diam = sides.max(axis=1)
    area = element_measures(mesh)
    inradius = 2.0 * area / sides.sum(axis=1)
    angles = []
    for i in range(3):
        a = p[:, (i + 1) % 3] - p[:, i]
        b = p[:, (i + 2) % 3] - p[:, i]
        cosang = np.einsum("ed,ed->e", a, b) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    return MeshMetrics(h_max=float(diam.max()), h_per_element=diam,
                       shape_regularity=float((diam / inradius).max()),
                       max_angle_deg=float(np.max(angles)))


def prolong_map(coarse: Mesh, fine: Mesh) -> sp.csr_matrix:
    """Sparse interpolation stencil taking coarse nodal vectors to fine ones.

    ``fine`` must be an iterated refinement of ``coarse``.  Each fine vertex
    gets a convex combination of at most d+1 coarse vertices and P1
    interpolation through the map is exact.
    """
    chain = []
    m = fine
    while m is not coarse:
        if m.parent is None:
            raise ValueError("meshes are not nested: fine mesh does not "
                             "descend from the given coarse mesh")
        chain.append(m)
        m = m.parent
    op = sp.identity(coarse.n_vertices, format="csr")
    for child in reversed(chain):
        op = _single_level_prolongation(child) @ op
    return op.tocsr()


def _single_level_prolongation(child: Mesh) -> sp.csr_matrix:
    parent = child.parent
    nc = parent.n_vertices
    nf = child.n_vertices
    new = child.refined_edges
    rows = np.concatenate([np.arange(nc),
                           np.repeat(np.arange(nc, nf), 2)])
    cols = np.concatenate([np.arange(nc), new.ravel()])
    vals = np.concatenate([np.ones(nc), np.full(2 * (nf - nc), 0.5)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(nf, nc))


def _on_domain_boundary(domain_tag: DomainTag, pts: np.ndarray) -> np.ndarray:
    t = _GEOM_TOL
    if domain_tag == DomainTag.UNIT_INTERVAL:
        x = pts[:, 0]
        return (np.abs(x) < t) | (np.abs(x - 1.0) < t)
    x, y = pts[:, 0], pts[:, 1]
    outer = (np.abs(x) < t) | (np.abs(y) < t) | (np.abs(x - 1) < t) | (np.abs(y - 1) < t)
    if domain_tag == DomainTag.UNIT_SQUARE:
        return outer
    # L-shape: outer boundary is clipped at the removed quadrant, plus the
    # two reentrant edges x=1/2 (y>=1/2) and y=1/2 (x>=1/2)
    outer_l = ((np.abs(x) < t) | (np.abs(y) < t)
               | ((np.abs(x - 1) < t) & (y <= 0.5 + t))
               | ((np.abs(y - 1) < t) & (x <= 0.5 + t)))
    reentrant = (((np.abs(x - 0.5) < t) & (y >= 0.5 - t))
                 | ((np.abs(y - 0.5) < t) & (x >= 0.5 - t)))
    return outer_l | reentrant


def check_conformity(mesh: Mesh) -> None:
    """Validate the mesh invariants; raises ValueError on the first failure.

    Checks positive element measures, facet sharing counts, that the element
    measures tile the exact domain measure, and that every once-used facet
    lies geometrically on the domain boundary (which rules out hanging nodes).
    """
    meas = element_measures(mesh)
    if np.any(meas <= 0):
        raise ValueError("mesh has a degenerate element")
    facets = _facets(mesh.elements)
    uniq, counts = np.unique(facets, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise ValueError("facet shared by more than two elements")
    total = meas.sum()
    target = _DOMAIN_MEASURE[mesh.domain_tag]
    if abs(total - target) > 1e-10:
        raise ValueError(f"element measures sum to {total}, expected {target}")
    once = uniq[counts == 1]
    mids = mesh.vertices[once].mean(axis=1)
    for pts in (mesh.vertices[once[:, 0]], mesh.vertices[once[:, -1]], mids):
        if not np.all(_on_domain_boundary(mesh.domain_tag, pts)):
            raise ValueError("an unshared facet does not lie on the boundary "
                             "(nonconforming refinement or hanging node)")
    flagged = set(np.nonzero(mesh.boundary_vertex_flags)[0])
    if flagged != set(once.ravel()):
        raise ValueError("boundary flags disagree with the facet topology")


def summary_row(mesh: Mesh) -> str:
    """One CSV row: level,n_vertices,n_elements,h_max,shape_regularity."""
    mm = metrics(mesh)
    return (f"{mesh.level},{mesh.n_vertices},{mesh.n_elements},"
            f"{mm.h_max:.16e},{mm.shape_regularity:.16e}")


def write_vtk(mesh: Mesh, path, point_data=None) -> None:
    """Write the mesh (and optional per-vertex scalar fields) as legacy ASCII VTK."""
    lines = ["# vtk DataFile Version 3.0", "mfgfem mesh", "ASCII",
             "DATASET UNSTRUCTURED_GRID"]
    pts = np.zeros((mesh.n_vertices, 3))
    pts[:, :mesh.dim] = mesh.vertices
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines.extend(" ".join(f"{c:.16e}" for c in p) for p in pts)
    npe = mesh.elements.shape[1]
    lines.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (npe + 1)}")
    lines.extend(f"{npe} " + " ".join(str(i) for i in row)
                 for row in mesh.elements)
    cell_type = 3 if mesh.dim == 1 else 5
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines.extend(str(cell_type) for _ in range(mesh.n_elements))
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        for name, values in point_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{val:.16e}" for val in np.asarray(values))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
