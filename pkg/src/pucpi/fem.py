"""P1 finite-element assembly on the whole mesh and on subdomains.

All matrices are assembled from closed-form simplex integrals into the lower
triangle and mirrored, so symmetry is exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class DofSplit:
    """Boundary-first DOF ordering: trace block then interior block."""

    n_B: int
    n_I: int

    @property
    def n(self) -> int:
        return self.n_B + self.n_I


def p1_cell_geometry(X: np.ndarray):
    """Volume and constant shape-function gradients of one simplex.

    X is (d+1, d) vertex coordinates; gradients come back as (d+1, d).
    """
    d = X.shape[1]
    T = (X[1:] - X[0]).T
    det = np.linalg.det(T)
    vol = abs(det) / (2.0 if d == 2 else 6.0)
    if vol <= 0.0:
        raise AssemblyError("degenerate (zero-volume) cell")
    Tinv = np.linalg.inv(T)
    grads = np.vstack([-Tinv.T.sum(axis=1), Tinv.T.T])
    return vol, grads


def p1_element_matrices(X: np.ndarray):
    """Exact element stiffness and mass for one simplex."""
    d = X.shape[1]
    vol, grads = p1_cell_geometry(X)
    Ke = vol * (grads @ grads.T)
    Me = vol / ((d + 1) * (d + 2)) * (np.ones((d + 1, d + 1)) + np.eye(d + 1))
    return Ke, Me


def _symmetrize_coo(rows, cols, vals, n):
    """Build an exactly symmetric CSR from lower-triangle contributions."""
    low = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    low.sum_duplicates()
    diag = sp.diags(low.diagonal())
    return (low + low.T - diag).tocsr()


def batch_cell_geometry(vertices, cells):
    """Volumes and P1 shape-function gradients for a batch of simplices."""
    d = vertices.shape[1]
    X = vertices[cells]
    E = X[:, 1:, :] - X[:, :1, :]           # (nc, d, d), rows are edge vectors
    det = np.linalg.det(E)
    vol = np.abs(det) / (2.0 if d == 2 else 6.0)
    if np.any(vol <= 0.0):
        raise AssemblyError("degenerate (zero-volume) cell")
    grads_rest = np.linalg.inv(E).transpose(0, 2, 1)   # rows = grad(lambda_i), i>=1
    grads0 = -grads_rest.sum(axis=1, keepdims=True)
    grads = np.concatenate([grads0, grads_rest], axis=1)  # (nc, d+1, d)
    return vol, grads


def assemble_pair(vertices, cells, dof_index, ndof, stiffness_mask=None):
    """Assemble (stiffness, mass) over the given cells.

    dof_index maps vertex -> dof or -1 (eliminated Dirichlet vertex).
    stiffness_mask, if given, is a boolean per-dof array; stiffness
    contributions involving a masked-out dof are dropped (used for the
    stitched Gram matrix, where the stitching operator zeroes those DOFs).
    """
    cells = np.asarray(cells, dtype=np.int64)
    if cells.size == 0:
        Z = sp.csr_matrix((ndof, ndof))
        return Z, Z.copy()
    d = vertices.shape[1]
    nloc = d + 1
    vol, grads = batch_cell_geometry(vertices, cells)

    Ke = np.einsum("cid,cjd->cij", grads, grads) * vol[:, None, None]
    Me = (np.ones((nloc, nloc)) + np.eye(nloc))[None] * (
        vol / ((d + 1) * (d + 2))
    )[:, None, None]

    dofs = dof_index[cells]                               # (nc, d+1)
    rows = np.broadcast_to(dofs[:, :, None], Ke.shape).ravel()
    cols = np.broadcast_to(dofs[:, None, :], Ke.shape).ravel()
    keep = (rows >= 0) & (cols >= 0) & (cols <= rows)     # lower triangle only
    rows, cols = rows[keep], cols[keep]
    vals_a, vals_m = Ke.ravel()[keep], Me.ravel()[keep]

    if stiffness_mask is not None:
        mask = np.asarray(stiffness_mask, dtype=bool)
        live = mask[rows] & mask[cols]
        A = _symmetrize_coo(rows[live], cols[live], vals_a[live], ndof)
    else:
        A = _symmetrize_coo(rows, cols, vals_a, ndof)
    M = _symmetrize_coo(rows, cols, vals_m, ndof)
    return A, M


def dof_index_for(num_vertices: int, dof_vertices: np.ndarray) -> np.ndarray:
    """Vertex -> dof position array (-1 where eliminated)."""
    idx = np.full(num_vertices, -1, dtype=np.int64)
    idx[dof_vertices] = np.arange(len(dof_vertices))
    return idx


def assemble_stiffness_mass(vertices, cells, dof_vertices, n_B):
    """Stiffness/mass with Dirichlet vertices eliminated, trace block first.

    dof_vertices must already be ordered with the n_B trace DOFs leading.
    """
    idx = dof_index_for(len(vertices), np.asarray(dof_vertices, dtype=np.int64))
    A, M = assemble_pair(vertices, cells, idx, len(dof_vertices))
    return A, M, DofSplit(n_B=n_B, n_I=len(dof_vertices) - n_B)


def assemble_K(A: sp.spmatrix, M: sp.spmatrix) -> sp.csr_matrix:
    """Full H1 Gram matrix on the extended subdomain: K = A + M.

    A and M must come from the same element loops with no elimination of the
    trace block, so the sum is entrywise exact.
    """
    return (A + M).tocsr()


def assemble_KR(vertices, cells, dof_vertices, n_B, owned_mask):
    """Gram matrix of the stitched local space on U.

    Stiffness part only couples DOFs kept by the stitching operator (owned
    interior vertices); the mass part is the plain local mass matrix.
    """
    idx = dof_index_for(len(vertices), np.asarray(dof_vertices, dtype=np.int64))
    A, M = assemble_pair(vertices, cells, idx, len(dof_vertices),
                         stiffness_mask=np.asarray(owned_mask, dtype=bool))
    return (A + M).tocsr()


def extension_matrix(split: DofSplit) -> sp.csr_matrix:
    """Zero-on-interior right inverse of the trace: [I; 0], one nnz per trace DOF."""
    n, nb = split.n, split.n_B
    return sp.csr_matrix(
        (np.ones(nb), (np.arange(nb), np.arange(nb))), shape=(n, nb)
    )


def stitching_matrix(n_global, global_dof_of_vertex, sub_vertices, owned_mask):
    """Sparse map from local U coefficients to global coefficients.

    Keeps exactly the owned interior DOFs; everything else (trace DOFs and
    overlap DOFs owned elsewhere) maps to zero, so summing the stitched
    contributions over all subdomains reproduces a global vector exactly.
    """
    rows, cols = [], []
    for loc, v in enumerate(sub_vertices):
        if owned_mask[loc]:
            g = global_dof_of_vertex[v]
            if g >= 0:
                rows.append(g)
                cols.append(loc)
    return sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(n_global, len(sub_vertices))
    )


def global_dof_numbering(mesh):
    """Interior vertices in ascending vertex order; -1 on the outer boundary."""
    idx = np.full(mesh.num_vertices, -1, dtype=np.int64)
    free = np.array(
        sorted(set(range(mesh.num_vertices)) - set(mesh.boundary_vertices)),
        dtype=np.int64,
    )
    idx[free] = np.arange(len(free))
    return idx, free


def assemble_global(mesh):
    """Global Dirichlet pencil (A, M) over interior vertices."""
    idx, free = global_dof_numbering(mesh)
    A, M = assemble_pair(mesh.vertices, mesh.cells, idx, len(free))
    return A, M, free


def dump_matrix(A: sp.spmatrix, path) -> None:
    """Coordinate text dump, symmetric lower triangle, 17 significant digits."""
    A = sp.tril(A.tocoo())
    with open(path, "w") as f:
        f.write(f"{A.shape[0]} {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            f.write(f"{i} {j} {v:.17g}\n")
