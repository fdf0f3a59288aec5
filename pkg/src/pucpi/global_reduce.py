"""Reduced global eigenproblem from per-subdomain results.

The reduced pencil couples subdomains only through overlap cells: diagonal
blocks are known analytically from the local orthonormalization, and the
off-diagonal entries are exact P1 integrals of the stored overlap traces.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import eigcore, fem
from .taskio import LocalBasisResult


class ReductionError(RuntimeError):
    pass


@dataclass
class ReducedProblem:
    M: int
    offsets: np.ndarray     # block starts, len M+1; row of (p,l) = offsets[p]+l
    A: sp.csr_matrix
    Mt: sp.csr_matrix

    @property
    def n(self) -> int:
        return int(self.offsets[-1])

    def row(self, p: int, l: int) -> int:
        return int(self.offsets[p]) + l


def _cell_mass(dim: int, vol: np.ndarray) -> np.ndarray:
    nloc = dim + 1
    return (np.ones((nloc, nloc)) + np.eye(nloc)) / ((dim + 1) * (dim + 2)) \
        * vol[:, None, None]


def assemble_reduced(results: list[LocalBasisResult], mesh) -> ReducedProblem:
    """Assemble the reduced pencil from local results and the global mesh.

    Only overlap-cell traces are read from the results; geometry (volumes)
    comes from the global mesh so every subdomain pair integrates over the
    identical cell.
    """
    results = sorted(results, key=lambda r: r.subdomain)
    M = len(results)
    if [r.subdomain for r in results] != list(range(M)):
        missing = sorted(set(range(M)) - {r.subdomain for r in results})
        raise ReductionError(f"missing local results for subdomains {missing}")

    sizes = np.array([r.n_cols for r in results], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offsets[-1])

    # index overlap traces by global cell id
    by_cell = [dict() for _ in range(M)]
    cells_of = []
    for p, r in enumerate(results):
        for g in r.gamma:
            if g.global_cell in by_cell[p]:
                raise ReductionError(
                    f"subdomain {p} reports overlap cell {g.global_cell} twice"
                )
            by_cell[p][g.global_cell] = g
        cells_of.append(set(by_cell[p]))

    dim = mesh.dim
    all_gamma = sorted(set().union(*cells_of)) if M else []
    gid_index = {g: j for j, g in enumerate(all_gamma)}
    if all_gamma:
        vol, _ = fem.batch_cell_geometry(
            mesh.vertices, mesh.cells[np.asarray(all_gamma, dtype=np.int64)]
        )
        mass = _cell_mass(dim, vol)

    rows, cols, a_vals, m_vals = [], [], [], []

    # analytic diagonal blocks: local Ritz values against the identity
    for p, r in enumerate(results):
        idx = np.arange(offsets[p], offsets[p + 1])
        rows.append(idx)
        cols.append(idx)
        a_vals.append(np.asarray(r.d, dtype=float))
        m_vals.append(np.ones(sizes[p]))

    for p in range(M):
        for q in range(p + 1, M):
            shared = cells_of[p] & cells_of[q]
            if not shared:
                continue
            Ab = np.zeros((sizes[p], sizes[q]))
            Mb = np.zeros((sizes[p], sizes[q]))
            for gcell in shared:
                gp, gq = by_cell[p][gcell], by_cell[q][gcell]
                j = gid_index[gcell]
                Ab += vol[j] * (gp.gradients.T @ gq.gradients)
                Mb += gp.values.T @ (mass[j] @ gq.values)
            rr, cc = np.meshgrid(
                np.arange(offsets[p], offsets[p + 1]),
                np.arange(offsets[q], offsets[q + 1]),
                indexing="ij",
            )
            rows.extend([rr.ravel(), cc.ravel()])
            cols.extend([cc.ravel(), rr.ravel()])
            a_vals.extend([Ab.ravel(), Ab.ravel()])
            m_vals.extend([Mb.ravel(), Mb.ravel()])

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    A = sp.coo_matrix((np.concatenate(a_vals), (rows, cols)), shape=(n, n)).tocsr()
    Mt = sp.coo_matrix((np.concatenate(m_vals), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    Mt.sum_duplicates()
    return ReducedProblem(M=M, offsets=offsets, A=A, Mt=Mt)


def solve_reduced(problem: ReducedProblem, lam: float) -> np.ndarray:
    """All reduced eigenvalues below lam, ascending, count-certified."""
    A, Mt, n = problem.A, problem.Mt, problem.n
    mt_inertia = eigcore.Factorization(Mt.tocsc()).inertia
    if mt_inertia.n_minus or mt_inertia.n_zero:
        raise ReductionError(
            "reduced mass matrix is not positive definite; "
            "local rank filtering failed upstream"
        )
    expected = eigcore.count_below(A, Mt, lam, lam_scale=lam)
    if n <= eigcore.DENSE_CAP:
        pairs = eigcore.dense_reference_solve(A, Mt)
        values = pairs.values[pairs.values <= lam]
    else:
        values = eigcore.smallest_eigenpairs(A, Mt, lam_max=lam).values
    if len(values) != expected:
        raise ReductionError(
            f"reduced solve returned {len(values)} eigenvalues below {lam}, "
            f"inertia certifies {expected}"
        )
    if np.any(values <= 0):
        raise ReductionError("nonpositive reduced eigenvalue")
    return values


@dataclass
class SpectrumComparison:
    rel_errors: np.ndarray
    max_rel_error: float
    missing: int
    clusters: list  # (start index, size, cluster max rel error)


def compare_spectra(candidate, reference, lam: float) -> SpectrumComparison:
    """Index-by-index relative errors of two ascending spectra below lam.

    Degenerate reference eigenvalues (gap below 1e-6 relative) are also
    reported per cluster, since their individual ordering is arbitrary.
    """
    cand = np.asarray(candidate, dtype=float)
    ref = np.asarray(reference, dtype=float)
    cand = cand[cand <= lam]
    ref = ref[ref <= lam]
    missing = max(0, len(ref) - len(cand))
    m = min(len(cand), len(ref))
    rel = (cand[:m] - ref[:m]) / ref[:m]

    clusters = []
    i = 0
    while i < m:
        j = i + 1
        while j < m and ref[j] - ref[j - 1] < 1e-6 * ref[j]:
            j += 1
        if j - i > 1:
            clusters.append((i, j - i, float(np.abs(rel[i:j]).max())))
        i = j
    return SpectrumComparison(
        rel_errors=rel,
        max_rel_error=float(np.abs(rel).max()) if m else 0.0,
        missing=missing,
        clusters=clusters,
    )


@dataclass
class SolveReport:
    eigenvalues: np.ndarray
    reference: np.ndarray | None = None
    comparison: SpectrumComparison | None = None
    config: dict = field(default_factory=dict)
    dims: dict = field(default_factory=dict)
    timings: list = field(default_factory=list)   # (stage, seconds)
    fill_in: float | None = None

    def write(self, outdir):
        import os

        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "report.txt"), "w") as f:
            f.write("solver report\n=============\n\nconfiguration:\n")
            for k in sorted(self.config):
                f.write(f"  {k} = {self.config[k]}\n")
            f.write("\ndimensions:\n")
            for k in sorted(self.dims):
                f.write(f"  {k} = {self.dims[k]}\n")
            if self.fill_in is not None:
                f.write(f"\nrelative fill-in: {self.fill_in:.6g}\n")
            f.write(f"\neigenvalues below the cap: {len(self.eigenvalues)}\n")
            if self.comparison is not None:
                f.write(f"max relative error: {self.comparison.max_rel_error:.6e}\n")
                if self.comparison.missing:
                    f.write(f"MISSING MODES: {self.comparison.missing}\n")
                for start, size, err in self.comparison.clusters:
                    f.write(
                        f"cluster at index {start} (size {size}): "
                        f"max rel error {err:.6e}\n"
                    )
        with open(os.path.join(outdir, "eigenvalues.csv"), "w") as f:
            f.write("index,lambda,lambda_ref,rel_error\n")
            for j, lam in enumerate(self.eigenvalues):
                ref = ""
                err = ""
                if self.reference is not None and j < len(self.reference):
                    ref = "%.17g" % self.reference[j]
                if self.comparison is not None and j < len(
                    self.comparison.rel_errors
                ):
                    err = "%.17g" % self.comparison.rel_errors[j]
                f.write(f"{j},{lam:.17g},{ref},{err}\n")
        with open(os.path.join(outdir, "timings.csv"), "w") as f:
            f.write("stage,seconds\n")
            for stage, seconds in self.timings:
                f.write(f"{stage},{seconds:.6f}\n")


class StageTimer:
    """Collects (stage, seconds) rows for the report."""

    def __init__(self):
        self.rows = []
        self._t0 = None
        self._stage = None

    def start(self, stage):
        self.flush()
        self._stage = stage
        self._t0 = time.perf_counter()

    def flush(self):
        if self._stage is not None:
            self.rows.append((self._stage, time.perf_counter() - self._t0))
            self._stage = None
