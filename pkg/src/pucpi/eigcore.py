"""Sparse symmetric linear-algebra kernels.

Factorization-based inertia counting, shift-invert solves for generalized
symmetric pencils, a dense reference oracle, and a deterministic Lanczos for
dominant eigenpairs of implicitly defined SPD operators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    pass


class ShiftNearSpectrum(SolverError):
    """A shifted factorization hit a (near-)zero pivot; perturb and retry."""


DENSE_CAP = 3000
_PIVOT_REL_TOL = 1e-12


@dataclass
class Inertia:
    n_plus: int
    n_minus: int
    n_zero: int

    @property
    def n(self):
        return self.n_plus + self.n_minus + self.n_zero


class Factorization:
    """Symmetric-mode sparse LU of an indefinite symmetric matrix.

    With diagonal pivoting forced (threshold 0) the U diagonal carries the
    LDL^T pivots, so the inertia follows from Sylvester's law.
    """

    def __init__(self, K: sp.spmatrix):
        K = K.tocsc()
        self.n = K.shape[0]
        self._lu = spla.splu(
            K,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
        d = self._lu.U.diagonal()
        scale = np.abs(d).max() if self.n else 1.0
        near_zero = np.abs(d) <= _PIVOT_REL_TOL * scale
        self.inertia = Inertia(
            n_plus=int(np.count_nonzero(d > 0) - np.count_nonzero(near_zero & (d > 0))),
            n_minus=int(
                np.count_nonzero(d < 0) - np.count_nonzero(near_zero & (d < 0))
            ),
            n_zero=int(np.count_nonzero(near_zero)),
        )

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))


def ldlt_inertia(A: sp.spmatrix, M: sp.spmatrix, t: float):
    """(factorization of A - t M, number of pencil eigenvalues below t).

    Raises ShiftNearSpectrum when t sits numerically on the spectrum.
    """
    fact = Factorization((A - t * M).tocsc())
    if fact.inertia.n_zero > 0:
        raise ShiftNearSpectrum(f"shift t={t} is numerically an eigenvalue")
    return fact, fact.inertia.n_minus


def count_below(A, M, t, lam_scale=None):
    """Inertia count with the near-spectrum perturbation policy."""
    scale = abs(t) if lam_scale is None else lam_scale
    shift = t
    for _ in range(8):
        try:
            _, cnt = ldlt_inertia(A, M, shift)
            return cnt
        except ShiftNearSpectrum:
            shift += 1e-8 * max(scale, 1.0)
    raise SolverError(f"could not find a usable shift near t={t}")


@dataclass
class EigenpairSet:
    values: np.ndarray    # ascending (or descending for dominant pairs)
    vectors: np.ndarray   # columns, M-orthonormal for pencil solves

    def __len__(self):
        return len(self.values)


def dense_reference_solve(A, M, k=None, cap=DENSE_CAP) -> EigenpairSet:
    """Full-accuracy pencil eigenpairs by dense reduction (test oracle)."""
    n = A.shape[0]
    if n > cap:
        raise SolverError(f"dense reference solve refused: n={n} exceeds cap {cap}")
    Ad = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    Md = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
    w, v = la.eigh(Ad, Md)
    if k is not None:
        w, v = w[:k], v[:, :k]
    return EigenpairSet(values=w, vectors=v)


def _start_vector(n, attempt=0):
    v = np.ones(n) / np.sqrt(n)
    if attempt > 0:
        rng = np.random.default_rng(attempt)
        v = v + 1e-3 * rng.standard_normal(n)
        v /= np.linalg.norm(v)
    return v


def smallest_eigenpairs(
    A, M, k=None, lam_max=None, tol=1e-10, dense_cutoff=400
) -> EigenpairSet:
    """Lowest eigenpairs of the symmetric pencil (A, M), M-orthonormal.

    Either the count k or a threshold lam_max must be given. In threshold
    mode, the returned count is certified against the inertia at lam_max.
    """
    if (k is None) == (lam_max is None):
        raise ValueError("give exactly one of k or lam_max")
    n = A.shape[0]
    if lam_max is not None:
        k = count_below(A, M, lam_max, lam_scale=lam_max)
        if k == 0:
            return EigenpairSet(np.zeros(0), np.zeros((n, 0)))
    if k >= n - 1 or n <= dense_cutoff:
        pairs = dense_reference_solve(A, M, k=min(k, n), cap=max(n, DENSE_CAP))
    else:
        w, v = spla.eigsh(
            A.tocsc(),
            k=k,
            M=M.tocsc(),
            sigma=0.0,
            which="LM",
            v0=_start_vector(n),
            tol=tol,
            maxiter=max(10 * k + 200, 1000),
        )
        order = np.argsort(w)
        pairs = EigenpairSet(values=w[order], vectors=v[:, order])
    if lam_max is not None:
        got = int(np.count_nonzero(pairs.values <= lam_max))
        if got != k:
            raise SolverError(
                f"threshold mode returned {got} eigenvalues <= {lam_max}, inertia says {k}"
            )
        pairs = EigenpairSet(pairs.values[:k], pairs.vectors[:, :k])
    return pairs


def _check_symmetry(apply, n, rng_seed=12345):
    rng = np.random.default_rng(rng_seed)
    u = rng.standard_normal(n)
    v = rng.standard_normal(n)
    au, av = apply(u), apply(v)
    lhs, rhs = float(v @ au), float(u @ av)
    scale = max(np.linalg.norm(au) * np.linalg.norm(v),
                np.linalg.norm(av) * np.linalg.norm(u), 1e-300)
    if abs(lhs - rhs) > 1e-8 * scale:
        raise SolverError(
            f"operator asymmetry detected: |{lhs:.3e} - {rhs:.3e}| > 1e-8 scale"
        )


def dominant_pairs_of_operator(
    apply, n, count, tol_lanczos=1e-10, check_symmetry=True
) -> EigenpairSet:
    """Largest eigenpairs of an implicit symmetric PSD operator, descending.

    Lanczos with full reorthogonalization and a fixed all-ones start vector;
    deterministic for a fixed operator. Robustness over speed: the operators
    this serves are small reduced problems.
    """
    count = min(count, n)
    if count <= 0:
        return EigenpairSet(np.zeros(0), np.zeros((n, 0)))
    if check_symmetry and n > 1:
        _check_symmetry(apply, n)

    maxit = min(n, 10 * count + 200)
    V = np.zeros((n, maxit))
    alphas = np.zeros(maxit)
    betas = np.zeros(maxit)
    q = _start_vector(n)
    V[:, 0] = q
    restart = 0
    j = 0
    while True:
        # copy: apply may return (a view of) its argument
        w = np.array(apply(V[:, j]), dtype=float, copy=True)
        alphas[j] = float(V[:, j] @ w)
        w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)
        w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)  # twice is enough
        beta = np.linalg.norm(w)
        m = j + 1
        T = np.diag(alphas[:m]) + np.diag(betas[1:m], 1) + np.diag(betas[1:m], -1)
        ritz, S = la.eigh(T)
        converged = m >= count and _dominant_converged(ritz, S, beta, count, tol_lanczos)
        if converged or m == maxit or m == n:
            order = np.argsort(ritz)[::-1][:count]
            vals = ritz[order]
            vecs = V[:, :m] @ S[:, order]
            # normalize (full reorthogonalization keeps these near-unit)
            vecs /= np.linalg.norm(vecs, axis=0, keepdims=True)
            return EigenpairSet(values=vals, vectors=vecs)
        if beta <= 1e-14 * max(1.0, np.abs(alphas[:m]).max()):
            restart += 1
            q = _start_vector(n, attempt=restart)
            q -= V[:, :m] @ (V[:, :m].T @ q)
            nq = np.linalg.norm(q)
            if nq <= 1e-14:
                # invariant subspace exhausted: spectrum fully captured
                order = np.argsort(ritz)[::-1][:count]
                return EigenpairSet(ritz[order], V[:, :m] @ S[:, order])
            q /= nq
            betas[m] = 0.0
        else:
            q = w / beta
            betas[m] = beta
        V[:, m] = q
        j = m


def _dominant_converged(ritz, S, beta, count, tol):
    scale = max(abs(ritz[-1]), 1e-300)
    top = np.argsort(ritz)[::-1][:count]
    resid = np.abs(beta * S[-1, top])
    return bool(np.all(resid <= tol * scale))


class SparseCholesky:
    """A sparse factor F with A = F F^T for SPD A.

    Built from a symmetric-mode LU: with symmetric pivoting the factorization
    is P^T L D L^T P, so F = P^T L sqrt(D). Any such factor is as good as the
    lower-triangular Cholesky factor here: two factors of the same matrix
    differ by an orthogonal right factor, which leaves both the singular
    values and the span of the transformed singular vectors unchanged.
    """

    def __init__(self, A: sp.spmatrix):
        A = A.tocsc()
        self.n = A.shape[0]
        lu = spla.splu(
            A,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise SolverError("symmetric factorization lost symmetric pivoting")
        d = lu.U.diagonal()
        if np.any(d <= 0):
            raise SolverError("matrix is not positive definite")
        self.perm = lu.perm_r
        self._Lc = (lu.L @ sp.diags(np.sqrt(d))).tocsr()
        self._Lc_T = self._Lc.T.tocsr()
        # spot check the factor identity on a deterministic vector
        x = _start_vector(self.n)
        err = np.linalg.norm(self.matvec(self.rmatvec(x)) - A @ x)
        if err > 1e-8 * max(1.0, spla.norm(A)):
            raise SolverError("factor verification failed")

    def matvec(self, x):
        # F x = P^T (Lc x)
        return (self._Lc @ x)[self.perm]

    def rmatvec(self, x):
        # F^T x = Lc^T (P x)
        px = np.empty_like(np.asarray(x, dtype=float))
        px[self.perm] = x
        return self._Lc_T @ px

    def solve_t(self, b):
        """Solve F^T y = b (used for mapping singular vectors back)."""
        b = np.asarray(b, dtype=float)
        z = spla.spsolve_triangular(self._Lc_T.tocsr(), b, lower=False)
        return z[self.perm] if b.ndim == 1 else z[self.perm, :]


def residual_norm(A, M, lam, v):
    """Relative pencil residual used by solver contracts."""
    r = A @ v - lam * (M @ v)
    denom = (_norm1(A) + abs(lam) * _norm1(M)) * np.linalg.norm(v)
    return np.linalg.norm(r) / max(denom, 1e-300)


def _norm1(A):
    return float(np.abs(A).sum(axis=0).max()) if sp.issparse(A) else float(
        np.abs(A).sum(axis=0).max()
    )
