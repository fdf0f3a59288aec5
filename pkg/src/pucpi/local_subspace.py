"""Per-subdomain reduced-basis pipeline.

Each worker runs this module on one extended subdomain: compute the local
modes below the oversampled cap, compress the boundary-to-interior solution
map by interpolating it at Chebyshev points and truncating its singular
values in the trace norm, then orthonormalize the stitched basis and emit
its Ritz values together with its restriction to the overlap cells.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import eigcore, fem
from .eigcore import Factorization, ShiftNearSpectrum, SolverError, SparseCholesky
from .taskio import GammaCellTrace, LocalBasisResult, LocalTask

DEFAULT_N = 5
DEFAULT_ETA = 2.5
DEFAULT_TOL = 1e-2
DEFAULT_RADIUS_FACTOR = 0.2

_RANK_TOL = 1e-12


def chebyshev_nodes(n_points: int, lam: float) -> np.ndarray:
    """First-kind Chebyshev nodes mapped to (0, lam), ascending."""
    if n_points < 1 or lam <= 0:
        raise ValueError("need n_points >= 1 and lam > 0")
    i = np.arange(1, n_points + 1)
    theta = (2 * (n_points - i) + 1) * np.pi / (2 * n_points)
    return 0.5 * lam * (1.0 + np.cos(theta))


def lagrange_eval(nodes: np.ndarray, t: float) -> np.ndarray:
    """Values of the Lagrange cardinal polynomials at t."""
    nodes = np.asarray(nodes, dtype=float)
    n = len(nodes)
    if len(np.unique(nodes)) != n:
        raise ValueError("interpolation nodes must be distinct")
    out = np.empty(n)
    for i in range(n):
        others = np.delete(nodes, i)
        out[i] = np.prod((t - others) / (nodes[i] - others))
    return out


def lebesgue_constant(nodes: np.ndarray, lam: float, grid_size: int = 100_000):
    """Grid maximum of the Lebesgue function on [0, lam]."""
    ts = np.concatenate([np.linspace(0.0, lam, grid_size), np.asarray(nodes)])
    best = 0.0
    for t in ts:
        best = max(best, float(np.abs(lagrange_eval(nodes, t)).sum()))
    return best


def interp_bound_e(eta: float, n_points: int, lam: float) -> float:
    """Worst-case interpolation error coefficient for the compressed map."""
    if eta <= 1.0:
        raise ValueError("oversampling parameter must exceed 1")
    return (
        12.0 * eta * (4.0 * (eta - 1.0)) ** (-(n_points + 1))
        * np.sqrt(2.0 + eta * lam + 1.0 / (eta * lam))
    )


def lemma_interp_bound(eta: float, n_points: int, lam: float, level: int) -> float:
    """Per-trace interpolation error bound coefficient.

    level 0 bounds the L2 error, level 1 the H1-seminorm error; multiply by
    the minimal-extension H1 norm of the trace to get the absolute bound.
    """
    if eta <= 1.0:
        raise ValueError("oversampling parameter must exceed 1")
    l = level
    return (
        12.0 * (4.0 * (eta - 1.0)) ** (-(n_points + 1))
        * np.sqrt(eta ** (l + 1) * lam ** (l - 1) + eta ** (l + 2) * lam ** l)
    )


@dataclass(frozen=True)
class SpectralConfig:
    """Spectral-interval and compression parameters for one run."""

    lam: float
    eta: float = DEFAULT_ETA
    n_points: int = DEFAULT_N
    tol: float = DEFAULT_TOL
    radius_factor: float = DEFAULT_RADIUS_FACTOR

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("spectral cap must be positive")
        if self.eta <= 1.0:
            raise ValueError("oversampling parameter must exceed 1")
        if self.eta <= 1.25:
            warnings.warn(
                "oversampling parameter <= 5/4: interpolation error is not "
                "guaranteed to decay with the node count",
                stacklevel=2,
            )
        if self.n_points < 1:
            raise ValueError("need at least one interpolation node")
        if self.tol <= 0:
            raise ValueError("singular value cutoff must be positive")

    @property
    def lam_tilde(self) -> float:
        return self.eta * self.lam

    @property
    def nodes(self) -> np.ndarray:
        return chebyshev_nodes(self.n_points, self.lam)


class SubdomainSolver:
    """All linear-algebra state for one extended subdomain.

    Construction factorizes the Gram matrix and the shifted pencil at every
    interpolation node and computes the retained local modes; the heavy
    operators are then available as closures. Deterministic end to end.
    """

    def __init__(self, task: LocalTask, config: SpectralConfig | None = None):
        if config is None:
            config = SpectralConfig(
                lam=task.lam, eta=task.eta, n_points=task.n_points, tol=task.tol
            )
        self.task = task
        self.config = config
        self.dim = task.dim
        nv = len(task.vertices)

        dirichlet = set(task.dirichlet.tolist())
        trace = [int(v) for v in task.trace]
        trace_set = set(trace)
        interior = sorted(set(range(nv)) - trace_set - dirichlet)
        if not trace or not interior:
            raise SolverError("subdomain has an empty trace or interior block")
        self.dof_vertices = np.array(trace + interior, dtype=np.int64)
        self.A, self.M, self.split = fem.assemble_stiffness_mass(
            task.vertices, task.cells, self.dof_vertices, n_B=len(trace)
        )
        nb = self.split.n_B
        self.A_II = self.A[nb:, nb:].tocsc()
        self.M_II = self.M[nb:, nb:].tocsc()
        self.A_IB = self.A[nb:, :nb].tocsr()
        self.M_IB = self.M[nb:, :nb].tocsr()

        # full H1 Gram of the extended subdomain, trace block included
        self.K_fact = Factorization(fem.assemble_K(self.A, self.M))

        self.modes, self.n_retained = self._local_modes()
        self._node_facts, self.perturbed_nodes = self._factor_nodes()

        # core-subdomain DOFs, ascending local vertex order
        u_verts = np.unique(task.cells[task.u_cells])
        self.u_dofs = np.array(
            [v for v in u_verts if v not in dirichlet], dtype=np.int64
        )
        if trace_set & set(self.u_dofs.tolist()):
            raise SolverError("core subdomain touches the extension boundary")
        interior_index = {v: i for i, v in enumerate(interior)}
        # row selector realizing restriction from extended-interior to core
        self.f_u = np.array([interior_index[v] for v in self.u_dofs], dtype=np.int64)
        self.n_u = len(self.u_dofs)

        owned = set(task.owned.tolist())
        self.owned_mask = np.array([v in owned for v in self.u_dofs], dtype=bool)
        u_cells = task.cells[task.u_cells]
        self.A0, self.M0 = fem.assemble_pair(
            task.vertices, u_cells,
            fem.dof_index_for(nv, self.u_dofs), self.n_u,
        )
        self.KR_factor = SparseCholesky(
            fem.assemble_KR(
                task.vertices, u_cells, self.u_dofs, n_B=0,
                owned_mask=self.owned_mask,
            )
        )

    # -- local modes and deflation -------------------------------------

    def _local_modes(self):
        pairs = eigcore.smallest_eigenpairs(
            self.A_II, self.M_II, lam_max=self.config.lam_tilde
        )
        return pairs, len(pairs)

    def project(self, x):
        """Deflate the retained modes: x - sum_k v_k (v_k^T M_II x)."""
        V = self.modes.vectors
        if V.shape[1] == 0:
            return np.asarray(x, dtype=float)
        return x - V @ (V.T @ (self.M_II @ x))

    def project_t(self, x):
        V = self.modes.vectors
        if V.shape[1] == 0:
            return np.asarray(x, dtype=float)
        return x - self.M_II @ (V @ (V.T @ x))

    def _factor_nodes(self):
        facts, perturbed = [], []
        for xi in self.config.nodes:
            shift = float(xi)
            for attempt in range(8):
                try:
                    fact, _ = eigcore.ldlt_inertia(self.A_II, self.M_II, shift)
                    break
                except ShiftNearSpectrum:
                    shift += 1e-8 * self.config.lam
            else:
                raise SolverError(f"no usable shift near node {xi}")
            if shift != xi:
                perturbed.append((float(xi), shift))
            facts.append(fact)
        return facts, perturbed

    # -- core operators -------------------------------------------------

    def apply_Zh(self, node_index: int, w_B):
        """Interior coefficients of the deflated lifting of a trace w_B."""
        t = self.config.nodes[node_index]
        rhs = -(self.A_IB @ w_B) + t * (self.M_IB @ w_B)
        return self.project(self._node_facts[node_index].solve(rhs))

    def apply_Zh_t(self, node_index: int, y_I):
        t = self.config.nodes[node_index]
        z = self._node_facts[node_index].solve(self.project_t(y_I))
        return -(self.A_IB.T @ z) + t * (self.M_IB.T @ z)

    def apply_Zh_at(self, t: float, w_B):
        """Direct evaluation at an arbitrary shift (diagnostics only)."""
        shift = float(t)
        for attempt in range(8):
            try:
                fact, _ = eigcore.ldlt_inertia(self.A_II, self.M_II, shift)
                break
            except ShiftNearSpectrum:
                shift += 1e-8 * self.config.lam
        rhs = -(self.A_IB @ w_B) + shift * (self.M_IB @ w_B)
        return self.project(fact.solve(rhs))

    def apply_Sinv(self, x_B):
        """Inverse trace-norm Gram: boundary block of K^{-1} [x_B; 0]."""
        x_B = np.asarray(x_B, dtype=float)
        nb = self.split.n_B
        pad = np.zeros((self.split.n,) + x_B.shape[1:])
        pad[:nb] = x_B
        return self.K_fact.solve(pad)[:nb]

    def cct_operator(self):
        """Symmetric PSD operator whose eigenpairs give the singular data."""
        L = self.KR_factor

        def apply(x):
            y = L.matvec(np.asarray(x, dtype=float))
            z = np.zeros(self.split.n_I)
            z[self.f_u] = y
            acc = np.zeros(self.split.n_I)
            for i in range(self.config.n_points):
                w = self.apply_Zh_t(i, z)
                w = self.apply_Sinv(w)
                acc += self.apply_Zh(i, w)
            return L.rmatvec(acc[self.f_u])

        return apply, self.n_u

    # -- basis construction ----------------------------------------------

    def truncate_svd(self, tol: float | None = None):
        """Minimal singular-value cutoff of the compressed map.

        Returns (k, sigma[0..k], U[:, :k]); sigma[k] is the first discarded
        value and satisfies sigma[k] <= tol < sigma[k-1] when k >= 1.
        """
        if tol is None:
            tol = self.config.tol
        apply, n = self.cct_operator()
        count = min(32, n)
        while True:
            pairs = eigcore.dominant_pairs_of_operator(apply, n, count)
            sigma = np.sqrt(np.maximum(pairs.values, 0.0))
            below = np.nonzero(sigma <= tol)[0]
            if below.size:
                k = int(below[0])
                return k, sigma[: k + 1], pairs.vectors[:, :k]
            if len(sigma) >= n:
                warnings.warn(
                    "singular-value cutoff below the numerical floor; "
                    "keeping all directions",
                    stacklevel=2,
                )
                return n, np.append(sigma, 0.0), pairs.vectors
            count = min(2 * count, n)

    def build_local_basis(self, keep_full: bool = False) -> LocalBasisResult:
        """Orthonormalized stitched basis with its overlap-cell trace."""
        k, sigma, U = self.truncate_svd()
        K_ret = self.n_retained

        Q = np.zeros((self.n_u, K_ret + k))
        if K_ret:
            Q[:, :K_ret] = self.modes.vectors[self.f_u, :]
        if k:
            Q[:, K_ret:] = self.KR_factor.solve_t(U)
        Q[~self.owned_mask, :] = 0.0  # stitching zeroes unowned DOFs

        Aq = Q.T @ (self.A0 @ Q)
        Mq = Q.T @ (self.M0 @ Q)
        Aq = 0.5 * (Aq + Aq.T)
        Mq = 0.5 * (Mq + Mq.T)

        # rank filtering: overlap restrictions can be nearly dependent
        w, S = np.linalg.eigh(Mq)
        keep = w > _RANK_TOL * max(w.max(), 1e-300)
        B = S[:, keep] / np.sqrt(w[keep])
        H = B.T @ Aq @ B
        d, Y = np.linalg.eigh(0.5 * (H + H.T))
        V = B @ Y
        Qt = Q @ V
        if np.any(d <= 0):
            raise SolverError("nonpositive local Ritz value; stitching is broken")

        gamma = self._gamma_trace(Qt)
        result = LocalBasisResult(
            subdomain=self.task.subdomain,
            n_modes=K_ret,
            n_svd=k,
            n_cols=Qt.shape[1],
            sigma_tail=float(sigma[-1]) if len(sigma) else 0.0,
            d=d,
            gamma=gamma,
        )
        if keep_full:
            result.basis = Qt        # dense columns over u_dofs, tests only
            result.u_dofs = self.u_dofs
        return result

    def _gamma_trace(self, Qt):
        task = self.task
        u_index = fem.dof_index_for(len(task.vertices), self.u_dofs)
        out = []
        if task.gamma_cells.size == 0:
            return out
        gcells = task.cells[task.gamma_cells]
        vol, grads = fem.batch_cell_geometry(task.vertices, gcells)
        for j, gid in enumerate(task.gamma_global):
            verts = gcells[j]
            vals = np.zeros((self.dim + 1, Qt.shape[1]))
            for a, v in enumerate(verts):
                dof = u_index[v]
                if dof >= 0:
                    vals[a] = Qt[dof]
            out.append(
                GammaCellTrace(int(gid), vals, grads[j].T @ vals)
            )
        return out

    # -- diagnostics -------------------------------------------------------

    def interp_error_probe(self, t_grid=None, n_traces: int = 10, seed: int = 0):
        """Measured interpolation error of the lifting map versus its bounds.

        For each probe trace and each t, compares the Chebyshev interpolant
        of the lifting against direct evaluation, in the L2 and H1-seminorm
        metrics, and reports the worst ratio to the per-level bounds.
        """
        cfg = self.config
        if t_grid is None:
            t_grid = np.linspace(0.02 * cfg.lam, 0.98 * cfg.lam, 50)
        rng = np.random.default_rng(seed)
        nb = self.split.n_B
        traces = rng.standard_normal((nb, n_traces))
        traces /= np.linalg.norm(traces, axis=0, keepdims=True)

        znode = [self.apply_Zh(i, traces) for i in range(cfg.n_points)]
        # H1 norm of the zero-extension of each trace (vanishes off the
        # extension boundary, so it is admissible for the error bound)
        nb_ = self.split.n_B
        K_BB = fem.assemble_K(self.A, self.M)[:nb_, :nb_]
        ext_norm = np.sqrt(np.einsum("ij,ij->j", traces, K_BB @ traces))
        b0 = lemma_interp_bound(cfg.eta, cfg.n_points, cfg.lam, 0) * ext_norm
        b1 = lemma_interp_bound(cfg.eta, cfg.n_points, cfg.lam, 1) * ext_norm

        max_e0 = max_e1 = 0.0
        max_r0 = max_r1 = 0.0
        scale = 0.0
        for t in t_grid:
            direct = self.apply_Zh_at(t, traces)
            ell = lagrange_eval(cfg.nodes, t)
            interp = sum(ell[i] * znode[i] for i in range(cfg.n_points))
            diff = interp - direct
            e0 = np.sqrt(np.einsum("ij,ij->j", diff, self.M_II @ diff))
            e1 = np.sqrt(np.einsum("ij,ij->j", diff, self.A_II @ diff))
            scale = max(
                scale,
                float(
                    np.sqrt(np.einsum("ij,ij->j", direct, self.A_II @ direct)).max()
                ),
            )
            max_e0 = max(max_e0, float(e0.max()))
            max_e1 = max(max_e1, float(e1.max()))
            max_r0 = max(max_r0, float((e0 / b0).max()))
            max_r1 = max(max_r1, float((e1 / b1).max()))
        return {
            "max_e0": max_e0,
            "max_e1": max_e1,
            "ratio_e0": max_r0,
            "ratio_e1": max_r1,
            "z_scale": scale,
        }

    def apply_S(self, x_B):
        """Trace-norm Gram action S x_B (Schur complement, diagnostics)."""
        x_B = np.asarray(x_B, dtype=float)
        nb = self.split.n_B
        K = fem.assemble_K(self.A, self.M)
        K_BB = K[:nb, :nb]
        K_IB = K[nb:, :nb]
        KII_fact = Factorization(K[nb:, nb:].tocsc())
        return K_BB @ x_B - K_IB.T @ KII_fact.solve(K_IB @ x_B)


def solve_local_task(task: LocalTask) -> LocalBasisResult:
    """Run the complete pipeline for one serialized task."""
    solver = SubdomainSolver(task)
    return solver.build_local_basis()
