import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from pucpi import fem
from pucpi.mesh import build_cover_plan, build_structured_mesh
from pucpi.fem import (
    AssemblyError,
    assemble_K,
    assemble_KR,
    assemble_global,
    assemble_pair,
    assemble_stiffness_mass,
    dof_index_for,
    extension_matrix,
    global_dof_numbering,
    p1_element_matrices,
    stitching_matrix,
)


REF_TRI = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


class TestElementMatrices:
    def test_reference_triangle_closed_form(self):
        Ke, Me = p1_element_matrices(REF_TRI)
        assert np.allclose(
            Ke, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]])
        )
        assert np.allclose(
            Me, np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24.0
        )

    def test_stiffness_rowsums_zero(self):
        rng = np.random.default_rng(0)
        X = REF_TRI + rng.standard_normal((3, 2)) * 0.1
        Ke, _ = p1_element_matrices(X)
        assert np.allclose(Ke.sum(axis=1), 0.0, atol=1e-13)

    def test_mass_total_is_volume(self):
        Ke, Me = p1_element_matrices(REF_TRI)
        assert abs(Me.sum() - 0.5) < 1e-14


class TestAssembly:
    def test_no_bc_stiffness_kernel(self):
        m = build_structured_mesh(2, 6)
        idx = np.arange(m.num_vertices)
        A, M = assemble_pair(m.vertices, m.cells, idx, m.num_vertices)
        ones = np.ones(m.num_vertices)
        assert np.linalg.norm(A @ ones) <= 1e-13 * sp.linalg.norm(A)

    def test_mass_sums_to_volume(self):
        for dim, n, vol in ((2, 5, 1.0), (3, 3, 1.0)):
            m = build_structured_mesh(dim, n)
            idx = np.arange(m.num_vertices)
            _, M = assemble_pair(m.vertices, m.cells, idx, m.num_vertices)
            assert abs(M.sum() - vol) < 1e-12

    def test_exact_symmetry(self):
        m = build_structured_mesh(2, 8)
        A, M, _ = assemble_global(m)
        assert (A != A.T).nnz == 0
        assert (M != M.T).nnz == 0

    def test_matches_per_element_loop(self):
        m = build_structured_mesh(2, 4)
        idx = np.arange(m.num_vertices)
        A, M = assemble_pair(m.vertices, m.cells, idx, m.num_vertices)
        Ad = np.zeros((m.num_vertices,) * 2)
        Md = np.zeros_like(Ad)
        for cell in m.cells:
            Ke, Me = p1_element_matrices(m.vertices[cell])
            for a in range(3):
                for b in range(3):
                    Ad[cell[a], cell[b]] += Ke[a, b]
                    Md[cell[a], cell[b]] += Me[a, b]
        assert np.allclose(A.toarray(), Ad, atol=1e-13)
        assert np.allclose(M.toarray(), Md, atol=1e-15)

    def test_degenerate_cell_rejected(self):
        verts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        with pytest.raises(AssemblyError):
            assemble_pair(verts, np.array([[0, 1, 2]]), np.arange(3), 3)

    def test_gram_energy_consistency(self):
        m = build_structured_mesh(2, 6)
        idx = np.arange(m.num_vertices)
        A, M = assemble_pair(m.vertices, m.cells, idx, m.num_vertices)
        K = assemble_K(A, M)
        rng = np.random.default_rng(1)
        for _ in range(5):
            v = rng.standard_normal(m.num_vertices)
            # per-element quadrature of the H1 norm
            total = 0.0
            for cell in m.cells:
                Ke, Me = p1_element_matrices(m.vertices[cell])
                total += v[cell] @ (Ke + Me) @ v[cell]
            assert abs(v @ (K @ v) - total) < 1e-12 * abs(total)


class TestDofSplit:
    def test_blocks_and_counts(self):
        m = build_structured_mesh(2, 8)
        plan = build_cover_plan(m, 2, seed=0)
        maps = plan.maps[0]
        A, M, split = assemble_stiffness_mass(
            m.vertices, m.cells[plan.extension_cells[0]],
            maps.ext_vertices, maps.ext_n_B,
        )
        assert split.n_B + split.n_I == split.n == len(maps.ext_vertices)
        assert split.n_B >= 1 and split.n_I >= 1

    def test_block_split_round_trip(self):
        m = build_structured_mesh(2, 6)
        nv = m.num_vertices
        order = np.concatenate([np.arange(nv)[::2], np.arange(nv)[1::2]])
        A1, _ = assemble_pair(m.vertices, m.cells, np.arange(nv), nv)
        idx = dof_index_for(nv, order)
        A2, _ = assemble_pair(m.vertices, m.cells, idx, nv)
        P = sp.csr_matrix((np.ones(nv), (np.arange(nv), order)), shape=(nv, nv))
        assert abs(P.T @ A2 @ P - A1).max() < 1e-14


class TestExtensionMatrix:
    def test_structure(self):
        split = fem.DofSplit(n_B=3, n_I=5)
        E = extension_matrix(split)
        assert E.shape == (8, 3)
        assert E.nnz == 3
        assert np.allclose(E.toarray()[:3], np.eye(3))
        assert np.allclose(E.toarray()[3:], 0.0)


class TestStitching:
    def test_partition_of_unity_exact(self, square16, square16_plan):
        m, plan = square16, square16_plan
        gdof, free = global_dof_numbering(m)
        rng = np.random.default_rng(2)
        total = sp.csr_matrix((len(free), len(free)))
        for p in range(plan.M):
            maps = plan.maps[p]
            owned = set(maps.owned_vertices.tolist())
            mask = np.array([v in owned for v in maps.sub_vertices])
            R = fem.stitching_matrix(len(free), gdof, maps.sub_vertices, mask)
            # restriction: global -> local selection
            sel = sp.csr_matrix(
                (np.ones(len(maps.sub_vertices)),
                 (np.arange(len(maps.sub_vertices)), gdof[maps.sub_vertices])),
                shape=(len(maps.sub_vertices), len(free)),
            )
            total = total + R @ sel
        assert abs(total - sp.eye(len(free))).max() == 0.0

    def test_trace_dofs_map_to_zero(self, square16, square16_plan):
        m, plan = square16, square16_plan
        gdof, free = global_dof_numbering(m)
        maps = plan.maps[0]
        owned = set(maps.owned_vertices.tolist())
        mask = np.array([v in owned for v in maps.sub_vertices])
        R = fem.stitching_matrix(len(free), gdof, maps.sub_vertices, mask)
        R = R.tocsc()
        for loc in range(maps.sub_n_B):
            assert R[:, loc].nnz == 0


class TestKR:
    def test_kr_spd_and_matches_dense(self):
        m = build_structured_mesh(2, 8)
        plan = build_cover_plan(m, 2, seed=0)
        maps = plan.maps[0]
        ucells = m.cells[plan.subdomain_cells[0]]
        uverts = np.unique(ucells)
        udofs = np.array(
            [v for v in uverts if v not in m.boundary_vertices], dtype=np.int64
        )
        owned = set(maps.owned_vertices.tolist())
        mask = np.array([v in owned for v in udofs])
        KR = assemble_KR(m.vertices, ucells, udofs, 0, mask)
        # dense oracle: masked stiffness plus plain mass
        idx = dof_index_for(m.num_vertices, udofs)
        A, M = assemble_pair(m.vertices, ucells, idx, len(udofs))
        Ad = A.toarray().copy()
        Ad[~mask, :] = 0.0
        Ad[:, ~mask] = 0.0
        assert np.allclose(KR.toarray(), Ad + M.toarray(), atol=1e-13)
        w = np.linalg.eigvalsh(KR.toarray())
        assert w.min() > 0

    def test_unowned_diag_is_mass_only(self):
        m = build_structured_mesh(2, 8)
        plan = build_cover_plan(m, 2, seed=0)
        maps = plan.maps[0]
        ucells = m.cells[plan.subdomain_cells[0]]
        uverts = np.unique(ucells)
        udofs = np.array(
            [v for v in uverts if v not in m.boundary_vertices], dtype=np.int64
        )
        owned = set(maps.owned_vertices.tolist())
        mask = np.array([v in owned for v in udofs])
        KR = assemble_KR(m.vertices, ucells, udofs, 0, mask).toarray()
        idx = dof_index_for(m.num_vertices, udofs)
        _, M = assemble_pair(m.vertices, ucells, idx, len(udofs))
        M = M.toarray()
        for i in np.where(~mask)[0]:
            assert abs(KR[i, i] - M[i, i]) < 1e-15


@settings(max_examples=15, deadline=None)
@given(n=st.integers(min_value=2, max_value=8))
def test_mass_pd_property(n):
    m = build_structured_mesh(2, n)
    idx = np.arange(m.num_vertices)
    _, M = assemble_pair(m.vertices, m.cells, idx, m.num_vertices)
    w = np.linalg.eigvalsh(M.toarray())
    assert w.min() > 0
