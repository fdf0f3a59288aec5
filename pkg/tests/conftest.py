import numpy as np
import pytest

from pucpi import eigcore, fem, local_subspace, mesh as meshmod, runtime


@pytest.fixture(scope="session")
def square16():
    return meshmod.build_structured_mesh(2, 16)


@pytest.fixture(scope="session")
def square16_plan(square16):
    return meshmod.build_cover_plan(square16, 4, seed=1)


@pytest.fixture(scope="session")
def square16_reference(square16):
    A, M, _ = fem.assemble_global(square16)
    pairs = eigcore.smallest_eigenpairs(A, M, k=21, tol=1e-10)
    return A, M, pairs.values


@pytest.fixture(scope="session")
def small_solver(square16, square16_plan, square16_reference):
    """Subdomain 0 of the 16x16 square, ready for operator-level tests."""
    _, _, ref = square16_reference
    lam = 0.5 * (ref[9] + ref[10])
    cfg = local_subspace.SpectralConfig(lam=lam, tol=1e-4)
    task = runtime.build_task(square16, square16_plan, 0, cfg)
    return local_subspace.SubdomainSolver(task, cfg)


def random_spd_pencil(rng, n):
    X = rng.standard_normal((n, n))
    A = X @ X.T + n * np.eye(n)
    Y = rng.standard_normal((n, n))
    M = Y @ Y.T + n * np.eye(n)
    return A, M
