"""PU-CPI: partition-of-unity condensed pole interpolation eigensolver.

Computes all Dirichlet-Laplacian eigenvalues in a target interval (0, Lambda)
on a simplicial P1 mesh by stitching independently computed per-subdomain
reduced subspaces into a small global Ritz problem.
"""

__version__ = "0.1.0"
