"""Simplicial meshes, vertex partitions, subdomain covers, and r-extensions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class MeshTopology:
    """Simplicial mesh: triangles (dim=2) or tetrahedra (dim=3).

    Immutable after construction; safe to share across threads.
    """

    dim: int
    vertices: np.ndarray          # (nv, dim) float
    cells: np.ndarray             # (nc, dim+1) int, positively oriented
    boundary_vertices: frozenset  # vertex indices on the outer boundary
    h: float                      # max cell diameter

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_cells(self) -> int:
        return self.cells.shape[0]


def _signed_volumes(vertices, cells):
    """Signed simplex volumes (area in 2D)."""
    d = vertices.shape[1]
    edges = vertices[cells[:, 1:]] - vertices[cells[:, :1]]
    fact = {1: 1.0, 2: 2.0, 3: 6.0}[d]
    return np.linalg.det(edges) / fact


def _cell_diameters(vertices, cells):
    nloc = cells.shape[1]
    diam = np.zeros(cells.shape[0])
    for i in range(nloc):
        for j in range(i + 1, nloc):
            e = vertices[cells[:, i]] - vertices[cells[:, j]]
            diam = np.maximum(diam, np.linalg.norm(e, axis=1))
    return diam


def cell_facets(cell, dim):
    """The d facets of a simplex, as sorted vertex tuples."""
    verts = tuple(cell)
    return [tuple(sorted(verts[:i] + verts[i + 1:])) for i in range(dim + 1)]


def _boundary_facets(cells, dim):
    count = {}
    for cell in cells:
        for f in cell_facets(cell, dim):
            count[f] = count.get(f, 0) + 1
    return [f for f, c in count.items() if c == 1]


def make_mesh(dim, vertices, cells) -> MeshTopology:
    """Validate, orient, and finalize a mesh from raw arrays."""
    if dim not in (2, 3):
        raise MeshError(f"dim must be 2 or 3, got {dim}")
    vertices = np.asarray(vertices, dtype=float)
    cells = np.asarray(cells, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != dim:
        raise MeshError("vertices must have shape (nv, dim)")
    if cells.ndim != 2 or cells.shape[1] != dim + 1:
        raise MeshError("cells must have shape (nc, dim+1)")
    if cells.min(initial=0) < 0 or cells.max(initial=-1) >= len(vertices):
        raise MeshError("cell refers to an invalid vertex index")

    cells = cells.copy()
    vols = _signed_volumes(vertices, cells)
    flip = vols < 0
    cells[flip, 0], cells[flip, 1] = cells[flip, 1].copy(), cells[flip, 0].copy()
    vols = np.abs(vols)
    if np.any(vols <= 0):
        raise MeshError("degenerate (zero-volume) cell")

    boundary = frozenset(v for f in _boundary_facets(cells, dim) for v in f)
    h = float(_cell_diameters(vertices, cells).max())
    return MeshTopology(dim, vertices, cells, boundary, h)


def build_structured_mesh(dim: int, cells_per_side: int) -> MeshTopology:
    """Uniform simplicial triangulation of the unit square/cube."""
    if dim not in (2, 3):
        raise MeshError(f"dim must be 2 or 3, got {dim}")
    if cells_per_side < 2:
        raise MeshError("cells_per_side must be >= 2")
    n = cells_per_side
    side = np.linspace(0.0, 1.0, n + 1)

    if dim == 2:
        xx, yy = np.meshgrid(side, side, indexing="ij")
        vertices = np.column_stack([xx.ravel(), yy.ravel()])

        def vid(i, j):
            return i * (n + 1) + j

        cells = []
        for i in range(n):
            for j in range(n):
                v00, v10 = vid(i, j), vid(i + 1, j)
                v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
                cells.append((v00, v10, v11))
                cells.append((v00, v11, v01))
        return make_mesh(2, vertices, cells)

    xx, yy, zz = np.meshgrid(side, side, side, indexing="ij")
    vertices = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])

    def vid3(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    # Kuhn split: 6 tets per cube, all sharing the main diagonal.
    kuhn = [
        (0b000, 0b100, 0b110, 0b111),
        (0b000, 0b110, 0b010, 0b111),
        (0b000, 0b010, 0b011, 0b111),
        (0b000, 0b011, 0b001, 0b111),
        (0b000, 0b001, 0b101, 0b111),
        (0b000, 0b101, 0b100, 0b111),
    ]
    cells = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                corner = [
                    vid3(i + (c >> 2 & 1), j + (c >> 1 & 1), k + (c & 1))
                    for c in range(8)
                ]
                for tet in kuhn:
                    cells.append(tuple(corner[c] for c in tet))
    return make_mesh(3, vertices, cells)


def _paper_cube_map(x: np.ndarray) -> np.ndarray:
    """Skewed cube: (x1, x2, x3) -> (x1 + 0.4 x3 (2 x1 - 1), ..., x3)."""
    y = x.copy()
    y[:, 0] = x[:, 0] + 0.4 * x[:, 2] * (2.0 * x[:, 0] - 1.0)
    y[:, 1] = x[:, 1] + 0.4 * x[:, 2] * (2.0 * x[:, 1] - 1.0)
    return y


DOMAIN_MAPS = {
    "identity": lambda x: x.copy(),
    "paper-cube": _paper_cube_map,
}


def map_domain(mesh: MeshTopology, mapping_id: str) -> MeshTopology:
    """Apply a built-in coordinate map; topology is unchanged."""
    try:
        fn = DOMAIN_MAPS[mapping_id]
    except KeyError:
        raise MeshError(f"unknown mapping_id {mapping_id!r}") from None
    if mapping_id != "identity" and mesh.dim != 3:
        raise MeshError(f"mapping {mapping_id!r} requires a 3D mesh")
    return make_mesh(mesh.dim, fn(mesh.vertices), mesh.cells)


# ---------------------------------------------------------------------------
# mesh file format


def save_mesh(mesh: MeshTopology, path) -> None:
    """Text format: header, coordinates, cells, then boundary vertex list."""
    with open(path, "w") as f:
        f.write(f"pucpi-mesh v1 {mesh.dim} {mesh.num_vertices} {mesh.num_cells}\n")
        for v in mesh.vertices:
            f.write(" ".join(f"{x:.17g}" for x in v) + "\n")
        for c in mesh.cells:
            f.write(" ".join(str(i) for i in c) + "\n")
        f.write(" ".join(str(i) for i in sorted(mesh.boundary_vertices)) + "\n")


def load_mesh(path) -> MeshTopology:
    with open(path) as f:
        header = f.readline().split()
        if header[:2] != ["pucpi-mesh", "v1"]:
            raise MeshError(f"not a pucpi-mesh file: {path}")
        dim, nv, nc = int(header[2]), int(header[3]), int(header[4])
        vertices = np.array(
            [[float(x) for x in f.readline().split()] for _ in range(nv)]
        )
        cells = np.array(
            [[int(x) for x in f.readline().split()] for _ in range(nc)], dtype=np.int64
        )
        declared = {int(x) for x in f.readline().split()}
    mesh = make_mesh(dim, vertices, cells)
    if declared != set(mesh.boundary_vertices):
        raise MeshError("boundary vertex list inconsistent with topology")
    return mesh


def load_partition_labels(path, num_vertices: int, M: int):
    """One integer label in [0, M) per vertex line."""
    labels = np.loadtxt(path, dtype=np.int64).ravel()
    if labels.size != num_vertices:
        raise MeshError("partition label file length does not match vertex count")
    if labels.min() < 0 or labels.max() >= M:
        raise MeshError("partition label out of range")
    return [np.flatnonzero(labels == p) for p in range(M)]


# ---------------------------------------------------------------------------
# adjacency helpers


def vertex_adjacency(mesh: MeshTopology):
    """Sorted neighbor lists over the cell graph."""
    adj = [set() for _ in range(mesh.num_vertices)]
    for cell in mesh.cells:
        for a in cell:
            for b in cell:
                if a != b:
                    adj[a].add(b)
    return [np.array(sorted(s), dtype=np.int64) for s in adj]


def cells_of_vertex(mesh: MeshTopology):
    star = [[] for _ in range(mesh.num_vertices)]
    for ci, cell in enumerate(mesh.cells):
        for v in cell:
            star[v].append(ci)
    return [np.array(s, dtype=np.int64) for s in star]


# ---------------------------------------------------------------------------
# partitioning


def partition_vertices(mesh: MeshTopology, M: int, seed: int = 0):
    """Deterministic greedy-BFS partition grown from farthest-point seeds.

    Returns M disjoint nonempty vertex sets covering all vertices. The growth
    always extends the currently smallest set, which keeps sizes roughly
    balanced on structured meshes.
    """
    nv = mesh.num_vertices
    if M < 2 or M > nv:
        raise MeshError(f"M={M} out of range for {nv} vertices")
    adj = vertex_adjacency(mesh)
    rng = np.random.default_rng(seed)

    def bfs_dist(sources):
        dist = np.full(nv, -1, dtype=np.int64)
        frontier = list(sources)
        for s in frontier:
            dist[s] = 0
        while frontier:
            nxt = []
            for v in frontier:
                for w in adj[v]:
                    if dist[w] < 0:
                        dist[w] = dist[v] + 1
                        nxt.append(w)
            frontier = nxt
        dist[dist < 0] = nv  # disconnected components count as far
        return dist

    seeds = [int(rng.integers(nv))]
    while len(seeds) < M:
        dist = bfs_dist(seeds)
        far = int(np.flatnonzero(dist == dist.max())[0])
        seeds.append(far)

    owner = np.full(nv, -1, dtype=np.int64)
    frontiers = []
    sizes = np.zeros(M, dtype=np.int64)
    for p, s in enumerate(seeds):
        owner[s] = p
        sizes[p] = 1
        frontiers.append(list(adj[s]))

    assigned = M
    while assigned < nv:
        p = int(np.argmin(sizes))
        v = -1
        while frontiers[p]:
            cand = frontiers[p].pop(0)
            if owner[cand] < 0:
                v = cand
                break
        if v < 0:
            # frontier exhausted: grab the smallest unassigned vertex
            remaining = np.flatnonzero(owner < 0)
            if remaining.size == 0:
                break
            v = int(remaining[0])
            # avoid starving: if another part could still grow, let it
            grow = [q for q in range(M) if frontiers[q]]
            if grow:
                sizes[p] = nv  # park this partition
                continue
        owner[v] = p
        sizes[p] += 1
        frontiers[p].extend(adj[v])
        assigned += 1

    return [np.flatnonzero(owner == p) for p in range(M)]


def build_subdomains(mesh: MeshTopology, vertex_sets):
    """Cell K belongs to subdomain p iff some vertex of K lies in set p."""
    _check_cover(mesh, vertex_sets)
    owner_mask = np.zeros((len(vertex_sets), mesh.num_vertices), dtype=bool)
    for p, vs in enumerate(vertex_sets):
        owner_mask[p, np.asarray(vs, dtype=np.int64)] = True
    out = []
    for p in range(len(vertex_sets)):
        hit = owner_mask[p][mesh.cells].any(axis=1)
        out.append(np.flatnonzero(hit))
    return out


def overlap_set(mesh: MeshTopology, vertex_sets):
    """Cells with vertices in at least two of the vertex sets."""
    _check_cover(mesh, vertex_sets)
    label = np.full(mesh.num_vertices, -1, dtype=np.int64)
    for p, vs in enumerate(vertex_sets):
        label[np.asarray(vs, dtype=np.int64)] = p
    cl = label[mesh.cells]
    mixed = (cl != cl[:, :1]).any(axis=1)
    return np.flatnonzero(mixed)


def _check_cover(mesh, vertex_sets):
    seen = np.zeros(mesh.num_vertices, dtype=np.int64)
    for vs in vertex_sets:
        vs = np.asarray(vs, dtype=np.int64)
        if vs.size == 0:
            raise MeshError("empty vertex set in cover")
        seen[vs] += 1
    if np.any(seen != 1):
        raise MeshError("vertex sets must partition the vertices")


def cell_layers(mesh: MeshTopology, cell_ids, num_layers: int, star=None):
    """Cells reachable from cell_ids in <= num_layers vertex-sharing hops."""
    star = cells_of_vertex(mesh) if star is None else star
    current = np.zeros(mesh.num_cells, dtype=bool)
    current[np.asarray(cell_ids, dtype=np.int64)] = True
    for _ in range(num_layers):
        verts = np.unique(mesh.cells[current])
        grown = current.copy()
        for v in verts:
            grown[star[v]] = True
        current = grown
    return np.flatnonzero(current)


def build_extension(mesh: MeshTopology, subdomain_cells, r: float, star=None):
    """All cells within vertex distance r of the subdomain, with at least two
    extra cell layers so the zero-on-U trace extension operator exists.

    Returns (extension_cells, effective_r) where effective_r covers the
    enforced minimum layers.
    """
    if r < 0:
        raise MeshError("extension radius must be nonnegative")
    sub = np.asarray(subdomain_cells, dtype=np.int64)
    uverts = np.unique(mesh.cells[sub])
    tree = cKDTree(mesh.vertices[uverts])
    vdist, _ = tree.query(mesh.vertices)
    cdist = vdist[mesh.cells].min(axis=1)

    within = np.zeros(mesh.num_cells, dtype=bool)
    within[cdist <= r + 1e-12] = True
    layered = cell_layers(mesh, sub, 2, star=star)
    within[layered] = True
    ext = np.flatnonzero(within)
    effective_r = float(cdist[ext].max())
    return ext, effective_r


def empirical_radius(coords: np.ndarray):
    """Half-spread of the point set along its first principal component.

    When leading covariance eigenvalues tie, the direction maximizing the
    spread within the tied eigenspace is used (sampled over canonical and
    diagonal combinations), with deterministic sign fixing.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.shape[0] < 2:
        raise MeshError("empirical radius needs at least 2 points")
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / coords.shape[0]
    w, vecs = np.linalg.eigh(cov)
    if w[-1] <= 1e-14 * max(1.0, abs(w).max()):
        raise MeshError("degenerate coordinate set (all points identical)")

    tied = np.flatnonzero(w >= w[-1] * (1.0 - 1e-12))
    candidates = [vecs[:, i] for i in tied]
    if len(tied) > 1:
        # spread can peak strictly inside the tied eigenspace
        base = vecs[:, tied]
        if len(tied) == 2:
            angles = np.arange(3600) * np.pi / 3600.0
            dirs = base @ np.vstack([np.cos(angles), np.sin(angles)])
            candidates.extend(dirs.T)
        else:
            for sx in (1.0, -1.0):
                for sy in (1.0, -1.0):
                    for combo in (
                        (1.0, sx, sy),
                        (1.0, sx, 0.0),
                        (1.0, 0.0, sy),
                        (0.0, 1.0, sx),
                    ):
                        v = base @ np.asarray(combo)
                        candidates.append(v / np.linalg.norm(v))

    def spread(u):
        proj = centered @ u
        return proj.max() - proj.min()

    spreads = np.array([spread(u) for u in candidates])
    best = spreads.max()
    pool = [candidates[i] for i in np.flatnonzero(spreads >= best * (1.0 - 1e-12))]
    pool = [_fix_sign(u) for u in pool]
    pool.sort(key=lambda u: tuple(-np.abs(u)))
    axis = pool[0]
    return 0.5 * float(spread(axis)), axis


def _fix_sign(u):
    u = np.asarray(u, dtype=float)
    for x in u:
        if abs(x) > 1e-14:
            return u if x > 0 else -u
    return u


# ---------------------------------------------------------------------------
# cover plan


@dataclass(frozen=True)
class SubdomainMaps:
    """Local-to-global DOF maps for one subdomain, trace DOFs first.

    DOF = non-Dirichlet vertex (outer boundary vertices are eliminated).
    """

    sub_vertices: np.ndarray   # U DOFs: global vertex ids, trace block first
    sub_n_B: int
    ext_vertices: np.ndarray   # U-hat DOFs: global vertex ids, trace block first
    ext_n_B: int
    owned_vertices: np.ndarray  # owned interior DOFs (the stitching support)


@dataclass(frozen=True)
class CoverPlan:
    M: int
    vertex_sets: tuple          # disjoint vertex index arrays
    subdomain_cells: tuple      # cell index arrays, one per subdomain
    extension_cells: tuple
    gamma_cells: np.ndarray
    r: tuple                    # requested extension radius per subdomain
    effective_r: tuple
    maps: tuple                 # SubdomainMaps per subdomain
    seed: int = 0


def subset_boundary_vertices(mesh: MeshTopology, cell_ids):
    """Vertices on the boundary of the sub-partition given by cell_ids."""
    cells = mesh.cells[np.asarray(cell_ids, dtype=np.int64)]
    return {v for f in _boundary_facets(cells, mesh.dim) for v in f}


def _local_maps(mesh, sub_cells, ext_cells, owned_global):
    dirichlet = mesh.boundary_vertices

    def ordered_dofs(cell_ids):
        verts = np.unique(mesh.cells[cell_ids])
        bdry = subset_boundary_vertices(mesh, cell_ids)
        trace = sorted(v for v in bdry if v not in dirichlet)
        interior = sorted(v for v in verts if v not in bdry and v not in dirichlet)
        return np.array(trace + interior, dtype=np.int64), len(trace)

    sub_dofs, sub_nb = ordered_dofs(sub_cells)
    ext_dofs, ext_nb = ordered_dofs(ext_cells)
    owned = np.array(
        sorted(v for v in owned_global if v not in dirichlet), dtype=np.int64
    )
    return SubdomainMaps(sub_dofs, sub_nb, ext_dofs, ext_nb, owned)


def build_cover_plan(
    mesh: MeshTopology,
    M: int,
    seed: int = 0,
    radius_factor: float = 0.2,
    vertex_sets=None,
    r_override: float | None = None,
) -> CoverPlan:
    """Partition, subdomains, extensions, overlap, and DOF maps in one pass."""
    if vertex_sets is None:
        vertex_sets = partition_vertices(mesh, M, seed)
    else:
        _check_cover(mesh, vertex_sets)
        if len(vertex_sets) != M:
            raise MeshError("vertex_sets length does not match M")

    sub_cells = build_subdomains(mesh, vertex_sets)
    gamma = overlap_set(mesh, vertex_sets)
    star = cells_of_vertex(mesh)

    radii, eff_radii, ext_cells, maps = [], [], [], []
    for p in range(M):
        if r_override is not None:
            r = float(r_override)
        else:
            r_c, _ = empirical_radius(mesh.vertices[vertex_sets[p]])
            r = radius_factor * r_c
        ext, eff = build_extension(mesh, sub_cells[p], r, star=star)
        radii.append(r)
        eff_radii.append(eff)
        ext_cells.append(ext)
        maps.append(_local_maps(mesh, sub_cells[p], ext, vertex_sets[p]))

    plan = CoverPlan(
        M=M,
        vertex_sets=tuple(np.asarray(v, dtype=np.int64) for v in vertex_sets),
        subdomain_cells=tuple(sub_cells),
        extension_cells=tuple(ext_cells),
        gamma_cells=gamma,
        r=tuple(radii),
        effective_r=tuple(eff_radii),
        maps=tuple(maps),
        seed=seed,
    )
    validate_cover_plan(mesh, plan)
    return plan


def validate_cover_plan(mesh: MeshTopology, plan: CoverPlan) -> None:
    """Raise on any structural violation of the cover invariants."""
    _check_cover(mesh, plan.vertex_sets)
    covered = np.zeros(mesh.num_cells, dtype=bool)
    for cells in plan.subdomain_cells:
        covered[cells] = True
    if not covered.all():
        raise MeshError("subdomains do not cover all cells")

    sets = [frozenset(c.tolist()) for c in plan.subdomain_cells]
    for p in range(plan.M):
        for q in range(plan.M):
            if p != q and sets[p] <= sets[q]:
                raise MeshError(f"subdomain {p} is contained in subdomain {q}")

    for p in range(plan.M):
        if not sets[p] <= frozenset(plan.extension_cells[p].tolist()):
            raise MeshError(f"extension of subdomain {p} does not contain it")
        uverts = set(np.unique(mesh.cells[plan.subdomain_cells[p]]).tolist())
        ext_bdry = subset_boundary_vertices(mesh, plan.extension_cells[p])
        clash = (ext_bdry - mesh.boundary_vertices) & uverts
        if clash:
            raise MeshError(
                f"subdomain {p}: extension too thin, trace meets U at {sorted(clash)[:5]}"
            )
        m = plan.maps[p]
        if m.ext_n_B < 1 or len(m.ext_vertices) - m.ext_n_B < 1:
            raise MeshError(f"subdomain {p}: empty trace or interior block")


def counting_functions(mesh: MeshTopology, plan: CoverPlan):
    """Per-cell multiplicities G (subdomains) and G-hat (extensions)."""
    G = np.zeros(mesh.num_cells, dtype=np.int64)
    Ghat = np.zeros(mesh.num_cells, dtype=np.int64)
    for p in range(plan.M):
        G[plan.subdomain_cells[p]] += 1
        Ghat[plan.extension_cells[p]] += 1
    return G, Ghat
