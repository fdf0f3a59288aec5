"""Serialization of worker task inputs and local basis results.

Task files carry a self-contained submesh plus the index data a worker needs
to run one subdomain pipeline with no other inputs. Result files carry only
the spectral data and the overlap-cell trace of the local basis, which is all
the master needs to assemble the reduced pencil.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

TASK_MAGIC = "pucpi-task v1"
RESULT_MAGIC = "pucpi-local v1"

# 17 significant digits round-trips IEEE doubles exactly
_FLT = "%.17g"


class FormatError(ValueError):
    pass


@dataclass
class LocalTask:
    """One subdomain's complete work description.

    Vertex and cell indices are local to the embedded submesh; `l2g` maps
    local vertex index to global, `gamma_global` maps the listed overlap
    cells to global cell ids so the master can match shared cells.
    """

    subdomain: int
    lam: float
    eta: float
    n_points: int
    tol: float
    dim: int
    vertices: np.ndarray        # (nv, dim) submesh coordinates
    cells: np.ndarray           # (nc, dim+1) extended-subdomain cells
    l2g: np.ndarray             # (nv,) global vertex ids
    dirichlet: np.ndarray       # local vertices on the outer boundary
    trace: np.ndarray           # local vertices on the extension boundary
    u_cells: np.ndarray         # indices into `cells` forming the core subdomain
    owned: np.ndarray           # local vertices this subdomain stitches
    gamma_cells: np.ndarray     # indices into `cells`: overlap cells of the core
    gamma_global: np.ndarray    # same length: global cell ids


@dataclass
class GammaCellTrace:
    """P1 data of every basis column on one overlap cell."""

    global_cell: int
    values: np.ndarray     # (dim+1, n_cols) vertex values, cell vertex order
    gradients: np.ndarray  # (dim, n_cols) constant gradient per column


@dataclass
class LocalBasisResult:
    subdomain: int
    n_modes: int            # K(eta*lam): retained local modes
    n_svd: int              # k: complementing directions kept by the cutoff
    n_cols: int             # final basis size after rank filtering
    sigma_tail: float       # first discarded singular value
    d: np.ndarray           # (n_cols,) ascending local Ritz values
    gamma: list = field(default_factory=list)  # GammaCellTrace entries


def _write_ints(out, name, arr):
    arr = np.asarray(arr, dtype=np.int64).ravel()
    out.write(f"{name} {arr.size}\n")
    if arr.size:
        out.write(" ".join(str(int(v)) for v in arr))
        out.write("\n")


def _write_floats(out, name, arr):
    arr = np.asarray(arr, dtype=float).ravel()
    out.write(f"{name} {arr.size}\n")
    if arr.size:
        out.write(" ".join(_FLT % v for v in arr))
        out.write("\n")


class _Reader:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    def line(self):
        while self.pos < len(self.lines):
            ln = self.lines[self.pos].strip()
            self.pos += 1
            if ln:
                return ln
        raise FormatError("unexpected end of file")

    def ints(self, name):
        head = self.line().split()
        if head[0] != name:
            raise FormatError(f"expected section {name!r}, got {head[0]!r}")
        count = int(head[1])
        if count == 0:
            return np.zeros(0, dtype=np.int64)
        vals = np.array(self.line().split(), dtype=np.int64)
        if vals.size != count:
            raise FormatError(f"section {name}: expected {count} ints, got {vals.size}")
        return vals

    def floats(self, name):
        head = self.line().split()
        if head[0] != name:
            raise FormatError(f"expected section {name!r}, got {head[0]!r}")
        count = int(head[1])
        if count == 0:
            return np.zeros(0)
        vals = np.array(self.line().split(), dtype=float)
        if vals.size != count:
            raise FormatError(f"section {name}: expected {count} floats, got {vals.size}")
        return vals


def write_task(task: LocalTask) -> str:
    out = io.StringIO()
    out.write(TASK_MAGIC + "\n")
    out.write(f"id {task.subdomain}\n")
    out.write(
        "params %s %s %d %s\n"
        % (_FLT % task.lam, _FLT % task.eta, task.n_points, _FLT % task.tol)
    )
    nv, nc = len(task.vertices), len(task.cells)
    out.write(f"mesh {task.dim} {nv} {nc}\n")
    for row in task.vertices:
        out.write(" ".join(_FLT % x for x in row))
        out.write("\n")
    for row in task.cells:
        out.write(" ".join(str(int(v)) for v in row))
        out.write("\n")
    _write_ints(out, "l2g", task.l2g)
    _write_ints(out, "dirichlet", task.dirichlet)
    _write_ints(out, "trace", task.trace)
    _write_ints(out, "ucells", task.u_cells)
    _write_ints(out, "owned", task.owned)
    _write_ints(out, "gcells", task.gamma_cells)
    _write_ints(out, "gglobal", task.gamma_global)
    out.write("end\n")
    return out.getvalue()


def read_task(text: str) -> LocalTask:
    r = _Reader(text)
    if r.line() != TASK_MAGIC:
        raise FormatError("not a task file")
    head = r.line().split()
    if head[0] != "id":
        raise FormatError("missing id")
    subdomain = int(head[1])
    p = r.line().split()
    if p[0] != "params":
        raise FormatError("missing params")
    lam, eta, n_points, tol = float(p[1]), float(p[2]), int(p[3]), float(p[4])
    mh = r.line().split()
    if mh[0] != "mesh":
        raise FormatError("missing mesh")
    dim, nv, nc = int(mh[1]), int(mh[2]), int(mh[3])
    vertices = np.array([r.line().split() for _ in range(nv)], dtype=float)
    vertices = vertices.reshape(nv, dim)
    cells = np.array([r.line().split() for _ in range(nc)], dtype=np.int64)
    cells = cells.reshape(nc, dim + 1)
    l2g = r.ints("l2g")
    if l2g.size != nv:
        raise FormatError("l2g size mismatch")
    task = LocalTask(
        subdomain=subdomain,
        lam=lam,
        eta=eta,
        n_points=n_points,
        tol=tol,
        dim=dim,
        vertices=vertices,
        cells=cells,
        l2g=l2g,
        dirichlet=r.ints("dirichlet"),
        trace=r.ints("trace"),
        u_cells=r.ints("ucells"),
        owned=r.ints("owned"),
        gamma_cells=r.ints("gcells"),
        gamma_global=r.ints("gglobal"),
    )
    if task.gamma_cells.size != task.gamma_global.size:
        raise FormatError("overlap cell id lists disagree in length")
    if r.line() != "end":
        raise FormatError("missing end marker")
    return task


def write_result(res: LocalBasisResult) -> str:
    out = io.StringIO()
    out.write(RESULT_MAGIC + "\n")
    out.write(f"id {res.subdomain}\n")
    out.write(f"dims {res.n_cols} {res.n_modes} {res.n_svd}\n")
    out.write("sigma_tail %s\n" % (_FLT % res.sigma_tail))
    _write_floats(out, "d", res.d)
    out.write(f"gamma {len(res.gamma)}\n")
    for g in res.gamma:
        nloc, ncols = g.values.shape
        out.write(f"cell {g.global_cell} {nloc} {ncols}\n")
        for row in g.values:
            out.write(" ".join(_FLT % v for v in row))
            out.write("\n")
        for row in g.gradients:
            out.write(" ".join(_FLT % v for v in row))
            out.write("\n")
    out.write("end\n")
    return out.getvalue()


def read_result(text: str) -> LocalBasisResult:
    r = _Reader(text)
    if r.line() != RESULT_MAGIC:
        raise FormatError("not a result file")
    head = r.line().split()
    if head[0] != "id":
        raise FormatError("missing id")
    subdomain = int(head[1])
    dm = r.line().split()
    if dm[0] != "dims":
        raise FormatError("missing dims")
    n_cols, n_modes, n_svd = int(dm[1]), int(dm[2]), int(dm[3])
    st = r.line().split()
    if st[0] != "sigma_tail":
        raise FormatError("missing sigma_tail")
    sigma_tail = float(st[1])
    d = r.floats("d")
    if d.size != n_cols:
        raise FormatError("ritz value count mismatch")
    gh = r.line().split()
    if gh[0] != "gamma":
        raise FormatError("missing gamma section")
    n_gamma = int(gh[1])
    gamma = []
    for _ in range(n_gamma):
        ch = r.line().split()
        if ch[0] != "cell":
            raise FormatError("missing cell record")
        gid, nloc, ncols = int(ch[1]), int(ch[2]), int(ch[3])
        if ncols != n_cols:
            raise FormatError(f"cell {gid}: column count mismatch")
        values = np.array(
            [r.line().split() for _ in range(nloc)], dtype=float
        ).reshape(nloc, ncols)
        gradients = np.array(
            [r.line().split() for _ in range(nloc - 1)], dtype=float
        ).reshape(nloc - 1, ncols)
        gamma.append(GammaCellTrace(gid, values, gradients))
    if r.line() != "end":
        raise FormatError("missing end marker")
    return LocalBasisResult(
        subdomain=subdomain,
        n_modes=n_modes,
        n_svd=n_svd,
        n_cols=n_cols,
        sigma_tail=sigma_tail,
        d=d,
        gamma=gamma,
    )
