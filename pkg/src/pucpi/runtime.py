"""Master-worker orchestration over a shared directory.

The master plans one task file per subdomain, workers solve them with no
communication between each other, and the master gathers the results. Three
execution modes share the same file contract: in-process (debugging and
references), a local process pool, and a directory queue where any number of
independent worker processes claim tasks from a shared filesystem.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import global_reduce, local_subspace, taskio
from .mesh import CoverPlan, MeshTopology

MODES = ("inproc", "pool", "dirqueue")
DEFAULT_RETRIES = 2


class RuntimeFailure(RuntimeError):
    pass


def fnv1a64(data: bytes) -> str:
    """64-bit FNV-1a content digest (corruption check, not cryptographic)."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return "%016x" % h


def _digest_file(path) -> str:
    with open(path, "rb") as f:
        return fnv1a64(f.read())


def worker_count_from_env(default: int) -> int:
    env = os.environ.get("PUCPI_WORKERS")
    return int(env) if env else default


# -- task planning ---------------------------------------------------------


def build_task(mesh: MeshTopology, plan: CoverPlan, p: int,
               config: local_subspace.SpectralConfig) -> taskio.LocalTask:
    """Extract subdomain p of the plan into a self-contained task."""
    ext_cells = plan.extension_cells[p]
    g_verts = np.unique(mesh.cells[ext_cells])
    g2l = {int(v): i for i, v in enumerate(g_verts)}
    local_cells = np.vectorize(g2l.__getitem__)(mesh.cells[ext_cells])

    cell_pos = {int(c): i for i, c in enumerate(ext_cells)}
    u_cells = np.array(
        [cell_pos[int(c)] for c in plan.subdomain_cells[p]], dtype=np.int64
    )
    gamma_glob = np.array(
        sorted(set(plan.gamma_cells.tolist())
               & set(plan.subdomain_cells[p].tolist())),
        dtype=np.int64,
    )
    gamma_loc = np.array([cell_pos[int(c)] for c in gamma_glob], dtype=np.int64)

    maps = plan.maps[p]
    dirichlet = np.array(
        sorted(g2l[int(v)] for v in g_verts
               if int(v) in mesh.boundary_vertices),
        dtype=np.int64,
    )
    trace = np.array(
        [g2l[int(v)] for v in maps.ext_vertices[: maps.ext_n_B]], dtype=np.int64
    )
    owned = np.array(
        [g2l[int(v)] for v in maps.owned_vertices], dtype=np.int64
    )
    return taskio.LocalTask(
        subdomain=p,
        lam=config.lam,
        eta=config.eta,
        n_points=config.n_points,
        tol=config.tol,
        dim=mesh.dim,
        vertices=mesh.vertices[g_verts],
        cells=local_cells,
        l2g=g_verts.astype(np.int64),
        dirichlet=dirichlet,
        trace=trace,
        u_cells=u_cells,
        owned=owned,
        gamma_cells=gamma_loc,
        gamma_global=gamma_glob,
    )


# -- manifest ---------------------------------------------------------------


@dataclass
class TaskManifest:
    run_id: str
    workdir: str
    config: dict = field(default_factory=dict)
    tasks: list = field(default_factory=list)

    def task_path(self, p):
        return os.path.join(self.workdir, "tasks", f"task_{p}.in")

    def result_path(self, p):
        return os.path.join(self.workdir, "results", f"task_{p}.out")

    def done_path(self, p):
        return os.path.join(self.workdir, "results", f"task_{p}.done")

    def claim_path(self, p):
        return os.path.join(self.workdir, "tasks", f"task_{p}.claim")

    @property
    def complete(self) -> bool:
        return all(t["status"] == "done" for t in self.tasks)

    def save(self):
        path = os.path.join(self.workdir, "manifest.txt")
        tmp = path + f".tmp.{os.getpid()}"
        payload = {
            "run_id": self.run_id,
            "config": self.config,
            "tasks": self.tasks,
        }
        with open(tmp, "w") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    @classmethod
    def load(cls, workdir):
        with open(os.path.join(workdir, "manifest.txt")) as f:
            payload = json.load(f)
        return cls(
            run_id=payload["run_id"],
            workdir=workdir,
            config=payload["config"],
            tasks=payload["tasks"],
        )


def plan_and_serialize(mesh: MeshTopology, plan: CoverPlan,
                       config: local_subspace.SpectralConfig,
                       workdir) -> TaskManifest:
    """Write one task file per subdomain plus the run manifest."""
    os.makedirs(os.path.join(workdir, "tasks"), exist_ok=True)
    os.makedirs(os.path.join(workdir, "results"), exist_ok=True)
    manifest = TaskManifest(
        run_id=uuid.uuid4().hex,
        workdir=str(workdir),
        config={
            "lambda": config.lam,
            "eta": config.eta,
            "n_points": config.n_points,
            "tol": config.tol,
            "subdomains": plan.M,
            "seed": plan.seed,
        },
    )
    for p in range(plan.M):
        task = build_task(mesh, plan, p, config)
        text = taskio.write_task(task)
        path = manifest.task_path(p)
        with open(path, "w") as f:
            f.write(text)
        manifest.tasks.append(
            {
                "id": p,
                "input": os.path.relpath(path, workdir),
                "input_digest": fnv1a64(text.encode()),
                "status": "pending",
                "attempts": 0,
                "output": os.path.relpath(manifest.result_path(p), workdir),
                "output_digest": None,
            }
        )
    manifest.save()
    return manifest


# -- workers ----------------------------------------------------------------


def run_task_file(in_path, out_path):
    """Solve one task file and write its result atomically."""
    with open(in_path) as f:
        task = taskio.read_task(f.read())
    result = local_subspace.solve_local_task(task)
    text = taskio.write_result(result)
    tmp = out_path + f".tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, out_path)
    return out_path


def _claim(path) -> bool:
    """Atomically claim a task; hard links are atomic on shared filesystems."""
    tmp = path + f".{os.getpid()}.{uuid.uuid4().hex[:8]}"
    with open(tmp, "w") as f:
        f.write(f"{os.getpid()}\n")
    try:
        os.link(tmp, path)
        return True
    except FileExistsError:
        return False
    finally:
        os.unlink(tmp)


def worker_loop(workdir) -> int:
    """Claim and solve tasks until none are left; returns tasks completed.

    A worker touches only its own claimed task input and output paths.
    """
    manifest = TaskManifest.load(workdir)
    completed = 0
    for t in manifest.tasks:
        p = t["id"]
        if os.path.exists(manifest.done_path(p)):
            continue
        if not _claim(manifest.claim_path(p)):
            continue
        run_task_file(manifest.task_path(p), manifest.result_path(p))
        with open(manifest.done_path(p), "w") as f:
            f.write("done\n")
            f.flush()
            os.fsync(f.fileno())
        completed += 1
    return completed


def _clear_stale_claims(manifest: TaskManifest):
    # master authority: any claim without a done marker is from a dead worker
    for t in manifest.tasks:
        p = t["id"]
        if not os.path.exists(manifest.done_path(p)) and os.path.exists(
            manifest.claim_path(p)
        ):
            os.unlink(manifest.claim_path(p))


# -- execution --------------------------------------------------------------


def execute(manifest: TaskManifest, mode: str = "inproc",
            worker_count: int | None = None,
            retries: int = DEFAULT_RETRIES) -> TaskManifest:
    """Run all non-done tasks; idempotent, retries failures."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if worker_count is None:
        worker_count = worker_count_from_env(min(len(manifest.tasks), 4))

    for attempt in range(retries + 1):
        pending = [t for t in manifest.tasks if t["status"] != "done"]
        if not pending:
            break
        for t in pending:
            t["status"] = "running"
            t["attempts"] += 1
        manifest.save()

        if mode == "inproc":
            _execute_inproc(manifest, pending)
        elif mode == "pool":
            _execute_pool(manifest, pending, worker_count)
        else:
            _execute_dirqueue(manifest, worker_count)
        _harvest(manifest)
        manifest.save()
    return manifest


def _execute_inproc(manifest, pending):
    for t in pending:
        p = t["id"]
        try:
            run_task_file(manifest.task_path(p), manifest.result_path(p))
            with open(manifest.done_path(p), "w") as f:
                f.write("done\n")
        except Exception as exc:  # failure is recorded, run continues
            t["status"] = "failed"
            t["error"] = repr(exc)


def _execute_pool(manifest, pending, worker_count):
    with ProcessPoolExecutor(max_workers=worker_count) as pool:
        futures = {
            pool.submit(
                run_task_file, manifest.task_path(t["id"]),
                manifest.result_path(t["id"]),
            ): t
            for t in pending
        }
        for fut, t in futures.items():
            p = t["id"]
            try:
                fut.result()
                with open(manifest.done_path(p), "w") as f:
                    f.write("done\n")
            except Exception as exc:
                t["status"] = "failed"
                t["error"] = repr(exc)


def _execute_dirqueue(manifest, worker_count):
    _clear_stale_claims(manifest)
    procs = [
        subprocess.Popen(
            [sys.executable, "-m", "pucpi.cli", "worker",
             "--workdir", manifest.workdir],
        )
        for _ in range(worker_count)
    ]
    for proc in procs:
        proc.wait()


def _harvest(manifest: TaskManifest):
    """Resolve task statuses from the filesystem after an execution pass."""
    for t in manifest.tasks:
        p = t["id"]
        if os.path.exists(manifest.done_path(p)) and os.path.exists(
            manifest.result_path(p)
        ):
            t["status"] = "done"
            t["output_digest"] = _digest_file(manifest.result_path(p))
        elif t["status"] != "failed":
            t["status"] = "failed"


# -- gathering --------------------------------------------------------------


def gather_results(manifest: TaskManifest) -> list:
    """Parse and integrity-check every local result."""
    if not manifest.complete:
        bad = [t["id"] for t in manifest.tasks if t["status"] != "done"]
        raise RuntimeFailure(f"run incomplete, unfinished subdomains: {bad}")
    results = []
    for t in manifest.tasks:
        p = t["id"]
        in_digest = _digest_file(manifest.task_path(p))
        if in_digest != t["input_digest"]:
            raise RuntimeFailure(f"task input for subdomain {p} was modified")
        out_digest = _digest_file(manifest.result_path(p))
        if t["output_digest"] and out_digest != t["output_digest"]:
            raise RuntimeFailure(f"result file for subdomain {p} was modified")
        with open(manifest.result_path(p)) as f:
            res = taskio.read_result(f.read())
        if res.subdomain != p:
            raise RuntimeFailure(
                f"result file for subdomain {p} carries id {res.subdomain}"
            )
        results.append(res)
    return results


def gather_and_solve(manifest: TaskManifest, mesh: MeshTopology,
                     lam: float, reference=None,
                     fill_in_base: int | None = None,
                     timer: global_reduce.StageTimer | None = None):
    """Assemble and solve the reduced problem from a completed run."""
    timer = timer or global_reduce.StageTimer()
    timer.start("gather")
    results = gather_results(manifest)
    timer.start("assemble_reduced")
    problem = global_reduce.assemble_reduced(results, mesh)
    timer.start("solve_reduced")
    values = global_reduce.solve_reduced(problem, lam)
    timer.flush()

    comparison = None
    if reference is not None:
        comparison = global_reduce.compare_spectra(values, reference, lam)
    report = global_reduce.SolveReport(
        eigenvalues=values,
        reference=np.asarray(reference, dtype=float)
        if reference is not None else None,
        comparison=comparison,
        config=dict(manifest.config),
        dims={
            "reduced_dim": problem.n,
            "subdomain_dims": [r.n_cols for r in results],
            "retained_modes": [r.n_modes for r in results],
            "svd_dims": [r.n_svd for r in results],
        },
        timings=list(timer.rows),
        fill_in=(problem.A.nnz / fill_in_base) if fill_in_base else None,
    )
    return report, problem


# -- single-call convenience -------------------------------------------------


def solve_pipeline(mesh: MeshTopology, plan: CoverPlan,
                   config: local_subspace.SpectralConfig, workdir,
                   mode: str = "inproc", worker_count: int | None = None,
                   reference=None, fill_in_base: int | None = None):
    """Plan, execute, and gather in one call; returns (report, problem)."""
    timer = global_reduce.StageTimer()
    timer.start("plan")
    manifest = plan_and_serialize(mesh, plan, config, workdir)
    timer.start(f"execute[{mode}]")
    manifest = execute(manifest, mode=mode, worker_count=worker_count)
    timer.flush()
    return gather_and_solve(
        manifest, mesh, config.lam, reference=reference,
        fill_in_base=fill_in_base, timer=timer,
    )
