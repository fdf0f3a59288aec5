"""Command-line entry point.

Subcommands: solve (full pipeline), reference (single-process accurate
spectrum), validate (invariant suite), tol-study and radius-study
(experiment sweeps), worker (directory-queue worker process).
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from dataclasses import dataclass, asdict

import numpy as np

from . import eigcore, fem, global_reduce, local_subspace, mesh as meshmod, runtime

REFERENCE_TOL = 1e-10
REFERENCE_DOF_BUDGET = 200_000


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mesh_file: str | None = None
    square: int | None = None
    cube: int | None = None
    map_id: str = "identity"
    lam: float | None = None
    modes: int | None = None
    n_points: int = local_subspace.DEFAULT_N
    eta: float = local_subspace.DEFAULT_ETA
    subdomains: int = 4
    radius_factor: float = local_subspace.DEFAULT_RADIUS_FACTOR
    tol: float = local_subspace.DEFAULT_TOL
    seed: int = 0
    mode: str = "inproc"
    workdir: str | None = None
    report: str = "pucpi_report"
    with_reference: bool = False

    def validate(self):
        sources = [self.mesh_file is not None, self.square is not None,
                   self.cube is not None]
        if sum(sources) != 1:
            raise ConfigError("give exactly one of --mesh, --square, --cube")
        if (self.lam is None) == (self.modes is None):
            raise ConfigError("give exactly one of --lambda, --modes")
        if self.lam is not None and self.lam <= 0:
            raise ConfigError("spectral cap must be positive")
        if self.modes is not None and self.modes < 1:
            raise ConfigError("mode count must be at least 1")
        if self.eta <= 1.0:
            raise ConfigError("oversampling parameter must satisfy eta > 1")
        if self.n_points < 1:
            raise ConfigError("need at least one interpolation point")
        if self.subdomains < 2:
            raise ConfigError("need at least 2 subdomains")
        if self.tol <= 0:
            raise ConfigError("singular value cutoff must be positive")
        if self.mode not in runtime.MODES:
            raise ConfigError(f"mode must be one of {runtime.MODES}")


def build_mesh(cfg: RunConfig) -> meshmod.MeshTopology:
    if cfg.mesh_file:
        m = meshmod.load_mesh(cfg.mesh_file)
    elif cfg.square:
        m = meshmod.build_structured_mesh(2, cfg.square)
    else:
        m = meshmod.build_structured_mesh(3, cfg.cube)
    if cfg.map_id != "identity":
        m = meshmod.map_domain(m, cfg.map_id)
    return m


def resolve_lambda(cfg: RunConfig, A, M) -> float:
    """Spectral cap from a target mode count: midpoint of the spectral gap."""
    if cfg.lam is not None:
        return cfg.lam
    k = cfg.modes
    if A.shape[0] <= k + 1:
        raise ConfigError("mode count against a smaller discrete space")
    pairs = eigcore.smallest_eigenpairs(A, M, k=k + 1, tol=REFERENCE_TOL)
    lo, hi = pairs.values[k - 1], pairs.values[k]
    if hi - lo <= 1e-10 * hi:
        raise ConfigError(
            f"modes {k} and {k + 1} are degenerate; pick a different count"
        )
    return 0.5 * (lo + hi)


def reference_spectrum(mesh, lam: float):
    A, M, _ = fem.assemble_global(mesh)
    if A.shape[0] > REFERENCE_DOF_BUDGET:
        raise ConfigError(
            f"reference refused: {A.shape[0]} DOFs exceeds the "
            f"single-process budget {REFERENCE_DOF_BUDGET}"
        )
    return eigcore.smallest_eigenpairs(A, M, lam_max=lam, tol=REFERENCE_TOL).values


def _spectral_config(cfg: RunConfig, lam: float) -> local_subspace.SpectralConfig:
    return local_subspace.SpectralConfig(
        lam=lam, eta=cfg.eta, n_points=cfg.n_points, tol=cfg.tol,
        radius_factor=cfg.radius_factor,
    )


def cmd_solve(cfg: RunConfig) -> int:
    cfg.validate()
    m = build_mesh(cfg)
    A, M, _ = fem.assemble_global(m)
    lam = resolve_lambda(cfg, A, M)

    reference = None
    if cfg.with_reference:
        reference = eigcore.smallest_eigenpairs(
            A, M, lam_max=lam, tol=REFERENCE_TOL
        ).values

    plan = meshmod.build_cover_plan(
        m, cfg.subdomains, seed=cfg.seed, radius_factor=cfg.radius_factor
    )
    workdir = cfg.workdir or tempfile.mkdtemp(prefix="pucpi_run_")
    spec_cfg = _spectral_config(cfg, lam)
    report, _ = runtime.solve_pipeline(
        m, plan, spec_cfg, workdir, mode=cfg.mode,
        reference=reference, fill_in_base=A.nnz,
    )
    report.config.update({k: v for k, v in asdict(cfg).items() if v is not None})
    report.config["resolved_lambda"] = lam
    report.write(cfg.report)
    print(f"eigenvalues below {lam:.6g}: {len(report.eigenvalues)}")
    if report.comparison is not None:
        print(f"max relative error: {report.comparison.max_rel_error:.3e}")
        if report.comparison.missing:
            print(f"MISSING MODES: {report.comparison.missing}")
            return 1
    print(f"report written to {cfg.report}")
    return 0


def cmd_reference(cfg: RunConfig) -> int:
    cfg.validate()
    m = build_mesh(cfg)
    A, M, _ = fem.assemble_global(m)
    lam = resolve_lambda(cfg, A, M)
    values = reference_spectrum(m, lam)
    os.makedirs(cfg.report, exist_ok=True)
    path = os.path.join(cfg.report, "reference.csv")
    with open(path, "w") as f:
        f.write("index,lambda\n")
        for j, v in enumerate(values):
            f.write(f"{j},{v:.17g}\n")
    print(f"{len(values)} eigenvalues below {lam:.6g} written to {path}")
    return 0


def cmd_tol_study(cfg: RunConfig, tols) -> int:
    cfg.validate()
    m = build_mesh(cfg)
    A, M, _ = fem.assemble_global(m)
    lam = resolve_lambda(cfg, A, M)
    reference = eigcore.smallest_eigenpairs(
        A, M, lam_max=lam, tol=REFERENCE_TOL
    ).values
    # partition and extension work shared across the sweep
    plan = meshmod.build_cover_plan(
        m, cfg.subdomains, seed=cfg.seed, radius_factor=cfg.radius_factor
    )
    os.makedirs(cfg.report, exist_ok=True)
    rows = []
    for tol in tols:
        spec_cfg = local_subspace.SpectralConfig(
            lam=lam, eta=cfg.eta, n_points=cfg.n_points, tol=tol,
            radius_factor=cfg.radius_factor,
        )
        workdir = tempfile.mkdtemp(prefix="pucpi_tol_")
        report, problem = runtime.solve_pipeline(
            m, plan, spec_cfg, workdir, mode=cfg.mode, reference=reference
        )
        rows.append((tol, problem.n, report.comparison.max_rel_error))
        print(f"tol={tol:g}: dim={problem.n} max_rel_err="
              f"{report.comparison.max_rel_error:.3e}")
    path = os.path.join(cfg.report, "tol_study.csv")
    with open(path, "w") as f:
        f.write("tol,reduced_dim,max_rel_error\n")
        for tol, dim, err in rows:
            f.write(f"{tol:.17g},{dim},{err:.17g}\n")
    print(f"study written to {path}")
    return 0


def cmd_radius_study(cfg: RunConfig, factors, n_sigma: int = 200) -> int:
    cfg.validate()
    m = build_mesh(cfg)
    A, M, _ = fem.assemble_global(m)
    lam = resolve_lambda(cfg, A, M)
    os.makedirs(cfg.report, exist_ok=True)
    rows = []
    for factor in factors:
        plan = meshmod.build_cover_plan(m, cfg.subdomains, seed=cfg.seed,
                                        radius_factor=factor)
        spec_cfg = local_subspace.SpectralConfig(
            lam=lam, eta=cfg.eta, n_points=cfg.n_points, tol=cfg.tol,
            radius_factor=factor,
        )
        task = runtime.build_task(m, plan, 0, spec_cfg)
        solver = local_subspace.SubdomainSolver(task, spec_cfg)
        apply, n = solver.cct_operator()
        count = min(n_sigma, n)
        pairs = eigcore.dominant_pairs_of_operator(apply, n, count)
        sigma = np.sqrt(np.maximum(pairs.values, 0.0))
        ext_dofs = len(plan.maps[0].ext_vertices)
        rows.append((factor, ext_dofs, sigma))
        print(f"factor={factor:g}: extended DOFs={ext_dofs} "
              f"sigma_1={sigma[0]:.3e}")
    path = os.path.join(cfg.report, "radius_study.csv")
    with open(path, "w") as f:
        f.write("factor,ext_dofs,k,sigma\n")
        for factor, ext_dofs, sigma in rows:
            for k, s in enumerate(sigma):
                f.write(f"{factor:.17g},{ext_dofs},{k + 1},{s:.17g}\n")
    print(f"study written to {path}")
    return 0


def cmd_validate(cfg: RunConfig) -> int:
    """Deterministic invariant suite on small generated fixtures."""
    failures = []

    def check(tag, ok):
        print(f"[{'pass' if ok else 'FAIL'}] {tag}")
        if not ok:
            failures.append(tag)

    m = meshmod.build_structured_mesh(2, 16)
    plan = meshmod.build_cover_plan(m, 4, seed=cfg.seed)
    try:
        meshmod.validate_cover_plan(m, plan)
        check("mesh: cover plan invariants", True)
    except meshmod.MeshError as exc:
        print(f"  {exc}")
        check("mesh: cover plan invariants", False)

    G, Ghat = meshmod.counting_functions(m, plan)
    check("mesh: counting functions 1 <= G <= G-hat <= M",
          bool(np.all((G >= 1) & (G <= Ghat) & (Ghat <= plan.M))))

    # partition of unity: stitched restrictions reassemble any vector exactly
    gdof, free = fem.global_dof_numbering(m)
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal(len(free))
    acc = np.zeros_like(x)
    for p in range(plan.M):
        maps = plan.maps[p]
        owned = set(maps.owned_vertices.tolist())
        mask = np.array([v in owned for v in maps.sub_vertices])
        R = fem.stitching_matrix(len(free), gdof, maps.sub_vertices, mask)
        acc += R @ x[gdof[maps.sub_vertices]]
    check("fem: partition-of-unity reconstruction",
          bool(np.allclose(acc, x, rtol=0, atol=0)))

    A, M, _ = fem.assemble_global(m)
    check("fem: stiffness symmetric", (A != A.T).nnz == 0)
    check("fem: mass symmetric", (M != M.T).nnz == 0)

    spec_cfg = local_subspace.SpectralConfig(lam=200.0)
    nodes = spec_cfg.nodes
    check("interp: nodes inside (0, lambda)",
          bool(np.all((nodes > 0) & (nodes < spec_cfg.lam))))
    ell = local_subspace.lagrange_eval(nodes, 0.37 * spec_cfg.lam)
    check("interp: cardinal sum equals one", abs(ell.sum() - 1.0) < 1e-12)

    with tempfile.TemporaryDirectory(prefix="pucpi_validate_") as workdir:
        manifest = runtime.plan_and_serialize(m, plan, spec_cfg, workdir)
        check("runtime: one task per subdomain",
              len(manifest.tasks) == plan.M)
        with open(manifest.task_path(0), "a") as f:
            f.write("tampered\n")
        digest = runtime._digest_file(manifest.task_path(0))
        check("runtime: tampering changes the digest",
              digest != manifest.tasks[0]["input_digest"])

    if failures:
        print(f"{len(failures)} validation failure(s)")
        return 1
    print("all validation checks passed")
    return 0


def cmd_worker(workdir) -> int:
    done = runtime.worker_loop(workdir)
    print(f"worker finished, {done} task(s) completed")
    return 0


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--mesh", dest="mesh_file", help="mesh file path")
    p.add_argument("--square", type=int, help="structured unit square, N cells/side")
    p.add_argument("--cube", type=int, help="structured unit cube, N cells/side")
    p.add_argument("--map", dest="map_id", default="identity",
                   choices=sorted(meshmod.DOMAIN_MAPS),
                   help="coordinate mapping applied to the generated mesh")
    p.add_argument("--lambda", dest="lam", type=float, help="spectral cap")
    p.add_argument("--modes", type=int, help="number of lowest modes wanted")
    p.add_argument("--interp-points", dest="n_points", type=int,
                   default=local_subspace.DEFAULT_N)
    p.add_argument("--eta", type=float, default=local_subspace.DEFAULT_ETA)
    p.add_argument("--subdomains", type=int, default=4)
    p.add_argument("--radius-factor", type=float,
                   default=local_subspace.DEFAULT_RADIUS_FACTOR)
    p.add_argument("--tol", type=float, default=local_subspace.DEFAULT_TOL)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", default="inproc", choices=runtime.MODES)
    p.add_argument("--workdir")
    p.add_argument("--report", default="pucpi_report")


def _config_from(args) -> RunConfig:
    keys = RunConfig.__dataclass_fields__.keys()
    return RunConfig(**{k: getattr(args, k) for k in keys if hasattr(args, k)})


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pucpi",
        description="Dirichlet-Laplacian eigensolver on overlapping subdomains",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run the full pipeline")
    _add_common(p_solve)
    p_solve.add_argument("--with-reference", action="store_true",
                         help="also compute a single-process reference")

    p_ref = sub.add_parser("reference", help="single-process reference spectrum")
    _add_common(p_ref)

    p_val = sub.add_parser("validate", help="run the invariant suite")
    _add_common(p_val)

    p_tol = sub.add_parser("tol-study", help="cutoff tolerance sweep")
    _add_common(p_tol)
    p_tol.add_argument("--tols", type=float, nargs="+",
                       default=[1e-1, 1e-2, 1e-3])

    p_rad = sub.add_parser("radius-study", help="extension radius sweep")
    _add_common(p_rad)
    p_rad.add_argument("--factors", type=float, nargs="+",
                       default=[0.2, 0.6, 1.0])

    p_worker = sub.add_parser("worker", help="directory-queue worker")
    p_worker.add_argument("--workdir", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "worker":
            return cmd_worker(args.workdir)
        cfg = _config_from(args)
        if args.command == "solve":
            cfg.with_reference = args.with_reference
            return cmd_solve(cfg)
        if args.command == "reference":
            return cmd_reference(cfg)
        if args.command == "validate":
            return cmd_validate(cfg)
        if args.command == "tol-study":
            return cmd_tol_study(cfg, args.tols)
        if args.command == "radius-study":
            return cmd_radius_study(cfg, args.factors)
    except (ConfigError, runtime.RuntimeFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
