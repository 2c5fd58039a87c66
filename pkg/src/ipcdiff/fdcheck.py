"""Central finite-difference oracle for adjoint gradients."""
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ForwardSolveFailure, SolverError
from .scene import BLOCKS

EPS_SWEEP = (1e-4, 1e-5, 1e-6)
# relative step tried first for each block (times block_scale)
DEFAULT_EPS = {"shape": 1e-6, "lam": 1e-4, "mu": 1e-4, "gamma": 1e-5, "damping": 1e-4,
               "u0": 1e-6, "v0": 1e-6}
TOLERANCE = 1e-5


def objective_value(scene, objective, params, static=False):
    """Objective after a full forward solve at ``params``."""
    from .forward import Physics, simulate, static_solve
    sc = scene.with_params(params)
    try:
        if static:
            states = [static_solve(sc, params)]
        else:
            states = simulate(sc, params=params).u
    except SolverError as exc:
        raise ForwardSolveFailure(str(exc)) from exc
    return objective.value(Physics(sc, params), states)


def block_scale(scene, params, block):
    """Magnitude that turns a relative step into an absolute one for ``block``."""
    if block == "shape" or block == "u0":
        return float(np.hypot(*np.ptp(scene.mesh.rest_vertices, axis=0)))
    if block == "v0":
        v = np.abs(params.v0)
        g = np.linalg.norm(scene.gravity) * scene.dt * scene.n_steps
        return float(max(v.max() if v.size else 0.0, g, 1e-3))
    if block == "gamma":
        return 1.0
    vals = np.abs(params[block])
    mag = float(vals.mean()) if vals.size else 0.0
    return mag if mag > 0 else 1.0


def fd_directional(scene, objective, block, direction, epsilon, params=None, static=False):
    """(J(q + eps theta) - J(q - eps theta)) / (2 eps) with theta applied to ``block``.

    ``direction`` is either an array shaped like the block or a full ParameterSet.
    """
    params = scene.params if params is None else params
    if hasattr(direction, "blocks"):
        theta = direction
    else:
        theta = params.zeros_like()
        theta.blocks[block] = np.asarray(direction, dtype=float).reshape(params[block].shape)
    if not any(np.any(v) for v in theta.blocks.values()):
        return 0.0
    jp = objective_value(scene, objective, params.axpy(epsilon, theta), static)
    jm = objective_value(scene, objective, params.axpy(-epsilon, theta), static)
    return (jp - jm) / (2.0 * epsilon)


def random_direction(scene, params, block, rng):
    """Random block direction with unit max-norm; pinned entries stay zero."""
    d = rng.standard_normal(params[block].shape)
    if block in ("u0", "v0") and len(scene.dirichlet_dofs):
        flat = d.reshape(-1)
        flat[scene.dirichlet_dofs] = 0.0
    m = np.abs(d).max()
    return d / m if m > 0 else d


@dataclass
class CheckResult:
    block: str
    index: int
    analytic: float
    fd: float
    eps: float
    rel_error: float

    @property
    def passed(self):
        return self.rel_error < TOLERANCE


def relative_error(analytic, fd):
    return abs(fd - analytic) / max(abs(fd), 1e-12)


def _sweep(scene, objective, block, d, analytic, params, static, scale, eps=None):
    """Try the block default first, then the remaining sweep values; keep the best."""
    order = [eps] if eps is not None else [DEFAULT_EPS[block]] + [e for e in EPS_SWEEP if e != DEFAULT_EPS[block]]
    best = None
    for e in order:
        step = e * scale
        fd = fd_directional(scene, objective, block, d, step, params, static)
        err = relative_error(analytic, fd)
        if best is None or err < best[2]:
            best = (fd, step, err)
        if err < TOLERANCE:
            break
    return best


def gradient(scene, objective, params=None, static=False):
    from .adjoint import static_objective_gradient, transient_gradient
    params = scene.params if params is None else params
    sc = scene.with_params(params)
    if static:
        J, g, _, _ = static_objective_gradient(sc, objective, params)
    else:
        J, g, _, _ = transient_gradient(sc, objective, params=params)
    return J, g


def grad_check(scene, objective, blocks=None, n_dirs=5, seed=0, eps=None, params=None, static=False,
               workers=None, grad=None):
    """Compare adjoint directional derivatives with central differences.

    Directions are drawn from ``numpy.random.default_rng(seed)`` block by block in
    a fixed order, so results depend only on the seed.  With ``workers`` > 1 the
    directions are processed concurrently in worker processes.
    """
    params = scene.params if params is None else params
    blocks = [b for b in BLOCKS if b in (blocks or BLOCKS)]
    if grad is None:
        _, grad = gradient(scene, objective, params, static)
    rng = np.random.default_rng(seed)
    jobs = []
    for b in blocks:
        if params[b].size == 0:
            continue
        scale = block_scale(scene, params, b)
        for k in range(n_dirs):
            d = random_direction(scene, params, b, rng)
            jobs.append((b, k, d, float(np.sum(grad[b] * d)), scale))
    workers = _workers(workers)
    if workers <= 1:
        return [_run_job(scene, objective, static, params, eps, j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futures = [ex.submit(_run_job, scene, objective, static, params, eps, j) for j in jobs]
        return [f.result() for f in futures]


def _run_job(scene, objective, static, params, eps, job):
    b, k, d, an, scale = job
    fd, step, err = _sweep(scene, objective, b, d, an, params, static, scale, eps)
    return CheckResult(b, k, an, fd, step, err)


def _workers(workers):
    if workers is not None:
        return int(workers)
    return int(os.environ.get("IPCDIFF_WORKERS", "1"))


def format_table(results):
    lines = [f"{'block':<8} {'dir':>3} {'adjoint':>16} {'fd':>16} {'eps':>10} {'rel':>9}  status"]
    for r in results:
        lines.append(f"{r.block:<8} {r.index:>3} {r.analytic:>16.9e} {r.fd:>16.9e} {r.eps:>10.3e} "
                     f"{r.rel_error:>9.2e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
