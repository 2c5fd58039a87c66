"""L-BFGS driver over selected parameter blocks with bound projection and mesh-quality guards."""
import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateElement, LineSearchFailure, SolverError
from .mesh import scaled_jacobian_quality, signed_areas
from .scene import BLOCKS

QUALITY_MIN = 1e-3
DEFAULT_BOUNDS = {"lam": (0.0, np.inf), "mu": (0.0, np.inf), "gamma": (0.0, np.inf),
                  "damping": (0.0, np.inf)}


# --- generic L-BFGS --------------------------------------------------------------

@dataclass
class IterRecord:
    iteration: int
    objective: float
    grad_norm: float
    step: float
    quality_min: float
    wall_time: float
    reset: bool = False
    clamped: tuple = ()
    active_bounds: tuple = ()


@dataclass
class OptTrace:
    records: list = field(default_factory=list)
    message: str = ""

    def append(self, rec):
        self.records.append(rec)

    @property
    def objectives(self):
        return [r.objective for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "grad_norm", "step", "quality_min", "wall_time",
                        "reset", "clamped", "active_bounds"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.objective), repr(r.grad_norm), repr(r.step),
                            repr(r.quality_min), f"{r.wall_time:.6f}", int(r.reset),
                            ";".join(r.clamped), ";".join(r.active_bounds)])


def two_loop(g, S, Y):
    """Apply the L-BFGS inverse Hessian estimate to g (returns H g)."""
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if S:
        s, y = S[-1], Y[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def backtracking(fun, x, f, g, d, project=None, max_step=1.0, c=1e-4, shrink=0.5, max_halvings=30):
    """Armijo backtracking along the (projected) path x + t d.

    ``fun`` returns (f, g) or raises SolverError for infeasible trials, which
    count as rejected.  Returns (t, x_new, f_new, g_new).
    """
    t = min(1.0, max_step)
    for _ in range(max_halvings + 1):
        xt = x + t * d
        if project is not None:
            xt = project(xt)
        try:
            ft, gt = fun(xt)
        except SolverError:
            ft = np.inf
        if np.isfinite(ft) and ft <= f + c * (g @ (xt - x)):
            return t, xt, ft, gt
        t *= shrink
    raise LineSearchFailure(f"no sufficient decrease after {max_halvings} halvings")


def lbfgs(fun, x0, memory=6, max_iter=100, tol_g=1e-6, tol_f=1e-10, project=None, max_step=None,
          callback=None):
    """Minimize fun(x) -> (f, g).

    Converges when ||g|| <= tol_g * ||g_0||, when the relative decrease over the
    last 3 iterations is below tol_f, or after max_iter iterations.  On a failed
    line search the history is dropped and a gradient step is tried; if that also
    fails LineSearchFailure is raised.  ``max_step(x, d)`` caps the trial step.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    g0 = np.linalg.norm(g)
    S, Y = [], []
    history = [f]
    status = "max_iter"
    for k in range(max_iter):
        gn = np.linalg.norm(g)
        if gn <= tol_g * g0 or gn == 0.0:
            status = "gradient"
            break
        reset = False
        d = -two_loop(g, S, Y) if S else -g / gn
        if g @ d >= 0:
            S, Y, reset = [], [], True
            d = -g / gn
        try:
            cap = max_step(x, d) if max_step is not None else 1.0
            t, xn, fn, gn_vec = backtracking(fun, x, f, g, d, project, cap)
        except LineSearchFailure:
            if not S:
                raise
            S, Y, reset = [], [], True
            d = -g / gn
            cap = max_step(x, d) if max_step is not None else 1.0
            t, xn, fn, gn_vec = backtracking(fun, x, f, g, d, project, cap)
        s, y = xn - x, gn_vec - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = xn, fn, gn_vec
        history.append(f)
        if callback is not None:
            callback(k + 1, x, f, g, t, reset)
        if len(history) > 3:
            ref = history[-4]
            if ref - f <= tol_f * max(abs(ref), 1e-300):
                status = "objective"
                break
    return x, f, g, status


# --- parameter-block problems -------------------------------------------------------

def inversion_step_cap(triangles, shape, dshape):
    """Largest t with all signed areas of shape + t dshape positive (inf if none vanish)."""
    p = np.asarray(shape)[triangles]
    d = np.asarray(dshape)[triangles]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    f1, f2 = d[:, 1] - d[:, 0], d[:, 2] - d[:, 0]

    def cross(a, b):
        return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]

    a = cross(f1, f2)
    b = cross(e1, f2) + cross(f1, e2)
    c = cross(e1, e2)
    tmin = np.inf
    for ai, bi, ci in zip(a, b, c):
        roots = np.roots([ai, bi, ci]) if abs(ai) > 1e-300 else ([-ci / bi] if abs(bi) > 1e-300 else [])
        for r in np.atleast_1d(roots):
            if abs(np.imag(r)) < 1e-14 and np.real(r) > 0:
                tmin = min(tmin, float(np.real(r)))
    return tmin


@dataclass
class OptProblem:
    scene: object
    objective: object
    blocks: tuple = ("shape",)
    masks: dict = field(default_factory=dict)
    modes: dict = field(default_factory=dict)        # block -> "free" | "uniform"
    bounds: dict = field(default_factory=dict)
    scales: dict = field(default_factory=dict)
    memory: int = 6
    max_iter: int = 50
    tol_g: float = 1e-6
    tol_f: float = 1e-10
    static: bool = False
    trace_path: str = None
    checkpoint_path: str = None

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("at least one parameter block must be active")
        for b in self.blocks:
            if b not in BLOCKS:
                raise ValueError(f"unknown parameter block {b!r}")
        for b, (lo, hi) in self.bounds.items():
            if lo > hi:
                raise ValueError(f"inconsistent bounds for {b}")


class BlockMap:
    """Linear map between the reduced, scaled vector z and the active parameter entries."""

    def __init__(self, problem, base):
        self.problem = problem
        self.base = base.copy()
        self.parts = []
        mesh = problem.scene.mesh
        bbox = np.ptp(mesh.rest_vertices, axis=0)
        diag = float(np.hypot(*bbox))
        for b in problem.blocks:
            arr = base[b]
            mask = np.asarray(problem.masks.get(b, np.ones(arr.shape, dtype=bool)), dtype=bool)
            mask = np.broadcast_to(mask, arr.shape)
            if b not in problem.masks:
                if b == "shape":
                    mask = self._shape_mask(arr.shape)
                elif b in ("u0", "v0"):
                    mask = self._initial_mask(arr.shape)
            mode = problem.modes.get(b, "free")
            scale = problem.scales.get(b)
            if scale is None:
                scale = self._default_scale(b, arr[mask], diag)
            if mode == "uniform":
                if arr.ndim == 2:
                    n = arr.shape[1]
                    cols = [mask[:, c] for c in range(n)]
                    z0 = np.array([arr[cols[c], c].mean() if cols[c].any() else 0.0 for c in range(n)])
                else:
                    z0 = np.array([arr[mask].mean()])
            elif mode == "free":
                z0 = arr[mask].ravel()
            else:
                raise ValueError(f"unknown block mode {mode!r}")
            self.parts.append((b, mask, mode, float(scale), len(z0), z0 / scale))
        self.n = sum(p[4] for p in self.parts)

    def _shape_mask(self, shp):
        # vertices carrying Dirichlet data stay put by default
        mask = np.ones(shp, dtype=bool)
        scene = self.problem.scene
        d = scene.dirichlet_dofs
        if scene.order == 1 and len(d):
            mask[np.unique(d // 2)] = False
        elif len(d):
            verts = np.unique(d // 2)
            mask[verts[verts < scene.mesh.n_vertices]] = False
        return mask

    def _initial_mask(self, shp):
        # prescribed DOFs ignore u0 / v0
        mask = np.ones(shp, dtype=bool)
        d = self.problem.scene.dirichlet_dofs
        mask.reshape(-1)[d] = False
        return mask

    @staticmethod
    def _default_scale(block, values, diag):
        if block in ("shape", "u0"):
            return diag
        mag = float(np.mean(np.abs(values))) if values.size else 0.0
        return mag if mag > 0 else 1.0

    def z0(self):
        return np.concatenate([p[5] for p in self.parts])

    def to_params(self, z):
        q = self.base.copy()
        off = 0
        for b, mask, mode, scale, n, _ in self.parts:
            zb = z[off:off + n] * scale
            off += n
            arr = q.blocks[b]
            if mode == "uniform":
                if arr.ndim == 2:
                    for c in range(arr.shape[1]):
                        arr[mask[:, c], c] = zb[c]
                else:
                    arr[mask] = zb[0]
            else:
                arr[mask] = zb
        return q

    def to_reduced(self, grad):
        out = []
        for b, mask, mode, scale, n, _ in self.parts:
            g = grad[b]
            if mode == "uniform":
                if g.ndim == 2:
                    out.append(np.array([g[mask[:, c], c].sum() for c in range(g.shape[1])]) * scale)
                else:
                    out.append(np.array([g[mask].sum()]) * scale)
            else:
                out.append(g[mask].ravel() * scale)
        return np.concatenate(out)

    def to_reduced_values(self, q):
        out = []
        for b, mask, mode, scale, n, _ in self.parts:
            arr = q[b]
            if mode == "uniform":
                if arr.ndim == 2:
                    out.append(np.array([arr[mask[:, c], c].mean() for c in range(arr.shape[1])]) / scale)
                else:
                    out.append(np.array([arr[mask].mean()]) / scale)
            else:
                out.append(arr[mask].ravel() / scale)
        return np.concatenate(out)

    def direction_params(self, d):
        """Parameter-space direction for a reduced direction (linear part of to_params)."""
        zero = self.base.zeros_like()
        saved = self.base
        self.base = zero
        try:
            return self.to_params(d)
        finally:
            self.base = saved


def project_bounds(params, bounds, blocks=None):
    """Clamp blocks into [lo, hi].  Returns (params, names of clamped blocks)."""
    q = params.copy()
    clamped = []
    for b, (lo, hi) in bounds.items():
        if blocks is not None and b not in blocks:
            continue
        arr = q.blocks[b]
        new = np.clip(arr, lo, hi)
        if not np.array_equal(new, arr):
            clamped.append(b)
        q.blocks[b] = new
    return q, clamped


def _at_bounds(params, bounds, blocks):
    out = []
    for b in blocks:
        if b in bounds:
            lo, hi = bounds[b]
            arr = params[b]
            if np.any(arr <= lo) or np.any(arr >= hi):
                out.append(b)
    return out


def evaluate(scene, objective, params, static=False):
    """Objective and full gradient ParameterSet for a parameter set."""
    from .adjoint import static_objective_gradient, transient_gradient
    if static:
        J, g, _, _ = static_objective_gradient(scene.with_params(params), objective, params)
        return J, g
    J, g, _, _ = transient_gradient(scene.with_params(params), objective, params=params)
    return J, g


def minimize(problem, params=None):
    """Run L-BFGS on the active blocks.  Returns (ParameterSet, OptTrace)."""
    scene = problem.scene
    base = scene.params if params is None else params
    bmap = BlockMap(problem, base)
    bounds = {b: problem.bounds.get(b, DEFAULT_BOUNDS.get(b, (-np.inf, np.inf)))
              for b in problem.blocks}
    trace = OptTrace()
    mesh = scene.mesh
    t_start = time.perf_counter()
    last_clamped = []

    def fun(z):
        q = bmap.to_params(z)
        if "shape" in problem.blocks:
            if np.any(signed_areas(q.shape, mesh.triangles) <= 0):
                raise DegenerateElement("inverted rest element")
            if scaled_jacobian_quality(mesh, q.shape).min() <= QUALITY_MIN:
                raise DegenerateElement("rest mesh quality below threshold")
        J, g = evaluate(scene, problem.objective, q, problem.static)
        return J, bmap.to_reduced(g)

    def project(z):
        q, clamped = project_bounds(bmap.to_params(z), bounds, problem.blocks)
        last_clamped[:] = clamped
        return bmap.to_reduced_values(q)

    def max_step(z, d):
        if "shape" not in problem.blocks:
            return 1.0
        q = bmap.to_params(z)
        dq = bmap.direction_params(d)
        cap = inversion_step_cap(mesh.triangles, q.shape, dq.shape)
        return min(1.0, 0.9 * cap)

    def record(k, z, f, g, t, reset):
        q = bmap.to_params(z)
        qual = float(scaled_jacobian_quality(mesh, q.shape).min())
        trace.append(IterRecord(k, float(f), float(np.linalg.norm(g)), float(t), qual,
                                time.perf_counter() - t_start, reset, tuple(last_clamped),
                                tuple(_at_bounds(q, bounds, problem.blocks))))
        if problem.checkpoint_path:
            save_checkpoint(problem.checkpoint_path, q, k, f)
        if problem.trace_path:
            trace.to_csv(problem.trace_path)

    z0 = bmap.z0()
    f0, g0 = fun(z0)
    trace.append(IterRecord(0, float(f0), float(np.linalg.norm(g0)), 0.0,
                            float(scaled_jacobian_quality(mesh, base.shape).min()), time.perf_counter() - t_start))
    cache = {z0.tobytes(): (f0, g0)}

    def cached(z):
        key = z.tobytes()
        if key in cache:
            return cache[key]
        out = fun(z)
        cache.clear()
        cache[key] = out
        return out

    z, f, g, status = lbfgs(cached, z0, problem.memory, problem.max_iter, problem.tol_g, problem.tol_f,
                            project, max_step, record)
    trace.message = status
    if problem.trace_path:
        trace.to_csv(problem.trace_path)
    return bmap.to_params(z), trace


def save_checkpoint(path, params, iteration, objective):
    with open(path, "w") as fh:
        json.dump({"iteration": int(iteration), "objective": float(objective), "params": params.to_dict()}, fh)


def load_checkpoint(path):
    from .scene import ParameterSet
    with open(path) as fh:
        d = json.load(fh)
    return ParameterSet.from_dict(d["params"]), d
