import json

import numpy as np
import pytest

from conftest import load, small_contact_scene
from ipcdiff import optimize
from ipcdiff.errors import LineSearchFailure
from ipcdiff.forward import simulate
from ipcdiff.objectives import ObjectiveSpec
from ipcdiff.optimize import (BlockMap, OptProblem, backtracking, inversion_step_cap, lbfgs,
                              load_checkpoint, minimize, project_bounds, save_checkpoint, two_loop)


def quadratic(n=10, kappa=4.0, seed=0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = Q @ np.diag(np.logspace(0, np.log10(kappa), n)) @ Q.T
    xstar = rng.standard_normal(n)

    def fun(x):
        # centred form: no cancellation, so Armijo can resolve decreases near the minimum
        e = x - xstar
        return 0.5 * e @ A @ e, A @ e
    return fun, xstar


def iterates_to(fun, xstar, tol, run):
    errs = []
    run(lambda x: errs.append(np.abs(x - xstar).max()))
    return next((k + 1 for k, e in enumerate(errs) if e < tol), None)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lbfgs_quadratic(seed):
    n = 10
    fun, xstar = quadratic(n, kappa=4.0, seed=seed)
    iters = []
    x, f, g, status = lbfgs(fun, np.zeros(n), memory=n, max_iter=2 * n, tol_g=1e-13, tol_f=0.0,
                            callback=lambda k, *a: iters.append(k))
    assert np.abs(x - xstar).max() < 1e-10
    assert len(iters) <= 2 * n


def test_lbfgs_matches_reference_on_harder_quadratic():
    # Armijo-only backtracking loses finite termination; compare against scipy's L-BFGS-B
    from scipy.optimize import minimize as sp_minimize
    n = 10
    fun, xstar = quadratic(n, kappa=10.0, seed=0)
    ours = iterates_to(fun, xstar, 1e-10, lambda cb: lbfgs(
        fun, np.zeros(n), memory=n, max_iter=60, tol_g=1e-14, tol_f=0.0,
        callback=lambda k, x, *a: cb(x)))
    ref = iterates_to(fun, xstar, 1e-10, lambda cb: sp_minimize(
        fun, np.zeros(n), jac=True, method="L-BFGS-B", callback=cb,
        options=dict(maxcor=n, gtol=1e-14, ftol=0.0)))
    assert ours is not None and ref is not None
    assert ours <= ref + 2


def test_two_loop_without_history_is_identity():
    g = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(two_loop(g, [], []), g)


def test_two_loop_secant_condition():
    rng = np.random.default_rng(1)
    s, y = rng.standard_normal(4), rng.standard_normal(4)
    y += 3 * s
    assert np.allclose(two_loop(y, [s], [y]), s, rtol=1e-12)


def test_backtracking_full_step():
    fun = lambda x: ((x[0] - 1.0) ** 2, np.array([2 * (x[0] - 1.0)]))
    x = np.zeros(1)
    f, g = fun(x)
    t, xn, _, _ = backtracking(fun, x, f, g, np.array([1.0]))
    assert t == 1.0 and xn[0] == 1.0


def test_backtracking_scale_robust():
    # halving from t = 1 hits the same point when the direction is scaled by 2^20 (about 1e6)
    fun = lambda x: ((x[0] - 1.0) ** 2, np.array([2 * (x[0] - 1.0)]))
    x = np.zeros(1)
    f, g = fun(x)
    t1, x1, _, _ = backtracking(fun, x, f, g, np.array([1.0]))
    big = 2.0 ** 20
    t2, x2, _, _ = backtracking(fun, x, f, g, np.array([big]))
    assert t2 == pytest.approx(t1 / big, rel=1e-12)
    assert abs(x2[0] - x1[0]) < 1e-8


def test_backtracking_failure():
    fun = lambda x: (float(x @ x), 2 * x)
    x = np.ones(2)
    f, g = fun(x)
    with pytest.raises(LineSearchFailure):
        backtracking(fun, x, f, g, g.copy(), max_halvings=5)


def test_inversion_cap():
    tri = np.array([[0, 1, 2]])
    shape = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    d = np.zeros_like(shape)
    d[2] = [0.0, -2.0]
    assert inversion_step_cap(tri, shape, d) == pytest.approx(0.5, rel=1e-14)
    d[2] = [0.0, 1.0]
    assert inversion_step_cap(tri, shape, d) == np.inf


def test_shape_step_capped_below_inversion():
    sf = load("bar.json")
    prob = sf.problem(max_iter=1)
    bmap = BlockMap(prob, sf.scene.params)
    mesh = sf.scene.mesh
    seen = []
    orig = optimize.backtracking

    def spy(fun, x, f, g, d, project=None, max_step=1.0, **kw):
        dq = bmap.direction_params(d).shape
        seen.append((max_step, inversion_step_cap(mesh.triangles, bmap.to_params(x).shape, dq)))
        return orig(fun, x, f, g, d, project, max_step, **kw)

    # a huge step scale makes the first trial invert elements
    prob.scales = {"shape": 1e3}
    try:
        optimize.backtracking = spy
        minimize(prob)
    finally:
        optimize.backtracking = orig
    cap, inversion = seen[0]
    assert inversion < 1.0 and cap < inversion


def test_project_bounds():
    p = small_contact_scene().params
    p.blocks["gamma"][:] = -0.1
    q, clamped = project_bounds(p, {"gamma": (0.0, np.inf)})
    assert q.gamma[0] == 0.0 and clamped == ["gamma"]
    p.blocks["gamma"][:] = 0.4
    q, clamped = project_bounds(p, {"gamma": (0.0, np.inf)})
    assert q.gamma[0] == 0.4 and clamped == []


def _fit_problem(block_values, start, blocks, n_steps=3, **kw):
    sc = small_contact_scene(n_steps=n_steps)
    truth = sc.params.copy()
    for b, v in block_values.items():
        truth.blocks[b][:] = v
    traj = simulate(sc.with_params(truth))
    X = np.asarray(sc.space.upsample @ truth.shape)
    obj = ObjectiveSpec.from_list([{"kind": "target", "targets": [X + u.reshape(-1, 2) for u in traj.u],
                                    "body": 0}])
    p0 = truth.copy()
    for b, v in start.items():
        p0.blocks[b][:] = v
    return OptProblem(sc.with_params(p0), obj, blocks=blocks, **kw)


def test_active_bound_flagged():
    # the data wants a softer material than the lower bound allows
    prob = _fit_problem({"lam": 500.0}, {"lam": 1000.0}, ("lam",), modes={"lam": "uniform"},
                        bounds={"lam": (1000.0, np.inf)}, max_iter=5)
    params, trace = minimize(prob)
    assert np.all(params.lam == 1000.0)
    flags = ["lam" in r.active_bounds for r in trace.records[1:]]
    assert any(a and b for a, b in zip(flags, flags[1:]))
    assert any("lam" in r.clamped for r in trace.records[1:])


def test_frozen_blocks_untouched():
    prob = _fit_problem({"gamma": 0.2}, {"gamma": 0.5}, ("gamma",), max_iter=3)
    base = prob.scene.params
    params, trace = minimize(prob)
    assert params.gamma[0] != 0.5
    for b in ("shape", "lam", "mu", "damping", "u0", "v0"):
        assert np.array_equal(params[b], base[b])
    objs = trace.objectives
    assert all(b <= a for a, b in zip(objs, objs[1:]))


def test_reset_direction_is_steepest_descent(monkeypatch):
    fun, _ = quadratic(6, kappa=10.0, seed=3)
    dirs = []
    orig = optimize.backtracking
    calls = {"n": 0}

    def flaky(fun_, x, f, g, d, *a, **kw):
        calls["n"] += 1
        dirs.append((g.copy(), d.copy()))
        if calls["n"] == 3:                  # first search with a curvature history
            raise LineSearchFailure("forced")
        return orig(fun_, x, f, g, d, *a, **kw)

    monkeypatch.setattr(optimize, "backtracking", flaky)
    resets = []
    lbfgs(fun, np.zeros(6), max_iter=4, callback=lambda k, x, f, g, t, r: resets.append(r))
    cos = lambda g, d: g @ d / (np.linalg.norm(g) * np.linalg.norm(d))
    assert cos(*dirs[0]) == pytest.approx(-1.0, abs=1e-12)       # first iteration
    assert cos(*dirs[3]) == pytest.approx(-1.0, abs=1e-12)       # after the reset
    assert resets[:3] == [False, False, True]


def test_uniform_mode_and_masks():
    sc = small_contact_scene()
    prob = OptProblem(sc, ObjectiveSpec([]), blocks=("v0",), modes={"v0": "uniform"})
    bmap = BlockMap(prob, sc.params)
    assert bmap.n == 2
    q = bmap.to_params(np.array([1.0, 2.0]) / bmap.parts[0][3])
    ball = sc.space.body_nodes(0)
    block = sc.space.body_nodes(1)
    assert np.allclose(q.v0[ball], [1.0, 2.0]) and not np.any(q.v0[block])
    with pytest.raises(ValueError):
        OptProblem(sc, ObjectiveSpec([]), blocks=())
    with pytest.raises(ValueError):
        OptProblem(sc, ObjectiveSpec([]), blocks=("kappa",))


def test_checkpoint_round_trip(tmp_path):
    p = small_contact_scene().params
    path = tmp_path / "ck.json"
    save_checkpoint(path, p, 3, 1.5)
    q, meta = load_checkpoint(path)
    assert meta["iteration"] == 3 and meta["objective"] == 1.5
    for b in p.blocks:
        assert np.array_equal(p[b], q[b])
    json.loads(path.read_text())


def test_trace_csv(tmp_path):
    prob = _fit_problem({"gamma": 0.2}, {"gamma": 0.5}, ("gamma",), max_iter=2,
                        trace_path=str(tmp_path / "trace.csv"))
    _, trace = minimize(prob)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,objective,grad_norm")
    assert len(lines) == len(trace.records) + 1
