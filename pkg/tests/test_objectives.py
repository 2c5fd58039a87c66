import numpy as np
import pytest

from conftest import small_contact_scene
from ipcdiff.errors import UnknownKind
from ipcdiff.forward import Physics
from ipcdiff.materials import LINEAR
from ipcdiff.mesh import build_mesh
from ipcdiff.meshgen import rectangle
from ipcdiff.objectives import (BoundarySmoothing, ObjectiveSpec, make_term, penalty)
from ipcdiff.scene import Scene

TRI = np.array([[0.0, 0.0], [1.0, 0.2], [0.3, 0.8]])


def single_triangle(**kw):
    sc = Scene(build_mesh(TRI, np.array([[0, 1, 2]])), model=LINEAR, **kw)
    return sc.with_params(sc.default_params(3.0, 2.0))


def evaluate(term, sc, u, params=None, need=("du", "dq")):
    return term.evaluate(Physics(sc, params), u, None, need)


def fd_scene(order):
    sc = small_contact_scene(order=order)
    rng = np.random.default_rng(order)
    p = sc.params.copy()
    p.blocks["lam"][:] = rng.uniform(500, 1500, p.lam.shape)
    p.blocks["mu"][:] = rng.uniform(500, 1500, p.mu.shape)
    # break the symmetry of the regular disk polygon, where boundary smoothing is stationary
    p.blocks["shape"] += rng.uniform(-5e-3, 5e-3, p.shape.shape)
    return sc.with_params(p)


def fd_terms(sc):
    X = np.asarray(sc.space.upsample @ sc.params.shape)
    V = float(Physics(sc).geom.area.sum())
    return [
        ("stress_lp", dict(p=2.0)),
        ("stress_lp", dict(p=4.0, body=0)),
        ("stress_bound", dict(threshold=30.0)),
        ("target", dict(targets=X + [0.03, -0.02], body=0)),
        ("target", dict(targets=X, node_weights=np.linspace(0.5, 2.0, len(X)))),
        ("boundary_target", dict(targets=X + [0.01, 0.02])),
        ("boundary_target", dict(targets=X - 0.01, tag=None, body=1)),
        ("center", dict(targets=[0.1, 0.2], body=0)),
        ("height", dict()),
        ("volume", dict(target=V - 0.01)),
        ("boundary_smoothing", dict(p=2.0)),
        ("boundary_smoothing", dict(p=3.0, body=0)),
        ("material_smoothing", dict()),
    ]


@pytest.mark.parametrize("order", [1, 2])
def test_derivatives_match_fd(order):
    sc = fd_scene(order)
    rng = np.random.default_rng(100 + order)
    base = sc.params
    for kind, kw in fd_terms(sc):
        term = make_term(kind, **kw)
        for _ in range(10):
            u = rng.uniform(-0.01, 0.01, sc.space.n_dofs)
            J, du, dq = evaluate(term, sc, u)
            # R-vector
            d = rng.standard_normal(u.size)
            h = 1e-6
            fd = (evaluate(term, sc, u + h * d, need=())[0] - evaluate(term, sc, u - h * d, need=())[0]) / (2 * h)
            assert du @ d == pytest.approx(fd, rel=1e-5, abs=1e-9 * max(abs(J), 1.0)), kind
            # S-vectors with the displacement coefficients held fixed
            for block, step in (("shape", 1e-6), ("lam", 1e-2), ("mu", 1e-2)):
                D = rng.standard_normal(base[block].shape)
                plus, minus = base.copy(), base.copy()
                plus.blocks[block] += step * D
                minus.blocks[block] -= step * D
                fd = (evaluate(term, sc, u, plus, need=())[0] - evaluate(term, sc, u, minus, need=())[0]) / (2 * step)
                an = float(np.sum(dq[block] * D))
                assert an == pytest.approx(fd, rel=1e-5, abs=1e-9 * max(abs(J), 1.0)), (kind, block)


def test_unknown_kind():
    with pytest.raises(UnknownKind):
        make_term("curvature")
    with pytest.raises(UnknownKind):
        ObjectiveSpec.from_list([{"kind": "nope"}])


def test_invalid_parameters():
    with pytest.raises(ValueError):
        make_term("stress_lp", p=1.5)
    with pytest.raises(ValueError):
        make_term("height", weight=np.inf)
    with pytest.raises(ValueError):
        make_term("center", targets=[np.nan, 0.0])
    with pytest.raises(ValueError):
        make_term("height", time="sometimes")
    sc = single_triangle()
    with pytest.raises(ValueError):
        evaluate(make_term("target", targets=np.zeros((4, 2))), sc, np.zeros(6))


def test_penalty_branches():
    v, d = penalty(np.array([-1.0, 0.0, 0.5]))
    assert list(v) == [0.0, 0.0, 0.25] and list(d) == [0.0, 0.0, 1.0]


# --- stress ---------------------------------------------------------------------

def test_stress_lp_zero_displacement():
    sc = single_triangle()
    J, du, _ = evaluate(make_term("stress_lp", p=2.0), sc, np.zeros(6))
    assert J == 0.0 and not np.any(du)


def test_stress_lp_single_element_hand_value():
    sc = single_triangle()
    H = np.array([[0.02, -0.01], [0.03, 0.015]])
    u = (TRI @ H.T).ravel()
    eps = 0.5 * (H + H.T)
    sigma = 3.0 * np.trace(eps) * np.eye(2) + 2 * 2.0 * eps
    area = 0.5 * abs(np.linalg.det(np.array([TRI[1] - TRI[0], TRI[2] - TRI[0]])))
    J, _, _ = evaluate(make_term("stress_lp", p=2.0), sc, u)
    assert J == pytest.approx(np.linalg.norm(sigma) * np.sqrt(area), rel=1e-13)
    J8, _, _ = evaluate(make_term("stress_lp", p=8.0), sc, u)
    assert J8 >= np.linalg.norm(sigma) * area ** (1 / 8) * (1 - 1e-13)


def test_stress_bound_inactive_below_threshold():
    sc = single_triangle()
    u = (TRI @ np.array([[0.01, 0.0], [0.0, 0.01]]).T).ravel()
    J, du, dq = evaluate(make_term("stress_bound", threshold=1e3), sc, u)
    assert J == 0.0 and not np.any(du) and not any(np.any(v) for v in dq.blocks.values())


# --- targets --------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["target", "boundary_target"])
def test_target_exact_match(kind):
    sc = fd_scene(2)
    X = np.asarray(sc.space.upsample @ sc.params.shape)
    u = np.random.default_rng(0).uniform(-0.01, 0.01, sc.space.n_dofs)
    J, du, _ = evaluate(make_term(kind, targets=X + u.reshape(-1, 2)), sc, u)
    assert abs(J) < 1e-28 and np.abs(du).max() < 1e-14


def test_target_uniform_offset():
    sc = single_triangle()
    c = np.array([0.3, -0.4])
    J, du, _ = evaluate(make_term("target", targets=TRI), sc, np.tile(c, 3))
    area = Physics(sc).geom.area.sum()
    assert J == pytest.approx(c @ c * area, rel=1e-14)
    # dj/du = 2 w (x^d - x^trg) integrated against the hat functions
    assert np.allclose(du.reshape(3, 2), 2 * c * area / 3, rtol=1e-14)
    Jb, _, _ = evaluate(make_term("boundary_target", targets=TRI), sc, np.tile(c, 3))
    perim = sum(np.linalg.norm(TRI[k] - TRI[k - 1]) for k in range(3))
    assert Jb == pytest.approx(c @ c * perim, rel=1e-14)


# --- center of mass ---------------------------------------------------------------

def test_center_rigid_translation():
    sc = single_triangle()
    centroid = TRI.mean(axis=0)
    t = np.array([0.2, -0.1])
    J, _, _ = evaluate(make_term("center", targets=centroid + t), sc, np.tile(t, 3))
    assert abs(J) < 1e-30
    d = np.array([0.3, 0.4])
    J, _, _ = evaluate(make_term("center", targets=centroid), sc, np.tile(d, 3))
    assert J == pytest.approx(0.25, rel=1e-14)


def test_height_translation():
    sc = single_triangle(density=3.0)
    term = make_term("height")
    J0, du, _ = evaluate(term, sc, np.zeros(6))
    J1, _, _ = evaluate(term, sc, np.tile([0.0, 0.7], 3))
    assert J1 - J0 == pytest.approx(-0.7, rel=1e-14)
    assert du.reshape(3, 2)[:, 1].sum() == pytest.approx(-1.0, rel=1e-14)
    assert not np.any(du.reshape(3, 2)[:, 0])


# --- shape terms --------------------------------------------------------------------

def test_volume_penalty_branches():
    sc = single_triangle()
    V = Physics(sc).geom.area.sum()
    J, _, dq = evaluate(make_term("volume", target=V + 0.1), sc, np.zeros(6))
    assert J == 0.0 and not np.any(dq.shape)
    J, _, _ = evaluate(make_term("volume", target=V - 0.05), sc, np.zeros(6))
    assert J == pytest.approx(0.05 ** 2, rel=1e-12)


def test_boundary_smoothing_straight_sides_vanish():
    # square corners with equal legs give |s|^2 = 1/2; collinear boundary vertices give s = 0
    for n in (1, 4):
        v, t, _ = rectangle(1.0, 1.0, n, n)
        mesh = build_mesh(v, t)
        term = BoundarySmoothing(p=2.0)
        J, _ = term.value_and_grad(mesh.rest_vertices, term._stencil(mesh))
        assert J == pytest.approx(2.0, rel=1e-14)


def test_boundary_smoothing_scale_invariant():
    v, t, _ = rectangle(1.0, 0.6, 3, 2)
    v = v + np.random.default_rng(3).uniform(-0.05, 0.05, v.shape)
    mesh = build_mesh(v, t)
    term = BoundarySmoothing(p=3.0)
    ij = term._stencil(mesh)
    J, g = term.value_and_grad(mesh.rest_vertices, ij)
    J2, g2 = term.value_and_grad(2.5 * mesh.rest_vertices, ij)
    assert J2 == pytest.approx(J, rel=1e-13)
    assert np.allclose(g2, g / 2.5, rtol=1e-12, atol=1e-14)


def test_material_smoothing_values():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    sc = Scene(build_mesh(v, np.array([[0, 1, 2], [0, 2, 3]])))
    p = sc.default_params(4.0, 1.0)
    term = make_term("material_smoothing")
    assert evaluate(term, sc, np.zeros(8), p)[0] == 0.0
    p.blocks["lam"][1] = 8.0
    assert evaluate(term, sc, np.zeros(8), p)[0] == pytest.approx(1.25, rel=1e-15)


# --- composition ----------------------------------------------------------------------

def test_default_time_weights():
    sc = small_contact_scene(n_steps=4)
    term = make_term("height")
    w = [term.time_weight(i, 4, sc.dt) for i in range(5)]
    assert w == [0.0] + [sc.dt] * 4
    final = make_term("height", time="final")
    assert [final.time_weight(i, 4, sc.dt) for i in range(5)] == [0, 0, 0, 0, 1]
    assert make_term("volume").time_weight(0, 4, sc.dt) == 1.0
    assert make_term("volume").time_weight(3, 4, sc.dt) == 0.0


def test_spec_round_trip():
    items = [{"kind": "stress_lp", "p": 4.0, "weight": 0.5, "time": "final"},
             {"kind": "center", "targets": [0.1, 0.2], "body": 1}]
    spec = ObjectiveSpec.from_list(items)
    again = ObjectiveSpec.from_list(spec.to_list())
    assert again.to_list() == spec.to_list()
