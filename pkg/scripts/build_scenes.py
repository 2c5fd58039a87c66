"""Regenerate the bundled scene files in ../scenes from the structured mesh generators."""
import os

import numpy as np

from ipcdiff import io
from ipcdiff.forward import simulate
from ipcdiff.mesh import build_mesh
from ipcdiff.meshgen import disk, merge, rectangle

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "..", "scenes")


def mesh_block(parts, side_fns):
    """Inline mesh block; rectangle parts keep their side tags, other boundaries get tag 0."""
    v, t, body = merge(parts)
    mesh = build_mesh(v, t, body_id=body)
    vb = mesh.vertex_body()
    boundary = []
    for (a, b) in mesh.boundary_edges.tolist():
        fn = side_fns[vb[a]]
        tag = int(fn(mesh.rest_vertices[a], mesh.rest_vertices[b])) if fn else 0
        if tag:
            boundary.append([a, b, tag])
    return {"vertices": mesh.rest_vertices.tolist(), "triangles": mesh.triangles.tolist(),
            "body_id": body.tolist(), "boundary": boundary}


def rotate(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    return v @ np.array([[c, -s], [s, c]]).T


def write(name, doc):
    io.build(doc, OUT)          # validate before writing
    with open(os.path.join(OUT, name), "w") as fh:
        fh.write(io.dumps(doc))
        fh.write("\n")
    print("wrote", name)


def drop():
    vd, td = disk(0.3, 2, center=(0.07, 0.33))
    vr, tr, side = rectangle(1.2, 0.2, 4, 1, origin=(-0.6, -0.2))
    mesh = mesh_block([(vd, td), (vr, tr)], [None, side])
    X = np.array(mesh["vertices"])
    return {
        "name": "drop",
        "mesh": mesh,
        "materials": {"model": "neohookean", "order": 1, "damping": [1.0, 0.5],
                      "types": {"soft": {"lambda": 1e3, "mu": 1e3, "density": 1.0}}},
        "bodies": [{"name": "ball", "material": "soft"}, {"name": "block", "material": "soft"}],
        "contact": {"dhat": 0.05, "kappa": 100.0, "eta": 1e-3,
                    "friction": [{"bodies": ["ball", "block"], "gamma": 0.3}]},
        "boundary_conditions": {"gravity": [0.0, -9.81], "dirichlet": [{"body": "block"}]},
        "time": {"dt": 0.01, "steps": 6, "bdf_order": 1},
        "initial_conditions": {"velocity": [{"body": "ball", "value": [0.5, -0.3]}]},
        "objective": [
            {"kind": "center", "targets": [0.2, 0.2], "body": "ball"},
            {"kind": "target", "targets": (X + 0.05).tolist(), "body": "ball", "weight": 3.0},
            {"kind": "stress_lp", "p": 2.0, "weight": 1e-3, "time": "final"},
            {"kind": "material_smoothing", "weight": 0.1},
        ],
        "optimization": {"blocks": ["v0"], "modes": {"v0": "uniform"}, "iterations": 20},
    }


def master(bdf):
    vd, td = disk(0.25, 7, center=(0.03, 0.285))
    vr, tr, side = rectangle(1.6, 0.1, 12, 1, origin=(-0.8, -0.1))
    angle = -0.25
    side_rot = lambda a, b: side(rotate(a, -angle), rotate(b, -angle))
    mesh = mesh_block([(vd, td), (rotate(vr, angle), tr)], [None, side_rot])
    X = np.array(mesh["vertices"])
    return {
        "name": f"master_bdf{bdf}",
        "mesh": mesh,
        "materials": {"model": "neohookean", "order": 1, "damping": [20.0, 10.0],
                      "types": {"rubber": {"lambda": 2e5, "mu": 1e5, "density": 1e3}}},
        "bodies": [{"name": "disk", "material": "rubber"}, {"name": "ramp", "material": "rubber"}],
        "contact": {"dhat": 0.01, "kappa": 1e5, "eta": 1e-3,
                    "friction": [{"bodies": ["disk", "ramp"], "gamma": 0.3}]},
        "boundary_conditions": {"gravity": [0.0, -9.81], "dirichlet": [{"body": "ramp"}]},
        "time": {"dt": 0.01, "steps": 10, "bdf_order": bdf},
        "initial_conditions": {"velocity": [{"body": "disk", "value": [0.3, -1.5]}]},
        "objective": [
            {"kind": "center", "targets": [0.1, 0.2], "body": "disk"},
            {"kind": "target", "targets": (X + 0.02).tolist(), "body": "disk"},
            {"kind": "stress_lp", "p": 2.0, "weight": 1e-6, "time": "final"},
        ],
        "optimization": {"blocks": ["gamma"], "iterations": 20},
    }


def puck():
    vp, tp, _ = rectangle(0.2, 0.1, 2, 1, origin=(-0.33, -0.004))
    vg, tg, side_g = rectangle(1.4, 0.1, 7, 1, origin=(-0.7, -0.11))
    mesh = mesh_block([(vp, tp), (vg, tg)], [None, side_g])
    doc = {
        "name": "puck",
        "mesh": mesh,
        "materials": {"model": "neohookean", "order": 1,
                      "types": {"stiff": {"lambda": 1e5, "mu": 1e5, "density": 1e3}}},
        "bodies": [{"name": "puck", "material": "stiff"}, {"name": "ground", "material": "stiff"}],
        "contact": {"dhat": 0.02, "kappa": 1e4, "eta": 1e-3,
                    "friction": [{"bodies": ["puck", "ground"], "gamma": 0.2}]},
        "boundary_conditions": {"gravity": [0.0, -9.81], "dirichlet": [{"body": "ground"}]},
        "time": {"dt": 0.02, "steps": 15, "bdf_order": 1},
        "initial_conditions": {"velocity": [{"body": "puck", "value": [2.0, 0.0]}]},
        "optimization": {"blocks": ["gamma"], "iterations": 30},
    }
    # synthetic observation with gamma = 0.2, then start the fit from 0.5
    sf = io.build(doc, OUT)
    traj = simulate(sf.scene)
    X = sf.scene.space.upsample @ sf.scene.params.shape
    targets = np.array([X + u.reshape(-1, 2) for u in traj.u])
    doc["objective"] = [{"kind": "target", "targets": targets.tolist(), "body": "puck"}]
    doc["contact"]["friction"][0]["gamma"] = 0.5
    return doc


def synthetic_targets(doc):
    """Per-step node positions of the ball simulated with the document as given."""
    sf = io.build(doc, OUT)
    traj = simulate(sf.scene)
    X = sf.scene.space.upsample @ sf.scene.params.shape
    return np.array([X + u.reshape(-1, 2) for u in traj.u]).tolist()


def fit_base(name):
    doc = drop()
    doc.update(name=name, time={"dt": 0.01, "steps": 8, "bdf_order": 1})
    doc["initial_conditions"]["velocity"][0]["value"] = [0.5, -2.0]
    doc.pop("objective")
    return doc


def material_fit():
    # observation with lambda = mu = 1e3, fit starts from half of both
    doc = fit_base("material_fit")
    doc["objective"] = [{"kind": "target", "targets": synthetic_targets(doc), "body": "ball"}]
    doc["materials"]["types"]["soft"].update({"lambda": 500.0, "mu": 500.0})
    doc["optimization"] = {"blocks": ["lam", "mu"], "modes": {"lam": "uniform", "mu": "uniform"},
                           "iterations": 40}
    return doc


def velocity_fit():
    # observation with v0 = (0.5, -2), fit starts from (0, -1)
    doc = fit_base("velocity_fit")
    doc["objective"] = [{"kind": "target", "targets": synthetic_targets(doc), "body": "ball"}]
    doc["initial_conditions"]["velocity"][0]["value"] = [0.0, -1.0]
    doc["optimization"] = {"blocks": ["v0"], "modes": {"v0": "uniform"}, "iterations": 40}
    return doc


def bar():
    v, t, side = rectangle(1.0, 0.1, 8, 1)
    mesh = build_mesh(v, t, side)
    boundary = [[a, b, int(tag)] for (a, b), tag in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags.tolist())]
    return {
        "name": "bar",
        "mesh": {"vertices": mesh.rest_vertices.tolist(), "triangles": mesh.triangles.tolist(),
                 "boundary": boundary},
        "materials": {"model": "linear", "order": 1,
                      "types": {"steel": {"lambda": 0.0, "mu": 50.0}}},
        "boundary_conditions": {
            "dirichlet": [{"tags": [4], "components": [0]}, {"nodes": [0], "components": [1]}],
            "neumann": [{"tag": 2, "traction": [8.0, 0.0]}],
        },
        "time": {"static": True},
        "objective": [{"kind": "stress_lp", "p": 4.0}, {"kind": "volume", "target": 0.09}],
        "optimization": {"blocks": ["shape"], "iterations": 10},
    }


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    write("drop.json", drop())
    write("master_bdf1.json", master(1))
    write("master_bdf2.json", master(2))
    write("puck.json", puck())
    write("bar.json", bar())
    write("material_fit.json", material_fit())
    write("velocity_fit.json", velocity_fit())
