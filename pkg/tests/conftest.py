import os

import numpy as np
import pytest

from ipcdiff import io
from ipcdiff.contact import BarrierParams
from ipcdiff.mesh import build_mesh
from ipcdiff.meshgen import disk, merge, rectangle
from ipcdiff.scene import DirichletBC, Scene

SCENES = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "scenes")


def scene_path(name):
    return os.path.join(SCENES, name)


def load(name):
    return io.parse_scene(scene_path(name))


def central(f, x, d, h):
    return (f(x + h * d) - f(x - h * d)) / (2 * h)


def rel(a, b, floor=1e-300):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def small_contact_scene(order=1, bdf=1, n_steps=4, friction=0.3, damping=(1.0, 0.5), v0=(0.5, -0.3)):
    """Disk over a pinned block with every force active; kept off symmetric kinks."""
    vd, td = disk(0.3, 2, center=(0.07, 0.33))
    vr, tr, _ = rectangle(1.2, 0.2, 4, 1, origin=(-0.6, -0.2))
    v, t, body = merge([(vd, td), (vr, tr)])
    mesh = build_mesh(v, t, body_id=body)
    sc = Scene(mesh, order=order, dt=0.01, n_steps=n_steps, bdf_order=bdf, gravity=(0, -9.81),
               barrier=BarrierParams(0.05, 100.0), friction_pairs=((0, 1),),
               dirichlet=(DirichletBC(body=1),))
    p = sc.default_params(1e3, 1e3)
    p.blocks["gamma"][:] = friction
    p.blocks["damping"][:] = damping
    p.blocks["v0"][sc.space.body_nodes(0)] = v0
    return sc.with_params(p)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary -------------------------------------------------------------

@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    rows = item.config.stash.setdefault(_CRITERIA, {})
    n, title = mark.args
    entry = rows.setdefault(n, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    detail = dict(item.user_properties).get("detail")
    if detail:
        entry["details"].append(detail)
    elif not rep.passed:
        entry["details"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(_CRITERIA, {})
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(rows):
        r = rows[n]
        line = f"[{'PASS' if r['ok'] else 'FAIL'}] criterion {n}: {r['title']}"
        if r["details"]:
            line += " | " + "; ".join(r["details"])
        terminalreporter.write_line(line)


_CRITERIA = pytest.StashKey()
