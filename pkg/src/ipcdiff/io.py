"""Scene files (JSON), trajectory containers and run summaries.

Scene documents are validated with a JSON schema, then cross-references
(body and material names, boundary tags, files) are resolved.  Parsing returns
a ``SceneFile`` whose ``document`` is the normalized input with every default
filled in; serializing that document and parsing it again reproduces the same
scene bit for bit.

Trajectory container layout (all integers little-endian)::

    bytes 0..7    magic  b"IPCDTRJ1"
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header, padded with spaces to a multiple of 8
    remainder     float64 little-endian arrays listed in header["arrays"],
                  each at header offset (relative to the payload start), C order
"""
import copy
import csv
import io as _io
import json
import os
import struct
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .contact import BarrierParams
from .errors import DanglingReference, SchemaError, SolverError
from .forward import Trajectory
from .mesh import build_mesh, load_text_mesh
from .objectives import KINDS, ObjectiveSpec
from .scene import BLOCKS, DirichletBC, NeumannBC, ParameterSet, Scene, TimeTable

MAGIC = b"IPCDTRJ1"

_vec2 = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_table = {
    "type": "object",
    "properties": {"times": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                   "values": {"type": "array", "items": {"type": "number"}, "minItems": 1}},
    "required": ["times", "values"],
    "additionalProperties": False,
}
_int_list = {"type": "array", "items": {"type": "integer", "minimum": 0}}

SCHEMA = {
    "type": "object",
    "required": ["mesh", "time"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "mesh": {
            "type": "object",
            "oneOf": [{"required": ["file"]}, {"required": ["vertices", "triangles"]}],
            "additionalProperties": False,
            "properties": {
                "file": {"type": "string"},
                "vertices": {"type": "array", "items": _vec2, "minItems": 3},
                "triangles": {"type": "array", "minItems": 1,
                              "items": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                        "minItems": 3, "maxItems": 3}},
                "body_id": _int_list,
                "boundary": {"type": "array",
                             "items": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                       "minItems": 3, "maxItems": 3}},
            },
        },
        "materials": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "model": {"enum": ["linear", "neohookean"]},
                "order": {"enum": [1, 2]},
                "damping": {"type": "array", "items": {"type": "number", "minimum": 0},
                            "minItems": 2, "maxItems": 2},
                "types": {
                    "type": "object", "minProperties": 1,
                    "additionalProperties": {
                        "type": "object", "additionalProperties": False,
                        "required": ["lambda", "mu"],
                        "properties": {"lambda": {"type": "number", "minimum": 0},
                                       "mu": {"type": "number", "exclusiveMinimum": 0},
                                       "density": {"type": "number", "exclusiveMinimum": 0}},
                    },
                },
            },
        },
        "bodies": {
            "type": "array",
            "items": {"type": "object", "additionalProperties": False, "required": ["name"],
                      "properties": {"name": {"type": "string"}, "material": {"type": "string"}}},
        },
        "contact": {
            "type": "object",
            "required": ["dhat", "kappa"],
            "additionalProperties": False,
            "properties": {
                "dhat": {"type": "number", "exclusiveMinimum": 0},
                "kappa": {"type": "number", "exclusiveMinimum": 0},
                "eta": {"type": "number", "exclusiveMinimum": 0},
                "self_contact": {"type": "boolean"},
                "friction": {"type": "array", "items": {
                    "type": "object", "additionalProperties": False, "required": ["bodies", "gamma"],
                    "properties": {"bodies": {"type": "array", "items": {"type": "string"},
                                              "minItems": 2, "maxItems": 2},
                                   "gamma": {"type": "number", "minimum": 0}}}},
            },
        },
        "boundary_conditions": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gravity": _vec2,
                "dirichlet": {"type": "array", "items": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"tags": {"type": "array", "items": {"type": "integer"}},
                                   "body": {"type": "string"},
                                   "nodes": _int_list,
                                   "components": {"type": "array", "items": {"enum": [0, 1]},
                                                  "minItems": 1, "maxItems": 2},
                                   "matrix": {"type": "array", "items": _vec2, "minItems": 2, "maxItems": 2},
                                   "offset": _vec2,
                                   "table": _table}}},
                "neumann": {"type": "array", "items": {
                    "type": "object", "additionalProperties": False, "required": ["tag", "traction"],
                    "properties": {"tag": {"type": "integer"}, "traction": _vec2, "table": _table}}},
            },
        },
        "time": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dt": {"type": "number", "exclusiveMinimum": 0},
                           "steps": {"type": "integer", "minimum": 1},
                           "bdf_order": {"enum": [1, 2, 3]},
                           "static": {"type": "boolean"}},
        },
        "initial_conditions": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "array", "items": {
                "type": "object", "additionalProperties": False, "required": ["value"],
                "properties": {"body": {"type": "string"}, "nodes": _int_list, "value": _vec2}}}
                for k in ("displacement", "velocity")},
        },
        "objective": {
            "type": "array",
            "items": {"type": "object", "required": ["kind"],
                      "properties": {"kind": {"enum": sorted(KINDS)},
                                     "weight": {"type": "number"},
                                     "body": {"type": "string"}}},
        },
        "optimization": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "blocks": {"type": "array", "items": {"enum": list(BLOCKS)}, "minItems": 1},
                "bounds": {"type": "object", "propertyNames": {"enum": list(BLOCKS)},
                           "additionalProperties": {"type": "array", "minItems": 2, "maxItems": 2,
                                                    "items": {"type": ["number", "null"]}}},
                "modes": {"type": "object", "propertyNames": {"enum": list(BLOCKS)},
                          "additionalProperties": {"enum": ["free", "uniform"]}},
                "iterations": {"type": "integer", "minimum": 0},
                "memory": {"type": "integer", "minimum": 1},
                "tol_g": {"type": "number", "minimum": 0},
                "tol_f": {"type": "number", "minimum": 0},
            },
        },
        "parameters": {
            "type": "object",
            "required": list(BLOCKS),
            "additionalProperties": False,
            "properties": {b: {"type": "array"} for b in BLOCKS},
        },
    },
}


@dataclass
class SceneFile:
    scene: Scene
    objective: ObjectiveSpec
    optimization: dict
    static: bool
    document: dict
    base_dir: str = "."
    body_names: list = field(default_factory=list)

    def problem(self, **overrides):
        """OptProblem built from the "optimization" block."""
        from .optimize import OptProblem
        o = self.optimization
        bounds = {b: (-np.inf if lo is None else lo, np.inf if hi is None else hi)
                  for b, (lo, hi) in o["bounds"].items()}
        kw = dict(scene=self.scene, objective=self.objective, blocks=tuple(o["blocks"]),
                  bounds=bounds, modes=dict(o["modes"]), memory=o["memory"],
                  max_iter=o["iterations"], tol_g=o["tol_g"], tol_f=o["tol_f"], static=self.static)
        kw.update(overrides)
        return OptProblem(**kw)


def _ptr(*parts):
    return "/" + "/".join(str(p) for p in parts)


def validate(doc):
    """Schema check; raises SchemaError pointing at the first offending location."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise SchemaError(err.message, _ptr(*err.absolute_path) if err.absolute_path else "")


def normalize(doc, mesh=None):
    """Copy of ``doc`` with every optional field filled in."""
    d = copy.deepcopy(doc)
    d.setdefault("name", "scene")
    m = d.setdefault("materials", {})
    m.setdefault("model", "neohookean")
    m.setdefault("order", 1)
    m.setdefault("damping", [0.0, 0.0])
    types = m.setdefault("types", {"default": {"lambda": 1.0, "mu": 1.0}})
    for t in types.values():
        t.setdefault("density", 1.0)
    if "bodies" not in d and mesh is not None:
        d["bodies"] = [{"name": f"body{b}"} for b in range(mesh.n_bodies)]
    first = next(iter(types))
    for b in d.get("bodies", []):
        b.setdefault("material", first)
    if "contact" in d:
        c = d["contact"]
        c.setdefault("eta", 1e-3)
        c.setdefault("self_contact", False)
        c.setdefault("friction", [])
    bc = d.setdefault("boundary_conditions", {})
    bc.setdefault("gravity", [0.0, 0.0])
    for k, item in enumerate(bc.setdefault("dirichlet", [])):
        item.setdefault("tags", [])
        item.setdefault("nodes", [])
        item.setdefault("components", [0, 1])
        item.setdefault("matrix", [[0.0, 0.0], [0.0, 0.0]])
        item.setdefault("offset", [0.0, 0.0])
        item.setdefault("table", {"times": [0.0], "values": [1.0]})
        if not item["tags"] and not item["nodes"] and "body" not in item:
            raise SchemaError("dirichlet condition selects no nodes", _ptr("boundary_conditions", "dirichlet", k))
    for item in bc.setdefault("neumann", []):
        item.setdefault("table", {"times": [0.0], "values": [1.0]})
    t = d["time"]
    t.setdefault("dt", 0.01)
    t.setdefault("steps", 10)
    t.setdefault("bdf_order", 1)
    t.setdefault("static", False)
    ic = d.setdefault("initial_conditions", {})
    ic.setdefault("displacement", [])
    ic.setdefault("velocity", [])
    d.setdefault("objective", [])
    o = d.setdefault("optimization", {})
    o.setdefault("blocks", ["shape"])
    o.setdefault("bounds", {})
    o.setdefault("modes", {})
    o.setdefault("iterations", 50)
    o.setdefault("memory", 6)
    o.setdefault("tol_g", 1e-6)
    o.setdefault("tol_f", 1e-10)
    return d


def _load_mesh(md, base_dir):
    try:
        if "file" in md:
            path = os.path.join(base_dir, md["file"])
            if not os.path.exists(path):
                raise DanglingReference(f"mesh file {md['file']!r} not found", "/mesh/file")
            return load_text_mesh(path)
        spec = {(a, b): tag for a, b, tag in md.get("boundary", [])} or None
        return build_mesh(md["vertices"], md["triangles"], spec, body_id=md.get("body_id"))
    except SchemaError:
        raise
    except (SolverError, ValueError, IndexError) as exc:
        raise SchemaError(str(exc), "/mesh") from exc


def _array_field(value, base_dir, pointer):
    """Inline array, or {"file": path} referencing a .npy or JSON array file."""
    if isinstance(value, dict) and set(value) == {"file"}:
        path = os.path.join(base_dir, value["file"])
        if not os.path.exists(path):
            raise DanglingReference(f"data file {value['file']!r} not found", pointer + "/file")
        if path.endswith(".npy"):
            return np.load(path)
        with open(path) as fh:
            return np.asarray(json.load(fh), dtype=float)
    return value


def build(doc, base_dir="."):
    """SceneFile from a parsed JSON document."""
    validate(doc)
    mesh = _load_mesh(doc["mesh"], base_dir)
    d = normalize(doc, mesh)
    names = [b["name"] for b in d["bodies"]]
    if len(names) != mesh.n_bodies:
        raise SchemaError(f"{len(names)} bodies listed but the mesh has {mesh.n_bodies}", "/bodies")
    if len(set(names)) != len(names):
        raise SchemaError("body names must be unique", "/bodies")

    def body_index(name, pointer):
        if name not in names:
            raise DanglingReference(f"unknown body {name!r}", pointer)
        return names.index(name)

    mat = d["materials"]
    types = mat["types"]
    lam = np.zeros(mesh.n_elements)
    mu = np.zeros(mesh.n_elements)
    rho = np.zeros(mesh.n_elements)
    for k, b in enumerate(d["bodies"]):
        if b["material"] not in types:
            raise DanglingReference(f"unknown material {b['material']!r}", _ptr("bodies", k, "material"))
        t = types[b["material"]]
        sel = mesh.body_id == k
        lam[sel], mu[sel], rho[sel] = t["lambda"], t["mu"], t["density"]

    tags = set(mesh.boundary_tags.tolist())
    bcd = d["boundary_conditions"]
    dirichlet = []
    for k, item in enumerate(bcd["dirichlet"]):
        for j, tag in enumerate(item["tags"]):
            if tag not in tags:
                raise DanglingReference(f"unknown boundary tag {tag}", _ptr("boundary_conditions", "dirichlet", k, "tags", j))
        body = body_index(item["body"], _ptr("boundary_conditions", "dirichlet", k, "body")) if "body" in item else None
        dirichlet.append(DirichletBC(tags=tuple(item["tags"]), body=body, nodes=tuple(item["nodes"]),
                                     components=tuple(item["components"]),
                                     matrix=tuple(map(tuple, item["matrix"])), offset=tuple(item["offset"]),
                                     table=_time_table(item["table"], _ptr("boundary_conditions", "dirichlet", k, "table"))))
    neumann = []
    for k, item in enumerate(bcd["neumann"]):
        if item["tag"] not in tags:
            raise DanglingReference(f"unknown boundary tag {item['tag']}", _ptr("boundary_conditions", "neumann", k, "tag"))
        neumann.append(NeumannBC(item["tag"], tuple(item["traction"]),
                                 _time_table(item["table"], _ptr("boundary_conditions", "neumann", k, "table"))))

    barrier, pairs, gammas, eta, self_contact = None, [], [], 1e-3, False
    if "contact" in d:
        c = d["contact"]
        barrier = BarrierParams(c["dhat"], c["kappa"])
        eta, self_contact = c["eta"], c["self_contact"]
        for k, fr in enumerate(c["friction"]):
            pair = tuple(sorted(body_index(n, _ptr("contact", "friction", k, "bodies", j))
                                for j, n in enumerate(fr["bodies"])))
            if pair in pairs:
                raise SchemaError("duplicate friction pair", _ptr("contact", "friction", k))
            pairs.append(pair)
            gammas.append(fr["gamma"])

    t = d["time"]
    try:
        scene = Scene(mesh, order=mat["order"], model=mat["model"], density=rho, barrier=barrier,
                      friction_pairs=tuple(pairs), eta=eta, self_contact=self_contact,
                      gravity=tuple(bcd["gravity"]), dirichlet=tuple(dirichlet), neumann=tuple(neumann),
                      dt=t["dt"], n_steps=t["steps"], bdf_order=t["bdf_order"], name=d["name"])
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc
    params = scene.default_params()
    params.blocks["lam"][:] = lam
    params.blocks["mu"][:] = mu
    params.blocks["gamma"][:] = [gammas[pairs.index(p)] for p in scene.friction_pairs]
    params.blocks["damping"][:] = mat["damping"]
    space = scene.space
    for key, block in (("displacement", "u0"), ("velocity", "v0")):
        for k, item in enumerate(d["initial_conditions"][key]):
            pointer = _ptr("initial_conditions", key, k)
            nodes = []
            if "body" in item:
                nodes.append(space.body_nodes(body_index(item["body"], pointer + "/body")))
            if "nodes" in item:
                idx = np.asarray(item["nodes"], dtype=int)
                if idx.size and idx.max() >= space.n_nodes:
                    raise DanglingReference("node index out of range", pointer + "/nodes")
                nodes.append(idx)
            if not nodes:
                raise SchemaError("initial condition selects no nodes", pointer)
            params.blocks[block][np.concatenate(nodes)] = item["value"]
    if "parameters" in d:
        try:
            override = ParameterSet.from_dict(d["parameters"])
        except (ValueError, TypeError) as exc:
            raise SchemaError(str(exc), "/parameters") from exc
        for b in BLOCKS:
            if override[b].shape != params[b].shape:
                raise SchemaError(f"shape {override[b].shape} expected {params[b].shape}", _ptr("parameters", b))
        params = override
    scene = scene.with_params(params)

    terms = []
    for k, item in enumerate(d["objective"]):
        kw = {key: _array_field(v, base_dir, _ptr("objective", k, key)) for key, v in item.items()}
        if "body" in kw:
            kw["body"] = body_index(kw["body"], _ptr("objective", k, "body"))
        try:
            terms.append(KINDS[kw.pop("kind")](**kw))
        except (TypeError, ValueError) as exc:
            raise SchemaError(str(exc), _ptr("objective", k)) from exc
    return SceneFile(scene, ObjectiveSpec(terms), d["optimization"], t["static"], d, base_dir, names)


def _time_table(td, pointer):
    try:
        return TimeTable(tuple(td["times"]), tuple(td["values"]))
    except ValueError as exc:
        raise SchemaError(str(exc), pointer) from exc


def parse_scene(path):
    """Read, validate and build a scene file.  Returns a SceneFile."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise SchemaError(f"scene file {path!r} not found") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    return build(doc, os.path.dirname(os.path.abspath(path)))


def serialize(scene_file, params=None):
    """Normalized document; ``params`` (e.g. optimized values) are stored under "parameters"."""
    doc = copy.deepcopy(scene_file.document)
    if params is not None:
        doc["parameters"] = params.to_dict()
    return doc


def dumps(doc):
    return json.dumps(doc, indent=1, sort_keys=False)


def write_scene(path, scene_file, params=None):
    with open(path, "w") as fh:
        fh.write(dumps(serialize(scene_file, params)))
        fh.write("\n")


# --- trajectory container ------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_trajectory(path, traj, metadata=None):
    u = np.ascontiguousarray(np.array(traj.u, dtype="<f8"))
    v = np.ascontiguousarray(np.array(traj.v, dtype="<f8"))
    header = {"format": "ipcdiff-trajectory", "version": 1, "dt": traj.dt, "bdf_order": traj.bdf_order,
              "n_steps": traj.n_steps, "n_dofs": int(u.shape[1]),
              "arrays": [{"name": "u", "shape": list(u.shape), "offset": 0},
                         {"name": "v", "shape": list(v.shape), "offset": u.nbytes}],
              "stats": _jsonable(traj.stats), "active": _jsonable(traj.active),
              "metadata": _jsonable(metadata or {})}
    raw = json.dumps(header).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(u.tobytes())
        fh.write(v.tobytes())


def read_trajectory(path):
    """Returns (Trajectory, header)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise SchemaError(f"{path}: not a trajectory container")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode("utf-8"))
    payload = memoryview(data)[16 + n:]
    arrays = {}
    for a in header["arrays"]:
        count = int(np.prod(a["shape"]))
        arrays[a["name"]] = np.frombuffer(payload, dtype="<f8", count=count,
                                          offset=a["offset"]).reshape(a["shape"]).copy()
    traj = Trajectory(list(arrays["u"]), list(arrays["v"]), header["dt"], header["bdf_order"],
                      header["stats"], [np.asarray(x, dtype=int) for x in header["active"]])
    return traj, header


# --- summaries -------------------------------------------------------------------------

SUMMARY_FIELDS = ("step", "time", "newton_iterations", "min_distance", "min_det", "objective")


def step_summaries(traj, step_objectives=None):
    rows = []
    for i, s in enumerate(traj.stats):
        rows.append({"step": i, "time": i * traj.dt, "newton_iterations": s["newton_iterations"],
                     "min_distance": s["min_distance"], "min_det": s["min_det"],
                     "objective": None if step_objectives is None else step_objectives[i]})
    return rows


def summaries_csv(rows):
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else r[k])
                    for k in SUMMARY_FIELDS})
    return buf.getvalue()


def gradient_to_dict(grad, objective=None):
    out = {"blocks": {b: np.asarray(grad[b]).tolist() for b in BLOCKS}}
    if objective is not None:
        out["objective"] = float(objective)
    return out


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=1)
        fh.write("\n")
