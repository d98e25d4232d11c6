"""Scenario configuration: flat key-value files, validation, defaults.

Format: one `key = value` per line, `#` comments, blank lines ignored.
Values are scalars, whitespace-separated vectors, or bare words.  Keys are
dotted and lowercase.  Unknown keys are rejected.

Recognised keys (* = required):

  scenario.kind*          phantom | dbs
  tau                     time step [s]                      (default 0.01)
  steps                   number of steps                    (default 100)
  theta                   refinement threshold; 0 = uniform  (default 0.0)
  max_depth               max refinement depth               (default 2)
  uniform_refine          pre-refine all elements K times    (default 0)
  vtk_every               snapshot period in steps; 0 = off  (default 0)
  seed                    RNG seed (reserved; determinism)   (default 0)

  tissue.shape*           box | ellipsoid | obj
  tissue.origin           box corner [m]                     (box, default 0 0 0)
  tissue.size             box size [m]                       (box*)
  tissue.center           ellipsoid centre [m]               (ellipsoid*)
  tissue.semi_axes        ellipsoid semi-axes [m]            (ellipsoid*)
  tissue.obj_path         surface mesh path                  (obj*)
  tissue.resolution*      base grid cells, e.g. `8 4 4`
  tissue.young_modulus*   [Pa]
  tissue.poisson_ratio*   [-], must be < 0.5
  tissue.density          [kg/m^3]                           (default 1000)
  tissue.rayleigh_mass    Rayleigh alpha [1/s]               (default 0.1)
  tissue.rayleigh_stiffness  Rayleigh beta [s]               (default 0.1)

  clamp.face              xmin|xmax|ymin|ymax|zmin|zmax (fix nodes on that
                          bounding-box face)
  clamp.box               x0 y0 z0 x1 y1 z1: fix nodes inside the box
                          (at least one clamp.* is required)

  needle.base*            base position [m] (outside the tissue)
  needle.direction*       insertion direction (normalised internally)
  needle.length*          [m]
  needle.segments         element count                      (default 16)
  needle.radius*          [m]
  needle.young_modulus*   [Pa]
  needle.poisson_ratio    [-]                                (default 0.3)
  needle.density          [kg/m^3]                           (default 7000)
  needle.speed*           insertion speed [m/s]
  needle.rayleigh_mass    (default 0.1)
  needle.rayleigh_stiffness  (default 0.1)

  insertion.depth*        target insertion depth [m]

  interaction.friction            mu                         (default 0.3)
  interaction.puncture_strength   lambda_p0 [N]              (default 0.1)
  interaction.cutting_strength    lambda_c0 [N]              (default 0.05)
  interaction.shaft_spacing       [m]                        (default 0.002)

  probe.<name>            material point to trace [m] (any number of probes)
  target                  material target point [m] (optional; enables the
                          tip_target_distance trace column)
  preload.box             region box (6 floats) displaced quasi-statically
                          before insertion and held there (fixture / shift)
  preload.displacement    displacement of the preload region [m]

  dbs-kind only:
  electrode.length*       [m]
  electrode.radius*       [m]
  electrode.segments      (default 8)
  electrode.young_modulus (default: needle's)
  electrode.density       (default: needle's)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constraints import InteractionParameters

log = logging.getLogger(__name__)

_FACES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")


class ScenarioError(ValueError):
    """Raised with an itemised list of configuration problems."""

    def __init__(self, items):
        self.items = list(items)
        super().__init__("invalid scenario:\n" + "\n".join(f"  - {i}" for i in self.items))


@dataclass
class TissueConfig:
    shape: str = ""
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    size: np.ndarray | None = None
    center: np.ndarray | None = None
    semi_axes: np.ndarray | None = None
    obj_path: str | None = None
    resolution: tuple = ()
    young_modulus: float = 0.0
    poisson_ratio: float = -1.0
    density: float = 1000.0
    rayleigh_mass: float = 0.1
    rayleigh_stiffness: float = 0.1


@dataclass
class BeamConfig:
    base: np.ndarray | None = None
    direction: np.ndarray | None = None
    length: float = 0.0
    segments: int = 16
    radius: float = 0.0
    young_modulus: float = 0.0
    poisson_ratio: float = 0.3
    density: float = 7000.0
    speed: float = 0.0
    rayleigh_mass: float = 0.1
    rayleigh_stiffness: float = 0.1


@dataclass
class ElectrodeConfig:
    length: float = 0.0
    radius: float = 0.0
    segments: int = 8
    young_modulus: float | None = None
    density: float | None = None


@dataclass
class ScenarioConfig:
    kind: str = ""
    tau: float = 0.01
    steps: int = 100
    theta: float = 0.0
    max_depth: int = 2
    uniform_refine: int = 0
    vtk_every: int = 0
    seed: int = 0
    tissue: TissueConfig = field(default_factory=TissueConfig)
    needle: BeamConfig = field(default_factory=BeamConfig)
    electrode: ElectrodeConfig | None = None
    interaction: InteractionParameters = field(default_factory=InteractionParameters)
    clamp_face: str | None = None
    clamp_boxes: list = field(default_factory=list)
    preload_box: np.ndarray | None = None
    preload_displacement: np.ndarray | None = None
    insertion_depth: float = 0.0
    probes: dict = field(default_factory=dict)
    target: np.ndarray | None = None

    @property
    def adaptive(self) -> bool:
        return self.theta > 0.0


def _parse_value(raw: str):
    parts = raw.replace(",", " ").split()
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        return raw.strip()
    if len(nums) == 1:
        return nums[0]
    return np.array(nums)


def parse_keyvalues(text: str) -> dict:
    """Raw dict of dotted keys to parsed values; duplicate keys rejected."""
    out = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected `key = value`, got {stripped!r}")
            continue
        key, raw = stripped.split("=", 1)
        key = key.strip().lower()
        if key in out:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        out[key] = _parse_value(raw)
    if errors:
        raise ScenarioError(errors)
    return out


def _take(raw: dict, key: str, default=None):
    return raw.pop(key, default)


def _as_int(value, key, errors, minimum=None):
    try:
        i = int(value)
        if i != float(value):
            raise ValueError
    except (TypeError, ValueError):
        errors.append(f"{key}: expected an integer, got {value!r}")
        return None
    if minimum is not None and i < minimum:
        errors.append(f"{key}: must be >= {minimum}, got {i}")
        return None
    return i


def _as_float(value, key, errors, positive=False, nonnegative=False):
    try:
        x = float(value)
    except (TypeError, ValueError):
        errors.append(f"{key}: expected a number, got {value!r}")
        return None
    if positive and not x > 0:
        errors.append(f"{key}: must be > 0, got {x}")
        return None
    if nonnegative and x < 0:
        errors.append(f"{key}: must be >= 0, got {x}")
        return None
    return x


def _as_vec(value, key, errors, size=3):
    arr = np.atleast_1d(np.asarray(value, dtype=float)) \
        if not isinstance(value, str) else None
    if arr is None or arr.shape != (size,) or not np.all(np.isfinite(arr)):
        errors.append(f"{key}: expected {size} numbers, got {value!r}")
        return None
    return arr


def load_scenario(path) -> ScenarioConfig:
    """Parse and validate a scenario file.  Raises ScenarioError with every
    problem found (not just the first)."""
    text = Path(path).read_text()
    raw = parse_keyvalues(text)
    errors: list[str] = []
    cfg = ScenarioConfig()

    cfg.kind = str(_take(raw, "scenario.kind", ""))
    if cfg.kind not in ("phantom", "dbs"):
        errors.append(f"scenario.kind: must be `phantom` or `dbs`, got {cfg.kind!r}")

    for key, attr, kwargs in [
        ("tau", "tau", dict(positive=True)),
        ("theta", "theta", dict(nonnegative=True)),
    ]:
        if key in raw:
            val = _as_float(_take(raw, key), key, errors, **kwargs)
            if val is not None:
                setattr(cfg, attr, val)
    if cfg.theta >= 1.0:
        errors.append(f"theta: must be < 1, got {cfg.theta}")
    for key, attr, minimum in [("steps", "steps", 1), ("max_depth", "max_depth", 0),
                               ("uniform_refine", "uniform_refine", 0),
                               ("vtk_every", "vtk_every", 0), ("seed", "seed", 0)]:
        if key in raw:
            val = _as_int(_take(raw, key), key, errors, minimum=minimum)
            if val is not None:
                setattr(cfg, attr, val)

    # ----------------------------------------------------------- tissue
    t = cfg.tissue
    t.shape = str(_take(raw, "tissue.shape", ""))
    if t.shape not in ("box", "ellipsoid", "obj"):
        errors.append(f"tissue.shape: must be box|ellipsoid|obj, got {t.shape!r}")
    if "tissue.origin" in raw:
        t.origin = _as_vec(_take(raw, "tissue.origin"), "tissue.origin", errors)
    if "tissue.size" in raw:
        t.size = _as_vec(_take(raw, "tissue.size"), "tissue.size", errors)
    if "tissue.center" in raw:
        t.center = _as_vec(_take(raw, "tissue.center"), "tissue.center", errors)
    if "tissue.semi_axes" in raw:
        t.semi_axes = _as_vec(_take(raw, "tissue.semi_axes"), "tissue.semi_axes", errors)
    if "tissue.obj_path" in raw:
        t.obj_path = str(_take(raw, "tissue.obj_path"))
    if t.shape == "box" and t.size is None:
        errors.append("tissue.size: required for box tissue")
    if t.shape == "ellipsoid" and (t.center is None or t.semi_axes is None):
        errors.append("tissue.center/tissue.semi_axes: required for ellipsoid tissue")
    if t.shape == "obj" and t.obj_path is None:
        errors.append("tissue.obj_path: required for obj tissue")

    res = _take(raw, "tissue.resolution")
    if res is None:
        errors.append("tissue.resolution: required")
    else:
        vec = _as_vec(res, "tissue.resolution", errors)
        if vec is not None:
            if np.any(vec < 1) or np.any(vec != np.round(vec)):
                errors.append(f"tissue.resolution: expected positive integers, got {vec}")
            else:
                t.resolution = tuple(int(r) for r in vec)

    for key, attr, kwargs in [
        ("tissue.young_modulus", "young_modulus", dict(positive=True)),
        ("tissue.density", "density", dict(positive=True)),
        ("tissue.rayleigh_mass", "rayleigh_mass", dict(nonnegative=True)),
        ("tissue.rayleigh_stiffness", "rayleigh_stiffness", dict(nonnegative=True)),
    ]:
        if key in raw or attr in ("young_modulus",):
            if key not in raw:
                errors.append(f"{key}: required")
                continue
            val = _as_float(_take(raw, key), key, errors, **kwargs)
            if val is not None:
                setattr(t, attr, val)
    nu = _take(raw, "tissue.poisson_ratio")
    if nu is None:
        errors.append("tissue.poisson_ratio: required")
    else:
        val = _as_float(nu, "tissue.poisson_ratio", errors)
        if val is not None:
            if not (0.0 <= val < 0.5):
                errors.append(f"tissue.poisson_ratio: must be in [0, 0.5) "
                              f"(incompressible limit unsupported), got {val}")
            else:
                t.poisson_ratio = val

    # ------------------------------------------------------------ clamps
    face = _take(raw, "clamp.face")
    if face is not None:
        if str(face) not in _FACES:
            errors.append(f"clamp.face: must be one of {'|'.join(_FACES)}, got {face!r}")
        else:
            cfg.clamp_face = str(face)
    box = _take(raw, "clamp.box")
    if box is not None:
        vec = _as_vec(box, "clamp.box", errors, size=6)
        if vec is not None:
            lo, hi = vec[:3], vec[3:]
            if np.any(hi <= lo):
                errors.append(f"clamp.box: upper corner must exceed lower, got {vec}")
            else:
                cfg.clamp_boxes.append((lo, hi))
    if cfg.clamp_face is None and not cfg.clamp_boxes:
        errors.append("clamp.face or clamp.box: at least one clamp is required")

    # ------------------------------------------------------------ needle
    nd = cfg.needle
    for key, attr in [("needle.base", "base"), ("needle.direction", "direction")]:
        val = _take(raw, key)
        if val is None:
            errors.append(f"{key}: required")
        else:
            vec = _as_vec(val, key, errors)
            if vec is not None:
                setattr(nd, attr, vec)
    if nd.direction is not None:
        norm = np.linalg.norm(nd.direction)
        if norm < 1e-12:
            errors.append("needle.direction: must be nonzero")
        else:
            nd.direction = nd.direction / norm
    for key, attr, required, kwargs in [
        ("needle.length", "length", True, dict(positive=True)),
        ("needle.radius", "radius", True, dict(positive=True)),
        ("needle.young_modulus", "young_modulus", True, dict(positive=True)),
        ("needle.poisson_ratio", "poisson_ratio", False, dict(nonnegative=True)),
        ("needle.density", "density", False, dict(positive=True)),
        ("needle.speed", "speed", True, dict(nonnegative=True)),
        ("needle.rayleigh_mass", "rayleigh_mass", False, dict(nonnegative=True)),
        ("needle.rayleigh_stiffness", "rayleigh_stiffness", False, dict(nonnegative=True)),
    ]:
        if key in raw:
            val = _as_float(_take(raw, key), key, errors, **kwargs)
            if val is not None:
                setattr(nd, attr, val)
        elif required:
            errors.append(f"{key}: required")
    if "needle.segments" in raw:
        val = _as_int(_take(raw, "needle.segments"), "needle.segments", errors, minimum=1)
        if val is not None:
            nd.segments = val

    depth = _take(raw, "insertion.depth")
    if depth is None:
        errors.append("insertion.depth: required")
    else:
        val = _as_float(depth, "insertion.depth", errors, positive=True)
        if val is not None:
            cfg.insertion_depth = val
            if nd.length and val >= nd.length:
                errors.append(f"insertion.depth: must be < needle.length "
                              f"({val} >= {nd.length})")

    # ------------------------------------------------------- interaction
    ip = {}
    for key, attr in [("interaction.friction", "friction"),
                      ("interaction.puncture_strength", "puncture_strength"),
                      ("interaction.cutting_strength", "cutting_strength"),
                      ("interaction.shaft_spacing", "shaft_spacing")]:
        if key in raw:
            val = _as_float(_take(raw, key), key, errors, nonnegative=True)
            if val is not None:
                ip[attr] = val
    try:
        cfg.interaction = InteractionParameters(**ip)
    except ValueError as exc:
        errors.append(f"interaction.*: {exc}")

    # --------------------------------------------------- probes / target
    for key in [k for k in raw if k.startswith("probe.")]:
        name = key[len("probe."):]
        vec = _as_vec(_take(raw, key), key, errors)
        if vec is not None:
            cfg.probes[name] = vec
    tgt = _take(raw, "target")
    if tgt is not None:
        cfg.target = _as_vec(tgt, "target", errors)

    pb = _take(raw, "preload.box")
    pd = _take(raw, "preload.displacement")
    if (pb is None) != (pd is None):
        errors.append("preload.box and preload.displacement must be set together")
    if pb is not None:
        vec = _as_vec(pb, "preload.box", errors, size=6)
        if vec is not None:
            cfg.preload_box = vec.reshape(2, 3)
    if pd is not None:
        cfg.preload_displacement = _as_vec(pd, "preload.displacement", errors)

    # ------------------------------------------------- dbs-only sections
    dbs_keys = [k for k in raw if k.startswith("electrode.")]
    if cfg.kind == "dbs":
        el = ElectrodeConfig()
        for key, attr, required in [("electrode.length", "length", True),
                                    ("electrode.radius", "radius", True),
                                    ("electrode.young_modulus", "young_modulus", False),
                                    ("electrode.density", "density", False)]:
            if key in raw:
                val = _as_float(_take(raw, key), key, errors, positive=True)
                if val is not None:
                    setattr(el, attr, val)
            elif required:
                errors.append(f"{key}: required for dbs scenarios")
        if "electrode.segments" in raw:
            val = _as_int(_take(raw, "electrode.segments"), "electrode.segments",
                          errors, minimum=1)
            if val is not None:
                el.segments = val
        if el.young_modulus is None:
            el.young_modulus = nd.young_modulus
        if el.density is None:
            el.density = nd.density
        cfg.electrode = el
    elif dbs_keys:
        for k in dbs_keys:
            errors.append(f"{k}: only valid for dbs scenarios")
            raw.pop(k)

    for key in sorted(raw):
        errors.append(f"unknown key {key!r}")
    if errors:
        raise ScenarioError(errors)
    return cfg
