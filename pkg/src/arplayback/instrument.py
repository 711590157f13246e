"""Wrist kinematics of an articulated instrument and backward component placement.

Frames: ``psm`` is the end-effector (jaw tip) frame, ``w`` the wrist centre,
``b`` the body link and ``sh`` the shaft. The wrist is reached from the
end-effector by a pure translation; body and shaft are then placed by walking
the two wrist DH joints backwards, so no error from the proximal joints
enters the placement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, ValidationError
from .geometry import GeometryError, RigidTransform, _trusted, compose, compose_all, invert
from .textio import data_lines, fmt, load_toml, parse_floats, read_text

COMPONENTS = ("left_jaw", "right_jaw", "body", "shaft")


@dataclass(frozen=True)
class DHRow:
    """Standard DH row: ``Rz(theta + offset) Tz(d) Tx(a) Rx(alpha)``; lengths in mm."""

    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0

    def transform(self, q: float) -> RigidTransform:
        theta = q + self.theta_offset
        ct, st = math.cos(0.5 * theta), math.sin(0.5 * theta)
        ca, sa = math.cos(0.5 * self.alpha), math.sin(0.5 * self.alpha)
        # quaternion of Rz(theta) Rx(alpha)
        rot = (ct * ca, ct * sa, st * sa, st * ca)
        trans = (self.a * math.cos(theta), self.a * math.sin(theta), self.d)
        return _trusted(rot, trans)


@dataclass(frozen=True)
class JointState:
    q6: float
    q7: float
    theta_j: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.q6, self.q7, self.theta_j)):
            raise ValidationError("joint values must be finite")
        if self.theta_j < 0:
            raise ValidationError("jaw separation must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.q6, self.q7, self.theta_j])


def _cylinder(radius: float, length: float, rings: int = 4, around: int = 12) -> np.ndarray:
    ang = np.linspace(0.0, 2.0 * np.pi, around, endpoint=False)
    pts = [np.column_stack((np.full(around, -x), radius * np.cos(ang), radius * np.sin(ang)))
           for x in np.linspace(0.0, length, rings)]
    return np.vstack(pts)


def _box(p0, p1, half_width: float) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    u = axis / length if length > 1e-9 else np.array([1.0, 0.0, 0.0])
    helper = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    v = np.cross(u, helper)
    v /= np.linalg.norm(v)
    w = np.cross(u, v)
    corners = []
    for end in (p0, p1):
        for sv in (-1, 1):
            for sw in (-1, 1):
                corners.append(end + half_width * (sv * v + sw * w))
    return np.array(corners)


def _wedge(tip, root_half_width: float = 1.6) -> np.ndarray:
    tip = np.asarray(tip, float)
    root = [[0.0, sy * root_half_width, sz * root_half_width] for sy in (-1, 1) for sz in (-1, 1)]
    mid = [0.5 * tip + [0.0, sy * 0.5 * root_half_width, 0.0] for sy in (-1, 1)]
    return np.vstack((root, mid, [tip]))


@dataclass(frozen=True)
class InstrumentModel:
    """Geometry of the wrist: two DH rows, wrist offset, jaw frame and proxies.

    ``wrist_offset`` is the wrist-centre position in the end-effector frame
    (the transform is a pure translation). ``jaw_tip`` is the jaw tip in the
    jaw frame.
    """

    dh_q6: DHRow
    dh_q7: DHRow
    wrist_offset: np.ndarray
    jaw_offset: RigidTransform = field(default_factory=RigidTransform)
    jaw_tip: np.ndarray = field(default_factory=lambda: np.array([10.2, 0.0, 0.0]))
    limits: dict = field(default_factory=lambda: {
        "q6": (-np.pi / 2, np.pi / 2), "q7": (-np.pi / 2, np.pi / 2), "theta_j": (0.0, np.pi / 2)})
    vertices: dict = field(default_factory=dict)
    name: str = "instrument"

    def __post_init__(self):
        object.__setattr__(self, "wrist_offset", np.asarray(self.wrist_offset, dtype=float).reshape(3))
        object.__setattr__(self, "jaw_tip", np.asarray(self.jaw_tip, dtype=float).reshape(3))
        verts = dict(self.vertices) or self._proxy_vertices()
        for name in COMPONENTS:
            v = np.asarray(verts.get(name, np.zeros((0, 3))), dtype=float).reshape(-1, 3)
            if len(v) == 0 or not np.all(np.isfinite(v)):
                raise ValidationError(f"component {name!r} needs a non-empty finite vertex set")
            verts[name] = v
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "_wrist", RigidTransform.from_translation(self.wrist_offset))
        object.__setattr__(self, "_wrist_inv", RigidTransform.from_translation(-self.wrist_offset))

    def _proxy_vertices(self) -> dict:
        body_end = self.dh_q7.transform(0.0).translation
        return {
            "shaft": _cylinder(4.2, 40.0),
            "body": _box(np.zeros(3), body_end, 2.5),
            "left_jaw": _wedge(self.jaw_tip),
            "right_jaw": _wedge(self.jaw_tip),
        }

    @property
    def wrist_transform(self) -> RigidTransform:
        """End-effector-from-wrist (pure translation)."""
        return self._wrist

    @property
    def wrist_transform_inv(self) -> RigidTransform:
        return self._wrist_inv

    def check_joints(self, j: JointState) -> None:
        for name, value in (("q6", j.q6), ("q7", j.q7), ("theta_j", j.theta_j)):
            lo, hi = self.limits[name]
            if not lo <= value <= hi:
                raise ValidationError(f"{name}={value:.4g} rad outside [{lo:.4g}, {hi:.4g}]")


def default_instrument() -> InstrumentModel:
    """Large-needle-driver-like wrist (pitch then yaw, 9.1 mm link, 10.2 mm jaws)."""
    return InstrumentModel(
        dh_q6=DHRow(a=0.0, alpha=-np.pi / 2, d=0.0, theta_offset=-np.pi / 2),
        dh_q7=DHRow(a=9.1, alpha=-np.pi / 2, d=0.0, theta_offset=-np.pi / 2),
        wrist_offset=np.array([-10.2, 0.0, 0.0]),
        name="large_needle_driver",
    )


class ComponentPoses(NamedTuple):
    left_jaw: RigidTransform
    right_jaw: RigidTransform
    body: RigidTransform
    shaft: RigidTransform


def _jaw_pair(theta_j: float, jaw_offset: RigidTransform) -> tuple[RigidTransform, RigidTransform]:
    c, s = math.cos(0.25 * theta_j), math.sin(0.25 * theta_j)
    left = _trusted((c, 0.0, 0.0, s), (0.0, 0.0, 0.0))
    right = _trusted((c, 0.0, 0.0, -s), (0.0, 0.0, 0.0))
    return compose(left, jaw_offset), compose(right, jaw_offset)


def jaw_split(theta_j: float, jaw_offset: RigidTransform | None = None) -> tuple[RigidTransform, RigidTransform]:
    """Wrist-from-jaw transforms for the left (+theta/2) and right (-theta/2) jaw.

    Both jaws rotate about the wrist frame's z axis (the jaw joint axis).
    """
    if theta_j < 0:
        raise ValidationError("jaw separation must be non-negative")
    return _jaw_pair(theta_j, jaw_offset or RigidTransform())


def place_components(pose: RigidTransform, j: JointState, m: InstrumentModel) -> ComponentPoses:
    """Scene-from-component poses of both jaws, body and shaft.

    ``pose`` is the scene-from-end-effector pose. Body and shaft come from
    inverting the wrist DH transforms, i.e. walking the chain backwards.
    """
    m.check_joints(j)
    s_w = compose(pose, m.wrist_transform)
    w_left, w_right = _jaw_pair(j.theta_j, m.jaw_offset)
    body = compose(s_w, invert(m.dh_q7.transform(j.q7)))
    shaft = compose(body, invert(m.dh_q6.transform(j.q6)))
    return ComponentPoses(compose(s_w, w_left), compose(s_w, w_right), body, shaft)


def forward_wrist(shaft_pose: RigidTransform, j: JointState, m: InstrumentModel) -> RigidTransform:
    """Forward DH from the shaft frame through q6 and q7 to the end-effector."""
    m.check_joints(j)
    return compose_all(shaft_pose, m.dh_q6.transform(j.q6), m.dh_q7.transform(j.q7),
                       m.wrist_transform_inv)


def jaw_tips(components: ComponentPoses, m: InstrumentModel) -> tuple[np.ndarray, np.ndarray]:
    return components.left_jaw.apply(m.jaw_tip), components.right_jaw.apply(m.jaw_tip)


def world_vertices(components: ComponentPoses, m: InstrumentModel) -> dict[str, np.ndarray]:
    """Component vertex sets mapped into the frame ``components`` are expressed in."""
    return {name: getattr(components, name).apply(m.vertices[name]) for name in COMPONENTS}


# --------------------------------------------------------------------------
# instrument config file
# --------------------------------------------------------------------------
# TOML. Angles in radians, lengths in mm.
#
#   name = "large_needle_driver"
#   wrist_offset = [-10.2, 0.0, 0.0]      # wrist centre in the end-effector frame
#   jaw_tip = [10.2, 0.0, 0.0]            # optional
#   jaw_offset = [1, 0, 0, 0, 0, 0, 0]    # optional wrist-from-jaw pose, qw..tz
#   [dh.q6]                                # a, alpha, d, theta_offset
#   a = 0.0
#   alpha = -1.5707963267948966
#   d = 0.0
#   theta_offset = -1.5707963267948966
#   [dh.q7]
#   ...
#   [limits]                               # optional, [lo, hi] per joint
#   q6 = [-1.5707963267948966, 1.5707963267948966]
#   [meshes]                               # optional vertex files, one "x y z" per line,
#   shaft = "shaft.xyz"                    # paths relative to the config file

def _vector(value, n: int, where: str) -> np.ndarray:
    if not isinstance(value, list) or len(value) != n:
        raise FormatError(f"{where}: expected a list of {n} numbers")
    return np.array(parse_floats(value, where))


def _dh_row(table, where: str) -> DHRow:
    if not isinstance(table, dict):
        raise FormatError(f"{where}: expected a table")
    unknown = set(table) - {"a", "alpha", "d", "theta_offset"}
    if unknown:
        raise FormatError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        vals = {k: float(table[k]) for k in ("a", "alpha", "d")}
    except KeyError as exc:
        raise FormatError(f"{where}: missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from exc
    return DHRow(theta_offset=float(table.get("theta_offset", 0.0)), **vals)


def read_vertex_file(path) -> np.ndarray:
    rows = [parse_floats(tok, f"{path}:{n}") for n, tok in data_lines(read_text(path), str(path))]
    if not rows or any(len(r) != 3 for r in rows):
        raise FormatError(f"{path}: expected one 'x y z' vertex per line")
    return np.array(rows)


def instrument_from_dict(cfg: dict, base_dir=".", where: str = "instrument") -> InstrumentModel:
    dh = cfg.get("dh")
    if not isinstance(dh, dict) or "q6" not in dh or "q7" not in dh:
        raise FormatError(f"{where}: needs [dh.q6] and [dh.q7] tables")
    if "wrist_offset" not in cfg:
        raise FormatError(f"{where}: missing field 'wrist_offset'")
    kwargs = {
        "dh_q6": _dh_row(dh["q6"], f"{where} [dh.q6]"),
        "dh_q7": _dh_row(dh["q7"], f"{where} [dh.q7]"),
        "wrist_offset": _vector(cfg["wrist_offset"], 3, f"{where} wrist_offset"),
        "name": str(cfg.get("name", "instrument")),
    }
    if "jaw_tip" in cfg:
        kwargs["jaw_tip"] = _vector(cfg["jaw_tip"], 3, f"{where} jaw_tip")
    if "jaw_offset" in cfg:
        try:
            kwargs["jaw_offset"] = RigidTransform.from_array(_vector(cfg["jaw_offset"], 7, f"{where} jaw_offset"))
        except GeometryError as exc:
            raise FormatError(f"{where} jaw_offset: {exc}") from exc
    limits = {"q6": (-np.pi / 2, np.pi / 2), "q7": (-np.pi / 2, np.pi / 2), "theta_j": (0.0, np.pi / 2)}
    for name, value in cfg.get("limits", {}).items():
        if name not in limits:
            raise FormatError(f"{where} [limits]: unknown joint {name!r}")
        lo, hi = _vector(value, 2, f"{where} limits.{name}")
        if lo > hi:
            raise FormatError(f"{where} limits.{name}: lower bound exceeds upper bound")
        limits[name] = (float(lo), float(hi))
    kwargs["limits"] = limits
    meshes = cfg.get("meshes", {})
    if meshes:
        unknown = set(meshes) - set(COMPONENTS)
        if unknown:
            raise FormatError(f"{where} [meshes]: unknown component(s) {sorted(unknown)}")
        missing = set(COMPONENTS) - set(meshes)
        if missing:
            raise FormatError(f"{where} [meshes]: missing component(s) {sorted(missing)}")
        kwargs["vertices"] = {name: read_vertex_file(Path(base_dir) / path) for name, path in meshes.items()}
    try:
        return InstrumentModel(**kwargs)
    except ValidationError as exc:
        raise FormatError(f"{where}: {exc}") from exc


def read_instrument(path) -> InstrumentModel:
    return instrument_from_dict(load_toml(path), Path(path).parent, str(path))


def format_instrument(m: InstrumentModel) -> str:
    """TOML text for ``m`` (proxy vertices are regenerated, not written)."""
    out = [f'name = "{m.name}"',
           f"wrist_offset = [{', '.join(fmt(v) for v in m.wrist_offset)}]",
           f"jaw_tip = [{', '.join(fmt(v) for v in m.jaw_tip)}]",
           f"jaw_offset = [{', '.join(fmt(v) for v in m.jaw_offset.as_array())}]"]
    for key, row in (("q6", m.dh_q6), ("q7", m.dh_q7)):
        out += ["", f"[dh.{key}]", f"a = {fmt(row.a)}", f"alpha = {fmt(row.alpha)}",
                f"d = {fmt(row.d)}", f"theta_offset = {fmt(row.theta_offset)}"]
    out += ["", "[limits]"]
    out += [f"{name} = [{fmt(lo)}, {fmt(hi)}]" for name, (lo, hi) in m.limits.items()]
    return "\n".join(out) + "\n"
