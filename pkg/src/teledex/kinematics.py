"""Robot hand models as per-finger serial revolute chains.

A model document is JSON::

    {"name": "...",
     "fingers": [{"name": "thumb",
                  "joints": [{"origin": {"xyz": [..], "rpy": [..]},
                              "axis": [x, y, z], "lower": .., "upper": ..}],
                  "keypoints": [{"id": "..", "link": 0, "offset": [..],
                                 "role": "mcp"}]}]}

Each finger hangs off the palm frame. The frame of link ``k`` is the
composition palm -> origin_0 -> rot(axis_0, q_0) -> ... -> origin_k ->
rot(axis_k, q_k). A keypoint sits at a fixed offset in the frame of its link.

Keypoints are addressed by ``(finger, j)`` where ``finger`` is the canonical
finger index (thumb=0 ... little=4) and ``j`` the position in the finger's
keypoint list, proximal to distal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
from scipy.spatial.transform import Rotation

FINGER_NAMES = ("thumb", "index", "middle", "ring", "little")
KEYPOINT_ROLES = ("mcp", "pip", "dip", "fingertip", "aux")
BUNDLED_MODELS = ("planar2", "o6", "l10", "human")

Key = tuple[int, int]


class ModelError(ValueError):
    """Malformed or invalid hand-model document."""


def format_key(key: Key) -> str:
    return f"{FINGER_NAMES[key[0]]}/{key[1]}"


def parse_key(text: str) -> Key:
    """Parse ``"index/2"`` (or ``"1/2"``) into ``(1, 2)``."""
    try:
        finger, j = text.split("/")
        i = int(finger) if finger.isdigit() else FINGER_NAMES.index(finger)
        return i, int(j)
    except ValueError as exc:
        raise ValueError(f"bad keypoint key {text!r}; expected '<finger>/<j>'") from exc


def finger_index(name: str | int) -> int:
    if isinstance(name, int):
        return name
    return int(name) if name.isdigit() else FINGER_NAMES.index(name)


def rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation for a unit axis."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


@dataclass(frozen=True)
class RevoluteJoint:
    rotation: np.ndarray  # fixed origin rotation, parent -> joint frame
    translation: np.ndarray  # meters, in parent frame
    axis: np.ndarray  # unit vector in joint frame
    lower: float
    upper: float


@dataclass(frozen=True)
class KeypointAttachment:
    id: str
    link: int
    offset: np.ndarray
    role: str


@dataclass(frozen=True)
class FingerChain:
    name: str
    index: int
    joints: tuple[RevoluteJoint, ...]
    keypoints: tuple[KeypointAttachment, ...]
    dof_offset: int

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def mcp(self) -> int:
        return next(j for j, kp in enumerate(self.keypoints) if kp.role == "mcp")

    @property
    def fingertip(self) -> int:
        return len(self.keypoints) - 1


@dataclass(frozen=True)
class KinematicHandModel:
    name: str
    fingers: tuple[FingerChain, ...]
    document: dict[str, Any] = field(repr=False, compare=False)

    def __post_init__(self) -> None:
        keys = [(f.index, j) for f in self.fingers for j in range(len(f.keypoints))]
        object.__setattr__(self, "keys", tuple(keys))
        object.__setattr__(self, "_row", {k: r for r, k in enumerate(keys)})
        lower = [jt.lower for f in self.fingers for jt in f.joints]
        upper = [jt.upper for f in self.fingers for jt in f.joints]
        object.__setattr__(self, "lower", np.array(lower, dtype=float))
        object.__setattr__(self, "upper", np.array(upper, dtype=float))
        object.__setattr__(self, "_dof", len(lower))

    keys: tuple[Key, ...] = field(init=False, repr=False, compare=False)
    lower: np.ndarray = field(init=False, repr=False, compare=False)
    upper: np.ndarray = field(init=False, repr=False, compare=False)

    @property
    def dof(self) -> int:
        return self._dof  # type: ignore[attr-defined]

    def finger(self, index: int) -> FingerChain:
        for f in self.fingers:
            if f.index == index:
                return f
        raise KeyError(f"model {self.name!r} has no finger {index}")

    def has_finger(self, index: int) -> bool:
        return any(f.index == index for f in self.fingers)

    def row(self, key: Key) -> int:
        """Row of ``key`` in the arrays returned by :meth:`evaluate`."""
        try:
            return self._row[key]  # type: ignore[attr-defined]
        except KeyError:
            raise KeyError(f"unknown keypoint {key}") from None

    def keys_with_role(self, *roles: str) -> list[Key]:
        return [
            (f.index, j)
            for f in self.fingers
            for j, kp in enumerate(f.keypoints)
            if kp.role in roles
        ]

    def evaluate(self, theta: np.ndarray, jacobian: bool = True):
        """All keypoint positions ``(m, 3)`` and, optionally, Jacobians ``(m, 3, n)``.

        Rows follow ``self.keys``. Fingers are processed together, padded to
        the longest chain with identity joints.
        """
        theta = _check_theta(self, theta)
        b = self._batch
        nf, depth = b.valid.shape
        angles = np.where(b.valid, theta[b.column], 0.0)
        R = np.broadcast_to(np.eye(3), (nf, 3, 3))
        p = np.zeros((nf, 3))
        frames_R = np.empty((nf, depth, 3, 3))
        origins = np.empty((nf, depth, 3))
        axes = np.empty((nf, depth, 3))
        for q in range(depth):
            p = p + np.einsum("fij,fj->fi", R, b.translation[:, q])
            R = R @ b.rotation[:, q]
            axes[:, q] = np.einsum("fij,fj->fi", R, b.axis[:, q])
            R = R @ _batch_rotation(b.axis[:, q], angles[:, q])
            frames_R[:, q] = R
            origins[:, q] = p
        fr, ln = b.kp_finger, b.kp_link
        x = origins[fr, ln] + np.einsum("mij,mj->mi", frames_R[fr, ln], b.kp_offset)
        if not jacobian:
            return x, None
        # column of joint q for keypoint r: axis_q x (x_r - origin_q)
        w = axes[fr[b.pair_row], b.pair_level]
        d = x[b.pair_row] - origins[fr[b.pair_row], b.pair_level]
        cols = np.empty_like(d)
        cols[:, 0] = w[:, 1] * d[:, 2] - w[:, 2] * d[:, 1]
        cols[:, 1] = w[:, 2] * d[:, 0] - w[:, 0] * d[:, 2]
        cols[:, 2] = w[:, 0] * d[:, 1] - w[:, 1] * d[:, 0]
        jac = np.zeros((len(fr), self.dof, 3))
        jac[b.pair_row, b.pair_column] = cols
        return x, jac.transpose(0, 2, 1)

    @property
    def _batch(self) -> _ChainBatch:
        cached = self.__dict__.get("_batch_cache")
        if cached is None:
            cached = _ChainBatch.build(self.fingers)
            object.__setattr__(self, "_batch_cache", cached)
        return cached


def _batch_rotation(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotations for ``(f, 3)`` unit axes and ``(f,)`` angles."""
    x, y, z = axis[:, 0], axis[:, 1], axis[:, 2]
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    out = np.empty((len(angle), 3, 3))
    out[:, 0, 0] = c + x * x * C
    out[:, 0, 1] = x * y * C - z * s
    out[:, 0, 2] = x * z * C + y * s
    out[:, 1, 0] = y * x * C + z * s
    out[:, 1, 1] = c + y * y * C
    out[:, 1, 2] = y * z * C - x * s
    out[:, 2, 0] = z * x * C - y * s
    out[:, 2, 1] = z * y * C + x * s
    out[:, 2, 2] = c + z * z * C
    return out


@dataclass(frozen=True)
class _ChainBatch:
    valid: np.ndarray  # (f, depth) real joint vs padding
    column: np.ndarray  # (f, depth) index into theta
    translation: np.ndarray  # (f, depth, 3)
    rotation: np.ndarray  # (f, depth, 3, 3)
    axis: np.ndarray  # (f, depth, 3)
    kp_finger: np.ndarray  # (m,) position of the keypoint's finger in model.fingers
    kp_link: np.ndarray
    kp_offset: np.ndarray
    pair_row: np.ndarray  # nonzero Jacobian blocks: keypoint row, joint level, theta column
    pair_level: np.ndarray
    pair_column: np.ndarray

    @classmethod
    def build(cls, fingers: tuple[FingerChain, ...]) -> _ChainBatch:
        nf, depth = len(fingers), max(f.dof for f in fingers)
        valid = np.zeros((nf, depth), dtype=bool)
        column = np.zeros((nf, depth), dtype=int)
        translation = np.zeros((nf, depth, 3))
        rotation = np.tile(np.eye(3), (nf, depth, 1, 1))
        axis = np.tile([0.0, 0.0, 1.0], (nf, depth, 1))
        kp_finger, kp_link, kp_offset = [], [], []
        pairs = []
        for fi, f in enumerate(fingers):
            for q, jt in enumerate(f.joints):
                valid[fi, q] = True
                column[fi, q] = f.dof_offset + q
                translation[fi, q] = jt.translation
                rotation[fi, q] = jt.rotation
                axis[fi, q] = jt.axis
            for kp in f.keypoints:
                r = len(kp_finger)
                kp_finger.append(fi)
                kp_link.append(kp.link)
                kp_offset.append(kp.offset)
                pairs.extend((r, q, f.dof_offset + q) for q in range(kp.link + 1))
        pr, pl, pc = (np.array(v, dtype=int) for v in zip(*pairs))
        return cls(
            valid, column, translation, rotation, axis,
            np.array(kp_finger), np.array(kp_link), np.array(kp_offset),
            pr, pl, pc,
        )


def _check_theta(model: KinematicHandModel, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.dof,):
        raise ValueError(
            f"joint vector has shape {theta.shape}, model {model.name!r} needs ({model.dof},)"
        )
    if not np.all(np.isfinite(theta)):
        raise ValueError("joint vector contains non-finite values")
    return theta


def _vec3(value: Any, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ModelError(f"{what} must be a finite 3-vector, got {value!r}")
    return arr


def model_from_dict(doc: dict[str, Any]) -> KinematicHandModel:
    try:
        name = str(doc["name"])
        finger_docs = doc["fingers"]
    except (KeyError, TypeError) as exc:
        raise ModelError(f"model document missing field: {exc}") from exc
    if not finger_docs:
        raise ModelError("model has no fingers")

    fingers = []
    seen_ids: set[str] = set()
    offset = 0
    last_index = -1
    for fdoc in finger_docs:
        fname = fdoc.get("name")
        if fname not in FINGER_NAMES:
            raise ModelError(f"unknown finger name {fname!r}")
        index = FINGER_NAMES.index(fname)
        if index <= last_index:
            raise ModelError("fingers must be unique and ordered thumb, index, middle, ring, little")
        last_index = index

        joints = []
        for k, jdoc in enumerate(fdoc.get("joints", [])):
            origin = jdoc.get("origin", {})
            axis = _vec3(jdoc.get("axis"), f"{fname} joint {k} axis")
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise ModelError(f"{fname} joint {k}: axis {axis.tolist()} is not unit length")
            lower, upper = float(jdoc["lower"]), float(jdoc["upper"])
            if not lower <= upper:
                raise ModelError(f"{fname} joint {k}: lower limit {lower} > upper limit {upper}")
            rpy = _vec3(origin.get("rpy", [0.0, 0.0, 0.0]), f"{fname} joint {k} rpy")
            joints.append(
                RevoluteJoint(
                    rotation=Rotation.from_euler("xyz", rpy).as_matrix(),
                    translation=_vec3(origin.get("xyz", [0.0, 0.0, 0.0]), f"{fname} joint {k} xyz"),
                    axis=axis,
                    lower=lower,
                    upper=upper,
                )
            )
        if not joints:
            raise ModelError(f"finger {fname!r} has no joints")

        keypoints = []
        prev_link = 0
        for kdoc in fdoc.get("keypoints", []):
            kid = str(kdoc["id"])
            if kid in seen_ids:
                raise ModelError(f"duplicate keypoint id {kid!r}")
            seen_ids.add(kid)
            link = int(kdoc["link"])
            if not 0 <= link < len(joints):
                raise ModelError(f"keypoint {kid!r} references missing link {link}")
            if link < prev_link:
                raise ModelError(f"keypoint {kid!r} is proximal to its predecessor")
            prev_link = link
            role = kdoc.get("role", "aux")
            if role not in KEYPOINT_ROLES:
                raise ModelError(f"keypoint {kid!r} has unknown role {role!r}")
            keypoints.append(
                KeypointAttachment(kid, link, _vec3(kdoc.get("offset", [0, 0, 0]), kid), role)
            )
        roles = [kp.role for kp in keypoints]
        if roles.count("mcp") != 1:
            raise ModelError(f"finger {fname!r} needs exactly one mcp keypoint")
        if roles.count("fingertip") != 1 or roles[-1] != "fingertip":
            raise ModelError(f"finger {fname!r} needs exactly one fingertip keypoint, listed last")

        fingers.append(FingerChain(fname, index, tuple(joints), tuple(keypoints), offset))
        offset += len(joints)

    if fingers[0].index != 0:
        raise ModelError("the thumb is mandatory")
    return KinematicHandModel(name, tuple(fingers), doc)


def load_hand_model(text: str) -> KinematicHandModel:
    """Parse and validate a model document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"malformed model document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelError("model document must be a JSON object")
    return model_from_dict(doc)


def load_model(source: str | Path) -> KinematicHandModel:
    """Load a bundled model by name (``"o6"``) or a model document by path."""
    if str(source) in BUNDLED_MODELS:
        text = resources.files("teledex").joinpath(f"data/{source}.json").read_text()
    else:
        text = Path(source).read_text()
    return load_hand_model(text)


def scale_model_document(doc: dict[str, Any], factor: float) -> dict[str, Any]:
    """Copy of ``doc`` with every length multiplied by ``factor``."""
    doc = json.loads(json.dumps(doc))
    doc["name"] = f"{doc['name']}_x{factor:g}"
    for f in doc["fingers"]:
        for jt in f["joints"]:
            origin = jt.setdefault("origin", {})
            origin["xyz"] = [factor * v for v in origin.get("xyz", [0, 0, 0])]
        for kp in f["keypoints"]:
            kp["offset"] = [factor * v for v in kp.get("offset", [0, 0, 0])]
    return doc


def forward_keypoints(model: KinematicHandModel, theta) -> dict[Key, np.ndarray]:
    pos, _ = model.evaluate(theta, jacobian=False)
    return {key: pos[r] for r, key in enumerate(model.keys)}


def keypoint_jacobian(model: KinematicHandModel, theta, key: Key) -> np.ndarray:
    """3 x n geometric Jacobian of one keypoint, meters per radian."""
    row = model.row(key)
    _, jac = model.evaluate(theta)
    return jac[row]


def clamp_to_limits(model: KinematicHandModel, theta) -> np.ndarray:
    theta = _check_theta(model, theta)
    return np.clip(theta, model.lower, model.upper)
