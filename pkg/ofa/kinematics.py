"""Forward kinematics of the 6-DoF arm and 6-joint hand, and their collision spheres.

The robot description is a JSON document (see ``ofa/data/robot_reference.json``):

    arm.base      12-float pose of the arm base in the world frame
    arm.joints    6 entries: name, axis, origin (12 floats, parent link to joint), limits [lo, hi]
    arm.tool      12-float pose of the wrist in the last link frame
    arm.home      6 joint angles used as the start configuration
    arm.spheres   link name (or "base") -> list of [x, y, z, r]
    hand.joints   6 entries in vector order, each with a parent ("palm" or another hand joint)
    hand.pregrasp 6 joint angles held during approach planning
    hand.spheres  link name (or "palm") -> list of [x, y, z, r]

Hand joint vectors are ordered little, ring, middle, index, thumb bend, thumb rotation.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ofa.geom import Pose, from_axis_angle, is_rotation
from ofa.resources import data_path

logger = logging.getLogger(__name__)

REFERENCE_MODEL = data_path("robot_reference.json")
ARM_DOF = 6
HAND_DOF = 6
LIMIT_TOL = 1e-9
PALM = "palm"
BASE = "base"


class JointLimitError(ValueError):
    """A joint value lies outside the model's limits."""


class RobotModelError(ValueError):
    """The robot description could not be parsed."""


@dataclass(frozen=True, eq=False)
class Joint:
    name: str
    axis: np.ndarray
    origin: np.ndarray  # 4x4 parent-to-joint transform
    lower: float
    upper: float
    parent: str = ""


@dataclass(frozen=True, eq=False)
class RobotModel:
    """Immutable arm + hand description."""

    name: str
    base: Pose
    arm_joints: tuple
    tool: np.ndarray
    hand_joints: tuple
    arm_sphere_links: np.ndarray  # link index per sphere, 0 = base, i = after joint i
    arm_sphere_offsets: np.ndarray
    arm_sphere_radii: np.ndarray
    hand_sphere_links: tuple  # link name per sphere
    hand_sphere_offsets: np.ndarray
    hand_sphere_radii: np.ndarray
    home_arm: np.ndarray
    pregrasp_hand: np.ndarray

    @property
    def arm_lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.arm_joints])

    @property
    def arm_upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.arm_joints])

    @property
    def hand_lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.hand_joints])

    @property
    def hand_upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.hand_joints])

    @property
    def hand_joint_names(self) -> tuple:
        return tuple(j.name for j in self.hand_joints)

    @property
    def hand_sphere_count(self) -> int:
        return len(self.hand_sphere_links)

    def with_base(self, base: Pose) -> "RobotModel":
        """Copy of the model mounted at another base pose (second arm of a bimanual scene)."""
        return replace(self, base=base)


# Parsing


def _line_of(text: str, needle: str) -> int:
    match = re.search(re.escape(f'"{needle}"'), text)
    if not match:
        return 1
    return text.count("\n", 0, match.start()) + 1


def _pose_matrix(values, where: str, text: str, source: str) -> np.ndarray:
    try:
        pose = Pose.from_floats(values)
    except (TypeError, ValueError):
        raise RobotModelError(f"{source}:{_line_of(text, where)}: {where} must be 12 numbers")
    if not is_rotation(pose.rotation, 1e-6):
        raise RobotModelError(f"{source}:{_line_of(text, where)}: {where} rotation is not orthonormal")
    return pose.matrix()


def _parse_joint(entry: dict, text: str, source: str) -> Joint:
    name = entry.get("name")
    if not isinstance(name, str) or not name:
        raise RobotModelError(f"{source}:{_line_of(text, 'joints')}: joint without a name")
    try:
        axis = np.asarray(entry["axis"], dtype=np.float64).reshape(3)
        lower, upper = (float(v) for v in entry["limits"])
        origin = entry["origin"]
    except KeyError as e:
        raise RobotModelError(f"{source}:{_line_of(text, name)}: joint {name} is missing {e.args[0]}")
    except (TypeError, ValueError):
        raise RobotModelError(f"{source}:{_line_of(text, name)}: joint {name} has malformed axis or limits")
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise RobotModelError(f"{source}:{_line_of(text, name)}: joint {name} has a zero axis")
    if not lower < upper:
        raise RobotModelError(f"{source}:{_line_of(text, name)}: joint {name} limits must satisfy lower < upper")
    return Joint(
        name=name,
        axis=axis / norm,
        origin=_pose_matrix(origin, name, text, source),
        lower=lower,
        upper=upper,
        parent=str(entry.get("parent", "")),
    )


def _parse_spheres(table: dict, links: list, text: str, source: str):
    link_ids, offsets, radii = [], [], []
    for link, spheres in table.items():
        if link not in links:
            raise RobotModelError(f"{source}:{_line_of(text, link)}: spheres for unknown link {link}")
        where = f"{source}:{_line_of(text, link)}"
        for sphere in spheres:
            if len(sphere) != 4:
                raise RobotModelError(f"{where}: sphere entries are [x, y, z, r]")
            try:
                values = [float(v) for v in sphere]
            except (TypeError, ValueError):
                raise RobotModelError(f"{where}: sphere entries must be numbers, got {sphere}") from None
            if not values[3] > 0.0:
                raise RobotModelError(f"{where}: sphere radius must be positive")
            link_ids.append(links.index(link))
            offsets.append(values[:3])
            radii.append(values[3])
    return np.array(link_ids, dtype=np.int64), np.array(offsets).reshape(-1, 3), np.array(radii)


def parse_robot_model(text: str, source: str = "<string>") -> RobotModel:
    """Parse a robot description document.

    Raises:
        RobotModelError: with ``source:line`` for syntax and schema problems
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise RobotModelError(f"{source}:{e.lineno}:{e.colno}: {e.msg}")
    try:
        arm, hand = doc["arm"], doc["hand"]
        arm_entries, hand_entries = arm["joints"], hand["joints"]
    except (KeyError, TypeError) as e:
        raise RobotModelError(f"{source}:1: missing section {e}")

    arm_joints = tuple(_parse_joint(e, text, source) for e in arm_entries)
    hand_joints = tuple(_parse_joint(e, text, source) for e in hand_entries)
    if len(arm_joints) != ARM_DOF:
        raise RobotModelError(
            f"{source}:{_line_of(text, 'joints')}: expected {ARM_DOF} arm joints, got {len(arm_joints)}"
        )
    if len(hand_joints) != HAND_DOF:
        raise RobotModelError(
            f"{source}:{_line_of(text, 'hand')}: expected {HAND_DOF} hand joints, got {len(hand_joints)}"
        )
    hand_names = [j.name for j in hand_joints]
    for j in hand_joints:
        if j.parent != PALM and j.parent not in hand_names:
            raise RobotModelError(f"{source}:{_line_of(text, j.name)}: joint {j.name} has unknown parent {j.parent}")

    arm_links = [BASE] + [j.name for j in arm_joints]
    arm_ids, arm_offsets, arm_radii = _parse_spheres(arm.get("spheres", {}), arm_links, text, source)
    hand_ids, hand_offsets, hand_radii = _parse_spheres(hand.get("spheres", {}), [PALM] + hand_names, text, source)
    hand_links = tuple(([PALM] + hand_names)[i] for i in hand_ids)

    home = np.asarray(arm.get("home", [0.0] * ARM_DOF), dtype=np.float64)
    pregrasp = np.asarray(hand.get("pregrasp", [j.lower for j in hand_joints]), dtype=np.float64)
    model = RobotModel(
        name=str(doc.get("name", source)),
        base=Pose.from_matrix(_pose_matrix(arm["base"], "base", text, source)) if "base" in arm else Pose.identity(),
        arm_joints=arm_joints,
        tool=_pose_matrix(arm["tool"], "tool", text, source) if "tool" in arm else np.eye(4),
        hand_joints=hand_joints,
        arm_sphere_links=arm_ids,
        arm_sphere_offsets=arm_offsets,
        arm_sphere_radii=arm_radii,
        hand_sphere_links=hand_links,
        hand_sphere_offsets=hand_offsets,
        hand_sphere_radii=hand_radii,
        home_arm=home,
        pregrasp_hand=pregrasp,
    )
    check_arm_limits(model, home)
    check_hand_limits(model, pregrasp)
    return model


def load_robot_model(path: Optional[str] = None) -> RobotModel:
    """Load a robot description file; ``None`` loads the shipped reference model."""
    path = path or REFERENCE_MODEL
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise RobotModelError(f"{path}: {e.strerror}")
    model = parse_robot_model(text, source=path)
    logger.debug(f"load_robot_model: {model.name} with {len(model.arm_sphere_radii)} arm spheres")
    return model


# Limits


def _check_limits(joints, values, kind: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape != (len(joints),):
        raise JointLimitError(f"expected {len(joints)} {kind} joint values, got {values.shape[0]}")
    for joint, value in zip(joints, values):
        if not np.isfinite(value) or value < joint.lower - LIMIT_TOL or value > joint.upper + LIMIT_TOL:
            raise JointLimitError(f"{kind} joint {joint.name} = {value:.6f} outside [{joint.lower}, {joint.upper}]")
    return values


def check_arm_limits(model: RobotModel, q) -> np.ndarray:
    return _check_limits(model.arm_joints, q, "arm")


def check_hand_limits(model: RobotModel, j) -> np.ndarray:
    return _check_limits(model.hand_joints, j, "hand")


def clip_arm(model: RobotModel, q) -> np.ndarray:
    return np.clip(np.asarray(q, dtype=np.float64), model.arm_lower, model.arm_upper)


def clip_hand(model: RobotModel, j) -> np.ndarray:
    return np.clip(np.asarray(j, dtype=np.float64), model.hand_lower, model.hand_upper)


# Forward kinematics


def _joint_matrix(joint: Joint, angle: float) -> np.ndarray:
    m = joint.origin.copy()
    m[:3, :3] = m[:3, :3] @ from_axis_angle(joint.axis * angle)
    return m


def _arm_chain(model: RobotModel, q: np.ndarray):
    """Link frames (7 x 4x4, base first), joint axes and origins in world, and the wrist matrix."""
    t = model.base.matrix()
    frames = [t]
    axes = np.zeros((ARM_DOF, 3))
    origins = np.zeros((ARM_DOF, 3))
    for i, (joint, angle) in enumerate(zip(model.arm_joints, q)):
        at_joint = t @ joint.origin
        axes[i] = at_joint[:3, :3] @ joint.axis
        origins[i] = at_joint[:3, 3]
        t = t @ _joint_matrix(joint, angle)
        frames.append(t)
    return frames, axes, origins, t @ model.tool


def arm_link_frames(model: RobotModel, q, check: bool = True) -> list:
    """World poses of the base and every arm link frame (after each joint)."""
    q = check_arm_limits(model, q) if check else np.asarray(q, dtype=np.float64)
    frames, _, _, _ = _arm_chain(model, q)
    return [Pose.from_matrix(f) for f in frames]


def wrist_pose(model: RobotModel, q, check: bool = True) -> Pose:
    """ᵃT_w: the wrist pose for arm configuration ``q``.

    Raises:
        JointLimitError: naming the first joint outside its limits
    """
    q = check_arm_limits(model, q) if check else np.asarray(q, dtype=np.float64)
    _, _, _, wrist = _arm_chain(model, q)
    return Pose.from_matrix(wrist)


def geometric_jacobian(model: RobotModel, q) -> tuple[np.ndarray, Pose]:
    """6x6 world-frame Jacobian (linear rows first) and the wrist pose it was taken at."""
    q = np.asarray(q, dtype=np.float64)
    _, axes, origins, wrist = _arm_chain(model, q)
    p = wrist[:3, 3]
    jac = np.zeros((6, ARM_DOF))
    jac[:3] = np.cross(axes, p - origins).T
    jac[3:] = axes.T
    return jac, Pose.from_matrix(wrist)


def arm_spheres(model: RobotModel, q, include_base: bool = True, check: bool = True):
    """Arm sphere centers (N, 3), radii (N,) and link index per sphere."""
    q = check_arm_limits(model, q) if check else np.asarray(q, dtype=np.float64)
    frames, _, _, _ = _arm_chain(model, q)
    stack = np.stack(frames)[model.arm_sphere_links]
    centers = np.einsum("nij,nj->ni", stack[:, :3, :3], model.arm_sphere_offsets) + stack[:, :3, 3]
    radii, links = model.arm_sphere_radii, model.arm_sphere_links
    if not include_base:
        keep = links != 0
        centers, radii, links = centers[keep], radii[keep], links[keep]
    return centers, radii.copy(), links.copy()


def arm_sphere_centers(model: RobotModel, q) -> list:
    centers, radii, _ = arm_spheres(model, q)
    return [(c, float(r)) for c, r in zip(centers, radii)]


def hand_link_frames(model: RobotModel, wrist: Pose, j, check: bool = True) -> dict:
    """World 4x4 matrix of the palm and every hand link."""
    j = check_hand_limits(model, j) if check else np.asarray(j, dtype=np.float64)
    frames = {PALM: wrist.matrix()}
    by_name = {joint.name: (joint, angle) for joint, angle in zip(model.hand_joints, j)}

    def frame(name: str) -> np.ndarray:
        if name not in frames:
            joint, angle = by_name[name]
            frames[name] = frame(joint.parent) @ _joint_matrix(joint, angle)
        return frames[name]

    for joint in model.hand_joints:
        frame(joint.name)
    return frames


def hand_spheres(model: RobotModel, wrist: Pose, j, check: bool = True):
    """Hand sphere centers (N, 3), radii (N,) and the link name of each sphere."""
    frames = hand_link_frames(model, wrist, j, check=check)
    stack = np.stack([frames[name] for name in model.hand_sphere_links])
    centers = np.einsum("nij,nj->ni", stack[:, :3, :3], model.hand_sphere_offsets) + stack[:, :3, 3]
    return centers, model.hand_sphere_radii.copy(), model.hand_sphere_links


def hand_sphere_centers(model: RobotModel, wrist: Pose, j) -> list:
    """World-frame (center, radius) of every hand collision sphere."""
    centers, radii, _ = hand_spheres(model, wrist, j)
    return [(c, float(r)) for c, r in zip(centers, radii)]


def robot_spheres(model: RobotModel, q, j, include_base: bool = False, check: bool = True):
    """All arm and hand spheres for one configuration: centers (N, 3) and radii (N,)."""
    arm_c, arm_r, _ = arm_spheres(model, q, include_base=include_base, check=check)
    wrist = wrist_pose(model, q, check=False)
    hand_c, hand_r, _ = hand_spheres(model, wrist, j, check=check)
    return np.vstack([arm_c, hand_c]), np.concatenate([arm_r, hand_r])

