"""Contact detection, hold predicates, kinematic attachment and task success."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np

from ofa.env.scene import SceneState
from ofa.env.tasks import TOP_PINCH, TaskSpec
from ofa.geom import Pose, compose, inverse, project_to_rotation, rot_z
from ofa.kinematics import RobotModel, hand_spheres, wrist_pose
from ofa.shapes import Obstacle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContactConfig:
    distance: float = 0.01
    opposing_dot: float = -0.5
    lift_height: float = 0.05
    pinch_lift_height: float = 0.02
    max_tilt_deg: float = 10.0

    @classmethod
    def from_dict(cls, values: dict) -> "ContactConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: float(v) for k, v in values.items() if k in names})


@dataclass(frozen=True)
class Contact:
    link: str
    normal: np.ndarray  # outward object normal at the closest point
    gap: float  # surface-to-surface distance, negative when penetrating


def hand_contacts(model: RobotModel, q, j, obstacle: Obstacle, distance: float = 0.01) -> list:
    """Hand spheres whose surface lies within ``distance`` of the object surface."""
    wrist = wrist_pose(model, q, check=False)
    centers, radii, links = hand_spheres(model, wrist, j, check=False)
    d, normals = obstacle.signed_distance(centers)
    gaps = d - radii
    return [Contact(links[i], normals[i], float(gaps[i])) for i in np.flatnonzero(gaps <= distance)]


def holds(contacts: list, template: str, opposing_dot: float = -0.5) -> bool:
    """Pinch: thumb and index both touch. Otherwise: two contacts on different links with opposing normals."""
    links = {c.link for c in contacts}
    if template == TOP_PINCH:
        return "index" in links and "thumb_bend" in links
    for i, a in enumerate(contacts):
        for b in contacts[i + 1 :]:
            if a.link != b.link and float(a.normal @ b.normal) < opposing_dot:
                return True
    return False


def hand_holds(state: SceneState, hand: str, config: ContactConfig = ContactConfig()) -> bool:
    contacts = hand_contacts(
        state.models[hand], state.q[hand], state.j[hand], state.object_obstacle(), config.distance
    )
    return holds(contacts, state.scene.task.template, config.opposing_dot)


def follow_pose(state: SceneState) -> Pose:
    """Object pose implied by the attached wrists; two hands follow their polar-projected mean."""
    predictions = [compose(state.wrist(hand), rel) for hand, rel in sorted(state.attachment.items())]
    if len(predictions) == 1:
        return predictions[0]
    rotation = project_to_rotation(sum(p.rotation for p in predictions))
    translation = np.mean([p.translation for p in predictions], axis=0)
    return Pose(rotation, translation)


def lift_of(state: SceneState) -> float:
    return float(state.object_pose.translation[2]) - state.scene.rest_z


def tilt_deg(pose: Pose) -> float:
    return math.degrees(math.acos(float(np.clip(pose.rotation[2, 2], -1.0, 1.0))))


def required_lift(task: TaskSpec, config: ContactConfig) -> float:
    return config.pinch_lift_height if task.template == TOP_PINCH else config.lift_height


def drop_pose(state: SceneState) -> Pose:
    """Where a released object comes to rest: same heading and position, upright at its rest height."""
    r = state.object_pose.rotation
    t = state.object_pose.translation.copy()
    t[2] = state.scene.rest_z
    return Pose(rot_z(math.atan2(r[1, 0], r[0, 0])), t)


def update_attachment(state: SceneState, config: ContactConfig = ContactConfig()) -> str:
    """Advance the attachment after the arms moved.

    Returns:
        "attached", "held", "released" or "free"
    """
    if state.attached:
        state.object_pose = follow_pose(state)
        if all(hand_holds(state, hand, config) for hand in state.attachment):
            if lift_of(state) >= required_lift(state.scene.task, config):
                state.was_lifted = True
            return "held"
        state.attachment = {}
        state.object_pose = drop_pose(state)
        logger.debug("update_attachment: object released")
        return "released"
    if all(hand_holds(state, hand, config) for hand in state.scene.hands):
        state.attachment = {hand: compose(inverse(state.wrist(hand)), state.object_pose) for hand in state.scene.hands}
        logger.debug(f"update_attachment: object attached to {', '.join(state.attachment)}")
        return "attached"
    return "free"


def success_check(task: TaskSpec, state: SceneState, config: ContactConfig = ContactConfig()) -> bool:
    """Task predicate: every hand holds and the object is lifted (and level, for the tray)."""
    if not all(hand_holds(state, hand, config) for hand in task.hands):
        return False
    if lift_of(state) < required_lift(task, config):
        return False
    if task.bimanual and tilt_deg(state.object_pose) >= config.max_tilt_deg:
        return False
    return True
