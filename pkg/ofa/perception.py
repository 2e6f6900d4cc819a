"""Simulated object locating and the pre-manipulation pose.

Detection and segmentation read the simulator's id-buffer; the 6D estimate is the
ground-truth pose with Gaussian noise. The pre-manipulation pose is the object
pose updated by a per-category rotation and translation offset.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ofa.geom import Pose, from_axis_angle, random_unit_vector, rot_update, rot_z
from ofa.shapes import Shape

logger = logging.getLogger(__name__)

CYLINDER_GRASPABLE = "cylinder-graspable"
HANDLE_GRASPABLE = "handle-graspable"
TOP_PINCHABLE = "top-pinchable"
FLAT_LIFTABLE = "flat-liftable"
CATEGORIES = (CYLINDER_GRASPABLE, HANDLE_GRASPABLE, TOP_PINCHABLE, FLAT_LIFTABLE)

# Shape kinds allowed for each category
CATEGORY_SHAPES = {
    CYLINDER_GRASPABLE: ("cylinder",),
    HANDLE_GRASPABLE: ("box",),
    TOP_PINCHABLE: ("box",),
    FLAT_LIFTABLE: ("box",),
}

OFFSET_FRAMES = ("object", "world")

# Reflection through the object's x-z plane and the hand-axis flip that keeps the result proper
_MIRROR_OBJECT = np.diag([1.0, -1.0, 1.0])
_MIRROR_HAND = np.diag([1.0, 1.0, -1.0])


class ObjectNotFoundError(LookupError):
    pass


class ObjectOccludedError(RuntimeError):
    pass


class OffsetConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ObjectInstance:
    name: str
    category: str
    shape: Shape
    true_pose: Pose

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"Unknown category {self.category!r}")
        if self.shape.kind not in CATEGORY_SHAPES[self.category]:
            raise ValueError(f"A {self.category} object cannot be a {self.shape.kind}")

    def at(self, pose: Pose) -> "ObjectInstance":
        return ObjectInstance(self.name, self.category, self.shape, pose)


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: Pose
    pixel_mask: np.ndarray


@dataclass(frozen=True, eq=False)
class CategoryOffset:
    rotation: np.ndarray
    translation: np.ndarray

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(9).tolist(), "translation": self.translation.tolist()}


@dataclass(frozen=True)
class NoiseModel:
    translation_sigma: float = 0.005
    rotation_sigma: float = 0.02

    def __post_init__(self):
        if self.translation_sigma < 0 or self.rotation_sigma < 0:
            raise ValueError("Noise sigmas must be non-negative")

    @classmethod
    def from_dict(cls, values: dict) -> "NoiseModel":
        return cls(float(values["translation_sigma"]), float(values["rotation_sigma"]))


ZERO_NOISE = NoiseModel(0.0, 0.0)


def offset_table_from_config(section: dict) -> dict:
    """Build the category -> CategoryOffset table from the ``offsets`` config section.

    Raises:
        OffsetConfigError: when a category is missing, unknown or malformed
    """
    categories = section.get("categories", {})
    table = {}
    for name, entry in categories.items():
        if name not in CATEGORIES:
            raise OffsetConfigError(f"Unknown category in offsets: {name}")
        try:
            rotation = np.asarray(entry["rotation"], dtype=np.float64).reshape(3, 3)
            translation = np.asarray(entry["translation"], dtype=np.float64).reshape(3)
        except (KeyError, ValueError, TypeError) as e:
            raise OffsetConfigError(f"Malformed offset for {name}: {e}")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > 1e-9 or abs(np.linalg.det(rotation) - 1.0) > 1e-9:
            raise OffsetConfigError(f"Offset rotation for {name} is not a rotation matrix")
        table[name] = CategoryOffset(rotation, translation)
    missing = [c for c in CATEGORIES if c not in table]
    if missing:
        raise OffsetConfigError(f"Offsets missing for categories: {', '.join(missing)}")
    return table


def mirror_offset(offset: CategoryOffset) -> CategoryOffset:
    """Offset for the opposite hand: reflected through the object x-z plane, finger stacking flipped."""
    rotation = _MIRROR_OBJECT @ offset.rotation @ _MIRROR_HAND
    return CategoryOffset(rotation, _MIRROR_OBJECT @ offset.translation)


# Locating


def locate_object(
    scene,
    name: str,
    id_buffer: np.ndarray,
    noise: NoiseModel = ZERO_NOISE,
    rng: Optional[np.random.Generator] = None,
) -> PoseEstimate:
    """Find the named object: exact mask from the id-buffer, noisy 6D pose.

    Args:
        scene: provides ``find_object(name)`` and ``entity_ids``
        id_buffer: per-pixel entity ids of the rendered view
        noise: translation is N(0, sigma) per axis; rotation is a N(0, sigma) angle about a uniform axis
        rng: random stream; one draw set per call even when the sigmas are zero

    Raises:
        ObjectNotFoundError: ``name`` is not in the scene
        ObjectOccludedError: the object has no visible pixel
    """
    obj = scene.find_object(name)
    if obj is None:
        raise ObjectNotFoundError(f"locate_object: {name} is not in the scene")
    mask = np.asarray(id_buffer) == scene.entity_ids[name]
    if not mask.any():
        raise ObjectOccludedError(f"locate_object: {name} is fully occluded")
    rng = rng if rng is not None else np.random.default_rng(0)
    dt = rng.normal(0.0, 1.0, size=3) * noise.translation_sigma
    axis = random_unit_vector(rng)
    angle = rng.normal(0.0, 1.0) * noise.rotation_sigma
    pose = Pose(
        from_axis_angle(axis * angle) @ obj.true_pose.rotation,
        obj.true_pose.translation + dt,
    )
    logger.debug(f"locate_object: {name} with {int(mask.sum())} pixels")
    return PoseEstimate(pose=pose, pixel_mask=mask)


def canonicalize_symmetric_pose(pose: Pose, symmetry: Union[None, str, int]) -> Pose:
    """Pick the symmetric-equivalent pose whose heading is closest to the arm-base x axis.

    Args:
        symmetry: None (no symmetry), "axial" (any rotation about local z), or n for n-fold about local z
    """
    if symmetry is None:
        return pose
    r = pose.rotation
    heading = math.atan2(r[1, 0], r[0, 0])
    if symmetry == "axial":
        turn = -heading
    else:
        step = 2.0 * math.pi / int(symmetry)
        turn = -step * round(heading / step)
        if turn == 0.0:
            return pose
    return Pose(r @ rot_z(turn), pose.translation)


def pre_manipulation_pose(estimate: Pose, table: dict, category: str, frame: str = "object") -> Pose:
    """T_m = [R_o ⊕ ΔR | t_o + Δt].

    Args:
        frame: "object" rotates Δt with the object (R_o·Δt); "world" adds Δt as is

    Raises:
        OffsetConfigError: for a category missing from ``table`` or an unknown frame
    """
    if category not in table:
        raise OffsetConfigError(f"No pre-manipulation offset for category {category}")
    if frame not in OFFSET_FRAMES:
        raise OffsetConfigError(f"Offset frame must be one of {OFFSET_FRAMES}, got {frame!r}")
    offset = table[category]
    rotation = rot_update(estimate.rotation, offset.rotation)
    if frame == "object":
        translation = estimate.translation + estimate.rotation @ offset.translation
    else:
        translation = estimate.translation + offset.translation
    return Pose(rotation, translation)
