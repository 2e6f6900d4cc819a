"""Flat-shaded stereo rendering of the scene by per-primitive ray casting.

Each primitive is intersected only with the rays of the pixels inside its
projected bounding box; a z-buffer keeps the nearest hit. Rays are cast through
integer pixel coordinates with a camera-frame direction of unit depth, so the
ray parameter of a hit equals its camera depth.
"""

from __future__ import annotations

import functools
import logging
from collections import namedtuple
from typing import Iterable, Optional

import numpy as np

from ofa.camera import MIN_DEPTH, Camera, StereoRig, project_points
from ofa.env.scene import (
    ARM_IDS,
    BACKGROUND_ID,
    HAND_IDS,
    OBJECT_ID,
    STAND_ID,
    TABLE_ID,
    Scene,
    SceneState,
)
from ofa.geom import Pose, inverse
from ofa.kinematics import RobotModel, arm_spheres, hand_spheres, wrist_pose
from ofa.shapes import Obstacle, sphere

logger = logging.getLogger(__name__)

Frames = namedtuple("Frames", "left, right, ids, depth")

LIGHT = np.array([-0.3, -0.2, 1.0]) / np.linalg.norm([-0.3, -0.2, 1.0])
AMBIENT = 0.35
DIFFUSE = 0.65

TABLE_COLOR = (150, 115, 85)
STAND_COLOR = (110, 110, 110)
ARM_COLOR = (175, 178, 188)
HAND_COLOR = (228, 196, 168)

_CHECKER = 32


@functools.lru_cache(maxsize=16)
def background_texture(variant: str, width: int, height: int) -> np.ndarray:
    """Per-pixel brightness multiplier for the backdrop and the table top.

    Every variant is a fixed pattern, independent of any scene seed.
    """
    if variant == "plain":
        texture = np.ones((height, width))
    elif variant == "checker":
        yy, xx = np.mgrid[0:height, 0:width]
        texture = np.where(((xx // _CHECKER) + (yy // _CHECKER)) % 2 == 0, 1.0, 0.78)
    elif variant == "textured-1":
        grid = np.random.default_rng(101).uniform(0.65, 1.2, size=(7, 9))
        texture = _upsample(grid, width, height)
    elif variant == "textured-2":
        grid = np.random.default_rng(202).uniform(0.8, 1.15, size=(12, 16))
        xx = np.arange(width)[None, :]
        stripes = 0.85 + 0.2 * np.sin(2.0 * np.pi * xx / 23.0 + 0.7)
        texture = _upsample(grid, width, height) * stripes
    else:
        raise ValueError(f"Unknown background {variant!r}")
    texture.setflags(write=False)
    return texture


def _upsample(grid: np.ndarray, width: int, height: int) -> np.ndarray:
    gy = np.linspace(0.0, grid.shape[0] - 1.0, height)
    gx = np.linspace(0.0, grid.shape[1] - 1.0, width)
    y0 = np.minimum(np.floor(gy).astype(int), grid.shape[0] - 2)
    x0 = np.minimum(np.floor(gx).astype(int), grid.shape[1] - 2)
    wy = (gy - y0)[:, None]
    wx = (gx - x0)[None, :]
    top = grid[y0][:, x0] * (1 - wx) + grid[y0][:, x0 + 1] * wx
    bottom = grid[y0 + 1][:, x0] * (1 - wx) + grid[y0 + 1][:, x0 + 1] * wx
    return top * (1 - wy) + bottom * wy


def _entities(scene: Scene, object_pose: Pose, arms: Iterable) -> list:
    """(entity id, Obstacle, base color) for everything that can be drawn."""
    entities = [(TABLE_ID, scene.table, TABLE_COLOR)]
    if scene.stand is not None:
        entities.append((STAND_ID, scene.stand, STAND_COLOR))
    entities.append((OBJECT_ID, scene.object_obstacle(object_pose), scene.task.color))
    for hand, model, q, j in arms:
        centers, radii, _ = arm_spheres(model, q, include_base=True, check=False)
        for c, r in zip(centers, radii):
            entities.append((ARM_IDS[hand], Obstacle(sphere(r), Pose.from_translation(c)), ARM_COLOR))
        wrist = wrist_pose(model, q, check=False)
        centers, radii, _ = hand_spheres(model, wrist, j, check=False)
        for c, r in zip(centers, radii):
            entities.append((HAND_IDS[hand], Obstacle(sphere(r), Pose.from_translation(c)), HAND_COLOR))
    return entities


def _screen_box(camera: Camera, obstacle: Obstacle) -> Optional[tuple]:
    """Inclusive pixel bounds of the obstacle's projection, or None when it is off screen."""
    width, height = camera.intrinsics.width, camera.intrinsics.height
    corners = obstacle.corners()
    depth = camera.extrinsic.transform_points(corners)[:, 2]
    if np.all(depth <= MIN_DEPTH):
        return None
    if np.any(depth <= MIN_DEPTH):
        return 0, 0, width - 1, height - 1
    pixels, _ = project_points(camera.intrinsics, camera.extrinsic, corners)
    x0, y0 = np.floor(pixels.min(axis=0)).astype(int)
    x1, y1 = np.ceil(pixels.max(axis=0)).astype(int)
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, width - 1), min(y1, height - 1)
    if x0 > x1 or y0 > y1:
        return None
    return int(x0), int(y0), int(x1), int(y1)


def render_view(camera: Camera, entities: list, background: str, base_color) -> tuple:
    """Color image, id-buffer and depth-buffer of one camera."""
    intr = camera.intrinsics
    width, height = intr.width, intr.height
    depth = np.full((height, width), np.inf)
    ids = np.full((height, width), BACKGROUND_ID, dtype=np.int32)
    shade = np.zeros((height, width))
    color = np.zeros((height, width, 3))
    to_world = inverse(camera.extrinsic)
    origin = to_world.translation
    for entity_id, obstacle, base in entities:
        bounds = _screen_box(camera, obstacle)
        if bounds is None:
            continue
        x0, y0, x1, y1 = bounds
        vv, uu = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        d_cam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones(uu.shape)], axis=-1)
        d_world = d_cam.reshape(-1, 3) @ to_world.rotation.T
        t, normals = obstacle.ray_intersect(origin, d_world)
        t = t.reshape(uu.shape)
        region = depth[y0 : y1 + 1, x0 : x1 + 1]
        nearer = t < region
        if not nearer.any():
            continue
        normals = normals.reshape(uu.shape + (3,))
        facing = np.einsum("...i,...i->...", normals, d_world.reshape(uu.shape + (3,)))
        normals = np.where((facing > 0.0)[..., None], -normals, normals)
        lambert = AMBIENT + DIFFUSE * np.maximum(0.0, normals @ LIGHT)
        region[nearer] = t[nearer]
        ids[y0 : y1 + 1, x0 : x1 + 1][nearer] = entity_id
        shade[y0 : y1 + 1, x0 : x1 + 1][nearer] = lambert[nearer]
        color[y0 : y1 + 1, x0 : x1 + 1][nearer] = np.asarray(base, dtype=np.float64)
    texture = background_texture(background, width, height)
    image = color * shade[..., None]
    empty = ids == BACKGROUND_ID
    image[empty] = np.asarray(base_color, dtype=np.float64)
    textured = empty | (ids == TABLE_ID)
    image[textured] *= texture[textured][:, None]
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), ids, depth


def render(
    scene: Scene,
    rig: StereoRig,
    model: Optional[RobotModel],
    q=None,
    j=None,
    object_pose: Optional[Pose] = None,
    hand: str = "right",
    others: Iterable = (),
) -> Frames:
    """Render both views.

    Args:
        model: arm to draw (None draws no robot)
        others: extra arms as (hand, model, q, j)

    Returns:
        Frames(left, right, ids, depth); ids and depth belong to the left view
    """
    arms = list(others)
    if model is not None:
        arms.insert(0, (hand, model, q, j))
    entities = _entities(scene, object_pose or scene.object.true_pose, arms)
    background, base_color = scene.config.background, scene.config.base_color
    left, ids, depth = render_view(rig.left, entities, background, base_color)
    right, _, _ = render_view(rig.right, entities, background, base_color)
    return Frames(left, right, ids, depth)


def render_state(state: SceneState, rig: StereoRig) -> Frames:
    """Render every arm of a running scene."""
    arms = [(hand, state.models[hand], state.q[hand], state.j[hand]) for hand in state.scene.hands]
    first = arms[0]
    return render(
        state.scene, rig, first[1], first[2], first[3], object_pose=state.object_pose, hand=first[0], others=arms[1:]
    )
