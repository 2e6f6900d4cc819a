"""Scene construction and the mutable kinematic state of a running episode."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ofa.digest import derive_seed, json_digest
from ofa.env.tasks import STAND, TaskSpec, get_task
from ofa.geom import Pose, rot_z
from ofa.kinematics import RobotModel, wrist_pose
from ofa.perception import ObjectInstance
from ofa.shapes import Obstacle, box

logger = logging.getLogger(__name__)

BACKGROUNDS = ("plain", "checker", "textured-1", "textured-2")
TABLE = Obstacle(box(0.65, 1.1, 0.04), Pose.from_translation((0.575, 0.2, -0.02)), name="table")
TABLE_TOP = 0.0

# id-buffer values
BACKGROUND_ID = 0
TABLE_ID = 1
OBJECT_ID = 2
STAND_ID = 3
ARM_IDS = {"right": 10, "left": 11}
HAND_IDS = {"right": 20, "left": 21}


@dataclass(frozen=True)
class SceneConfig:
    task: str
    placement_rect: Optional[tuple] = None  # ((x_min, x_max), (y_min, y_max)); task default when None
    placement_offset: tuple = (0.0, 0.0)
    background: str = "plain"
    base_color: tuple = (196, 204, 212)
    left_arm_base: tuple = (0.0, 0.44, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise ValueError(f"Unknown background {self.background!r}; expected one of {BACKGROUNDS}")
        if self.placement_rect is not None:
            (x0, x1), (y0, y1) = self.placement_rect
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"Placement rect {self.placement_rect} is empty")
        if len(self.placement_offset) != 2:
            raise ValueError("placement_offset must be (dx, dy)")

    @classmethod
    def from_run_config(cls, config, task: Optional[str] = None, **changes) -> "SceneConfig":
        scene = config.section("scene")
        values = dict(
            task=task or config.get("task"),
            placement_offset=tuple(scene["placement_offset"]),
            background=scene["background"],
            base_color=tuple(scene["base_color"]),
            left_arm_base=tuple(config.get("robot.left_arm_base")),
            seed=config.seed,
        )
        values.update(changes)
        return cls(**values)

    def digest(self) -> str:
        return json_digest(
            {
                "task": self.task,
                "placement_rect": self.placement_rect,
                "placement_offset": list(self.placement_offset),
                "background": self.background,
                "base_color": list(self.base_color),
                "left_arm_base": list(self.left_arm_base),
                "seed": self.seed,
            }
        )


@dataclass(frozen=True, eq=False)
class Scene:
    config: SceneConfig
    task: TaskSpec
    object: ObjectInstance
    table: Obstacle = TABLE
    stand: Optional[Obstacle] = None
    arm_bases: dict = field(default_factory=lambda: {"right": Pose.identity()})

    @property
    def entity_ids(self) -> dict:
        ids = {"table": TABLE_ID, self.object.name: OBJECT_ID}
        if self.stand is not None:
            ids["stand"] = STAND_ID
        return ids

    @property
    def hands(self) -> tuple:
        return self.task.hands

    @property
    def rest_z(self) -> float:
        return float(self.object.true_pose.translation[2])

    def find_object(self, name: str) -> Optional[ObjectInstance]:
        return self.object if name == self.object.name else None

    def object_obstacle(self, pose: Optional[Pose] = None) -> Obstacle:
        return Obstacle(self.object.shape, pose or self.object.true_pose, name=self.object.name)

    def fixed_obstacles(self) -> list:
        return [self.table] + ([self.stand] if self.stand is not None else [])

    def obstacles(self, object_pose: Optional[Pose] = None) -> list:
        """Planning obstacles: table, stand and the object."""
        return self.fixed_obstacles() + [self.object_obstacle(object_pose)]

    def hand_model(self, model: RobotModel, hand: str) -> RobotModel:
        base = self.arm_bases[hand]
        if np.array_equal(base.matrix(), model.base.matrix()):
            return model
        return model.with_base(base)


def sample_placement(config: SceneConfig, task: TaskSpec, rng: np.random.Generator) -> tuple[float, float, float]:
    """(x, y, yaw): uniform over the placement rect (plus offset) and the task's yaw interval."""
    (x0, x1), (y0, y1) = config.placement_rect or task.placement_rect
    u = rng.uniform(size=2)
    yaw = rng.uniform(*task.yaw_range)
    x = x0 + u[0] * (x1 - x0) + float(config.placement_offset[0])
    y = y0 + u[1] * (y1 - y0) + float(config.placement_offset[1])
    return x, y, float(yaw)


def build_scene(config: SceneConfig) -> Scene:
    """Place the task's object on the table (or its stand).

    Raises:
        UnknownTaskError: for a task name outside the benchmark
    """
    task = get_task(config.task)
    rng = np.random.default_rng(derive_seed(config.seed, "scene", config.task))
    x, y, yaw = sample_placement(config, task, rng)
    half_height = task.shape.half_extents[2]
    stand = None
    if task.on_stand:
        stand_height = STAND.size[2]
        stand = Obstacle(STAND, Pose.from_translation((x, y, TABLE_TOP + stand_height / 2.0)), name="stand")
        z = TABLE_TOP + stand_height + half_height
    else:
        z = TABLE_TOP + half_height
    obj = ObjectInstance(task.object_name, task.category, task.shape, Pose(rot_z(yaw), (x, y, z)))
    bases = {"right": Pose.identity()}
    if task.bimanual:
        bases["left"] = Pose.from_translation(config.left_arm_base)
    logger.debug(f"build_scene: {task.name} at ({x:.3f}, {y:.3f}) yaw {yaw:.3f}")
    return Scene(config=config, task=task, object=obj, stand=stand, arm_bases=bases)


@dataclass
class SceneState:
    """Joint state of every arm, the object pose and the object-to-wrist attachment."""

    scene: Scene
    models: dict
    q: dict
    j: dict
    object_pose: Pose
    attachment: dict = field(default_factory=dict)  # hand -> wrist-to-object Pose
    was_lifted: bool = False

    def wrist(self, hand: str) -> Pose:
        return wrist_pose(self.models[hand], self.q[hand], check=False)

    @property
    def attached(self) -> bool:
        return bool(self.attachment)

    def object_obstacle(self) -> Obstacle:
        return self.scene.object_obstacle(self.object_pose)

    def copy(self) -> "SceneState":
        return SceneState(
            scene=self.scene,
            models=dict(self.models),
            q={h: v.copy() for h, v in self.q.items()},
            j={h: v.copy() for h, v in self.j.items()},
            object_pose=self.object_pose,
            attachment=dict(self.attachment),
            was_lifted=self.was_lifted,
        )


def initial_state(scene: Scene, model: RobotModel) -> SceneState:
    """Every arm at home with the hand at its pre-grasp opening, object at rest."""
    models = {hand: scene.hand_model(model, hand) for hand in scene.hands}
    return SceneState(
        scene=scene,
        models=models,
        q={hand: models[hand].home_arm.copy() for hand in scene.hands},
        j={hand: models[hand].pregrasp_hand.copy() for hand in scene.hands},
        object_pose=scene.object.true_pose,
    )
