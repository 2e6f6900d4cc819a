from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

from ofa.perception import CYLINDER_GRASPABLE, FLAT_LIFTABLE, HANDLE_GRASPABLE, TOP_PINCHABLE
from ofa.shapes import Shape, box, cylinder

SIDE_GRASP = "side-grasp"
HANDLE_GRASP = "handle-grasp"
TOP_PINCH = "top-pinch"
BIMANUAL_LIFT = "bimanual-lift"
TEMPLATES = (SIDE_GRASP, HANDLE_GRASP, TOP_PINCH, BIMANUAL_LIFT)

# Hand joints closed by the expert, in hand-vector order
GRASP_FINGERS = ("little", "ring", "middle", "index", "thumb_bend")
PINCH_FINGERS = ("index", "thumb_bend")

TABLE_RECT = ((0.42, 0.56), (-0.12, 0.06))
TRAY_RECT = ((0.48, 0.56), (0.16, 0.28))
STAND = box(0.10, 0.10, 0.08)
FULL_TURN = (0.0, 2.0 * math.pi)


class UnknownTaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """
    One benchmark task: the object, where it is placed and how the expert handles it.
    approach is the distance travelled along the hand's approach axis after T_m.
    """

    name: str
    template: str
    category: str
    shape: Shape
    color: tuple
    approach: float
    lift: float
    placement_rect: tuple = TABLE_RECT
    yaw_range: tuple = FULL_TURN
    symmetry: Union[None, str, int] = None
    on_stand: bool = False

    @property
    def bimanual(self) -> bool:
        return self.template == BIMANUAL_LIFT

    @property
    def hands(self) -> tuple:
        return ("right", "left") if self.bimanual else ("right",)

    @property
    def fingers(self) -> tuple:
        return PINCH_FINGERS if self.template == TOP_PINCH else GRASP_FINGERS

    @property
    def object_name(self) -> str:
        return self.name.split("_", 1)[1]


TASKS: dict[str, TaskSpec] = {
    "grasp_cup": TaskSpec(
        name="grasp_cup",
        template=SIDE_GRASP,
        category=CYLINDER_GRASPABLE,
        shape=cylinder(0.030, 0.12),
        color=(200, 60, 50),
        approach=0.05,
        lift=0.08,
        symmetry="axial",
    ),
    "grasp_sanitizer": TaskSpec(
        name="grasp_sanitizer",
        template=SIDE_GRASP,
        category=CYLINDER_GRASPABLE,
        shape=cylinder(0.026, 0.16),
        color=(60, 140, 200),
        approach=0.05,
        lift=0.08,
        symmetry="axial",
    ),
    "catch_loopy": TaskSpec(
        name="catch_loopy",
        template=SIDE_GRASP,
        category=CYLINDER_GRASPABLE,
        shape=cylinder(0.038, 0.10),
        color=(230, 180, 40),
        approach=0.04,
        lift=0.08,
        symmetry="axial",
    ),
    "take_mug": TaskSpec(
        name="take_mug",
        template=HANDLE_GRASP,
        category=HANDLE_GRASPABLE,
        shape=box(0.050, 0.028, 0.10),
        color=(120, 70, 160),
        approach=0.04,
        lift=0.08,
        yaw_range=(-0.3, 0.3),
    ),
    "hold_scanner": TaskSpec(
        name="hold_scanner",
        template=HANDLE_GRASP,
        category=HANDLE_GRASPABLE,
        shape=box(0.060, 0.032, 0.13),
        color=(70, 70, 80),
        approach=0.035,
        lift=0.08,
        yaw_range=(-0.3, 0.3),
    ),
    "pinch_toy": TaskSpec(
        name="pinch_toy",
        template=TOP_PINCH,
        category=TOP_PINCHABLE,
        shape=box(0.030, 0.030, 0.030),
        color=(240, 120, 30),
        approach=0.05,
        lift=0.05,
        symmetry=4,
    ),
    "lift_tray": TaskSpec(
        name="lift_tray",
        template=BIMANUAL_LIFT,
        category=FLAT_LIFTABLE,
        shape=box(0.20, 0.34, 0.03),
        color=(90, 160, 90),
        approach=0.05,
        lift=0.08,
        placement_rect=TRAY_RECT,
        yaw_range=(-0.15, 0.15),
        on_stand=True,
    ),
}


def get_task(name: str) -> TaskSpec:
    task: Optional[TaskSpec] = TASKS.get(name)
    if task is None:
        raise UnknownTaskError(f"Unknown task {name!r}; expected one of {', '.join(TASKS)}")
    return task


def template_tasks(template: str) -> list:
    return [t.name for t in TASKS.values() if t.template == template]
