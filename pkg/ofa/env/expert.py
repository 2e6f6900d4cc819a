"""Scripted demonstration oracle.

From the ground-truth object pose the expert computes the pre-manipulation pose,
plans a collision-free arrival, then plays the task's object-focus end
trajectory (approach, close, lift, hold) with a small smooth jitter. Only
episodes whose final state passes the task's success predicate are emitted.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

from ofa.camera import NoHandVisibleError, StereoRig, hand_rects
from ofa.config import load_config
from ofa.dataset import Episode, Step
from ofa.digest import derive_seed
from ofa.env.contact import success_check, update_attachment
from ofa.env.render import render_state
from ofa.env.scene import OBJECT_ID, Scene, SceneConfig, build_scene, initial_state
from ofa.env.settings import ExpertConfig, SimSettings
from ofa.env.tasks import TaskSpec
from ofa.geom import Pose, from_axis_angle
from ofa.kinematics import RobotModel, clip_arm, hand_spheres, wrist_pose
from ofa.perception import (
    canonicalize_symmetric_pose,
    mirror_offset,
    pre_manipulation_pose,
)
from ofa.planner import IKConfig, IKFailure, PlanningFailure, plan, solve_ik
from ofa.shapes import Obstacle

logger = logging.getLogger(__name__)

SCAN_STEP = 0.01
WORLD_UP = np.array([0.0, 0.0, 1.0])


def ease(s: float) -> float:
    """Cosine ease-in-out on [0, 1]."""
    return 0.5 - 0.5 * math.cos(math.pi * s)


def offsets_for_hand(offsets: dict, hand: str) -> dict:
    if hand == "right":
        return offsets
    return {category: mirror_offset(offset) for category, offset in offsets.items()}


def pre_manipulation_target(scene: Scene, object_pose: Pose, hand: str, settings: SimSettings) -> Pose:
    """T_m for ``hand`` from an object pose estimate."""
    task = scene.task
    canonical = canonicalize_symmetric_pose(object_pose, task.symmetry)
    table = offsets_for_hand(settings.offsets, hand)
    return pre_manipulation_pose(canonical, table, task.category, settings.offset_frame)


def closure_targets(
    model: RobotModel, wrist: Pose, j_open: np.ndarray, obstacle: Obstacle, fingers: tuple, squeeze: float
) -> np.ndarray:
    """Per-finger first-contact angle plus ``squeeze``; fingers that never touch stay open."""
    names = list(model.hand_joint_names)
    upper = model.hand_upper
    closed = j_open.copy()
    for finger in fingers:
        index = names.index(finger)
        angle = j_open[index]
        while angle <= upper[index]:
            trial = j_open.copy()
            trial[index] = angle
            centers, radii, links = hand_spheres(model, wrist, trial, check=False)
            mine = np.array([link == finger for link in links])
            d, _ = obstacle.signed_distance(centers[mine])
            if np.any(d - radii[mine] <= 0.0):
                closed[index] = min(angle + squeeze, upper[index])
                break
            angle += SCAN_STEP
    return closed


@dataclass(frozen=True, eq=False)
class EndTrajectory:
    wrists: tuple  # Pose per waypoint, the first one at T_m
    fingers: np.ndarray  # (N, 6)

    def __len__(self) -> int:
        return len(self.wrists)


def smooth_jitter(count: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """(count, 3) offsets a·sin(π f τ): zero at the first waypoint, each row's norm at most ``amplitude``."""
    a = rng.uniform(-amplitude / math.sqrt(3.0), amplitude / math.sqrt(3.0), size=3)
    f = rng.integers(1, 4, size=3)
    tau = np.linspace(0.0, 1.0, count)[:, None]
    return a * np.sin(math.pi * f * tau)


def end_trajectory(
    task: TaskSpec,
    model: RobotModel,
    pre_manip: Pose,
    obstacle: Obstacle,
    config: ExpertConfig,
    rng: np.random.Generator,
) -> EndTrajectory:
    """Approach along the hand axis, close the task's fingers, lift, hold."""
    approach_axis = pre_manip.rotation[:, 1]
    j_open = model.pregrasp_hand.copy()
    wrists = [pre_manip]
    for i in range(1, config.approach_steps + 1):
        shift = ease(i / config.approach_steps) * task.approach * approach_axis
        wrists.append(Pose(pre_manip.rotation, pre_manip.translation + shift))
    grasp = wrists[-1]
    fingers = [j_open] * len(wrists)
    j_closed = closure_targets(model, grasp, j_open, obstacle, task.fingers, config.squeeze)
    for i in range(1, config.close_steps + 1):
        wrists.append(grasp)
        fingers.append(j_open + ease(i / config.close_steps) * (j_closed - j_open))
    for i in range(1, config.lift_steps + 1):
        wrists.append(Pose(grasp.rotation, grasp.translation + ease(i / config.lift_steps) * task.lift * WORLD_UP))
        fingers.append(j_closed)
    top = wrists[-1]
    for _ in range(config.hold_steps):
        wrists.append(top)
        fingers.append(j_closed)

    count = len(wrists)
    d_t = smooth_jitter(count, config.jitter_translation, rng)
    d_r = smooth_jitter(count, config.jitter_rotation, rng)
    jittered = tuple(
        Pose(from_axis_angle(d_r[n]) @ w.rotation, w.translation + d_t[n]) for n, w in enumerate(wrists)
    )
    return EndTrajectory(jittered, np.array(fingers))


def track(model: RobotModel, target: Pose, q: np.ndarray, ik: IKConfig) -> np.ndarray:
    """IK warm-started from ``q``; the best iterate is used when the target is not met exactly."""
    try:
        return solve_ik(model, target, q, ik)
    except IKFailure as e:
        return clip_arm(model, e.best_q)


@dataclass
class _HandPlan:
    model: RobotModel
    pre_manip: Pose
    approach_q: np.ndarray  # planned waypoints from home
    end: EndTrajectory


def _timeline(hand_plan: _HandPlan, segment: str, prefix: int) -> list:
    """Commanded (wrist, fingers, q or None) per waypoint; q is known for planned waypoints."""
    model = hand_plan.model
    rows = []
    if segment == "full":
        path = list(hand_plan.approach_q) + [hand_plan.approach_q[-1]] * (prefix - len(hand_plan.approach_q))
        for q in path[:-1]:
            rows.append((wrist_pose(model, q, check=False), model.pregrasp_hand.copy(), q))
    for n, wrist in enumerate(hand_plan.end.wrists):
        q = hand_plan.approach_q[-1] if n == 0 else None
        rows.append((wrist, hand_plan.end.fingers[n], q))
    return rows


def _crop_rects(rig: StereoRig, model: RobotModel, q, j) -> tuple:
    try:
        left, right = hand_rects(rig, model, q, j)
    except NoHandVisibleError:
        return ((), ())
    return (tuple(left.to_list()), tuple(right.to_list()))


def run_expert(
    scene: Scene,
    model: RobotModel,
    rig: StereoRig,
    settings: SimSettings,
    seed: int = 0,
    segment: str = "object_focus",
) -> Optional[dict]:
    """One demonstration per hand of the scene, or None when planning or the final success check fails."""
    task = scene.task
    state = initial_state(scene, model)
    plans = {}
    for hand in scene.hands:
        hand_model = state.models[hand]
        pre_manip = pre_manipulation_target(scene, scene.object.true_pose, hand, settings)
        try:
            trajectory = plan(
                hand_model,
                hand_model.home_arm,
                pre_manip,
                scene.obstacles(),
                hand_model.pregrasp_hand,
                settings.planner,
                settings.ik,
                seed=derive_seed(seed, "plan", hand),
            )
        except (IKFailure, PlanningFailure) as e:
            logger.warning(f"scripted_expert: {task.name} seed {seed} {hand} arrival failed: {e}")
            return None
        rng = np.random.default_rng(derive_seed(seed, "jitter", hand))
        end = end_trajectory(task, hand_model, pre_manip, scene.object_obstacle(), settings.expert, rng)
        plans[hand] = _HandPlan(hand_model, pre_manip, trajectory.waypoints, end)

    prefix = max(len(p.approach_q) for p in plans.values())
    timelines = {hand: _timeline(p, segment, prefix) for hand, p in plans.items()}
    for hand, p in plans.items():
        state.q[hand] = p.approach_q[0] if segment == "full" else p.approach_q[-1]

    dt = settings.planner.dt
    records = {hand: [] for hand in plans}
    rects = {hand: [] for hand in plans}
    mask = None
    count = len(next(iter(timelines.values())))
    for n in range(count - 1):
        frames = render_state(state, rig)
        if mask is None:
            mask = frames.ids == OBJECT_ID
        for hand, timeline in timelines.items():
            target, fingers, _ = timeline[n + 1]
            records[hand].append(
                Step(
                    wrist_pose=state.wrist(hand),
                    hand_joints=state.j[hand].copy(),
                    arm_joints=state.q[hand].copy(),
                    action_wrist_pose=target,
                    action_hand_joints=np.asarray(fingers, dtype=np.float64).copy(),
                    timestamp=n * dt,
                    left_image=frames.left,
                    right_image=frames.right,
                )
            )
            rects[hand].append(_crop_rects(rig, state.models[hand], state.q[hand], state.j[hand]))
        for hand, timeline in timelines.items():
            target, fingers, known_q = timeline[n + 1]
            model_h = state.models[hand]
            if known_q is not None:
                state.q[hand] = known_q.copy()
            else:
                state.q[hand] = track(model_h, target, state.q[hand], settings.step_ik)
            state.j[hand] = np.asarray(fingers, dtype=np.float64).copy()
        update_attachment(state, settings.contact)

    if not success_check(task, state, settings.contact):
        logger.warning(f"scripted_expert: {task.name} seed {seed} rejected, final state fails the success check")
        return None
    episodes = {
        hand: Episode(
            steps=tuple(records[hand]),
            pre_manip_pose=plans[hand].pre_manip,
            object=scene.object,
            task=task.name,
            scene_config_digest=settings.config_digest or scene.config.digest(),
            hand=hand,
            segment=segment,
            arm_base=scene.arm_bases[hand],
            seed=seed,
            crop_rects=tuple(rects[hand]),
            object_mask=mask,
        )
        for hand in plans
    }
    logger.info(f"scripted_expert: {task.name} seed {seed} emitted {count - 1} steps per hand")
    return episodes


def default_settings() -> SimSettings:
    return SimSettings.from_run_config(load_config(use_env=False))


def scripted_expert(
    scene: Scene,
    model: RobotModel,
    rig: StereoRig,
    settings: Optional[SimSettings] = None,
    seed: int = 0,
    segment: str = "object_focus",
    hand: str = "right",
) -> Optional[Episode]:
    """The demonstration of one hand (the right hand unless asked otherwise)."""
    episodes = run_expert(scene, model, rig, settings or default_settings(), seed, segment)
    return None if episodes is None else episodes[hand]


def generate_demonstrations(
    scene_config: SceneConfig,
    count: int,
    model: RobotModel,
    rig: StereoRig,
    settings: SimSettings,
    segment: str = "object_focus",
) -> Iterator[tuple]:
    """Yield (demo index, scene seed, episodes per hand) until ``count`` succeed or the attempt budget runs out."""
    budget = count * settings.expert.max_attempts_factor
    produced = 0
    for attempt in range(budget):
        if produced == count:
            return
        scene_seed = derive_seed(scene_config.seed, "demo", attempt)
        scene = build_scene(replace(scene_config, seed=scene_seed))
        episodes = run_expert(scene, model, rig, settings, scene_seed, segment)
        if episodes is None:
            continue
        yield produced, scene_seed, episodes
        produced += 1
    if produced < count:
        logger.error(f"generate_demonstrations: only {produced} of {count} episodes after {budget} attempts")
