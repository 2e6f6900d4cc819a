"""Closed-loop policy execution in the simulated scene."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ofa.camera import NoHandVisibleError, StereoRig
from ofa.dataset import STEPS, MethodSpec, Observation, Step, observation_images
from ofa.digest import derive_seed
from ofa.env.contact import success_check, update_attachment
from ofa.env.expert import pre_manipulation_target, track
from ofa.env.render import render_state
from ofa.env.scene import Scene, SceneState, initial_state
from ofa.env.settings import SimSettings
from ofa.geom import Pose, apply_relative, canonical_axis_angle, relative_pose
from ofa.kinematics import RobotModel, clip_hand
from ofa.perception import ObjectNotFoundError, ObjectOccludedError, locate_object
from ofa.planner import IKFailure, PlanningFailure, plan
from ofa.policy import PolicyParams, TemporalAggregator, infer
from ofa.resources import get_current_version

logger = logging.getLogger(__name__)

PERCEPTION_FAILURE = "perception-failure"
PLANNER_FAILURE = "planner-failure"
DROPPED = "dropped"
TIMEOUT = "timeout"
FAILURE_REASONS = (PERCEPTION_FAILURE, PLANNER_FAILURE, DROPPED, TIMEOUT)


@dataclass(frozen=True, eq=False)
class RolloutResult:
    success: bool
    object_pose: Pose
    wrist_pose: Pose  # first hand of the task
    steps: int
    failure_reason: Optional[str] = None
    hand_steps: dict = field(default_factory=dict)  # hand -> executed Steps
    log_dir: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "failure_reason": self.failure_reason,
            "steps": self.steps,
            "object_pose": self.object_pose.to_floats().tolist(),
            "wrist_pose": self.wrist_pose.to_floats().tolist(),
        }


class _Rollout:
    """Per-episode bookkeeping shared by the phases of ``execute_rollout``."""

    def __init__(self, scene: Scene, model: RobotModel, settings: SimSettings, seed: int, log_dir):
        self.scene = scene
        self.settings = settings
        self.seed = seed
        self.state: SceneState = initial_state(scene, model)
        self.records = {hand: [] for hand in scene.hands}
        self.log_dir = Path(log_dir) if log_dir is not None else None

    def finish(self, success: bool, steps: int, reason: Optional[str] = None) -> RolloutResult:
        first = self.scene.hands[0]
        result = RolloutResult(
            success=success,
            object_pose=self.state.object_pose,
            wrist_pose=self.state.wrist(first),
            steps=steps,
            failure_reason=reason,
            hand_steps={hand: tuple(rows) for hand, rows in self.records.items()},
            log_dir=str(self.log_dir) if self.log_dir is not None else None,
        )
        if self.log_dir is not None:
            self.write_log(result)
        outcome = "success" if success else reason
        logger.info(f"execute_rollout: {self.scene.task.name} seed {self.seed} {outcome} after {steps} steps")
        return result

    def write_log(self, result: RolloutResult) -> None:
        for hand, rows in self.records.items():
            directory = self.log_dir / hand
            directory.mkdir(parents=True, exist_ok=True)
            blob = np.stack([row.to_record() for row in rows]).tobytes() if rows else b""
            (directory / STEPS).write_bytes(blob)
        summary = result.to_dict()
        summary.update(
            version=get_current_version(),
            task=self.scene.task.name,
            seed=self.seed,
            config_digest=self.settings.config_digest,
            scene_digest=self.scene.config.digest(),
        )
        with open(self.log_dir / "result.json", "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)


def _params_for(params: Union[PolicyParams, dict], hand: str) -> PolicyParams:
    chosen = params[hand] if isinstance(params, dict) else params
    return chosen.copy()


def execute_rollout(
    scene: Scene,
    model: RobotModel,
    rig: StereoRig,
    method: MethodSpec,
    params: Union[PolicyParams, dict],
    settings: SimSettings,
    seed: int = 0,
    log_dir=None,
) -> RolloutResult:
    """Run one evaluation episode.

    Perception locates the object, the planner brings each hand to its
    pre-manipulation pose (methods with arrival), then the policy drives the
    hands until the task succeeds, the object drops, or ``settings.max_steps``
    policy steps have run.

    Args:
        params: one parameter set for every hand, or a hand -> parameters mapping
        log_dir: when given, per-hand step records and result.json are written there

    Returns:
        RolloutResult; failures are reported through ``failure_reason``
    """
    run = _Rollout(scene, model, settings, seed, log_dir)
    state = run.state
    hands = scene.hands
    references = {hand: scene.arm_bases[hand] for hand in hands}

    if method.arrival or method.encoding.relative:
        frames = render_state(state, rig)
        rng = np.random.default_rng(derive_seed(seed, "perception"))
        try:
            estimate = locate_object(scene, scene.object.name, frames.ids, settings.effective_noise, rng)
        except (ObjectNotFoundError, ObjectOccludedError) as e:
            logger.warning(f"execute_rollout: {e}")
            return run.finish(False, 0, PERCEPTION_FAILURE)
        targets = {hand: pre_manipulation_target(scene, estimate.pose, hand, settings) for hand in hands}
        if method.encoding.relative:
            references = targets
        if method.arrival:
            for hand in hands:
                try:
                    trajectory = plan(
                        state.models[hand],
                        state.q[hand],
                        targets[hand],
                        scene.obstacles(estimate.pose),
                        state.j[hand],
                        settings.planner,
                        settings.ik,
                        seed=derive_seed(seed, "plan", hand),
                    )
                except (IKFailure, PlanningFailure) as e:
                    logger.warning(f"execute_rollout: {hand} arrival failed: {e}")
                    return run.finish(False, 0, PLANNER_FAILURE)
                state.q[hand] = trajectory.final.copy()

    policies = {hand: _params_for(params, hand) for hand in hands}
    aggregators = {hand: TemporalAggregator(settings.aggregation_m) for hand in hands}
    dt = settings.planner.dt
    for t in range(settings.max_steps):
        frames = render_state(state, rig)
        commands = {}
        for hand in hands:
            arm = state.models[hand]
            try:
                left, right = observation_images(
                    rig, arm, state.q[hand], state.j[hand], frames.left, frames.right, method.encoding.hand_focus
                )
            except NoHandVisibleError as e:
                logger.warning(f"execute_rollout: {e}")
                return run.finish(False, t, PERCEPTION_FAILURE)
            delta_p, delta_omega = relative_pose(references[hand], state.wrist(hand))
            proprio = np.concatenate([delta_p, delta_omega, state.j[hand]])
            aggregators[hand].add(t, infer(policies[hand], Observation(left, right, proprio)))
            action = aggregators[hand].action(t)
            target = apply_relative(references[hand], action[:3], canonical_axis_angle(action[3:6]))
            commands[hand] = (target, clip_hand(arm, action[6:]))
        for hand, (target, fingers) in commands.items():
            wrist, j = state.wrist(hand), state.j[hand].copy()
            q = state.q[hand].copy()
            state.q[hand] = track(state.models[hand], target, q, settings.step_ik)
            state.j[hand] = fingers
            run.records[hand].append(Step(wrist, j, q, target, fingers.copy(), t * dt))
        status = update_attachment(state, settings.contact)
        if status == "released" and state.was_lifted:
            return run.finish(False, t + 1, DROPPED)
        if success_check(scene.task, state, settings.contact):
            return run.finish(True, t + 1)
    return run.finish(False, settings.max_steps, TIMEOUT)
