"""Collision-free arrival at a target wrist pose.

Damped-least-squares inverse kinematics picks a goal configuration, RRT-Connect
searches joint space between start and goal against sphere-vs-primitive
collision checks, and random shortcutting smooths the result. The hand is held
at a fixed opening throughout.
"""

from __future__ import annotations

import logging
import math
import time
from collections import namedtuple
from dataclasses import dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np

from ofa.digest import derive_seed
from ofa.geom import Pose, to_axis_angle
from ofa.kinematics import RobotModel, clip_arm, geometric_jacobian, robot_spheres, wrist_pose
from ofa.shapes import Obstacle, sphere

logger = logging.getLogger(__name__)

IKSolution = namedtuple("IKSolution", "q, success, reason, iterations, residual")


class IKFailure(RuntimeError):
    """No restart converged; carries the best configuration and its residual."""

    def __init__(self, message: str, best_q: np.ndarray, position_error: float, orientation_error: float):
        super().__init__(message)
        self.best_q = best_q
        self.position_error = position_error
        self.orientation_error = orientation_error

    @property
    def residual(self) -> tuple[float, float]:
        return self.position_error, self.orientation_error


class PlanningFailure(RuntimeError):
    pass


def _from_dict(cls, values: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    return cls(**values)


@dataclass(frozen=True)
class IKConfig:
    max_iterations: int = 200
    restarts: int = 8
    damping: float = 0.05
    position_tolerance: float = 0.001
    orientation_tolerance: float = 0.01
    max_step: float = 0.5
    seed: int = 0

    @classmethod
    def from_dict(cls, values: dict) -> "IKConfig":
        return _from_dict(cls, values)


@dataclass(frozen=True)
class PlannerConfig:
    margin: float = 0.005
    max_samples: int = 50000
    warn_after: Optional[float] = 5.0
    extend_step: float = 0.2
    edge_resolution: float = 0.01
    shortcut_iterations: int = 200
    max_step: float = 0.05
    dt: float = 0.1
    validation_factor: int = 4
    retries: int = 3

    @classmethod
    def from_dict(cls, values: dict) -> "PlannerConfig":
        return _from_dict(cls, values)


@dataclass(frozen=True, eq=False)
class JointTrajectory:
    waypoints: np.ndarray  # (N, 6)
    dt: float

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.waypoints)) * self.dt

    def __len__(self) -> int:
        return len(self.waypoints)

    @property
    def final(self) -> np.ndarray:
        return self.waypoints[-1]


# Collision


def obstacles_from_point_cloud(points, radius: float = 0.01) -> list:
    """One sphere obstacle per point."""
    return [
        Obstacle(sphere(radius), Pose.from_translation(p), name=f"point{i}")
        for i, p in enumerate(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    ]


def collision_check(model: RobotModel, q, j, obstacles: Sequence[Obstacle], margin: float = 0.005) -> bool:
    """True iff any arm or hand sphere comes within ``margin`` of an obstacle (base link excluded)."""
    if not obstacles:
        return False
    centers, radii = robot_spheres(model, q, j, include_base=False, check=False)
    for obstacle in obstacles:
        distance, _ = obstacle.signed_distance(centers)
        if np.any(distance < radii + margin):
            return True
    return False


def interpolate(a: np.ndarray, b: np.ndarray, resolution: float) -> np.ndarray:
    """Configurations from a (exclusive) to b (inclusive), no joint moving more than ``resolution`` per step."""
    span = float(np.max(np.abs(b - a))) if len(a) else 0.0
    count = max(1, int(math.ceil(span / resolution)))
    fractions = np.arange(1, count + 1)[:, None] / count
    return a + fractions * (b - a)


def edge_is_free(model, a, b, j, obstacles, resolution: float, margin: float) -> bool:
    return not any(collision_check(model, q, j, obstacles, margin) for q in interpolate(a, b, resolution))


def path_length(path) -> float:
    """Sum of joint-space step norms."""
    path = np.asarray(path, dtype=np.float64)
    if len(path) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))


def validate_trajectory(
    model: RobotModel, waypoints, j, obstacles, resolution: float, margin: float = 0.005
) -> bool:
    """Every waypoint and every interpolated configuration at ``resolution`` is collision-free."""
    waypoints = np.asarray(waypoints, dtype=np.float64)
    if collision_check(model, waypoints[0], j, obstacles, margin):
        return False
    return all(
        edge_is_free(model, a, b, j, obstacles, resolution, margin) for a, b in zip(waypoints[:-1], waypoints[1:])
    )


# Inverse kinematics


def _ik_attempt(model: RobotModel, target: Pose, q0: np.ndarray, config: IKConfig) -> IKSolution:
    q = clip_arm(model, q0)
    best_q, best_err = q.copy(), (math.inf, math.inf)
    damping2 = config.damping**2
    for iteration in range(config.max_iterations + 1):
        jac, current = geometric_jacobian(model, q)
        e_p = target.translation - current.translation
        e_o = to_axis_angle(target.rotation @ current.rotation.T)
        err = (float(np.linalg.norm(e_p)), float(np.linalg.norm(e_o)))
        if err[0] + err[1] < best_err[0] + best_err[1]:
            best_q, best_err = q.copy(), err
        if err[0] < config.position_tolerance * 0.1 and err[1] < config.orientation_tolerance * 0.1:
            break
        if iteration == config.max_iterations:
            break
        e = np.concatenate([e_p, e_o])
        dq = jac.T @ np.linalg.solve(jac @ jac.T + damping2 * np.eye(6), e)
        biggest = float(np.max(np.abs(dq)))
        if biggest > config.max_step:
            dq *= config.max_step / biggest
        q = clip_arm(model, q + dq)
    success = best_err[0] < config.position_tolerance and best_err[1] < config.orientation_tolerance
    return IKSolution(best_q, success, None if success else "not converged", iteration, best_err)


def solve_ik(
    model: RobotModel,
    target_wrist: Pose,
    q_init,
    config: IKConfig = IKConfig(),
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Joint angles placing the wrist at ``target_wrist``.

    Starts from ``q_init`` and then from ``config.restarts`` random in-limit configurations.

    Raises:
        IKFailure: when no start converges, with the best residual found
    """
    for solution in _ik_solutions(model, target_wrist, q_init, config, rng):
        if solution.success:
            return solution.q
    raise IKFailure(
        f"solve_ik: target unreachable, best residual {solution.residual[0]:.4f} m / {solution.residual[1]:.4f} rad",
        solution.q,
        *solution.residual,
    )


def _ik_solutions(model, target, q_init, config: IKConfig, rng=None):
    """Yield attempts in order (initial guess first); the last yielded value is the overall best on failure."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    best = None
    starts = [np.asarray(q_init, dtype=np.float64)]
    starts += [rng.uniform(model.arm_lower, model.arm_upper) for _ in range(config.restarts)]
    for i, start in enumerate(starts):
        solution = _ik_attempt(model, target, start, config)
        if best is None or sum(solution.residual) < sum(best.residual):
            best = solution
        if solution.success or i == len(starts) - 1:
            yield solution if solution.success else best
        else:
            yield solution


# Sampling-based planning

_TRAPPED, _ADVANCED, _REACHED = 0, 1, 2


class _Tree:
    def __init__(self, root: np.ndarray, capacity: int = 1024):
        self.nodes = np.zeros((capacity, len(root)))
        self.parents = np.full(capacity, -1, dtype=np.int64)
        self.nodes[0] = root
        self.size = 1

    def add(self, q: np.ndarray, parent: int) -> int:
        if self.size == len(self.nodes):
            self.nodes = np.vstack([self.nodes, np.zeros_like(self.nodes)])
            self.parents = np.concatenate([self.parents, np.full(len(self.parents), -1, dtype=np.int64)])
        self.nodes[self.size] = q
        self.parents[self.size] = parent
        self.size += 1
        return self.size - 1

    def nearest(self, q: np.ndarray) -> int:
        return int(np.argmin(np.linalg.norm(self.nodes[: self.size] - q, axis=1)))

    def branch(self, index: int) -> list:
        out = []
        while index >= 0:
            out.append(self.nodes[index].copy())
            index = int(self.parents[index])
        return out


def _extend(tree: _Tree, q: np.ndarray, step: float, edge_ok: Callable) -> tuple[int, int]:
    near = tree.nearest(q)
    q_near = tree.nodes[near]
    delta = q - q_near
    distance = float(np.linalg.norm(delta))
    if distance <= step:
        q_new, status = q.copy(), _REACHED
    else:
        q_new, status = q_near + delta * (step / distance), _ADVANCED
    if not edge_ok(q_near, q_new):
        return _TRAPPED, near
    return status, tree.add(q_new, near)


def _connect(tree: _Tree, q: np.ndarray, step: float, edge_ok: Callable) -> tuple[int, int]:
    while True:
        status, index = _extend(tree, q, step, edge_ok)
        if status != _ADVANCED:
            return status, index


def _rrt_connect(q_start, q_goal, lower, upper, edge_ok, config: PlannerConfig, rng) -> list:
    if edge_ok(q_start, q_goal):
        return [q_start.copy(), q_goal.copy()]
    start_tree, goal_tree = _Tree(q_start), _Tree(q_goal)
    a, b = start_tree, goal_tree
    # warn_after only reports a slow search; max_samples alone decides success
    warn_after = time.monotonic() + config.warn_after if config.warn_after else None
    for sample in range(config.max_samples):
        if warn_after is not None and time.monotonic() > warn_after:
            logger.warning("plan: search still running after %ss (%d samples)", config.warn_after, sample)
            warn_after = None
        q_rand = rng.uniform(lower, upper)
        status, index = _extend(a, q_rand, config.extend_step, edge_ok)
        if status != _TRAPPED:
            status_b, index_b = _connect(b, a.nodes[index], config.extend_step, edge_ok)
            if status_b == _REACHED:
                half_a, half_b = a.branch(index), b.branch(index_b)
                if a is start_tree:
                    path = half_a[::-1] + half_b[1:]
                else:
                    path = half_b[::-1] + half_a[1:]
                logger.debug(f"plan: connected after {sample + 1} samples")
                return path
        a, b = b, a
    raise PlanningFailure(f"plan: no path within {config.max_samples} samples")


def shortcut_path(path: list, edge_ok: Callable, rng: np.random.Generator, iterations: int) -> list:
    """Random vertex-to-vertex shortcutting; never lengthens the path."""
    path = [np.asarray(q, dtype=np.float64) for q in path]
    for _ in range(iterations):
        if len(path) < 3:
            break
        i, k = sorted(int(v) for v in rng.choice(len(path), size=2, replace=False))
        if k - i < 2:
            continue
        if edge_ok(path[i], path[k]):
            path = path[: i + 1] + path[k:]
    return path


def resample(path: list, max_step: float) -> np.ndarray:
    """Insert waypoints so that consecutive configurations differ by < ``max_step`` per joint."""
    out = [np.asarray(path[0], dtype=np.float64)]
    for a, b in zip(path[:-1], path[1:]):
        span = float(np.max(np.abs(b - a)))
        if span == 0.0:
            continue
        count = int(math.floor(span / max_step)) + 1
        for k in range(1, count + 1):
            out.append(a + (b - a) * (k / count))
    return np.array(out)


def goal_configuration(
    model: RobotModel, target: Pose, q_start, j, obstacles, config: PlannerConfig, ik_config: IKConfig, rng
) -> np.ndarray:
    """A collision-free IK solution for ``target``.

    Raises:
        IKFailure: no IK attempt converged
        PlanningFailure: every converged solution collides
    """
    converged = 0
    last = None
    for solution in _ik_solutions(model, target, q_start, ik_config, rng):
        last = solution
        if not solution.success:
            continue
        converged += 1
        if not collision_check(model, solution.q, j, obstacles, config.margin):
            return solution.q
    if converged == 0:
        raise IKFailure(
            f"plan: target unreachable, best residual {last.residual[0]:.4f} m / {last.residual[1]:.4f} rad",
            last.q,
            *last.residual,
        )
    raise PlanningFailure(f"plan: goal configuration in collision ({converged} IK solutions tried)")


def plan(
    model: RobotModel,
    q_start,
    target_wrist: Pose,
    obstacles: Sequence[Obstacle],
    j=None,
    config: PlannerConfig = PlannerConfig(),
    ik_config: IKConfig = IKConfig(),
    seed: int = 0,
) -> JointTrajectory:
    """Collision-free joint trajectory from ``q_start`` to a configuration reaching ``target_wrist``.

    Raises:
        IKFailure: the target has no IK solution
        PlanningFailure: start or goal in collision, search budget exhausted, or dense validation failed
    """
    j = model.pregrasp_hand if j is None else np.asarray(j, dtype=np.float64)
    q_start = np.asarray(q_start, dtype=np.float64)
    obstacles = list(obstacles)
    if collision_check(model, q_start, j, obstacles, config.margin):
        raise PlanningFailure("plan: start configuration in collision")
    rng = np.random.default_rng(derive_seed(seed, "goal"))
    q_goal = goal_configuration(model, target_wrist, q_start, j, obstacles, config, ik_config, rng)

    def edge_ok(a, b):
        return edge_is_free(model, a, b, j, obstacles, config.edge_resolution, config.margin)

    dense = config.edge_resolution / config.validation_factor
    for attempt in range(config.retries):
        attempt_rng = np.random.default_rng(derive_seed(seed, "rrt", attempt))
        raw = _rrt_connect(q_start, q_goal, model.arm_lower, model.arm_upper, edge_ok, config, attempt_rng)
        smooth = shortcut_path(raw, edge_ok, attempt_rng, config.shortcut_iterations)
        waypoints = resample(smooth, config.max_step)
        if validate_trajectory(model, waypoints, j, obstacles, dense, config.margin):
            logger.info(
                f"plan: {len(waypoints)} waypoints, length {path_length(waypoints):.3f} rad (attempt {attempt + 1})"
            )
            return JointTrajectory(waypoints=waypoints, dt=config.dt)
        logger.info(f"plan: dense re-validation rejected attempt {attempt + 1}")
    raise PlanningFailure(f"plan: no trajectory passed dense re-validation in {config.retries} attempts")


def reached(model: RobotModel, q, target: Pose, config: IKConfig = IKConfig()) -> bool:
    """Whether ``q`` puts the wrist within IK tolerance of ``target``."""
    current = wrist_pose(model, q, check=False)
    position = float(np.linalg.norm(current.translation - target.translation))
    orientation = float(np.linalg.norm(to_axis_angle(target.rotation @ current.rotation.T)))
    return position < config.position_tolerance and orientation < config.orientation_tolerance
