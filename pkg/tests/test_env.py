import json
import math
from dataclasses import replace

import numpy as np
import pytest

from ofa.dataset import RECORD_BYTES, STEPS, get_method
from ofa.env.contact import Contact, drop_pose, hand_contacts, holds, success_check, tilt_deg, update_attachment
from ofa.env.expert import default_settings, ease, end_trajectory, offsets_for_hand, smooth_jitter
from ofa.env.render import background_texture, render
from ofa.env.rollout import TIMEOUT, execute_rollout
from ofa.env.scene import HAND_IDS, OBJECT_ID, TABLE_ID, SceneConfig, build_scene, initial_state
from ofa.env.settings import ExpertConfig
from ofa.env.tasks import HANDLE_GRASP, TASKS, TOP_PINCH, UnknownTaskError, get_task, template_tasks
from ofa.geom import Pose, pose_error, rot_x, rot_z
from ofa.kinematics import wrist_pose
from ofa.policy import init_params
from ofa.shapes import Obstacle, sphere


@pytest.fixture(scope="module")
def settings():
    return default_settings()


class TestTasks:
    def test_benchmark(self):
        assert len(TASKS) == 7
        assert template_tasks(HANDLE_GRASP) == ["take_mug", "hold_scanner"]
        assert get_task("lift_tray").hands == ("right", "left")
        assert get_task("grasp_cup").object_name == "cup"

    def test_pinch_closes_two_fingers(self):
        assert get_task("pinch_toy").fingers == ("index", "thumb_bend")

    def test_unknown_task(self):
        with pytest.raises(UnknownTaskError, match="Unknown task 'fold_towel'"):
            get_task("fold_towel")


class TestScene:
    def test_seeded_placement(self):
        """The same seed gives the same object pose inside the task's placement rect."""
        a = build_scene(SceneConfig(task="grasp_cup", seed=5))
        b = build_scene(SceneConfig(task="grasp_cup", seed=5))
        assert np.array_equal(a.object.true_pose.matrix(), b.object.true_pose.matrix())
        x, y, z = a.object.true_pose.translation
        (x0, x1), (y0, y1) = get_task("grasp_cup").placement_rect
        assert x0 <= x <= x1 and y0 <= y <= y1
        assert z == pytest.approx(0.06)

    def test_placement_offset_shifts_object(self):
        base = build_scene(SceneConfig(task="take_mug", seed=2))
        shifted = build_scene(SceneConfig(task="take_mug", seed=2, placement_offset=(0.0, 0.2)))
        delta = shifted.object.true_pose.translation - base.object.true_pose.translation
        assert np.allclose(delta, (0.0, 0.2, 0.0))

    def test_tray_rests_on_stand(self):
        """The bimanual task gets a stand and a second arm base."""
        scene = build_scene(SceneConfig(task="lift_tray", seed=1))
        assert scene.stand is not None
        assert scene.object.true_pose.translation[2] == pytest.approx(0.08 + 0.015)
        assert set(scene.arm_bases) == {"right", "left"}
        assert "stand" in scene.entity_ids

    def test_unknown_background(self):
        with pytest.raises(ValueError, match="Unknown background"):
            SceneConfig(task="grasp_cup", background="marble")

    def test_digest_follows_config(self):
        assert SceneConfig(task="grasp_cup").digest() == SceneConfig(task="grasp_cup").digest()
        assert SceneConfig(task="grasp_cup").digest() != SceneConfig(task="grasp_cup", seed=1).digest()

    def test_initial_state(self, robot):
        scene = build_scene(SceneConfig(task="lift_tray"))
        state = initial_state(scene, robot)
        assert np.array_equal(state.q["left"], robot.home_arm)
        assert not state.attached
        assert state.wrist("left").translation[1] == pytest.approx(state.wrist("right").translation[1] + 0.44)


class TestRender:
    def test_object_and_table_visible(self, rig):
        scene = build_scene(SceneConfig(task="grasp_cup", seed=3))
        frames = render(scene, rig, None)
        assert frames.left.shape == (480, 640, 3) and frames.left.dtype == np.uint8
        assert np.any(frames.ids == OBJECT_ID)
        assert np.any(frames.ids == TABLE_ID)
        assert np.all(np.isfinite(frames.depth[frames.ids == OBJECT_ID]))

    def test_deterministic(self, rig):
        scene = build_scene(SceneConfig(task="pinch_toy", seed=3))
        a, b = render(scene, rig, None), render(scene, rig, None)
        assert np.array_equal(a.left, b.left) and np.array_equal(a.right, b.right)

    def test_background_only_touches_backdrop_and_table(self, rig):
        """Changing the background leaves object pixels alone."""
        plain = render(build_scene(SceneConfig(task="grasp_cup", seed=3)), rig, None)
        textured = render(build_scene(SceneConfig(task="grasp_cup", seed=3, background="textured-1")), rig, None)
        on_object = plain.ids == OBJECT_ID
        assert np.array_equal(plain.left[on_object], textured.left[on_object])
        assert not np.array_equal(plain.left, textured.left)

    def test_robot_hand_is_drawn(self, rig, robot):
        scene = build_scene(SceneConfig(task="grasp_cup", seed=3))
        frames = render(scene, rig, robot, robot.home_arm, robot.pregrasp_hand)
        assert np.any(frames.ids == HAND_IDS["right"])

    def test_textures(self):
        assert np.all(background_texture("plain", 8, 4) == 1.0)
        assert background_texture("checker", 64, 64).min() < 1.0
        with pytest.raises(ValueError):
            background_texture("wood", 8, 4)


class TestContact:
    def test_pinch_needs_thumb_and_index(self):
        up, down = np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0])
        assert holds([Contact("index", up, 0.0), Contact("thumb_bend", down, 0.0)], TOP_PINCH)
        assert not holds([Contact("index", up, 0.0), Contact("middle", down, 0.0)], TOP_PINCH)

    def test_grasp_needs_opposing_normals(self):
        """Two links must press from roughly opposite sides."""
        x, minus_x, y = np.eye(3)[0], -np.eye(3)[0], np.eye(3)[1]
        assert holds([Contact("palm", x, 0.0), Contact("index", minus_x, 0.0)], HANDLE_GRASP)
        assert not holds([Contact("palm", x, 0.0), Contact("index", y, 0.0)], HANDLE_GRASP)
        assert not holds([Contact("index", x, 0.0), Contact("index", minus_x, 0.0)], HANDLE_GRASP)

    def test_hand_contacts_near_wrist(self, robot):
        wrist = wrist_pose(robot, robot.home_arm)
        ball = Obstacle(sphere(0.03), Pose.from_translation(wrist.translation))
        assert hand_contacts(robot, robot.home_arm, robot.pregrasp_hand, ball)
        far = Obstacle(sphere(0.03), Pose.from_translation((2.0, 2.0, 2.0)))
        assert hand_contacts(robot, robot.home_arm, robot.pregrasp_hand, far) == []

    def test_resting_scene_is_free(self, robot):
        """At home nothing touches the object, so it is neither attached nor a success."""
        scene = build_scene(SceneConfig(task="grasp_cup", seed=3))
        state = initial_state(scene, robot)
        assert update_attachment(state) == "free"
        assert not success_check(scene.task, state)

    def test_tilt_and_drop(self, robot):
        assert tilt_deg(Pose(rot_x(math.radians(30)), np.zeros(3))) == pytest.approx(30.0)
        scene = build_scene(SceneConfig(task="grasp_cup", seed=3))
        state = initial_state(scene, robot)
        state.object_pose = Pose(rot_z(0.4) @ rot_x(0.2), (0.5, 0.0, 0.3))
        dropped = drop_pose(state)
        assert dropped.translation[2] == pytest.approx(scene.rest_z)
        assert np.allclose(dropped.rotation, rot_z(0.4))


class TestExpert:
    def test_ease(self):
        assert ease(0.0) == 0.0
        assert ease(0.5) == pytest.approx(0.5)
        assert ease(1.0) == pytest.approx(1.0)

    def test_jitter_starts_at_zero(self, rng):
        jitter = smooth_jitter(20, 0.005, rng)
        assert np.array_equal(jitter[0], np.zeros(3))
        assert np.all(np.linalg.norm(jitter, axis=1) <= 0.005 + 1e-12)

    def test_left_hand_offsets_are_mirrored(self, settings):
        mirrored = offsets_for_hand(settings.offsets, "left")
        for category, offset in settings.offsets.items():
            assert mirrored[category].translation[1] == pytest.approx(-offset.translation[1])
        assert offsets_for_hand(settings.offsets, "right") is settings.offsets

    def test_end_trajectory_shape(self, robot, rng):
        """Approach, close, lift and hold phases; the first waypoint is T_m itself."""
        task = get_task("grasp_cup")
        config = ExpertConfig().without_jitter()
        pre_manip = wrist_pose(robot, robot.home_arm)
        far = Obstacle(sphere(0.02), Pose.from_translation((2.0, 2.0, 2.0)))
        end = end_trajectory(task, robot, pre_manip, far, config, rng)
        expected = 1 + config.approach_steps + config.close_steps + config.lift_steps + config.hold_steps
        assert len(end) == expected
        assert end.fingers.shape == (expected, 6)
        position_error, angle_error = pose_error(end.wrists[0], pre_manip)
        assert position_error == 0.0 and angle_error < 1e-12
        lift = end.wrists[-1].translation[2] - end.wrists[config.approach_steps].translation[2]
        assert lift == pytest.approx(task.lift)
        # nothing to touch, so the fingers never close
        assert np.allclose(end.fingers, robot.pregrasp_hand)

    @pytest.mark.slow
    def test_demonstration_starts_at_pre_manipulation_pose(self, tmp_path, robot, rig, settings):
        from ofa.dataset import read_episode, write_episode
        from ofa.env.expert import generate_demonstrations

        produced = list(generate_demonstrations(SceneConfig(task="grasp_cup"), 1, robot, rig, settings))
        assert len(produced) == 1
        episode = produced[0][2]["right"]
        write_episode(tmp_path / "ep", episode)
        loaded = read_episode(tmp_path / "ep")
        assert pose_error(loaded.steps[0].wrist_pose, episode.pre_manip_pose)[0] < 1e-5

    @pytest.mark.slow
    def test_scripted_expert_picks_one_hand(self, robot, rig, settings):
        from ofa.env.expert import run_expert, scripted_expert

        scene = build_scene(SceneConfig(task="grasp_cup", seed=4))
        both = run_expert(scene, robot, rig, settings, 4, "object_focus")
        single = scripted_expert(scene, robot, rig, settings, seed=4)
        if both is None:
            assert single is None
        else:
            assert len(single) == len(both["right"])
            assert single.hand == "right"


class TestRollout:
    def test_timeout_is_logged(self, tmp_path, robot, rig, settings, tiny_policy):
        """A policy that never grasps runs out of steps and leaves per-hand records behind."""
        params = replace(init_params(replace(tiny_policy, crop_size=rig.crop_size)), trained=True)
        scene = build_scene(SceneConfig(task="grasp_cup", seed=3))
        result = execute_rollout(
            scene, robot, rig, get_method("act"), params, replace(settings, max_steps=2), seed=1, log_dir=tmp_path
        )
        assert not result.success
        assert result.failure_reason == TIMEOUT
        assert result.steps == 2
        assert len(result.hand_steps["right"]) == 2
        assert (tmp_path / "right" / STEPS).stat().st_size == 2 * RECORD_BYTES
        summary = json.loads((tmp_path / "result.json").read_text(encoding="utf-8"))
        assert summary["failure_reason"] == "timeout"
        assert summary["task"] == "grasp_cup"
