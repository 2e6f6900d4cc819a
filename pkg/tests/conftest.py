import numpy as np
import pytest

from ofa.camera import RigConfig, make_stereo_rig
from ofa.config import load_config
from ofa.kinematics import load_robot_model
from ofa.policy import PolicyConfig


@pytest.fixture(scope="session")
def robot():
    """The shipped reference arm + hand."""
    return load_robot_model()


@pytest.fixture(scope="session")
def rig():
    return make_stereo_rig(RigConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def run_config():
    """Shipped defaults only, ignoring OFA_CONFIG."""
    return load_config(use_env=False)


@pytest.fixture
def tiny_policy():
    """A policy small enough for finite differences and quick training runs."""
    return PolicyConfig(
        k=3,
        z_dim=2,
        feature_dim=4,
        conv_channels=(2, 3),
        crop_size=8,
        encoder_hidden=(8,),
        decoder_hidden=(8,),
        attention_dim=4,
        attention_heads=1,
        eta=10.0,
        learning_rate=1e-3,
        batch_size=4,
        steps=5,
        seed=3,
        log_every=1,
    )


@pytest.fixture
def make_episode(robot):
    """Factory for small synthetic episodes that start at their pre-manipulation pose."""
    from ofa.dataset import Episode, Step
    from ofa.geom import Pose, apply_relative, rot_z
    from ofa.perception import CYLINDER_GRASPABLE, ObjectInstance
    from ofa.shapes import cylinder

    def factory(steps=6, size=(20, 16), seed=0, segment="object_focus", hand="right", pre_manip=None, images=True):
        image_rng = np.random.default_rng(seed)
        pre_manip = pre_manip or Pose(rot_z(0.3), (0.45, -0.02, 0.12))
        wrists = [apply_relative(pre_manip, (0.0, 0.0, 0.01 * t), (0.0, 0.0, 0.02 * t)) for t in range(steps + 1)]
        fingers = [np.clip(robot.pregrasp_hand + 0.1 * t, 0.0, 1.5) for t in range(steps + 1)]
        width, height = size
        rows = []
        for t in range(steps):
            left = right = None
            if images:
                left = image_rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
                right = image_rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
            rows.append(
                Step(
                    wrist_pose=wrists[t],
                    hand_joints=fingers[t],
                    arm_joints=robot.home_arm.copy(),
                    action_wrist_pose=wrists[t + 1],
                    action_hand_joints=fingers[t + 1],
                    timestamp=0.1 * t,
                    left_image=left,
                    right_image=right,
                )
            )
        obj = ObjectInstance("cup", CYLINDER_GRASPABLE, cylinder(0.03, 0.12), Pose.from_translation((0.5, 0.0, 0.06)))
        return Episode(
            steps=tuple(rows),
            pre_manip_pose=pre_manip,
            object=obj,
            task="grasp_cup",
            scene_config_digest="abc",
            hand=hand,
            segment=segment,
            seed=seed,
        )

    return factory
