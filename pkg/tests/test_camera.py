import numpy as np
import pytest

from ofa.camera import (
    CameraIntrinsics,
    EmptyRectError,
    ImageShapeError,
    NoHandVisibleError,
    PixelRect,
    RigConfig,
    check_image,
    crop_resize,
    extract_hand_focus,
    hand_focus_rect,
    hand_rects,
    intrinsics_from_fov,
    look_at_extrinsic,
    make_stereo_rig,
    project_points,
    resize_full_frame,
)
from ofa.geom import Pose


@pytest.fixture
def small_intrinsics():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)


class TestIntrinsics:
    def test_from_fov(self):
        """A 90° field of view puts the focal length at half the image size."""
        k = intrinsics_from_fov(640, 480, 90.0, 90.0)
        assert k.fx == pytest.approx(320.0)
        assert k.fy == pytest.approx(240.0)
        assert (k.cx, k.cy) == (320.0, 240.0)

    def test_rejects_non_positive_focal_length(self):
        """Zero or negative focal lengths are refused."""
        with pytest.raises(ValueError, match="Focal lengths"):
            CameraIntrinsics(fx=0.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)

    def test_rejects_principal_point_outside_image(self):
        with pytest.raises(ValueError, match="Principal point"):
            CameraIntrinsics(fx=100.0, fy=100.0, cx=200.0, cy=64.0, width=128, height=128)


class TestProjection:
    def test_known_pixel(self, small_intrinsics):
        """(0.1, 0, 1) under an identity extrinsic lands at (74, 64)."""
        pixels, in_front = project_points(small_intrinsics, Pose.identity(), [[0.1, 0.0, 1.0]])
        assert in_front.tolist() == [True]
        assert np.allclose(pixels, [[74.0, 64.0]])

    def test_behind_camera_is_flagged(self, small_intrinsics):
        """Points with non-positive depth are masked out and their pixels are NaN."""
        pixels, in_front = project_points(small_intrinsics, Pose.identity(), [[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]])
        assert in_front.tolist() == [False, False]
        assert np.all(np.isnan(pixels))

    def test_look_at_projects_target_to_principal_point(self):
        """The look-at target projects onto the image center."""
        k = intrinsics_from_fov(640, 480, 90.0, 60.0)
        extrinsic = look_at_extrinsic((0.0, 0.0, 1.0), (0.5, 0.2, 0.0))
        pixels, in_front = project_points(k, extrinsic, [[0.5, 0.2, 0.0]])
        assert in_front[0]
        assert np.allclose(pixels[0], (320.0, 240.0), atol=1e-9)
        assert extrinsic.is_valid()

    def test_look_at_rejects_parallel_up(self):
        with pytest.raises(ValueError, match="parallel"):
            look_at_extrinsic((0.0, 0.0, 1.0), (0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0))

    def test_stereo_baseline(self):
        """The two camera centers are one baseline apart."""
        rig = make_stereo_rig(RigConfig(baseline=0.12))
        assert np.linalg.norm(rig.right.center - rig.left.center) == pytest.approx(0.12)
        assert np.allclose(rig.left.center, RigConfig().eye)


class TestHandFocusRect:
    def test_known_value(self):
        """Points (10,10),(30,20) enlarged 2x per axis give (0,5)-(40,25)."""
        rect = hand_focus_rect([[10.0, 10.0], [30.0, 20.0]], 640, 480)
        assert rect == PixelRect(0, 5, 40, 25)

    def test_clamped_to_image(self):
        """A rect hanging over the border is clamped inside the image."""
        rect = hand_focus_rect([[0.0, 0.0], [20.0, 20.0]], 64, 64)
        assert rect == PixelRect(0, 0, 30, 30)

    def test_contains_tight_rect(self, rng):
        """The enlarged rect always contains every in-image projected point."""
        for _ in range(100):
            pts = rng.uniform(50.0, 400.0, size=(12, 2))
            rect = hand_focus_rect(pts, 640, 480)
            assert rect.x_min <= np.floor(pts[:, 0].min()) and rect.x_max >= np.ceil(pts[:, 0].max())
            assert rect.y_min <= np.floor(pts[:, 1].min()) and rect.y_max >= np.ceil(pts[:, 1].max())

    def test_single_point_uses_min_crop(self):
        """A zero-extent rect is widened to min_crop before enlargement."""
        rect = hand_focus_rect([[100.0, 100.0]], 640, 480, scale=2.0, min_crop=16)
        assert rect == PixelRect(84, 84, 116, 116)

    def test_no_points_visible(self):
        """Only NaN pixels means the hand is not visible."""
        with pytest.raises(NoHandVisibleError):
            hand_focus_rect([[np.nan, np.nan]], 640, 480)

    def test_outside_image(self):
        """A hand projected entirely off-image is not visible."""
        with pytest.raises(NoHandVisibleError, match="outside"):
            hand_focus_rect([[1000.0, 1000.0], [1010.0, 1010.0]], 640, 480)


class TestCropResize:
    def test_output_shape(self):
        """Crops are resampled to the requested (width, height)."""
        image = np.zeros((48, 64, 3), dtype=np.uint8)
        assert crop_resize(image, PixelRect(0, 0, 9, 9), 32).shape == (32, 32, 3)
        assert crop_resize(image, PixelRect(0, 0, 9, 9), (20, 10)).shape == (10, 20, 3)

    def test_reads_only_inside_rect(self):
        """Pixels outside the rect never leak into the crop."""
        image = np.full((64, 64, 3), 255, dtype=np.uint8)
        image[10:30, 20:40] = 7
        crop = crop_resize(image, PixelRect(20, 10, 39, 29), 128)
        assert np.all(crop == 7)

    def test_corners_are_preserved(self):
        """Align-corners sampling keeps the rect's corner pixels."""
        image = np.zeros((16, 16, 3), dtype=np.uint8)
        image[2, 3] = (10, 20, 30)
        image[9, 12] = (40, 50, 60)
        crop = crop_resize(image, PixelRect(3, 2, 12, 9), 25)
        assert crop[0, 0].tolist() == [10, 20, 30]
        assert crop[-1, -1].tolist() == [40, 50, 60]

    def test_rect_outside_image(self):
        image = np.zeros((16, 16, 3), dtype=np.uint8)
        with pytest.raises(EmptyRectError):
            crop_resize(image, PixelRect(10, 10, 20, 12), 8)

    def test_full_frame(self):
        image = np.full((48, 64, 3), 3, dtype=np.uint8)
        assert np.all(resize_full_frame(image, 16) == 3)

    def test_image_type_is_checked(self):
        """Only (H, W, 3) uint8 arrays are images."""
        with pytest.raises(ImageShapeError):
            check_image(np.zeros((8, 8), dtype=np.uint8))
        with pytest.raises(ImageShapeError):
            check_image(np.zeros((8, 8, 3), dtype=np.float32))
        with pytest.raises(ImageShapeError, match="Expected a 16x8 image"):
            check_image(np.zeros((8, 8, 3), dtype=np.uint8), width=16, height=8)


class TestHandFocus:
    def test_home_pose_is_visible(self, rig, robot):
        """At the home configuration the hand is in both views and the crops have the configured size."""
        height, width = rig.left.intrinsics.height, rig.left.intrinsics.width
        image = np.zeros((height, width, 3), dtype=np.uint8)
        left, right, left_rect, right_rect = extract_hand_focus(
            rig, robot, robot.home_arm, robot.pregrasp_hand, image, image
        )
        assert left.shape == right.shape == (rig.crop_size, rig.crop_size, 3)
        full = PixelRect(0, 0, width - 1, height - 1)
        assert full.contains(left_rect) and full.contains(right_rect)

    def test_rects_match_hand_rects(self, rig, robot):
        """extract_hand_focus crops exactly the rects hand_rects reports."""
        height, width = rig.left.intrinsics.height, rig.left.intrinsics.width
        image = np.zeros((height, width, 3), dtype=np.uint8)
        _, _, left_rect, right_rect = extract_hand_focus(
            rig, robot, robot.home_arm, robot.pregrasp_hand, image, image
        )
        assert (left_rect, right_rect) == hand_rects(rig, robot, robot.home_arm, robot.pregrasp_hand)

    def test_wrong_image_size(self, rig, robot):
        """Frames must match the camera resolution."""
        image = np.zeros((10, 10, 3), dtype=np.uint8)
        with pytest.raises(ImageShapeError):
            extract_hand_focus(rig, robot, robot.home_arm, robot.pregrasp_hand, image, image)
