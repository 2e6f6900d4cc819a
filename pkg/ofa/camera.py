"""Stereo pinhole camera model and hand-focus crop extraction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ofa.geom import Pose, inverse
from ofa.kinematics import RobotModel, hand_spheres, wrist_pose

logger = logging.getLogger(__name__)

# Points closer than this to the image plane are treated as behind the camera
MIN_DEPTH = 1e-6


class NoHandVisibleError(ValueError):
    """No projected hand point falls in front of the camera and inside the image."""


class EmptyRectError(ValueError):
    pass


class ImageShapeError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"Principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image")


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: CameraIntrinsics
    extrinsic: Pose  # ᵉT_a: arm-base (world) frame to camera frame

    @property
    def center(self) -> np.ndarray:
        """Camera position in the world frame."""
        return inverse(self.extrinsic).translation


@dataclass(frozen=True, eq=False)
class StereoRig:
    left: Camera
    right: Camera
    crop_size: int = 128
    crop_scale: float = 2.0
    min_crop: int = 16

    def cameras(self) -> tuple:
        return (self.left, self.right)


@dataclass(frozen=True)
class PixelRect:
    """Inclusive integer pixel bounds."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    def contains(self, other: "PixelRect") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )

    def to_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class RigConfig:
    width: int = 640
    height: int = 480
    hfov_deg: float = 110.0
    vfov_deg: float = 70.0
    eye: tuple = (-0.1, 0.22, 0.85)
    target: tuple = (0.5, 0.1, 0.0)
    up: tuple = (0.0, 0.0, 1.0)
    baseline: float = 0.12
    crop_size: int = 128
    crop_scale: float = 2.0
    min_crop: int = 16

    @classmethod
    def from_dict(cls, values: dict) -> "RigConfig":
        values = dict(values)
        for key in ("eye", "target", "up"):
            if key in values:
                values[key] = tuple(float(v) for v in values[key])
        return cls(**values)


# Rig construction


def intrinsics_from_fov(width: int, height: int, hfov_deg: float, vfov_deg: float) -> CameraIntrinsics:
    """fx = (width/2)/tan(hfov/2), fy = (height/2)/tan(vfov/2), principal point at the image center."""
    fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    fy = (height / 2.0) / math.tan(math.radians(vfov_deg) / 2.0)
    return CameraIntrinsics(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def look_at_extrinsic(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("look_at_extrinsic: up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    camera_to_world = np.column_stack([right, down, forward])
    rotation = camera_to_world.T
    return Pose(rotation, -(rotation @ eye))


def make_stereo_rig(config: RigConfig) -> StereoRig:
    """Two identical cameras separated by ``baseline`` along the left camera's x axis."""
    intrinsics = intrinsics_from_fov(config.width, config.height, config.hfov_deg, config.vfov_deg)
    left = look_at_extrinsic(config.eye, config.target, config.up)
    right_axis = left.rotation[0]
    shift = config.baseline * right_axis
    right = look_at_extrinsic(np.asarray(config.eye) + shift, np.asarray(config.target) + shift, config.up)
    return StereoRig(
        left=Camera(intrinsics, left),
        right=Camera(intrinsics, right),
        crop_size=int(config.crop_size),
        crop_scale=float(config.crop_scale),
        min_crop=int(config.min_crop),
    )


# Projection


def project_points(intrinsics: CameraIntrinsics, extrinsic: Pose, world_points) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of world points.

    Returns:
        (pixels, in_front): (N, 2) pixel coordinates and a mask of points with depth > 1e-6.
        Pixels of points behind the camera are NaN.
    """
    cam = extrinsic.transform_points(world_points)
    z = cam[:, 2]
    in_front = z > MIN_DEPTH
    pixels = np.full((len(cam), 2), np.nan)
    safe = np.where(in_front, z, 1.0)
    pixels[:, 0] = np.where(in_front, intrinsics.fx * cam[:, 0] / safe + intrinsics.cx, np.nan)
    pixels[:, 1] = np.where(in_front, intrinsics.fy * cam[:, 1] / safe + intrinsics.cy, np.nan)
    return pixels, in_front


def tight_rect(pixels) -> PixelRect:
    """Smallest integer rect enclosing the finite pixels."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    pixels = pixels[np.all(np.isfinite(pixels), axis=1)]
    if len(pixels) == 0:
        raise NoHandVisibleError("No visible projected points")
    lo = np.floor(pixels.min(axis=0)).astype(int)
    hi = np.ceil(pixels.max(axis=0)).astype(int)
    return PixelRect(int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1]))


def clamp_rect(rect: PixelRect, width: int, height: int) -> PixelRect:
    clamped = PixelRect(
        max(rect.x_min, 0),
        max(rect.y_min, 0),
        min(rect.x_max, width - 1),
        min(rect.y_max, height - 1),
    )
    if clamped.x_min > clamped.x_max or clamped.y_min > clamped.y_max:
        raise NoHandVisibleError(f"Rect {rect.to_list()} lies outside the {width}x{height} image")
    return clamped


def _scale_axis(lo: int, hi: int, scale: float, min_size: int) -> tuple[int, int]:
    center = 0.5 * (lo + hi)
    # Degenerate (zero-extent) axes take the minimum crop size before enlargement
    half = 0.5 * (hi - lo) if hi > lo else 0.5 * min_size
    half *= scale
    return int(math.floor(center - half)), int(math.ceil(center + half))


def hand_focus_rect(
    projected_pixels, width: int, height: int, scale: float = 2.0, min_crop: int = 16
) -> PixelRect:
    """Enclosing rect of the projected hand, enlarged ``scale``x per axis about its center, clamped.

    An axis of zero extent is widened to ``min_crop`` before enlargement.

    Raises:
        NoHandVisibleError: when no point is visible or the enlarged rect misses the image
    """
    tight = tight_rect(projected_pixels)
    x_min, x_max = _scale_axis(tight.x_min, tight.x_max, scale, min_crop)
    y_min, y_max = _scale_axis(tight.y_min, tight.y_max, scale, min_crop)
    return clamp_rect(PixelRect(x_min, y_min, x_max, y_max), width, height)


# Images


def check_image(image: np.ndarray, width: int = None, height: int = None) -> np.ndarray:
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        shape = getattr(image, "shape", None)
        raise ImageShapeError(f"Expected an (H, W, 3) uint8 image, got shape {shape}")
    if width is not None and height is not None and image.shape[:2] != (height, width):
        raise ImageShapeError(f"Expected a {width}x{height} image, got {image.shape[1]}x{image.shape[0]}")
    return image


def _sample_grid(n_src: int, n_out: int):
    pos = np.linspace(0.0, n_src - 1.0, n_out) if n_out > 1 else np.zeros(1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, pos - lo


def crop_resize(image: np.ndarray, rect: PixelRect, target=128) -> np.ndarray:
    """Bilinear (align-corners) resample of the rect region to ``target`` pixels.

    Only pixels inside ``rect`` are read.

    Args:
        target: square size, or (width, height)
    """
    check_image(image)
    out_w, out_h = (target, target) if isinstance(target, (int, np.integer)) else target
    if rect.width <= 0 or rect.height <= 0:
        raise EmptyRectError(f"Empty rect {rect.to_list()}")
    height, width = image.shape[:2]
    if rect.x_min < 0 or rect.y_min < 0 or rect.x_max >= width or rect.y_max >= height:
        raise EmptyRectError(f"Rect {rect.to_list()} exceeds the {width}x{height} image")
    sub = image[rect.y_min : rect.y_max + 1, rect.x_min : rect.x_max + 1].astype(np.float64)
    y0, y1, wy = _sample_grid(sub.shape[0], out_h)
    x0, x1, wx = _sample_grid(sub.shape[1], out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = sub[y0][:, x0] * (1.0 - wx) + sub[y0][:, x1] * wx
    bottom = sub[y1][:, x0] * (1.0 - wx) + sub[y1][:, x1] * wx
    out = top * (1.0 - wy) + bottom * wy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_full_frame(image: np.ndarray, target=128) -> np.ndarray:
    """Whole-frame resample used when hand-focus cropping is disabled."""
    check_image(image)
    height, width = image.shape[:2]
    return crop_resize(image, PixelRect(0, 0, width - 1, height - 1), target)


# Hand focus


def hand_rects(rig: StereoRig, model: RobotModel, q, j) -> tuple[PixelRect, PixelRect]:
    """Enlarged hand rect in each view, from the hand sphere centers."""
    centers, _, _ = hand_spheres(model, wrist_pose(model, q), j)
    rects = []
    for camera in rig.cameras():
        pixels, in_front = project_points(camera.intrinsics, camera.extrinsic, centers)
        if not in_front.any():
            raise NoHandVisibleError("hand_rects: hand is behind the camera")
        rects.append(
            hand_focus_rect(
                pixels[in_front],
                camera.intrinsics.width,
                camera.intrinsics.height,
                scale=rig.crop_scale,
                min_crop=rig.min_crop,
            )
        )
    return rects[0], rects[1]


def extract_hand_focus(rig: StereoRig, model: RobotModel, q, j, left_image, right_image):
    """Hand-focus crops for both views.

    Returns:
        (left_crop, right_crop, left_rect, right_rect)
    """
    left_rect, right_rect = hand_rects(rig, model, q, j)
    for image, camera in zip((left_image, right_image), rig.cameras()):
        check_image(image, camera.intrinsics.width, camera.intrinsics.height)
    return (
        crop_resize(left_image, left_rect, rig.crop_size),
        crop_resize(right_image, right_rect, rig.crop_size),
        left_rect,
        right_rect,
    )
