"""Demonstration episodes, the relative encodings and the training-sample stream.

An episode directory holds:

    manifest.json           task, hand, segment, object, T_m, step count, digests, crop rects
    steps.bin               little-endian float32 records, one per step (layout below)
    frames/NNNN_left.png    full stereo frames
    frames/NNNN_right.png
    frames/mask_left.png    object mask seen by perception (optional, 1-bit)

steps.bin record (43 floats): wrist pose (12), arm joints (6), hand joints (6),
action wrist pose (12), action fingers (6), timestamp (1). Poses use the
12-float convention of ``Pose.to_floats``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from ofa.camera import NoHandVisibleError, StereoRig, extract_hand_focus, resize_full_frame
from ofa.digest import file_digest
from ofa.geom import Pose, apply_relative, project_to_rotation, relative_pose
from ofa.imageio import read_mask, read_png, write_mask, write_png
from ofa.kinematics import RobotModel
from ofa.perception import ObjectInstance
from ofa.planner import IKConfig
from ofa.resources import get_current_version
from ofa.shapes import Shape

logger = logging.getLogger(__name__)

# Record layout

RECORD_FLOATS = 43
RECORD_BYTES = RECORD_FLOATS * 4
RECORD_DTYPE = np.dtype("<f4")
_WRIST, _ARM, _HAND, _ACTION_POSE, _ACTION_FINGERS, _TIME = (
    slice(0, 12),
    slice(12, 18),
    slice(18, 24),
    slice(24, 36),
    slice(36, 42),
    42,
)

MANIFEST = "manifest.json"
STEPS = "steps.bin"
FRAMES = "frames"
INDEX = "index.json"
FORMAT_VERSION = 1

SEGMENTS = ("object_focus", "full")
HANDS = ("right", "left")
ACTION_DIM = 12
PROPRIO_DIM = 12

# The first wrist pose reaches T_m within the IK tolerance, plus float32 round-off
_STORED_POSITION_TOL = IKConfig.position_tolerance + 1e-5
_STORED_ORIENTATION_TOL = IKConfig.orientation_tolerance + 1e-5


class EpisodeFormatError(ValueError):
    """A malformed episode file; ``path`` and byte ``offset`` locate the problem."""

    def __init__(self, message: str, path, offset: int = 0):
        super().__init__(f"{path} @ {offset}: {message}")
        self.path = str(path)
        self.offset = offset


class EmptySampleSetError(ValueError):
    pass


# Types


@dataclass(frozen=True, eq=False)
class Step:
    wrist_pose: Pose
    hand_joints: np.ndarray
    arm_joints: np.ndarray
    action_wrist_pose: Pose
    action_hand_joints: np.ndarray
    timestamp: float
    left_image: Optional[np.ndarray] = None
    right_image: Optional[np.ndarray] = None
    frame_paths: Optional[tuple] = None

    def images(self) -> tuple[np.ndarray, np.ndarray]:
        """Full stereo frames, read from disk when the step was loaded lazily."""
        if self.left_image is not None and self.right_image is not None:
            return self.left_image, self.right_image
        if self.frame_paths is None:
            raise ValueError("Step has neither images nor frame paths")
        return read_png(self.frame_paths[0]), read_png(self.frame_paths[1])

    def to_record(self) -> np.ndarray:
        record = np.empty(RECORD_FLOATS, dtype=np.float64)
        record[_WRIST] = self.wrist_pose.to_floats()
        record[_ARM] = self.arm_joints
        record[_HAND] = self.hand_joints
        record[_ACTION_POSE] = self.action_wrist_pose.to_floats()
        record[_ACTION_FINGERS] = self.action_hand_joints
        record[_TIME] = self.timestamp
        return record.astype(RECORD_DTYPE)


def _stored_pose(values) -> Pose:
    values = np.asarray(values, dtype=np.float64)
    return Pose(project_to_rotation(values[:9].reshape(3, 3)), values[9:12])


def step_from_record(record: np.ndarray, frame_paths: Optional[tuple] = None) -> Step:
    record = np.asarray(record, dtype=np.float64)
    return Step(
        wrist_pose=_stored_pose(record[_WRIST]),
        hand_joints=record[_HAND].copy(),
        arm_joints=record[_ARM].copy(),
        action_wrist_pose=_stored_pose(record[_ACTION_POSE]),
        action_hand_joints=record[_ACTION_FINGERS].copy(),
        timestamp=float(record[_TIME]),
        frame_paths=frame_paths,
    )


@dataclass(frozen=True, eq=False)
class Episode:
    steps: tuple
    pre_manip_pose: Pose
    object: ObjectInstance
    task: str
    scene_config_digest: str = ""
    hand: str = "right"
    segment: str = "object_focus"
    arm_base: Pose = field(default_factory=Pose.identity)
    seed: int = 0
    crop_rects: Optional[tuple] = None  # per step: (left rect list, right rect list)
    object_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) < 2:
            raise ValueError(f"An episode needs at least 2 steps, got {len(self.steps)}")
        if self.hand not in HANDS:
            raise ValueError(f"Unknown hand {self.hand!r}")
        if self.segment not in SEGMENTS:
            raise ValueError(f"Unknown segment {self.segment!r}")

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True, eq=False)
class ActionChunk:
    """k actions, each 3 translation + 3 axis-angle relative to a reference pose, then 6 finger angles."""

    values: np.ndarray  # (k, 12)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != ACTION_DIM:
            raise ValueError(f"An action chunk must be (k, {ACTION_DIM}), got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def k(self) -> int:
        return len(self.values)

    @property
    def delta_p(self) -> np.ndarray:
        return self.values[:, 0:3]

    @property
    def delta_omega(self) -> np.ndarray:
        return self.values[:, 3:6]

    @property
    def fingers(self) -> np.ndarray:
        return self.values[:, 6:12]

    def wrist_poses(self, reference: Pose) -> list:
        """Absolute wrist targets recovered against ``reference``."""
        return [apply_relative(reference, row[0:3], row[3:6]) for row in self.values]


@dataclass(frozen=True, eq=False)
class Observation:
    left: np.ndarray  # crop or resized frame, (S, S, 3) uint8
    right: np.ndarray
    proprio: np.ndarray  # Δp (3), Δω (3), J_h (6)


@dataclass(frozen=True, eq=False)
class TrainingSample:
    observation: Observation
    target_chunk: ActionChunk


@dataclass(frozen=True)
class EncodingOptions:
    """``relative``: encode against T_m (else the arm base). ``hand_focus``: crop the hand (else resize frames)."""

    relative: bool = True
    hand_focus: bool = True


@dataclass(frozen=True)
class MethodSpec:
    name: str
    encoding: EncodingOptions
    arrival: bool  # plan to T_m before the policy takes over
    segment: str


METHODS = {
    "ofa": MethodSpec("ofa", EncodingOptions(True, True), True, "object_focus"),
    "ofa_wo_rel": MethodSpec("ofa_wo_rel", EncodingOptions(False, True), True, "object_focus"),
    "ofa_wo_of": MethodSpec("ofa_wo_of", EncodingOptions(True, False), True, "object_focus"),
    "ofa_wo_rel_of": MethodSpec("ofa_wo_rel_of", EncodingOptions(False, False), True, "object_focus"),
    "act": MethodSpec("act", EncodingOptions(False, False), False, "full"),
}


def get_method(name: str) -> MethodSpec:
    if name not in METHODS:
        raise ValueError(f"Unknown method {name!r}; expected one of {', '.join(METHODS)}")
    return METHODS[name]


# Encodings


def encoding_reference(episode: Episode, options: EncodingOptions) -> Pose:
    return episode.pre_manip_pose if options.relative else episode.arm_base


def encode_relative_proprio(step: Step, pre_manip: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Δp, Δω, J_h) of the step's wrist pose relative to ``pre_manip``."""
    delta_p, delta_omega = relative_pose(pre_manip, step.wrist_pose)
    return delta_p, delta_omega, np.array(step.hand_joints, dtype=np.float64)


def proprio_vector(step: Step, reference: Pose) -> np.ndarray:
    return np.concatenate(encode_relative_proprio(step, reference))


def encode_relative_chunk(episode: Episode, t: int, k: int, reference: Optional[Pose] = None) -> ActionChunk:
    """Actions t .. t+k-1 relative to ``reference`` (T_m by default); the final action repeats past the end."""
    if not 0 <= t < len(episode):
        raise IndexError(f"encode_relative_chunk: step {t} outside an episode of {len(episode)} steps")
    reference = episode.pre_manip_pose if reference is None else reference
    last = len(episode) - 1
    rows = []
    for i in range(k):
        step = episode.steps[min(t + i, last)]
        delta_p, delta_omega = relative_pose(reference, step.action_wrist_pose)
        rows.append(np.concatenate([delta_p, delta_omega, step.action_hand_joints]))
    return ActionChunk(np.array(rows))


def observation_images(
    rig: StereoRig, model: RobotModel, q, j, left: np.ndarray, right: np.ndarray, hand_focus: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Policy images: hand-focus crops or resized full frames, both at ``rig.crop_size``."""
    if hand_focus:
        left_crop, right_crop, _, _ = extract_hand_focus(rig, model, q, j, left, right)
        return left_crop, right_crop
    return resize_full_frame(left, rig.crop_size), resize_full_frame(right, rig.crop_size)


def episode_model(model: RobotModel, episode: Episode) -> RobotModel:
    """The robot model placed at the episode's arm base."""
    if np.array_equal(model.base.matrix(), episode.arm_base.matrix()):
        return model
    return model.with_base(episode.arm_base)


def build_samples(
    episodes: Iterable[Episode],
    k: int,
    rig: StereoRig,
    model: RobotModel,
    options: EncodingOptions = EncodingOptions(),
) -> Iterator[TrainingSample]:
    """One sample per step per episode; steps whose hand is not visible are skipped."""
    produced = skipped = 0
    for episode in episodes:
        arm = episode_model(model, episode)
        reference = encoding_reference(episode, options)
        for t, step in enumerate(episode.steps):
            left, right = step.images()
            try:
                left_image, right_image = observation_images(
                    rig, arm, step.arm_joints, step.hand_joints, left, right, options.hand_focus
                )
            except NoHandVisibleError:
                skipped += 1
                continue
            produced += 1
            yield TrainingSample(
                observation=Observation(left_image, right_image, proprio_vector(step, reference)),
                target_chunk=encode_relative_chunk(episode, t, k, reference),
            )
    if skipped:
        logger.warning(f"build_samples: skipped {skipped} steps with no visible hand")
    logger.info(f"build_samples: {produced} samples")


def batch_indices(count: int, batch_size: int, seed: int) -> np.ndarray:
    if count == 0:
        raise EmptySampleSetError("sample_batch: no samples to draw from")
    return np.random.default_rng(seed).integers(0, count, size=batch_size)


def sample_batch(samples, batch_size: int, seed: int) -> list:
    """Uniform draw with replacement."""
    return [samples[int(i)] for i in batch_indices(len(samples), batch_size, seed)]


def collate(batch) -> dict:
    """Stack a list of samples into arrays: left, right (B, S, S, 3), proprio (B, 12), chunk (B, k, 12)."""
    return {
        "left": np.stack([s.observation.left for s in batch]),
        "right": np.stack([s.observation.right for s in batch]),
        "proprio": np.stack([s.observation.proprio for s in batch]),
        "chunk": np.stack([s.target_chunk.values for s in batch]),
    }


# Episode I/O


def _object_to_dict(obj: ObjectInstance) -> dict:
    return {
        "name": obj.name,
        "category": obj.category,
        "shape": obj.shape.to_dict(),
        "pose": obj.true_pose.to_floats().tolist(),
    }


def _object_from_dict(values: dict) -> ObjectInstance:
    return ObjectInstance(
        values["name"], values["category"], Shape.from_dict(values["shape"]), Pose.from_floats(values["pose"])
    )


def frame_names(t: int) -> tuple[str, str]:
    return f"{t:04d}_left.png", f"{t:04d}_right.png"


def write_episode(directory, episode: Episode) -> dict:
    """Write an episode directory and return its manifest."""
    directory = Path(directory)
    frames = directory / FRAMES
    frames.mkdir(parents=True, exist_ok=True)
    records = np.stack([step.to_record() for step in episode.steps])
    steps_path = directory / STEPS
    steps_path.write_bytes(records.tobytes())
    for t, step in enumerate(episode.steps):
        left, right = step.images()
        left_name, right_name = frame_names(t)
        write_png(frames / left_name, left)
        write_png(frames / right_name, right)
    if episode.object_mask is not None:
        write_mask(frames / "mask_left.png", episode.object_mask)
    manifest = {
        "version": get_current_version(),
        "format": FORMAT_VERSION,
        "task": episode.task,
        "hand": episode.hand,
        "segment": episode.segment,
        "object": _object_to_dict(episode.object),
        "pre_manip_pose": episode.pre_manip_pose.to_floats().tolist(),
        "arm_base": episode.arm_base.to_floats().tolist(),
        "steps": len(episode),
        "crop_rects": [list(map(list, r)) for r in episode.crop_rects] if episode.crop_rects else None,
        "config_digest": episode.scene_config_digest,
        "seed": int(episode.seed),
        "steps_digest": file_digest(steps_path),
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    with open(directory / MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.debug(f"write_episode: {directory} ({len(episode)} steps)")
    return manifest


def _read_manifest(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise EpisodeFormatError("manifest missing", path, 0)
    except json.JSONDecodeError as e:
        raise EpisodeFormatError(f"line {e.lineno} column {e.colno}: {e.msg}", path, e.pos)


def read_records(path, expected_steps: Optional[int] = None) -> np.ndarray:
    """Decode steps.bin into an (N, 43) float64 array, validating length and finiteness."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise EpisodeFormatError("steps file missing", path, 0)
    if len(raw) % RECORD_BYTES:
        raise EpisodeFormatError(
            f"size {len(raw)} is not a multiple of the {RECORD_BYTES}-byte record",
            path,
            len(raw) // RECORD_BYTES * RECORD_BYTES,
        )
    records = np.frombuffer(raw, dtype=RECORD_DTYPE).reshape(-1, RECORD_FLOATS).astype(np.float64)
    if expected_steps is not None and len(records) != expected_steps:
        raise EpisodeFormatError(f"manifest lists {expected_steps} steps, file has {len(records)}", path, len(raw))
    bad = np.flatnonzero(~np.isfinite(records.reshape(-1)))
    if len(bad):
        raise EpisodeFormatError("non-finite value", path, int(bad[0]) * 4)
    return records


def read_episode(directory, load_frames: bool = False) -> Episode:
    """Load an episode; frames are read lazily unless ``load_frames`` is set.

    Raises:
        EpisodeFormatError: malformed manifest or steps file, with file and byte offset
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    manifest = _read_manifest(manifest_path)
    try:
        expected = int(manifest["steps"])
        obj = _object_from_dict(manifest["object"])
        pre_manip = Pose.from_floats(manifest["pre_manip_pose"])
        arm_base = Pose.from_floats(manifest["arm_base"])
        task, hand, segment = manifest["task"], manifest["hand"], manifest["segment"]
    except (KeyError, TypeError, ValueError) as e:
        raise EpisodeFormatError(f"bad manifest field: {e}", manifest_path, 0)
    records = read_records(directory / STEPS, expected)
    steps = []
    for t, record in enumerate(records):
        paths = tuple(str(directory / FRAMES / name) for name in frame_names(t))
        step = step_from_record(record, paths)
        if load_frames:
            left, right = step.images()
            step = replace(step, left_image=left, right_image=right)
        steps.append(step)
    mask_path = directory / FRAMES / "mask_left.png"
    mask = read_mask(mask_path) if mask_path.exists() else None
    if segment == "object_focus" and steps:
        first = steps[0].wrist_pose
        position, orientation = relative_pose(pre_manip, first)
        if np.linalg.norm(position) > _STORED_POSITION_TOL or np.linalg.norm(orientation) > _STORED_ORIENTATION_TOL:
            raise EpisodeFormatError("first step does not start at the pre-manipulation pose", directory / STEPS, 0)
    rects = manifest.get("crop_rects")
    try:
        return Episode(
            steps=tuple(steps),
            pre_manip_pose=pre_manip,
            object=obj,
            task=task,
            scene_config_digest=manifest.get("config_digest", ""),
            hand=hand,
            segment=segment,
            arm_base=arm_base,
            seed=int(manifest.get("seed", 0)),
            crop_rects=tuple(tuple(tuple(r) for r in pair) for pair in rects) if rects else None,
            object_mask=mask,
        )
    except ValueError as e:
        raise EpisodeFormatError(str(e), manifest_path, 0)


# Dataset root


def write_index(root, entries: list, config_digest: str = "", seed: Optional[int] = None) -> None:
    """``entries``: dicts with at least ``path`` (relative to root) and ``steps``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = {
        "version": get_current_version(),
        "episodes": sorted(entries, key=lambda e: e["path"]),
        "total_steps": int(sum(e["steps"] for e in entries)),
        "config_digest": config_digest,
        "seed": seed,
    }
    with open(root / INDEX, "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True)


def read_index(root) -> dict:
    path = Path(root) / INDEX
    if not path.exists():
        raise EpisodeFormatError("dataset index missing", path, 0)
    return _read_manifest(path)


def iter_episodes(root, hand: Optional[str] = None, limit: Optional[int] = None) -> Iterator[Episode]:
    """Episodes listed in the root index, in index order, optionally one hand only."""
    root = Path(root)
    count = 0
    for entry in read_index(root)["episodes"]:
        if hand is not None and entry.get("hand", "right") != hand:
            continue
        if limit is not None and count >= limit:
            return
        count += 1
        yield read_episode(os.path.join(root, entry["path"]))
