from __future__ import annotations

from dataclasses import dataclass, fields

from ofa.camera import RigConfig, StereoRig, make_stereo_rig
from ofa.config import RunConfig
from ofa.env.contact import ContactConfig
from ofa.kinematics import RobotModel, load_robot_model
from ofa.perception import ZERO_NOISE, NoiseModel, offset_table_from_config
from ofa.planner import IKConfig, PlannerConfig


@dataclass(frozen=True)
class ExpertConfig:
    approach_steps: int = 10
    close_steps: int = 8
    lift_steps: int = 10
    hold_steps: int = 4
    squeeze: float = 0.08
    jitter_translation: float = 0.005
    jitter_rotation: float = 0.02
    max_attempts_factor: int = 3

    @classmethod
    def from_dict(cls, values: dict) -> "ExpertConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"Unknown expert keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    def without_jitter(self) -> "ExpertConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(jitter_translation=0.0, jitter_rotation=0.0)
        return ExpertConfig(**values)


@dataclass(frozen=True, eq=False)
class SimSettings:
    """Everything the expert and the rollout loop need besides the scene itself."""

    offsets: dict
    offset_frame: str = "object"
    noise: NoiseModel = ZERO_NOISE
    perception_noise: bool = True
    planner: PlannerConfig = PlannerConfig()
    ik: IKConfig = IKConfig()
    expert: ExpertConfig = ExpertConfig()
    contact: ContactConfig = ContactConfig()
    max_steps: int = 150
    aggregation_m: float = 0.1
    config_digest: str = ""

    @property
    def effective_noise(self) -> NoiseModel:
        return self.noise if self.perception_noise else ZERO_NOISE

    @property
    def step_ik(self) -> IKConfig:
        """IK used while tracking per-step targets: no random restarts, warm-started from the last configuration."""
        values = {f.name: getattr(self.ik, f.name) for f in fields(self.ik)}
        values["restarts"] = 0
        return IKConfig(**values)

    @classmethod
    def from_run_config(cls, config: RunConfig) -> "SimSettings":
        offsets = config.section("offsets")
        rollout = config.section("rollout")
        return cls(
            offsets=offset_table_from_config(offsets),
            offset_frame=offsets["frame"],
            noise=NoiseModel.from_dict(config.section("noise")),
            perception_noise=bool(rollout["perception_noise"]),
            planner=PlannerConfig.from_dict(config.section("planner")),
            ik=IKConfig.from_dict(config.section("ik")),
            expert=ExpertConfig.from_dict(config.section("expert")),
            contact=ContactConfig.from_dict(config.section("contact")),
            max_steps=int(rollout["max_steps"]),
            aggregation_m=float(config.get("policy.aggregation_m")),
            config_digest=config.digest,
        )


def rig_from_run_config(config: RunConfig) -> StereoRig:
    return make_stereo_rig(RigConfig.from_dict(config.section("rig")))


def model_from_run_config(config: RunConfig) -> RobotModel:
    return load_robot_model(config.get("robot.path"))
