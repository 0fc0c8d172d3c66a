"""Dexterous-hand teleoperation toolkit: retargeting, timestamp sync, simulated collection, episode storage."""

from .collection import EnvConfig, JitterModel, RecorderDescriptor, SimulatedEnv, load_env_config, run_episode
from .kinematics import KinematicHandModel, forward_keypoints, keypoint_jacobian, load_model
from .retarget import (
    CalibrationProfile,
    HumanHandFrame,
    RetargetConfig,
    calibrate,
    solve_retarget,
    total_cost,
    transform_keypoints,
)
from .store import read_episode, validate_dataset, verify_episode, write_episode
from .timesync import SyncPolicy, validate

__all__ = [
    "CalibrationProfile",
    "EnvConfig",
    "HumanHandFrame",
    "JitterModel",
    "KinematicHandModel",
    "RecorderDescriptor",
    "RetargetConfig",
    "SimulatedEnv",
    "SyncPolicy",
    "calibrate",
    "forward_keypoints",
    "keypoint_jacobian",
    "load_env_config",
    "load_model",
    "read_episode",
    "run_episode",
    "solve_retarget",
    "total_cost",
    "transform_keypoints",
    "validate",
    "validate_dataset",
    "verify_episode",
    "write_episode",
]
