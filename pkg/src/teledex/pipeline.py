"""End-to-end simulated collection: operator -> retarget/direct map -> env -> store."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .collection import EnvConfig, Observation, SimulatedEnv, run_episode
from .kinematics import KinematicHandModel, clamp_to_limits, forward_keypoints, load_model
from .retarget import (
    CalibrationProfile,
    HumanHandFrame,
    JointMapping,
    MappingEntry,
    NonFiniteInputError,
    RetargetConfig,
    calibrate,
    direct_joint_map,
    solve_retarget,
)
from .store import SessionMetadata, summarize, write_episode
from .timesync import SimulatedClock

GRASP_PERIOD = 4.0


class SyntheticOperator:
    """Human hand skeleton flexing sinusoidally between an open and a closed pose.

    Fingers are phase-shifted so thumb/finger distances sweep through pinch
    range, which exercises the coupling weights.
    """

    def __init__(self, human: KinematicHandModel, seed: int | None = None, period: float = GRASP_PERIOD):
        self.human = human
        self.period = period
        self.open = clamp_to_limits(human, np.full(human.dof, 0.05))
        closed = 0.75 * human.upper
        thumb = human.finger(0)
        closed[thumb.dof_offset] = min(1.1, human.upper[thumb.dof_offset])
        self.closed = clamp_to_limits(human, closed)
        self._finger_of_joint = np.concatenate([np.full(f.dof, f.index) for f in human.fingers])
        phase = self._finger_of_joint * (2.0 * math.pi / 10.0)
        if seed is None:
            self.phase, self.amplitude = phase, 1.0
        else:
            rng = np.random.default_rng(seed)
            self.phase = phase + rng.uniform(-0.3, 0.3, size=5)[self._finger_of_joint]
            self.amplitude = float(rng.uniform(0.8, 1.0))

    def joint_angles(self, t: float) -> np.ndarray:
        s = 0.5 * (1.0 - np.cos(2.0 * math.pi * t / self.period + self.phase))
        return self.open + (self.closed - self.open) * self.amplitude * s

    def frame(self, t: float) -> HumanHandFrame:
        return HumanHandFrame(t, forward_keypoints(self.human, self.joint_angles(t)))

    def static_frame(self) -> HumanHandFrame:
        return HumanHandFrame(0.0, forward_keypoints(self.human, self.open))

    def motion_frames(self, rate: float = 25.0) -> list[HumanHandFrame]:
        n = int(round(self.period * rate))
        return [self.frame(k / rate) for k in range(n)]


def default_mapping(human: KinematicHandModel, robot: KinematicHandModel) -> JointMapping:
    """Glove-style mapping: robot finger joint k copies human finger joint k."""
    entries = []
    for f in robot.fingers:
        if not human.has_finger(f.index):
            continue
        h = human.finger(f.index)
        for k in range(min(f.dof, h.dof)):
            entries.append(MappingEntry(h.dof_offset + k, f.dof_offset + k))
    return JointMapping(entries, robot.dof)


class TeleopPolicy:
    """Per control cycle: operator pose -> hand joint targets, plus a slow arm sweep."""

    def __init__(
        self,
        env: SimulatedEnv,
        operator: SyntheticOperator,
        profile: CalibrationProfile,
        config: RetargetConfig,
        mode: str = "retarget",
        mapping: JointMapping | None = None,
        t0: float = 0.0,
    ):
        self.env, self.operator, self.profile, self.config = env, operator, profile, config
        self.mode = mode
        self.mapping = mapping or default_mapping(operator.human, env.hand)
        self.t0 = t0
        self.theta = profile.theta0.copy()
        self.rejected = 0

    def arm_targets(self, t: float) -> np.ndarray:
        n = self.env.config.arm_dof
        return 0.3 * np.sin(2.0 * math.pi * t / 6.0 + 0.5 * np.arange(n))

    def __call__(self, k: int, now: float, obs: Observation | None) -> np.ndarray:
        t = now - self.t0
        if self.mode == "direct":
            self.theta = direct_joint_map(self.operator.joint_angles(t), self.mapping, self.env.hand)
        else:
            try:
                self.theta, _ = solve_retarget(
                    self.env.hand, self.profile, self.config, self.operator.frame(t), self.theta
                )
            except NonFiniteInputError:
                # hold the previous solution for this cycle
                self.rejected += 1
        return np.concatenate([self.arm_targets(t), self.theta])


@dataclass
class RunConfig:
    env: str = "paper-like"
    retarget_config: str | None = None
    hand_model: str | None = None
    out: str = "dataset"
    episodes: int = 1
    steps: int = 491
    seed: int = 0
    session_id: str | None = None

    def __post_init__(self) -> None:
        if self.steps <= 0 or self.episodes <= 0:
            raise ValueError("steps and episodes must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpisodeResult:
    path: str
    duration_sec: float
    timesteps: int
    sync_success_rate: float
    avg_sync_error_ms: float | None
    tp99_ms: float | None
    rejected_frames: int
    is_valid: np.ndarray = field(repr=False)
    max_diff: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        doc = {k: v for k, v in asdict(self).items() if k not in ("is_valid", "max_diff")}
        return doc


def load_retarget_config(env_config: EnvConfig, path: str | None) -> RetargetConfig:
    if path is not None:
        return RetargetConfig.from_dict(json.loads(Path(path).read_text()))
    if env_config.retarget_config is not None:
        return RetargetConfig.from_dict(env_config.retarget_config)
    return RetargetConfig()


def calibrate_for(hand: KinematicHandModel, human: KinematicHandModel) -> CalibrationProfile:
    """Calibrate against the operator's open pose and one unperturbed grasp cycle."""
    operator = SyntheticOperator(human)
    return calibrate(hand, np.zeros(hand.dof), operator.static_frame(), operator.motion_frames())


def episode_seed(run_seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([run_seed, episode]).generate_state(1)[0])


def simulate(run: RunConfig, env_config: EnvConfig, retarget_config: RetargetConfig | None = None) -> list[EpisodeResult]:
    """Collect ``run.episodes`` episodes and write them under ``run.out/<session_id>/``."""
    if run.hand_model is not None:
        env_config = replace(env_config, hand_model=run.hand_model)
    hand = load_model(env_config.hand_model)
    human = load_model(env_config.human_model)
    config = retarget_config or load_retarget_config(env_config, run.retarget_config)
    profile = calibrate_for(hand, human)
    session = run.session_id or f"session_seed{run.seed:04d}"
    results = []
    for e in range(run.episodes):
        seed = episode_seed(run.seed, e)
        cfg = replace(env_config, seed=seed, recorders=list(env_config.recorders))
        env = SimulatedEnv(cfg, hand)
        policy = TeleopPolicy(env, SyntheticOperator(human, seed=seed), profile, config, cfg.control_mode)
        buffer = run_episode(env, policy, run.steps, SimulatedClock(0.0))
        episode_id = f"episode_{e:06d}"
        meta = SessionMetadata.for_buffer(buffer, episode_id, session)
        directory = Path(run.out) / session / episode_id
        write_episode(buffer, meta, directory)
        flags = np.array([o.sync.is_valid for o in buffer.observations])
        diffs = np.array([o.sync.max_diff for o in buffer.observations])
        rate, avg, tp99 = summarize(flags, diffs)
        results.append(
            EpisodeResult(
                f"{session}/{episode_id}", meta.duration_sec, meta.timesteps, rate, avg, tp99,
                policy.rejected, flags, diffs,
            )
        )
    return results
