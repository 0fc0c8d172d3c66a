"""RealEnv-style environment over simulated recorders.

Each recorder samples at its own rate. When polled it reports the latest
sample it delivered, stamped with the sample time minus a latency draw. A
dropout means nothing new arrived this cycle, so the previous snapshot and
its (ageing) timestamp are reused; freshness validation is what flags it.
"""

from __future__ import annotations

import abc
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .kinematics import KinematicHandModel, load_model
from .timesync import SimulatedClock, SyncBundle, SyncPolicy, validate

RECORDER_KINDS = ("arm", "hand", "camera", "tactile")
ENV_PRESETS = ("paper-like", "ideal")


class CollectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class JitterModel:
    latency_mean: float = 0.0
    latency_stddev: float = 0.0
    dropout_prob: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.latency_mean < 0 or self.latency_stddev < 0:
            raise ValueError("latency mean and stddev must be nonnegative")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout probability must lie in [0, 1]")


@dataclass(frozen=True)
class RecorderDescriptor:
    name: str
    kind: str
    rate: float
    jitter: JitterModel = field(default_factory=JitterModel)
    phase: float = 0.0  # time of sample 0, seconds
    options: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in RECORDER_KINDS:
            raise ValueError(f"recorder kind must be one of {RECORDER_KINDS}, got {self.kind!r}")
        if not self.rate > 0:
            raise ValueError(f"recorder {self.name!r}: rate must be positive")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["options"] = dict(self.options)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> RecorderDescriptor:
        doc = dict(doc)
        doc["jitter"] = JitterModel(**doc.get("jitter", {}))
        return cls(**doc)


@dataclass(frozen=True)
class FrameRef:
    index: int  # step index the frame belongs to
    frame_id: int  # camera sample number, embedded in the pixels
    image: np.ndarray = field(repr=False, compare=False)


@dataclass
class Observation:
    qpos: np.ndarray
    qvel: np.ndarray
    action: np.ndarray
    frames: dict[str, FrameRef]
    tactile: dict[str, np.ndarray]
    sync: SyncBundle
    step_index: int
    time: float


@dataclass
class EpisodeBuffer:
    observations: list[Observation]
    started_at: float
    ended_at: float
    config_snapshot: dict

    def __len__(self) -> int:
        return len(self.observations)


@dataclass
class Snapshot:
    sample: int
    timestamp: float
    payload: Any


def render_frame(frame_id: int, width: int, height: int, salt: int = 0) -> np.ndarray:
    """Procedural RGB frame; pixel (0, 0) carries ``frame_id`` as 24-bit big-endian RGB."""
    yy, xx = np.mgrid[0:height, 0:width]
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[..., 0] = (xx * 7 + frame_id * 3 + salt) % 256
    img[..., 1] = (yy * 11 + frame_id * 5) % 256
    img[..., 2] = ((xx + yy) * 13 + frame_id) % 256
    img[0, 0] = [(frame_id >> 16) & 0xFF, (frame_id >> 8) & 0xFF, frame_id & 0xFF]
    return img


def frame_id_of(image: np.ndarray) -> int:
    r, g, b = (int(v) for v in image[0, 0])
    return (r << 16) | (g << 8) | b


class Recorder(abc.ABC):
    """One data source. Subclasses decide what a sample captures."""

    def __init__(self, descriptor: RecorderDescriptor, env_seed: int) -> None:
        self.descriptor = descriptor
        self._seed = np.random.SeedSequence(
            [env_seed, descriptor.jitter.seed, zlib.crc32(descriptor.name.encode())]
        )
        self.reset()

    @property
    def name(self) -> str:
        return self.descriptor.name

    def reset(self) -> None:
        self._rng = np.random.default_rng(self._seed)
        self._latest: Snapshot | None = None

    def sample_index(self, now: float) -> int:
        d = self.descriptor
        return math.floor((now - d.phase) * d.rate + 1e-9)

    def sample_time(self, index: int) -> float:
        return self.descriptor.phase + index / self.descriptor.rate

    def poll(self, now: float, state: np.ndarray) -> Snapshot:
        jitter = self.descriptor.jitter
        # both draws every cycle so the stream does not depend on the outcome
        dropped = self._rng.random() < jitter.dropout_prob
        latency = max(0.0, self._rng.normal(jitter.latency_mean, jitter.latency_stddev))
        m = self.sample_index(now)
        if self._latest is None or (not dropped and m != self._latest.sample):
            # atomic replace of the latest-value cell
            self._latest = Snapshot(m, self.sample_time(m) - latency, self.capture(state, m))
        return self._latest

    @abc.abstractmethod
    def capture(self, state: np.ndarray, sample: int) -> Any:
        ...


class JointRecorder(Recorder):
    def __init__(self, descriptor: RecorderDescriptor, env_seed: int, joints: slice) -> None:
        self.joints = joints
        super().__init__(descriptor, env_seed)

    def capture(self, state, sample):
        return state[self.joints].copy()


class CameraRecorder(Recorder):
    def capture(self, state, sample):
        opts = self.descriptor.options
        return render_frame(
            sample, int(opts.get("width", 32)), int(opts.get("height", 24)), zlib.crc32(self.name.encode()) % 256
        )


class TactileRecorder(Recorder):
    """Pad pressures that grow with hand flexion."""

    def __init__(self, descriptor: RecorderDescriptor, env_seed: int, joints: slice) -> None:
        self.joints = joints
        super().__init__(descriptor, env_seed)

    def capture(self, state, sample):
        channels = int(self.descriptor.options.get("channels", 5))
        hand = state[self.joints]
        if hand.size == 0:
            return np.zeros(channels)
        flex = np.resize(np.clip(hand, 0.0, None), channels)
        return np.round(flex * 10.0, 6)


@dataclass
class EnvConfig:
    name: str = "sim_arm_o6"
    task_name: str = "sim_grasp"
    seed: int = 0
    control_rate_hz: float = 25.0
    arm_dof: int = 6
    arm_type: str = "simulated 6-DoF arm"
    arm_limits: tuple[float, float] = (-2.6, 2.6)
    hand_model: str = "o6"
    hand_type: str = "O6-like hand (6-DoF)"
    actuator_gain: float = 0.5
    control_mode: str = "retarget"  # "retarget" | "direct"
    human_model: str = "human"
    retarget_config: dict | None = None
    sync_policy: SyncPolicy = field(default_factory=SyncPolicy)
    camera_preset: str = "sim_single_top"
    camera_type: str = "simulated RGB camera"
    camera_position: str = "top-down"
    data_format: str = "raw_frames"
    video_codec: str = "none"
    recorders: list[RecorderDescriptor] = field(default_factory=list)

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate_hz

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["arm_limits"] = list(self.arm_limits)
        doc["sync_policy"] = self.sync_policy.to_dict()
        doc["recorders"] = [r.to_dict() for r in self.recorders]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> EnvConfig:
        doc = dict(doc)
        if "sync_policy" in doc:
            doc["sync_policy"] = SyncPolicy(**doc["sync_policy"])
        if "arm_limits" in doc:
            doc["arm_limits"] = tuple(doc["arm_limits"])
        doc["recorders"] = [RecorderDescriptor.from_dict(r) for r in doc.get("recorders", [])]
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown environment config fields: {sorted(unknown)}")
        if doc.get("control_mode", "retarget") not in ("retarget", "direct"):
            raise ValueError("control_mode must be 'retarget' or 'direct'")
        return cls(**doc)


def load_env_config(source: str | Path) -> EnvConfig:
    """Bundled preset by name (``"paper-like"``) or a JSON document path."""
    if str(source) in ENV_PRESETS:
        text = resources.files("teledex").joinpath(f"data/env_{str(source).replace('-', '_')}.json").read_text()
    else:
        text = Path(source).read_text()
    return EnvConfig.from_dict(json.loads(text))


class RealEnv(abc.ABC):
    """Hardware-agnostic robot environment: read observations, send actions."""

    @abc.abstractmethod
    def get_observation(self, now: float) -> Observation:
        ...

    @abc.abstractmethod
    def step(self, action, now: float) -> Observation:
        ...


class SimulatedEnv(RealEnv):
    """Arm + hand driven by a first-order lag toward the commanded joints."""

    def __init__(self, config: EnvConfig, hand: KinematicHandModel | None = None) -> None:
        self.config = config
        self.hand = hand if hand is not None else load_model(config.hand_model)
        self.dof = config.arm_dof + self.hand.dof
        lo, hi = config.arm_limits
        self.lower = np.concatenate([np.full(config.arm_dof, lo), self.hand.lower])
        self.upper = np.concatenate([np.full(config.arm_dof, hi), self.hand.upper])
        self.arm_joints = slice(0, config.arm_dof)
        self.hand_joints = slice(config.arm_dof, self.dof)
        self.recorders: dict[str, Recorder] = {}
        self._in_episode = False
        self._step = 0
        for desc in config.recorders:
            self.register_recorder(desc)

    @property
    def in_episode(self) -> bool:
        return self._in_episode

    def register_recorder(self, descriptor: RecorderDescriptor) -> SimulatedEnv:
        if self._in_episode:
            raise CollectionError("cannot register recorders while an episode is running")
        if descriptor.name in self.recorders:
            raise CollectionError(f"duplicate recorder name {descriptor.name!r}")
        if descriptor.kind in ("arm", "hand") and any(
            r.descriptor.kind == descriptor.kind for r in self.recorders.values()
        ):
            raise CollectionError(f"only one {descriptor.kind} recorder is supported")
        seed = self.config.seed
        if descriptor.kind == "arm":
            rec: Recorder = JointRecorder(descriptor, seed, self.arm_joints)
        elif descriptor.kind == "hand":
            rec = JointRecorder(descriptor, seed, self.hand_joints)
        elif descriptor.kind == "camera":
            rec = CameraRecorder(descriptor, seed)
        else:
            rec = TactileRecorder(descriptor, seed, self.hand_joints)
        self.recorders[descriptor.name] = rec
        if descriptor not in self.config.recorders:
            self.config.recorders.append(descriptor)
        return self

    def start_episode(self, now: float, qpos0=None) -> None:
        if not self.recorders:
            raise CollectionError("no recorders registered")
        self.qpos = np.clip(
            np.zeros(self.dof) if qpos0 is None else np.asarray(qpos0, dtype=float), self.lower, self.upper
        )
        self.action = self.qpos.copy()
        self._step = 0
        self._observed_qpos = self.qpos.copy()
        for rec in self.recorders.values():
            rec.reset()
            snap = rec.poll(now, self.qpos)
            if isinstance(rec, JointRecorder):
                self._observed_qpos[rec.joints] = snap.payload
        self._in_episode = True

    def stop_episode(self) -> None:
        self._in_episode = False

    def get_observation(self, now: float) -> Observation:
        if not self._in_episode:
            raise CollectionError("episode not started")
        timestamps: dict[str, float] = {}
        frames: dict[str, FrameRef] = {}
        tactile: dict[str, np.ndarray] = {}
        qpos = self.qpos.copy()
        for name, rec in self.recorders.items():
            snap = rec.poll(now, self.qpos)
            timestamps[name] = snap.timestamp
            if isinstance(rec, CameraRecorder):
                frames[name] = FrameRef(self._step, snap.sample, snap.payload)
            elif isinstance(rec, TactileRecorder):
                tactile[name] = snap.payload
            else:
                qpos[rec.joints] = snap.payload
        qvel = (qpos - self._observed_qpos) / self.config.dt
        self._observed_qpos = qpos
        sync = validate(self.config.sync_policy, now, timestamps)
        obs = Observation(qpos, qvel, self.action.copy(), frames, tactile, sync, self._step, now)
        self._step += 1
        return obs

    def step(self, action, now: float) -> Observation:
        action = np.asarray(action, dtype=float)
        if action.shape != (self.dof,):
            raise ValueError(f"action has shape {action.shape}, environment needs ({self.dof},)")
        if not self._in_episode:
            raise CollectionError("episode not started")
        self.action = action.copy()
        g = self.config.actuator_gain
        self.qpos = np.clip(self.qpos + g * (action - self.qpos), self.lower, self.upper)
        return self.get_observation(now)


Policy = Callable[[int, float, Observation | None], np.ndarray]


def run_episode(env: SimulatedEnv, policy: Policy, steps: int, clock: SimulatedClock | None = None) -> EpisodeBuffer:
    """Run ``steps`` control cycles; observation k is taken at start + (k + 1) * dt."""
    if steps <= 0:
        raise ValueError("steps must be positive")
    clock = clock if clock is not None else SimulatedClock()
    dt = env.config.dt
    t0 = clock.now()
    env.start_episode(t0)
    observations: list[Observation] = []
    obs = None
    for k in range(steps):
        now = t0 + (k + 1) * dt
        clock.set(now)
        action = policy(k, now, obs)
        obs = env.step(action, now)
        observations.append(obs)
    env.stop_episode()
    return EpisodeBuffer(observations, t0, t0 + steps * dt, env.config.to_dict())
