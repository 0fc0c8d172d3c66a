"""Human-to-robot hand retargeting.

Per frame, the robot joint vector minimizes

    a_align * sum_K |p'_ij - F_ij(q)|^2
  + a_couple * sum_I beta_i |R_H,i - R_R,i(q)|^2
  + a_smooth * |q - q_prev|^2

where ``p'`` are the operator keypoints after per-segment scaling and root
translation, ``R`` are thumb-tip to fingertip vectors and ``beta_i`` is a
sigmoid of the normalized thumb/finger proximity. The cost is a sum of
squares, so it is minimized with a projected, damped Gauss-Newton iteration
over the joint-limit box.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .kinematics import (
    Key,
    KinematicHandModel,
    clamp_to_limits,
    finger_index,
    FINGER_NAMES,
    format_key,
    forward_keypoints,
    parse_key,
)

THUMB = 0


class RetargetError(ValueError):
    pass


class CalibrationError(RetargetError):
    pass


class NonFiniteInputError(RetargetError):
    """A frame (or the cost it produces) contains NaN/Inf."""


@dataclass
class HumanHandFrame:
    timestamp: float
    points: dict[Key, np.ndarray]

    def __getitem__(self, key: Key) -> np.ndarray:
        try:
            return self.points[key]
        except KeyError:
            raise RetargetError(f"frame at t={self.timestamp} has no keypoint {format_key(key)}") from None

    def is_finite(self) -> bool:
        return math.isfinite(self.timestamp) and all(
            np.all(np.isfinite(p)) for p in self.points.values()
        )

    def scaled(self, factor: float) -> HumanHandFrame:
        return HumanHandFrame(self.timestamp, {k: factor * p for k, p in self.points.items()})

    def to_dict(self) -> dict:
        return {
            "t": self.timestamp,
            "points": {format_key(k): [float(v) for v in p] for k, p in sorted(self.points.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> HumanHandFrame:
        points = {parse_key(k): np.asarray(v, dtype=float) for k, v in doc["points"].items()}
        for k, p in points.items():
            if p.shape != (3,):
                raise RetargetError(f"keypoint {format_key(k)} must have 3 coordinates")
        return cls(float(doc["t"]), points)


def iter_frames(path: str | Path) -> Iterator[tuple[int, HumanHandFrame]]:
    """Yield ``(line number, frame)`` from a JSON-lines trajectory, skipping blank lines."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                frame = HumanHandFrame.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise RetargetError(f"{path}:{lineno}: bad frame: {exc}") from exc
            yield lineno, frame


def read_frames(path: str | Path) -> list[HumanHandFrame]:
    """Read a JSON-lines trajectory. Errors name the 1-based line number."""
    return [frame for _, frame in iter_frames(path)]


def write_frames(path: str | Path, frames: Iterable[HumanHandFrame]) -> None:
    with open(path, "w") as fh:
        for f in frames:
            fh.write(json.dumps(f.to_dict(), sort_keys=True) + "\n")


@dataclass
class CalibrationProfile:
    theta0: np.ndarray
    pbar: HumanHandFrame
    scale: dict[Key, float]
    root_offset: dict[int, np.ndarray]
    rho_min: dict[int, float] = field(default_factory=dict)
    rho_max: dict[int, float] = field(default_factory=dict)

    def segments(self, finger: int) -> list[float]:
        """Scale factors of ``finger`` ordered by segment index."""
        js = sorted(j for (i, j) in self.scale if i == finger)
        return [self.scale[(finger, j)] for j in js]

    def to_dict(self) -> dict:
        return {
            "theta0": [float(v) for v in self.theta0],
            "pbar": self.pbar.to_dict(),
            "scale": {format_key(k): v for k, v in sorted(self.scale.items())},
            "root_offset": {FINGER_NAMES[i]: [float(v) for v in d] for i, d in sorted(self.root_offset.items())},
            "rho_min": {FINGER_NAMES[i]: v for i, v in sorted(self.rho_min.items())},
            "rho_max": {FINGER_NAMES[i]: v for i, v in sorted(self.rho_max.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> CalibrationProfile:
        profile = cls(
            theta0=np.asarray(doc["theta0"], dtype=float),
            pbar=HumanHandFrame.from_dict(doc["pbar"]),
            scale={parse_key(k): float(v) for k, v in doc["scale"].items()},
            root_offset={finger_index(k): np.asarray(v, dtype=float) for k, v in doc["root_offset"].items()},
            rho_min={finger_index(k): float(v) for k, v in doc.get("rho_min", {}).items()},
            rho_max={finger_index(k): float(v) for k, v in doc.get("rho_max", {}).items()},
        )
        for k, s in profile.scale.items():
            if not (s > 0 and math.isfinite(s)):
                raise CalibrationError(f"scale {format_key(k)} = {s} must be positive and finite")
        return profile


@dataclass
class SolverSettings:
    max_iters: int = 50
    step_tolerance: float = 1e-6
    cost_tolerance: float = 1e-10
    max_step_radians: float = 0.2


@dataclass
class RetargetConfig:
    alpha_align: float = 1.0
    alpha_couple: float = 0.5
    alpha_smooth: float = 0.1
    sigma: float = 10.0
    tau: float = 0.5
    # None selects the defaults: pip/dip/fingertip keypoints, every non-thumb
    # finger that has a calibrated proximity band.
    keypoints: tuple[Key, ...] | None = None
    coupled_fingers: tuple[int, ...] | None = None
    # Compare robot fingertip vectors against transformed (scaled) operator
    # fingertips instead of raw ones.
    couple_use_transformed: bool = False
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self) -> None:
        weights = (self.alpha_align, self.alpha_couple, self.alpha_smooth)
        if min(weights) < 0 or max(weights) <= 0:
            raise ValueError(f"weights must be nonnegative with at least one positive, got {weights}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.keypoints is not None:
            if not self.keypoints:
                raise ValueError("keypoint set must be nonempty")
            self.keypoints = tuple(tuple(k) for k in self.keypoints)  # type: ignore[misc]
        if self.coupled_fingers is not None:
            if THUMB in self.coupled_fingers:
                raise ValueError("the thumb cannot be a coupled finger")
            self.coupled_fingers = tuple(self.coupled_fingers)

    def alignment_keys(self, model: KinematicHandModel) -> list[Key]:
        if self.keypoints is None:
            return model.keys_with_role("pip", "dip", "fingertip")
        for k in self.keypoints:
            model.row(k)
        return list(self.keypoints)

    def coupled(self, model: KinematicHandModel, profile: CalibrationProfile) -> list[int]:
        if self.coupled_fingers is None:
            return [f.index for f in model.fingers[1:] if f.index in profile.rho_min]
        return list(self.coupled_fingers)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["keypoints"] = None if self.keypoints is None else [format_key(k) for k in self.keypoints]
        doc["coupled_fingers"] = (
            None if self.coupled_fingers is None else [FINGER_NAMES[i] for i in self.coupled_fingers]
        )
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> RetargetConfig:
        doc = dict(doc)
        solver = SolverSettings(**doc.pop("solver", {}))
        if doc.get("keypoints") is not None:
            doc["keypoints"] = tuple(parse_key(k) for k in doc["keypoints"])
        if doc.get("coupled_fingers") is not None:
            doc["coupled_fingers"] = tuple(finger_index(i) for i in doc["coupled_fingers"])
        return cls(solver=solver, **doc)


def calibrate(
    model: KinematicHandModel,
    theta0,
    static_frame: HumanHandFrame,
    motion_frames: Sequence[HumanHandFrame] = (),
) -> CalibrationProfile:
    """Segment scales and root offsets from one static pose, proximity bands from motion.

    The proximity band of each non-thumb finger is the min/max thumb-tip to
    fingertip distance over ``motion_frames``; with no motion frames the
    profile carries no bands and coupling is unavailable.
    """
    theta0 = clamp_to_limits(model, theta0)
    robot = forward_keypoints(model, theta0)
    scale: dict[Key, float] = {}
    root_offset: dict[int, np.ndarray] = {}
    for f in model.fingers:
        for j in range(len(f.keypoints) - 1):
            a, b = (f.index, j), (f.index, j + 1)
            human_len = float(np.linalg.norm(static_frame[b] - static_frame[a]))
            if human_len == 0.0:
                raise CalibrationError(
                    f"degenerate segment {f.name} {j}->{j + 1}: calibration keypoints coincide"
                )
            scale[a] = float(np.linalg.norm(robot[b] - robot[a])) / human_len
        mcp = (f.index, f.mcp)
        root_offset[f.index] = robot[mcp] - static_frame[mcp]

    rho_min: dict[int, float] = {}
    rho_max: dict[int, float] = {}
    if motion_frames:
        thumb_tip = (THUMB, model.finger(THUMB).fingertip)
        for f in model.fingers[1:]:
            tip = (f.index, f.fingertip)
            dists = [float(np.linalg.norm(fr[tip] - fr[thumb_tip])) for fr in motion_frames]
            lo, hi = min(dists), max(dists)
            if not hi > lo:
                raise CalibrationError(
                    f"flat calibration motion for {f.name}: rho_min == rho_max == {lo:.6g}"
                )
            rho_min[f.index], rho_max[f.index] = lo, hi
    return CalibrationProfile(theta0, static_frame, scale, root_offset, rho_min, rho_max)


def transform_keypoints(profile: CalibrationProfile, frame: HumanHandFrame) -> dict[Key, np.ndarray]:
    """Chain-wise scaled and root-shifted operator keypoints.

    The root offset enters once, at j = 1; j = 0 stays at the raw operator root.
    """
    by_finger: dict[int, int] = defaultdict(int)
    for i, j in profile.scale:
        by_finger[i] = max(by_finger[i], j + 1)
    out: dict[Key, np.ndarray] = {}
    for i, last in sorted(by_finger.items()):
        prev = frame[(i, 0)]
        out[(i, 0)] = prev
        for j in range(1, last + 1):
            cur = frame[(i, j)]
            step = profile.scale[(i, j - 1)] * (cur - prev)
            if j == 1:
                out[(i, j)] = out[(i, 0)] + step + profile.root_offset[i]
            else:
                out[(i, j)] = out[(i, j - 1)] + step
            prev = cur
    return out


def align_cost(model: KinematicHandModel, theta, pprime: dict[Key, np.ndarray], keys: Iterable[Key]) -> float:
    robot = forward_keypoints(model, theta)
    total = 0.0
    for k in keys:
        if k not in pprime:
            raise RetargetError(f"transformed frame lacks keypoint {format_key(k)}")
        if k not in robot:
            raise RetargetError(f"model {model.name!r} lacks keypoint {format_key(k)}")
        d = pprime[k] - robot[k]
        total += float(d @ d)
    return total


def _tip(frame_points, model: KinematicHandModel, finger: int) -> np.ndarray:
    key = (finger, model.finger(finger).fingertip)
    if key not in frame_points:
        raise RetargetError(f"missing fingertip {format_key(key)}")
    return frame_points[key]


def coupling_weight(
    profile: CalibrationProfile,
    frame: HumanHandFrame,
    finger: int,
    sigma: float,
    tau: float,
    model: KinematicHandModel | None = None,
) -> float:
    """Sigmoid weight of the normalized thumb/finger proximity."""
    if model is not None:
        dist = float(np.linalg.norm(_tip(frame.points, model, finger) - _tip(frame.points, model, THUMB)))
    else:
        tip_j = max(j for (i, j) in frame.points if i == finger)
        thumb_j = max(j for (i, j) in frame.points if i == THUMB)
        dist = float(np.linalg.norm(frame[(finger, tip_j)] - frame[(THUMB, thumb_j)]))
    lo, hi = profile.rho_min[finger], profile.rho_max[finger]
    rho = min(1.0, max(0.0, 1.0 - (dist - lo) / (hi - lo)))
    return 1.0 / (1.0 + math.exp(-sigma * (rho - tau)))


def coupling_cost(
    model: KinematicHandModel,
    theta,
    frame_points: dict[Key, np.ndarray] | HumanHandFrame,
    weights: dict[int, float],
    fingers: Iterable[int],
) -> float:
    if isinstance(frame_points, HumanHandFrame):
        frame_points = frame_points.points
    if not model.has_finger(THUMB):
        raise RetargetError("coupling needs a thumb")
    robot = forward_keypoints(model, theta)
    robot_thumb = _tip(robot, model, THUMB)
    human_thumb = _tip(frame_points, model, THUMB)
    total = 0.0
    for i in fingers:
        d = (_tip(frame_points, model, i) - human_thumb) - (_tip(robot, model, i) - robot_thumb)
        total += weights[i] * float(d @ d)
    return total


def smooth_cost(theta, theta_prev) -> float:
    theta, theta_prev = np.asarray(theta, dtype=float), np.asarray(theta_prev, dtype=float)
    if theta.shape != theta_prev.shape:
        raise ValueError(f"shape mismatch {theta.shape} vs {theta_prev.shape}")
    d = theta - theta_prev
    return float(d @ d)


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    align: float
    couple: float
    smooth: float

    def to_dict(self) -> dict:
        return asdict(self)


def _coupling_terms(model, profile, config, frame, pprime):
    fingers = config.coupled(model, profile) if config.alpha_couple > 0 else []
    weights = {
        i: coupling_weight(profile, frame, i, config.sigma, config.tau, model=model) for i in fingers
    }
    target = pprime if config.couple_use_transformed else frame.points
    return fingers, weights, target


def total_cost(
    model: KinematicHandModel,
    theta,
    theta_prev,
    pprime: dict[Key, np.ndarray],
    frame: HumanHandFrame,
    profile: CalibrationProfile,
    config: RetargetConfig,
) -> CostBreakdown:
    la = align_cost(model, theta, pprime, config.alignment_keys(model))
    fingers, weights, target = _coupling_terms(model, profile, config, frame, pprime)
    lc = coupling_cost(model, theta, target, weights, fingers) if fingers else 0.0
    ls = smooth_cost(theta, theta_prev)
    total = config.alpha_align * la + config.alpha_couple * lc + config.alpha_smooth * ls
    return CostBreakdown(total, la, lc, ls)


class _StackedResiduals:
    """All three cost terms as one residual vector r(q), cost = r.r."""

    def __init__(self, model, profile, config, frame, theta_prev, pprime=None):
        self.model = model
        self.theta_prev = np.asarray(theta_prev, dtype=float)
        pprime = transform_keypoints(profile, frame) if pprime is None else pprime
        keys = config.alignment_keys(model)
        for k in keys:
            if k not in pprime:
                raise RetargetError(f"transformed frame lacks keypoint {format_key(k)}")
        self.align_rows = np.array([model.row(k) for k in keys], dtype=int)
        self.align_target = np.array([pprime[k] for k in keys]).reshape(-1, 3)
        self.w_align = math.sqrt(config.alpha_align)

        fingers, weights, target = _coupling_terms(model, profile, config, frame, pprime)
        thumb_key = (THUMB, model.finger(THUMB).fingertip)
        self.thumb_row = model.row(thumb_key)
        self.tip_rows = np.array([model.row((i, model.finger(i).fingertip)) for i in fingers], dtype=int)
        human_thumb = _tip(target, model, THUMB) if fingers else np.zeros(3)
        self.couple_target = np.array(
            [_tip(target, model, i) - human_thumb for i in fingers]
        ).reshape(-1, 3)
        self.w_couple = np.sqrt(config.alpha_couple * np.array([weights[i] for i in fingers]))
        self.w_smooth = math.sqrt(config.alpha_smooth)

    def __call__(self, theta, jacobian: bool = True):
        pos, jac = self.model.evaluate(theta, jacobian=jacobian)
        n = self.model.dof
        parts = [self.w_align * (pos[self.align_rows] - self.align_target).ravel()]
        if len(self.tip_rows):
            rel = pos[self.tip_rows] - pos[self.thumb_row]
            parts.append((self.w_couple[:, None] * (rel - self.couple_target)).ravel())
        parts.append(self.w_smooth * (theta - self.theta_prev))
        r = np.concatenate(parts)
        if not jacobian:
            return r, None
        blocks = [self.w_align * jac[self.align_rows].reshape(-1, n)]
        if len(self.tip_rows):
            rel_j = jac[self.tip_rows] - jac[self.thumb_row]
            blocks.append((self.w_couple[:, None, None] * rel_j).reshape(-1, n))
        blocks.append(self.w_smooth * np.eye(n))
        return r, np.vstack(blocks)


def total_cost_gradient(model, theta, theta_prev, pprime, frame, profile, config) -> np.ndarray:
    """Analytic gradient of :func:`total_cost` with respect to ``theta``."""
    residuals = _StackedResiduals(model, profile, config, frame, theta_prev, pprime)
    r, J = residuals(np.asarray(theta, dtype=float))
    return 2.0 * J.T @ r


@dataclass(frozen=True)
class SolveReport:
    final_cost: float
    iterations: int
    converged: bool
    cost_history: tuple[float, ...] = ()


def solve_retarget(
    model: KinematicHandModel,
    profile: CalibrationProfile,
    config: RetargetConfig,
    frame: HumanHandFrame,
    theta_prev,
) -> tuple[np.ndarray, SolveReport]:
    """Minimize the total cost, warm-started at ``theta_prev``, inside the limit box.

    Projected Levenberg-Marquardt: joints sitting on a bound with the gradient
    pointing outward are frozen for the step; the step is scaled so no joint
    moves more than ``max_step_radians``; only cost-decreasing steps are kept.
    """
    if not frame.is_finite():
        raise NonFiniteInputError(f"frame at t={frame.timestamp} has non-finite keypoints")
    theta = clamp_to_limits(model, theta_prev)
    theta_prev = np.asarray(theta_prev, dtype=float)
    if config.alpha_align == 0 and config.alpha_couple == 0:
        return theta, SolveReport(0.0, 0, True, (0.0,))

    settings = config.solver
    residuals = _StackedResiduals(model, profile, config, frame, theta_prev)
    lo, hi = model.lower, model.upper
    r, J = residuals(theta)
    cost = float(r @ r)
    if not math.isfinite(cost):
        raise NonFiniteInputError("non-finite cost at the warm start")
    history = [cost]
    mu = None
    converged = False
    it = 0
    while it < settings.max_iters:
        it += 1
        g = J.T @ r
        pinned = ((theta <= lo) & (g > 0)) | ((theta >= hi) & (g < 0))
        free = ~pinned
        if cost == 0.0 or not free.any() or np.max(np.abs(g[free])) < 1e-15:
            converged = True
            it -= 1
            break
        H = J[:, free].T @ J[:, free]
        if mu is None:
            mu = 1e-6 * max(float(np.max(np.diag(H))), 1e-12)
        accepted = False
        while not accepted:
            step = np.zeros_like(theta)
            step[free] = -np.linalg.solve(H + mu * np.eye(H.shape[0]), g[free])
            biggest = np.max(np.abs(step))
            if biggest > settings.max_step_radians:
                step *= settings.max_step_radians / biggest
            candidate = np.clip(theta + step, lo, hi)
            r_new, _ = residuals(candidate, jacobian=False)
            new_cost = float(r_new @ r_new)
            if not math.isfinite(new_cost):
                raise NonFiniteInputError("non-finite cost during solve")
            if new_cost < cost:
                accepted = True
            else:
                mu *= 4.0
                if mu > 1e12 * max(float(np.max(np.diag(H))), 1e-12):
                    break
        if not accepted:
            # no descent direction left inside the box: stationary point
            converged = True
            break
        moved = float(np.linalg.norm(candidate - theta))
        decrease = cost - new_cost
        theta, cost = candidate, new_cost
        history.append(cost)
        mu = max(mu / 3.0, 1e-15)
        if moved < settings.step_tolerance or decrease < settings.cost_tolerance:
            converged = True
            break
        r, J = residuals(theta)
    return theta, SolveReport(cost, it, converged, tuple(history))


def retarget_trajectory(
    model: KinematicHandModel,
    profile: CalibrationProfile,
    config: RetargetConfig,
    frames: Sequence[HumanHandFrame],
    theta_init=None,
) -> list[tuple[np.ndarray, SolveReport]]:
    """Solve frame by frame, each warm-started at the previous solution."""
    theta = profile.theta0 if theta_init is None else np.asarray(theta_init, dtype=float)
    out = []
    for frame in frames:
        theta, report = solve_retarget(model, profile, config, frame, theta)
        out.append((theta, report))
    return out


@dataclass(frozen=True)
class MappingEntry:
    source: int
    target: int
    gain: float = 1.0
    offset: float = 0.0


@dataclass
class JointMapping:
    """Affine per-joint transfer from operator (glove/master) joints to robot joints."""

    entries: list[MappingEntry]
    target_dof: int

    def __post_init__(self) -> None:
        self.entries = [e if isinstance(e, MappingEntry) else MappingEntry(**e) for e in self.entries]
        targets = [e.target for e in self.entries]
        if len(set(targets)) != len(targets):
            raise ValueError("each target joint may be mapped at most once")
        if any(not 0 <= t < self.target_dof for t in targets):
            raise ValueError(f"target index out of range for target_dof={self.target_dof}")

    @classmethod
    def identity(cls, dof: int) -> JointMapping:
        return cls([MappingEntry(k, k) for k in range(dof)], dof)

    def to_dict(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries], "target_dof": self.target_dof}

    @classmethod
    def from_dict(cls, doc: dict) -> JointMapping:
        return cls([MappingEntry(**e) for e in doc["entries"]], int(doc["target_dof"]))


def direct_joint_map(source, mapping: JointMapping, model: KinematicHandModel) -> np.ndarray:
    source = np.asarray(source, dtype=float)
    if mapping.target_dof != model.dof:
        raise ValueError(f"mapping targets {mapping.target_dof} joints, model has {model.dof}")
    target = np.zeros(model.dof)
    for e in mapping.entries:
        if not 0 <= e.source < len(source):
            raise IndexError(f"source joint {e.source} out of range ({len(source)} joints)")
        target[e.target] = e.gain * source[e.source] + e.offset
    return clamp_to_limits(model, target)
