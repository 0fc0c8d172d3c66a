"""On-disk episode dataset.

Layout::

    <root>/<session_id>/<episode_id>/
        telemetry.bin      magic + JSON header line + little-endian column blocks
        metadata.json
        camera_info.json
        frames/<camera>/<step:06d>.ppm
        manifest.json      {"version": 1, "files": [{"path", "bytes", "fnv1a64"}]}

All JSON is UTF-8 with sorted keys and a trailing newline, so identical
inputs produce identical bytes. Checksums are 64-bit FNV-1a: integrity
only, not tamper-proofing.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .collection import EpisodeBuffer
from .timesync import SyncPolicy, mean_error_ms, percentile_error_ms, success_rate

MAGIC = b"OTDXTEL1"
FORMAT_VERSION = 1
TELEMETRY = "telemetry.bin"
METADATA = "metadata.json"
CAMERA_INFO = "camera_info.json"
MANIFEST = "manifest.json"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


class StoreError(Exception):
    pass


class IntegrityError(StoreError):
    """Stored bytes do not match what the manifest promises."""


class ChecksumMismatchError(IntegrityError):
    pass


class ManifestError(IntegrityError):
    pass


class MissingFileError(StoreError):
    pass


class VersionMismatchError(StoreError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


def _dump_json(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


@dataclass
class TelemetryTable:
    qpos: np.ndarray
    qvel: np.ndarray
    action: np.ndarray
    sources: list[str]
    timestamps: np.ndarray  # (rows, sources)
    is_valid: np.ndarray  # bool
    max_diff: np.ndarray
    checked_at: np.ndarray
    failure: np.ndarray  # uint8: 0 valid, 1 inconsistent, 2 + k stale source k
    frame_ids: dict[str, np.ndarray] = field(default_factory=dict)
    tactile: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.max_diff)

    @classmethod
    def from_buffer(cls, buffer: EpisodeBuffer) -> TelemetryTable:
        obs = buffer.observations
        if not obs:
            raise StoreError("empty episode buffer")
        sources = sorted(obs[0].sync.timestamps)
        failure = []
        for o in obs:
            f = o.sync.failure
            failure.append(0 if f is None else 1 if f.kind == "inconsistent" else 2 + sources.index(f.source))
        return cls(
            qpos=np.array([o.qpos for o in obs], dtype=float),
            qvel=np.array([o.qvel for o in obs], dtype=float),
            action=np.array([o.action for o in obs], dtype=float),
            sources=sources,
            timestamps=np.array([[o.sync.timestamps[s] for s in sources] for o in obs], dtype=float),
            is_valid=np.array([o.sync.is_valid for o in obs], dtype=bool),
            max_diff=np.array([o.sync.max_diff for o in obs], dtype=float),
            checked_at=np.array([o.sync.checked_at for o in obs], dtype=float),
            failure=np.array(failure, dtype=np.uint8),
            frame_ids={c: np.array([o.frames[c].frame_id for o in obs], dtype=float) for c in sorted(obs[0].frames)},
            tactile={t: np.array([o.tactile[t] for o in obs], dtype=float) for t in sorted(obs[0].tactile)},
        )

    def columns(self) -> list[tuple[str, np.ndarray]]:
        cols = [
            ("qpos", self.qpos),
            ("qvel", self.qvel),
            ("action", self.action),
            ("timestamps", self.timestamps),
            ("sync_validation_is_valid", self.is_valid.astype(np.uint8)),
            ("sync_max_diff", self.max_diff),
            ("sync_checked_at", self.checked_at),
            ("sync_failure", self.failure),
        ]
        cols += [(f"frame_id/{c}", v) for c, v in sorted(self.frame_ids.items())]
        cols += [(f"tactile/{t}", v) for t, v in sorted(self.tactile.items())]
        return cols

    def take(self, rows: np.ndarray) -> TelemetryTable:
        return TelemetryTable(
            self.qpos[rows], self.qvel[rows], self.action[rows], list(self.sources),
            self.timestamps[rows], self.is_valid[rows], self.max_diff[rows],
            self.checked_at[rows], self.failure[rows],
            {k: v[rows] for k, v in self.frame_ids.items()},
            {k: v[rows] for k, v in self.tactile.items()},
        )


def encode_telemetry(table: TelemetryTable) -> bytes:
    header_cols, blocks = [], []
    for name, arr in table.columns():
        dtype = "<f8" if arr.dtype.kind == "f" else "|u1"
        data = np.ascontiguousarray(arr, dtype=dtype)
        header_cols.append({"name": name, "dtype": dtype, "shape": list(data.shape)})
        blocks.append(data.tobytes())
    header = {"columns": header_cols, "rows": len(table), "sources": table.sources, "version": FORMAT_VERSION}
    return MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(blocks)


def decode_telemetry(data: bytes) -> TelemetryTable:
    if not data.startswith(MAGIC):
        raise StoreError("not a telemetry file (bad magic)")
    end = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC) : end])
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"telemetry version {header.get('version')} unsupported")
    cols: dict[str, np.ndarray] = {}
    pos = end + 1
    for col in header["columns"]:
        dtype = np.dtype(col["dtype"])
        count = math.prod(col["shape"])
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(data):
            raise StoreError(f"telemetry truncated in column {col['name']!r}")
        cols[col["name"]] = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(col["shape"]).astype(
            dtype.newbyteorder("=")
        )
        pos += nbytes
    if pos != len(data):
        raise StoreError("trailing bytes after telemetry columns")
    return TelemetryTable(
        qpos=cols["qpos"], qvel=cols["qvel"], action=cols["action"],
        sources=list(header["sources"]), timestamps=cols["timestamps"],
        is_valid=cols["sync_validation_is_valid"].astype(bool), max_diff=cols["sync_max_diff"],
        checked_at=cols["sync_checked_at"], failure=cols["sync_failure"],
        frame_ids={k.split("/", 1)[1]: v for k, v in cols.items() if k.startswith("frame_id/")},
        tactile={k.split("/", 1)[1]: v for k, v in cols.items() if k.startswith("tactile/")},
    )


@dataclass
class SessionMetadata:
    task_name: str
    episode_id: str
    session_id: str
    duration_sec: float
    timesteps: int
    hardware_preset: str
    arm_type: str
    hand_type: str
    total_dof: int
    camera_preset: str
    camera_type: str
    camera_position: str
    resolution: str
    fps: float
    control_freq_hz: float
    dt: float
    video_codec: str
    data_format: str
    qpos_dim: int
    camera_streams: list[str]
    tactile_sensors: list[str]
    sync_policy: dict

    def __post_init__(self) -> None:
        if abs(self.timesteps * self.dt - self.duration_sec) > self.dt:
            raise StoreError("duration_sec disagrees with timesteps * dt")
        if self.qpos_dim != self.total_dof:
            raise StoreError("qpos_dim must equal total_dof")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> SessionMetadata:
        names = {f.name for f in fields(cls)}
        missing = names - set(doc)
        if missing:
            raise StoreError(f"metadata lacks fields {sorted(missing)}")
        return cls(**{k: doc[k] for k in names})

    @classmethod
    def for_buffer(cls, buffer: EpisodeBuffer, episode_id: str, session_id: str) -> SessionMetadata:
        cfg = buffer.config_snapshot
        cams = [r for r in cfg["recorders"] if r["kind"] == "camera"]
        rate = cfg["control_rate_hz"]
        dof = len(buffer.observations[0].qpos)
        width, height = (cams[0]["options"].get("width", 32), cams[0]["options"].get("height", 24)) if cams else (0, 0)
        return cls(
            task_name=cfg["task_name"],
            episode_id=episode_id,
            session_id=session_id,
            duration_sec=round(buffer.ended_at - buffer.started_at, 9),
            timesteps=len(buffer),
            hardware_preset=cfg["name"],
            arm_type=cfg["arm_type"],
            hand_type=cfg["hand_type"],
            total_dof=dof,
            camera_preset=cfg["camera_preset"],
            camera_type=cfg["camera_type"],
            camera_position=cfg["camera_position"],
            resolution=f"{width}x{height}",
            fps=float(cams[0]["rate"]) if cams else 0.0,
            control_freq_hz=float(rate),
            dt=1.0 / rate,
            video_codec=cfg["video_codec"],
            data_format=cfg["data_format"],
            qpos_dim=dof,
            camera_streams=[c["name"] for c in cams],
            tactile_sensors=[r["name"] for r in cfg["recorders"] if r["kind"] == "tactile"],
            sync_policy=dict(cfg["sync_policy"]),
        )


@dataclass(frozen=True)
class CameraInfo:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: str

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0 and self.cx < self.width and self.cy < self.height):
            raise StoreError(f"invalid intrinsics {self}")

    @classmethod
    def pinhole(cls, width: int, height: int, hfov_deg: float, pose: str) -> CameraInfo:
        f = round(width / (2.0 * math.tan(math.radians(hfov_deg) / 2.0)), 6)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height, pose)


def camera_info_for(buffer: EpisodeBuffer) -> dict[str, CameraInfo]:
    cfg = buffer.config_snapshot
    out = {}
    for r in cfg["recorders"]:
        if r["kind"] == "camera":
            o = r["options"]
            out[r["name"]] = CameraInfo.pinhole(
                int(o.get("width", 32)), int(o.get("height", 24)), float(o.get("hfov_deg", 87.0)),
                o.get("pose", cfg["camera_position"]),
            )
    return out


@dataclass
class ManifestEntry:
    path: str
    bytes: int
    fnv1a64: str


@dataclass
class EpisodeManifest:
    files: list[ManifestEntry]
    version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {"files": [asdict(f) for f in self.files], "version": self.version}

    def checksums(self) -> dict[str, str]:
        return {f.path: f.fnv1a64 for f in self.files}


def _ppm(image: np.ndarray) -> bytes:
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise StoreError(f"{path}: not a binary 8-bit PPM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)


def write_episode(
    buffer: EpisodeBuffer,
    metadata: SessionMetadata,
    directory: str | Path,
    camera_info: dict[str, CameraInfo] | None = None,
) -> EpisodeManifest:
    """Write one episode directory; rewriting with identical inputs gives identical bytes."""
    if not buffer.observations:
        raise StoreError("cannot write an empty episode")
    if metadata.timesteps != len(buffer):
        raise StoreError(f"metadata says {metadata.timesteps} timesteps, buffer has {len(buffer)}")
    if metadata.qpos_dim != len(buffer.observations[0].qpos):
        raise StoreError("metadata qpos_dim disagrees with the buffer")
    directory = Path(directory)
    if directory.exists():
        if (directory / MANIFEST).exists():
            shutil.rmtree(directory)
        elif any(directory.iterdir()):
            raise StoreError(f"{directory} exists and is not an episode directory")
    directory.mkdir(parents=True, exist_ok=True)

    table = TelemetryTable.from_buffer(buffer)
    camera_info = camera_info if camera_info is not None else camera_info_for(buffer)
    payloads: dict[str, bytes] = {
        TELEMETRY: encode_telemetry(table),
        METADATA: _dump_json(metadata.to_dict()),
        CAMERA_INFO: _dump_json({k: asdict(v) for k, v in camera_info.items()}),
    }
    for obs in buffer.observations:
        for cam, ref in obs.frames.items():
            payloads[f"frames/{cam}/{obs.step_index:06d}.ppm"] = _ppm(ref.image)

    entries = []
    for rel in sorted(payloads):
        data = payloads[rel]
        path = directory / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        entries.append(ManifestEntry(rel, len(data), f"{fnv1a64(data):016x}"))
    manifest = EpisodeManifest(entries)
    (directory / MANIFEST).write_bytes(_dump_json(manifest.to_dict()))
    return manifest


def read_manifest(directory: str | Path) -> EpisodeManifest:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise MissingFileError(f"{path} not found")
    raw = path.read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
        version = doc["version"]
        files = [ManifestEntry(str(f["path"]), int(f["bytes"]), str(f["fnv1a64"])) for f in doc["files"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: unreadable manifest: {exc}") from exc
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: manifest version {version!r}, expected {FORMAT_VERSION}")
    manifest = EpisodeManifest(files, version)
    if _dump_json(manifest.to_dict()) != raw:
        raise ManifestError(f"{path}: manifest is not in canonical form")
    return manifest


def verify_episode(directory: str | Path) -> EpisodeManifest:
    """Check the manifest against the files on disk (presence, inventory, size, checksum)."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    listed = [f.path for f in manifest.files]
    if len(set(listed)) != len(listed):
        raise ManifestError(f"{directory}: duplicate manifest entries")
    on_disk = {
        p.relative_to(directory).as_posix()
        for p in directory.rglob("*")
        if p.is_file() and p.relative_to(directory).as_posix() != MANIFEST
    }
    missing = sorted(set(listed) - on_disk)
    if missing:
        raise MissingFileError(f"{directory}: missing {missing[:3]}{'...' if len(missing) > 3 else ''}")
    extra = sorted(on_disk - set(listed))
    if extra:
        raise ManifestError(f"{directory}: files not in manifest: {extra[:3]}")
    for entry in manifest.files:
        data = (directory / entry.path).read_bytes()
        if len(data) != entry.bytes or f"{fnv1a64(data):016x}" != entry.fnv1a64:
            raise ChecksumMismatchError(f"{directory / entry.path}: checksum mismatch")
    return manifest


def read_episode(directory: str | Path) -> tuple[TelemetryTable, SessionMetadata, dict[str, CameraInfo]]:
    directory = Path(directory)
    verify_episode(directory)
    table = decode_telemetry((directory / TELEMETRY).read_bytes())
    metadata = SessionMetadata.from_dict(json.loads((directory / METADATA).read_text("utf-8")))
    cams = {k: CameraInfo(**v) for k, v in json.loads((directory / CAMERA_INFO).read_text("utf-8")).items()}
    if len(table) != metadata.timesteps:
        raise StoreError(f"{directory}: telemetry rows {len(table)} != metadata timesteps {metadata.timesteps}")
    return table, metadata, cams


def filter_by_sync(table: TelemetryTable, mode: str = "drop-invalid", tolerance: float | None = None):
    """Drop unsynchronized rows, or weight rows by ``1 - max_diff / tolerance`` clamped to [0, 1]."""
    if mode == "drop-invalid":
        return table.take(np.flatnonzero(table.is_valid))
    if mode == "weight-by-max-diff":
        tol = SyncPolicy().tolerance if tolerance is None else tolerance
        return table, np.clip(1.0 - table.max_diff / tol, 0.0, 1.0)
    raise ValueError(f"unknown filter mode {mode!r}")


@dataclass
class EpisodeSummary:
    path: str
    timesteps: int
    duration_sec: float
    sync_success_rate: float
    avg_sync_error_ms: float | None
    tp99_ms: float | None


def summarize(flags, max_diff) -> tuple[float, float | None, float | None]:
    flags = np.asarray(flags, dtype=bool)
    rate = success_rate(flags)
    if not flags.any():
        return rate, None, None
    return rate, mean_error_ms(flags, max_diff), percentile_error_ms(flags, max_diff, 99)


@dataclass
class DatasetReport:
    episodes: int
    total_timesteps: int
    sync_success_rate: float | None
    avg_sync_error_ms: float | None
    tp99_ms: float | None
    failures: list[dict]
    per_episode: list[EpisodeSummary]

    def to_dict(self) -> dict:
        return asdict(self)


def episode_dirs(root: str | Path) -> list[Path]:
    root = Path(root)
    return sorted(e for s in root.iterdir() if s.is_dir() for e in s.iterdir() if e.is_dir())


def validate_dataset(root: str | Path) -> DatasetReport:
    """Verify every episode under ``root`` and aggregate sync metrics over the readable ones."""
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"dataset root {root} not found")
    flags, diffs, failures, per_episode = [], [], [], []
    for ep in episode_dirs(root):
        rel = ep.relative_to(root).as_posix()
        try:
            table, meta, _ = read_episode(ep)
        except (StoreError, ValueError, KeyError) as exc:
            failures.append({"episode": rel, "error": f"{type(exc).__name__}: {exc}"})
            continue
        flags.append(table.is_valid)
        diffs.append(table.max_diff)
        rate, avg, tp99 = summarize(table.is_valid, table.max_diff)
        per_episode.append(EpisodeSummary(rel, len(table), meta.duration_sec, rate, avg, tp99))
    if flags:
        rate, avg, tp99 = summarize(np.concatenate(flags), np.concatenate(diffs))
        total = int(sum(len(f) for f in flags))
    else:
        rate = avg = tp99 = None
        total = 0
    return DatasetReport(len(per_episode), total, rate, avg, tp99, failures, per_episode)
