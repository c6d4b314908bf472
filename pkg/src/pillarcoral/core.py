"""Domain primitives (points, boxes, frames, datasets) and their file formats.

Cloud files are headerless little-endian float32 quadruples ``(x, y, z, intensity)``.
Annotation files hold one JSON object per line. A dataset manifest is a JSON
document listing every frame with paths relative to the manifest directory.
"""
from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, IoError

CLOUD_DTYPE = np.dtype("<f4")
MANIFEST_NAME = "manifest.json"


class ClassId(enum.IntEnum):
    Car = 0
    Pedestrian = 1


class Domain(str, enum.Enum):
    Simulated = "Simulated"
    Real = "Real"


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.remainder(float(yaw), 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    return y


def normalize_yaw_array(yaw: np.ndarray) -> np.ndarray:
    y = np.remainder(np.asarray(yaw, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    # remainder maps +pi to -pi; the convention keeps +pi
    return np.where(y <= -np.pi, y + 2.0 * np.pi, y)


@dataclass(frozen=True)
class RangeConfig:
    x_min: float = -50.0
    x_max: float = 50.0
    y_min: float = -50.0
    y_max: float = 50.0
    z_min: float = -3.0
    z_max: float = 1.0

    def __post_init__(self):
        for lo, hi, axis in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y"), (self.z_min, self.z_max, "z")):
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
                raise ConfigError(f"range {axis}: min {lo} must be < max {hi}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Half-open containment mask for an (n, 3+) array."""
        xyz = np.asarray(xyz, dtype=np.float64)
        return np.all((xyz[:, :3] >= self.lower) & (xyz[:, :3] < self.upper), axis=1)


class PointCloud:
    """Immutable (n, 4) float32 array of ``x, y, z, intensity``."""

    __slots__ = ("_points",)

    def __init__(self, points=None):
        if points is None:
            arr = np.zeros((0, 4), dtype=CLOUD_DTYPE)
        else:
            arr = np.array(points, dtype=CLOUD_DTYPE, copy=True)
            if arr.size == 0:
                arr = arr.reshape(0, 4)
            if arr.ndim != 2 or arr.shape[1] != 4:
                raise FormatError(f"point array must have shape (n, 4), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError("point cloud contains non-finite values")
        if arr.shape[0] and (arr[:, 3].min() < 0.0 or arr[:, 3].max() > 1.0):
            raise FormatError("intensity must lie in [0, 1]")
        arr.flags.writeable = False
        self._points = arr

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def xyz(self) -> np.ndarray:
        return self._points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self._points[:, 3]

    def __len__(self) -> int:
        return self._points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self._points.shape == other._points.shape and self._points.tobytes() == other._points.tobytes()

    def __hash__(self):
        return hash(self._points.tobytes())

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)})"

    def select(self, mask: np.ndarray) -> PointCloud:
        return PointCloud(self._points[np.asarray(mask)])


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: ClassId
    score: float | None = None

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise FormatError("center and size must have three components")
        if not all(math.isfinite(v) for v in center + size) or not math.isfinite(self.yaw):
            raise FormatError("box values must be finite")
        if min(size) <= 0.0:
            raise FormatError(f"box size must be positive, got {size}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise FormatError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))
        object.__setattr__(self, "class_id", ClassId(self.class_id))
        if self.score is not None:
            object.__setattr__(self, "score", float(self.score))

    @property
    def is_prediction(self) -> bool:
        return self.score is not None

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw])

    def with_score(self, score: float | None) -> Box3D:
        return Box3D(self.center, self.size, self.yaw, self.class_id, score)

    def translated(self, dx: float, dy: float, dz: float = 0.0) -> Box3D:
        x, y, z = self.center
        return Box3D((x + dx, y + dy, z + dz), self.size, self.yaw, self.class_id, self.score)

    def to_record(self) -> dict:
        rec = {
            "class": self.class_id.name,
            "center": list(self.center),
            "size": list(self.size),
            "yaw": self.yaw,
        }
        if self.score is not None:
            rec["score"] = self.score
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> Box3D:
        try:
            class_id = ClassId[rec["class"]]
        except KeyError as exc:
            raise FormatError(f"unknown or missing class in {rec!r}") from exc
        extra = set(rec) - {"class", "center", "size", "yaw", "score"}
        if extra:
            raise FormatError(f"unknown keys {sorted(extra)}")
        try:
            return cls(tuple(rec["center"]), tuple(rec["size"]), float(rec["yaw"]), class_id, rec.get("score"))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed box record {rec!r}") from exc


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    """Stack boxes into an (n, 7) array ``x, y, z, l, w, h, yaw``."""
    if not boxes:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


@dataclass(frozen=True)
class Frame:
    cloud: PointCloud
    boxes: tuple[Box3D, ...]
    frame_id: str
    domain_tag: Domain = Domain.Simulated

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "domain_tag", Domain(self.domain_tag))

    def replace(self, **changes) -> Frame:
        kw = dict(cloud=self.cloud, boxes=self.boxes, frame_id=self.frame_id, domain_tag=self.domain_tag)
        kw.update(changes)
        return Frame(**kw)


@dataclass(frozen=True)
class Dataset:
    frames: tuple[Frame, ...]
    name: str = "dataset"
    seed: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        ids = [f.frame_id for f in frames]
        if len(set(ids)) != len(ids):
            raise FormatError("frame ids must be unique within a dataset")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def by_id(self) -> dict[str, Frame]:
        return {f.frame_id: f for f in self.frames}

    def with_frames(self, frames: Iterable[Frame]) -> Dataset:
        return Dataset(tuple(frames), self.name, self.seed, dict(self.meta))

    def without_labels(self) -> Dataset:
        return self.with_frames(f.replace(boxes=()) for f in self.frames)


# -- cloud files ---------------------------------------------------------------

def read_cloud(path) -> PointCloud:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read cloud {path}: {exc}") from exc
    if len(raw) % 16:
        raise FormatError(f"{path}: byte length {len(raw)} is not a multiple of 16")
    arr = np.frombuffer(raw, dtype=CLOUD_DTYPE).reshape(-1, 4)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite values")
    return PointCloud(arr)


def write_cloud(cloud: PointCloud, path) -> None:
    arr = np.asarray(cloud.points, dtype=CLOUD_DTYPE)
    if not np.all(np.isfinite(arr)):
        raise FormatError("refusing to write non-finite points")
    try:
        Path(path).write_bytes(arr.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write cloud {path}: {exc}") from exc


# -- annotation files ------------------------------------------------------------

def read_annotations(path) -> list[Box3D]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read annotations {path}: {exc}") from exc
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise FormatError("record is not an object")
            boxes.append(Box3D.from_record(rec))
        except (ValueError, FormatError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return boxes


def write_annotations(boxes: Iterable[Box3D], path) -> None:
    lines = [json.dumps(b.to_record()) for b in boxes]
    try:
        Path(path).write_text("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise IoError(f"cannot write annotations {path}: {exc}") from exc


# -- datasets ---------------------------------------------------------------------

def write_dataset(ds: Dataset, directory) -> Path:
    """Write clouds, annotations and a manifest under ``directory``."""
    directory = Path(directory)
    try:
        (directory / "clouds").mkdir(parents=True, exist_ok=True)
        (directory / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {directory}: {exc}") from exc
    entries = []
    for frame in ds.frames:
        cloud_rel = f"clouds/{frame.frame_id}.bin"
        label_rel = f"labels/{frame.frame_id}.jsonl"
        write_cloud(frame.cloud, directory / cloud_rel)
        write_annotations(frame.boxes, directory / label_rel)
        entries.append({
            "frame_id": frame.frame_id,
            "cloud": cloud_rel,
            "annotations": label_rel,
            "domain": frame.domain_tag.value,
        })
    manifest = {"name": ds.name, "seed": ds.seed, "meta": ds.meta, "frames": entries}
    path = directory / MANIFEST_NAME
    try:
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc
    return path


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / MANIFEST_NAME if directory.is_dir() or not directory.suffix else directory
    if path.is_file():
        directory = path.parent
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    frames = []
    for entry in manifest.get("frames", []):
        try:
            fid, cloud_rel, label_rel, domain = (
                entry["frame_id"], entry["cloud"], entry["annotations"], entry["domain"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed manifest entry {entry!r}") from exc
        frames.append(Frame(
            read_cloud(directory / cloud_rel),
            tuple(read_annotations(directory / label_rel)),
            str(fid),
            Domain(domain),
        ))
    return Dataset(tuple(frames), manifest.get("name", directory.name), manifest.get("seed"),
                   manifest.get("meta") or {})


def clip_to_range(cloud: PointCloud, rng: RangeConfig) -> PointCloud:
    """Keep the points inside the half-open range box, preserving order."""
    if len(cloud) == 0:
        return cloud
    return cloud.select(rng.contains(cloud.points))


def dataset_exists(directory) -> bool:
    return os.path.isfile(os.path.join(directory, MANIFEST_NAME))
