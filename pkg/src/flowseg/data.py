"""Point-cloud frame containers and frame-file I/O.

Binary frame files are little-endian throughout: 4-byte magic ``b"SFPC"``,
u32 version (currently 1), u32 point count N, u8 flags (bit 0: instance
labels present, bit 1: per-point flow present), then N*3 float32 xyz,
then N u32 labels if flagged, then N*3 float32 flow vectors if flagged.
Coordinates are stored as float32 on disk and held as float64 in memory,
so values written from a decoded file round-trip bit-exactly.

Paths ending in ``.csv`` are read as the debug format ``x,y,z[,label]``
(no header line) instead of the binary layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .rigid import RigidTransform

MAGIC = b"SFPC"
FORMAT_VERSION = 1
_FLAG_LABELS = 0x01
_FLAG_FLOW = 0x02

# byte offsets of the fixed header fields
_OFF_MAGIC = 0
_OFF_VERSION = 4
_OFF_COUNT = 8
_OFF_FLAGS = 12
_OFF_PAYLOAD = 13

FLOW_KINDS = ("ego", "residual", "total")


class FrameFormatError(Exception):
    """Malformed frame file. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagic(FrameFormatError):
    pass


class UnsupportedVersion(FrameFormatError):
    pass


class TruncatedFile(FrameFormatError):
    pass


class NonFiniteCoordinate(FrameFormatError):
    pass


class IoFailure(Exception):
    """Filesystem-level read/write failure."""


class LengthMismatch(ValueError):
    """Arrays that must describe the same points have different lengths."""


def _as_points(arr, name: str) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    return out


def _freeze(arr: np.ndarray, source) -> np.ndarray:
    # Never mark a caller-owned array read-only behind its back.
    if arr is source:
        arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PointCloud:
    """One frame of points, with optional ground-truth labels and flow.

    Immutable after construction (arrays are marked read-only) so clouds can
    be shared across threads. ``gt_labels`` uses 0 for background and
    positive integers for instance ids; ``gt_flow`` is the per-point
    displacement into the next frame.
    """

    points: np.ndarray
    frame_index: int = 0
    gt_labels: np.ndarray | None = None
    gt_flow: np.ndarray | None = None

    def __post_init__(self):
        pts = _freeze(_as_points(self.points, "points"), self.points)
        object.__setattr__(self, "points", pts)
        if self.gt_labels is not None:
            labels = np.ascontiguousarray(self.gt_labels, dtype=np.int64)
            if labels.shape != (len(pts),):
                raise LengthMismatch(
                    f"gt_labels length {labels.shape} does not match {len(pts)} points"
                )
            if labels.size and labels.min() < 0:
                raise ValueError("gt_labels must be non-negative")
            object.__setattr__(self, "gt_labels", _freeze(labels, self.gt_labels))
        if self.gt_flow is not None:
            flow = _as_points(self.gt_flow, "gt_flow")
            if len(flow) != len(pts):
                raise LengthMismatch(
                    f"gt_flow length {len(flow)} does not match {len(pts)} points"
                )
            object.__setattr__(self, "gt_flow", _freeze(flow, self.gt_flow))

    @property
    def n(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class FlowField:
    """Per-point displacement vectors of one kind: ego, residual, or total."""

    vectors: np.ndarray
    kind: str

    def __post_init__(self):
        vec = _freeze(_as_points(self.vectors, "vectors"), self.vectors)
        object.__setattr__(self, "vectors", vec)
        if self.kind not in FLOW_KINDS:
            raise ValueError(f"kind must be one of {FLOW_KINDS}, got {self.kind!r}")

    @property
    def n(self) -> int:
        return len(self.vectors)


def combine_flow(ego: FlowField, residual: FlowField) -> FlowField:
    """Total flow = ego flow + residual flow, per point."""
    if ego.kind != "ego" or residual.kind != "residual":
        raise ValueError("combine_flow expects (ego, residual) fields")
    if ego.n != residual.n:
        raise LengthMismatch(f"ego has {ego.n} vectors, residual has {residual.n}")
    return FlowField(ego.vectors + residual.vectors, "total")


@dataclass(frozen=True)
class MaskLogits:
    """Raw (pre-softmax) per-point mask scores; channel 0 is background."""

    logits: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.logits, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 2:
            raise ValueError(f"logits must have shape (N, C) with C >= 2, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits contain non-finite values")
        object.__setattr__(self, "logits", _freeze(arr, self.logits))

    @property
    def n(self) -> int:
        return len(self.logits)

    @property
    def channels(self) -> int:
        return self.logits.shape[1]


@dataclass(frozen=True)
class FramePair:
    """Two consecutive frames, optionally with an ego-pose hint (source->target)."""

    source: PointCloud
    target: PointCloud
    ego_pose_hint: "RigidTransform | None" = field(default=None)

    def __post_init__(self):
        if self.source.frame_index + 1 != self.target.frame_index:
            raise ValueError(
                "target frame_index must be source frame_index + 1 "
                f"(got {self.source.frame_index} -> {self.target.frame_index})"
            )


def crop_to_eval_region(cloud: PointCloud, half_extent: float):
    """Keep points with |x| <= half_extent and |y| <= half_extent (closed).

    Returns the cropped cloud and the index map back into the original cloud.
    The result may be empty.
    """
    if half_extent < 0:
        raise ValueError("half_extent must be non-negative")
    xy = cloud.points[:, :2]
    keep = np.all(np.abs(xy) <= half_extent, axis=1)
    idx = np.nonzero(keep)[0]
    cropped = PointCloud(
        cloud.points[idx],
        frame_index=cloud.frame_index,
        gt_labels=None if cloud.gt_labels is None else cloud.gt_labels[idx],
        gt_flow=None if cloud.gt_flow is None else cloud.gt_flow[idx],
    )
    return cropped, idx


def _take(buf: bytes, offset: int, count: int) -> bytes:
    if offset + count > len(buf):
        raise TruncatedFile(
            f"need {offset + count} bytes, file has {len(buf)}", len(buf)
        )
    return buf[offset : offset + count]


def _check_finite_f32(arr: np.ndarray, base_offset: int, what: str):
    bad = np.nonzero(~np.isfinite(arr.reshape(-1)))[0]
    if bad.size:
        raise NonFiniteCoordinate(
            f"non-finite {what} value", base_offset + 4 * int(bad[0])
        )


def decode_frame(buf: bytes, frame_index: int = 0) -> PointCloud:
    """Decode one binary frame from bytes. See the module docstring for layout."""
    magic = _take(buf, _OFF_MAGIC, 4)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {magic!r}", _OFF_MAGIC)
    (version,) = struct.unpack_from("<I", buf, _OFF_VERSION)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported version {version}", _OFF_VERSION)
    (count,) = struct.unpack_from("<I", _take(buf, _OFF_COUNT, 4), 0)
    flags = _take(buf, _OFF_FLAGS, 1)[0]
    if flags & ~(_FLAG_LABELS | _FLAG_FLOW):
        raise UnsupportedVersion(f"unknown flag bits 0x{flags:02x}", _OFF_FLAGS)

    offset = _OFF_PAYLOAD
    raw = _take(buf, offset, 12 * count)
    points = np.frombuffer(raw, dtype="<f4").reshape(count, 3)
    _check_finite_f32(points, offset, "coordinate")
    offset += 12 * count

    labels = None
    if flags & _FLAG_LABELS:
        raw = _take(buf, offset, 4 * count)
        labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        offset += 4 * count

    flow = None
    if flags & _FLAG_FLOW:
        raw = _take(buf, offset, 12 * count)
        flow = np.frombuffer(raw, dtype="<f4").reshape(count, 3)
        _check_finite_f32(flow, offset, "flow")
        offset += 12 * count

    return PointCloud(
        points.astype(np.float64),
        frame_index=frame_index,
        gt_labels=labels,
        gt_flow=None if flow is None else flow.astype(np.float64),
    )


def encode_frame(cloud: PointCloud) -> bytes:
    """Encode a cloud to the binary frame layout (inverse of decode_frame)."""
    flags = 0
    if cloud.gt_labels is not None:
        flags |= _FLAG_LABELS
    if cloud.gt_flow is not None:
        flags |= _FLAG_FLOW
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", cloud.n),
        struct.pack("<B", flags),
        np.ascontiguousarray(cloud.points, dtype="<f4").tobytes(),
    ]
    if cloud.gt_labels is not None:
        if cloud.gt_labels.size and cloud.gt_labels.max() >= 2**32:
            raise ValueError("labels exceed u32 range")
        parts.append(np.ascontiguousarray(cloud.gt_labels, dtype="<u4").tobytes())
    if cloud.gt_flow is not None:
        parts.append(np.ascontiguousarray(cloud.gt_flow, dtype="<f4").tobytes())
    return b"".join(parts)


def read_frame(path, frame_index: int = 0) -> PointCloud:
    """Read one frame file (binary layout, or CSV when the path ends in .csv)."""
    if str(path).endswith(".csv"):
        return _read_csv(path, frame_index)
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_frame(buf, frame_index=frame_index)


def write_frame(cloud: PointCloud, path) -> None:
    """Write a cloud as a binary frame file. Empty clouds are not writable."""
    if cloud.n == 0:
        raise ValueError("refusing to write an empty cloud")
    buf = encode_frame(cloud)
    try:
        with open(path, "wb") as fh:
            fh.write(buf)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_csv(path, frame_index: int) -> PointCloud:
    try:
        rows = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise IoFailure(f"malformed CSV {path}: {exc}") from exc
    if rows.size == 0:
        raise IoFailure(f"empty CSV {path}")
    if rows.shape[1] == 3:
        return PointCloud(rows, frame_index=frame_index)
    if rows.shape[1] == 4:
        return PointCloud(
            rows[:, :3],
            frame_index=frame_index,
            gt_labels=rows[:, 3].astype(np.int64),
        )
    raise IoFailure(f"CSV {path} must have 3 or 4 columns, found {rows.shape[1]}")
