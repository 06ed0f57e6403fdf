"""Event data types, file formats, voxel grids and speckle patch extraction."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

BINARY_MAGIC = b"EVS1"
_HEADER = struct.Struct("<4sHHQ")
_RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
TEXT_HEADER_PREFIX = "# evs-text"


class EventDecodeError(ValueError):
    """Raised when an event file cannot be decoded."""


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """Events stored column-wise; timestamps are integer microseconds."""

    width: int
    height: int
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64).ravel()
        self.x = np.asarray(self.x, dtype=np.int64).ravel()
        self.y = np.asarray(self.y, dtype=np.int64).ravel()
        self.p = np.asarray(self.p, dtype=np.int8).ravel()
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns must have equal length")
        if self.width < 1 or self.height < 1:
            raise ValueError("sensor dimensions must be positive")
        if n:
            if self.t.min() < 0:
                raise ValueError("negative timestamp")
            if self.x.min() < 0 or self.x.max() >= self.width:
                raise ValueError("event x outside sensor")
            if self.y.min() < 0 or self.y.max() >= self.height:
                raise ValueError("event y outside sensor")
            if not np.all((self.p == 1) | (self.p == -1)):
                raise ValueError("invalid polarity")
            if np.any(np.diff(self.t) < 0):
                order = np.argsort(self.t, kind="stable")
                self.t, self.x, self.y, self.p = (a[order] for a in (self.t, self.x, self.y, self.p))

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.p.tolist()):
            yield Event(x, y, t, p)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and all(np.array_equal(a, b) for a, b in zip(self.columns(), other.columns()))
        )

    def columns(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.t, self.x, self.y, self.p

    @classmethod
    def from_events(cls, events: Sequence[Event], width: int, height: int) -> "EventStream":
        if not events:
            return cls(width, height)
        x, y, t, p = zip(*events)
        return cls(width, height, t=t, x=x, y=y, p=p)

    def select(self, mask: np.ndarray) -> "EventStream":
        return EventStream(self.width, self.height, self.t[mask], self.x[mask], self.y[mask], self.p[mask])

    def shifted(self, offset_us: int) -> "EventStream":
        return EventStream(self.width, self.height, self.t + offset_us, self.x, self.y, self.p)


def concatenate(streams: Sequence[EventStream]) -> EventStream:
    """Merge streams from the same sensor into one time-sorted stream."""
    if not streams:
        raise ValueError("no streams given")
    w, h = streams[0].width, streams[0].height
    cols = [np.concatenate([s.columns()[i] for s in streams]) for i in range(4)]
    order = np.lexsort((cols[3], cols[1], cols[2], cols[0]))
    return EventStream(w, h, *(c[order] for c in cols))


# --------------------------------------------------------------------------
# file formats


def write_events(stream: EventStream, path: str | os.PathLike, format: str = "binary") -> None:
    """Write a stream as ``binary`` (EVS1) or ``text`` (``t_us x y p`` lines)."""
    if format == "binary":
        header = _HEADER.pack(BINARY_MAGIC, stream.width, stream.height, len(stream))
        rec = np.empty(len(stream), dtype=_RECORD_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(rec.tobytes())
    elif format == "text":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{TEXT_HEADER_PREFIX} width={stream.width} height={stream.height}\n")
            data = np.column_stack(stream.columns()) if len(stream) else np.zeros((0, 4), np.int64)
            np.savetxt(fh, data, fmt="%d")
    else:
        raise ValueError(f"unknown event format {format!r}")


def read_events(path: str | os.PathLike) -> EventStream:
    """Decode an event file; the format is detected from the leading bytes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] == BINARY_MAGIC:
        return _decode_binary(raw)
    return _decode_text(raw)


def _decode_binary(raw: bytes) -> EventStream:
    if len(raw) < _HEADER.size:
        raise EventDecodeError(f"truncated header at byte offset {len(raw)}")
    _, width, height, count = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size:]
    expected = count * _RECORD_DTYPE.itemsize
    if len(body) != expected:
        raise EventDecodeError(
            f"record section at byte offset {_HEADER.size} holds {len(body)} bytes, expected {expected}"
        )
    rec = np.frombuffer(body, dtype=_RECORD_DTYPE)
    bad = np.flatnonzero((rec["p"] != 1) & (rec["p"] != -1))
    if len(bad):
        off = _HEADER.size + int(bad[0]) * _RECORD_DTYPE.itemsize
        raise EventDecodeError(f"invalid polarity {int(rec['p'][bad[0]])} in record at byte offset {off}")
    bad = np.flatnonzero((rec["x"] >= width) | (rec["y"] >= height))
    if len(bad):
        off = _HEADER.size + int(bad[0]) * _RECORD_DTYPE.itemsize
        raise EventDecodeError(f"coordinates outside sensor in record at byte offset {off}")
    return EventStream(width, height, rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"])


def _decode_text(raw: bytes) -> EventStream:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EventDecodeError(f"not UTF-8 text (byte offset {exc.start})") from exc
    width = height = None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith(TEXT_HEADER_PREFIX):
                width, height = _parse_text_header(line, lineno)
            continue
        parts = line.split()
        if len(parts) != 4:
            raise EventDecodeError(f"line {lineno}: expected 4 fields 't_us x y p', got {len(parts)}")
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise EventDecodeError(f"line {lineno}: non-integer field") from None
        if p not in (1, -1):
            raise EventDecodeError(f"line {lineno}: invalid polarity {p}")
        if t < 0 or x < 0 or y < 0:
            raise EventDecodeError(f"line {lineno}: negative value")
        rows.append((t, x, y, p))
    data = np.array(rows, dtype=np.int64).reshape(-1, 4)
    if width is None:
        width = int(data[:, 1].max()) + 1 if len(data) else 1
        height = int(data[:, 2].max()) + 1 if len(data) else 1
    try:
        return EventStream(width, height, data[:, 0], data[:, 1], data[:, 2], data[:, 3])
    except ValueError as exc:
        raise EventDecodeError(str(exc)) from None


def _parse_text_header(line: str, lineno: int) -> tuple[int, int]:
    fields = dict(tok.split("=", 1) for tok in line[len(TEXT_HEADER_PREFIX):].split() if "=" in tok)
    try:
        return int(fields["width"]), int(fields["height"])
    except (KeyError, ValueError):
        raise EventDecodeError(f"line {lineno}: malformed header") from None


# --------------------------------------------------------------------------
# voxel grids


@dataclass
class VoxelGrid:
    """T x 2 x H x W event mass; plane 0 holds positive, plane 1 negative events."""

    values: np.ndarray
    window_start: int
    window_end: int

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def duration_s(self) -> float:
        return (self.window_end - self.window_start) * 1e-6

    @property
    def sample_rate(self) -> float:
        """Bins per second of window, the rate of any per-bin signal."""
        return self.bins / self.duration_s

    @property
    def bin_width_us(self) -> float:
        return (self.window_end - self.window_start) / self.bins

    def node_times_us(self) -> np.ndarray:
        """Times at which each bin's interpolation kernel peaks."""
        if self.bins == 1:
            return np.array([float(self.window_start)])
        return self.window_start + np.arange(self.bins) * (self.window_end - self.window_start) / (self.bins - 1)

    def signed(self) -> np.ndarray:
        return self.values[:, 0] - self.values[:, 1]

    def __add__(self, other: "VoxelGrid") -> "VoxelGrid":
        if (self.window_start, self.window_end) != (other.window_start, other.window_end):
            raise ValueError("voxel windows differ")
        return VoxelGrid(self.values + other.values, self.window_start, self.window_end)


def _check_window(window) -> tuple[int, int]:
    start, end = (int(v) for v in window)
    if start >= end:
        raise ValueError(f"empty window [{start}, {end})")
    return start, end


def voxelize(stream: EventStream, bins: int, window: tuple[int, int]) -> VoxelGrid:
    """Bin events into a voxel grid with linear interpolation in time.

    Normalized time ``(t - start) / (end - start) * (bins - 1)`` places each
    event between two neighbouring bins; its unit mass is split linearly.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    start, end = _check_window(window)
    sel = (stream.t >= start) & (stream.t < end)
    t, x, y, p = (c[sel] for c in stream.columns())
    h, w = stream.height, stream.width
    plane = (p < 0).astype(np.int64)
    tn = (t - start).astype(np.float64) * ((bins - 1) / (end - start))
    lo = np.floor(tn).astype(np.int64)
    frac = tn - lo
    hi = np.minimum(lo + 1, bins - 1)
    pix = (plane * h + y) * w + x
    size = bins * 2 * h * w
    stride = 2 * h * w
    vals = np.bincount(lo * stride + pix, weights=1.0 - frac, minlength=size)
    vals += np.bincount(hi * stride + pix, weights=frac, minlength=size)
    return VoxelGrid(vals.reshape(bins, 2, h, w), start, end)


def accumulate_frame(stream: EventStream, window: tuple[int, int]) -> np.ndarray:
    """Per-pixel event counts (both polarities) within ``[start, end)``."""
    start, end = _check_window(window)
    sel = (stream.t >= start) & (stream.t < end)
    idx = stream.y[sel] * stream.width + stream.x[sel]
    counts = np.bincount(idx, minlength=stream.width * stream.height)
    return counts.reshape(stream.height, stream.width)


# --------------------------------------------------------------------------
# speckle regions and patches


@dataclass(frozen=True)
class RegionSpec:
    center: tuple[int, int]
    extent: tuple[int, int] = (32, 32)
    id: int = 0

    def __post_init__(self):
        if self.extent[0] < 1 or self.extent[1] < 1:
            raise ValueError("region extent must be >= 1")

    def box(self) -> tuple[int, int, int, int]:
        """Half-open pixel box ``(x0, y0, x1, y1)``."""
        pw, ph = self.extent
        x0 = self.center[0] - pw // 2
        y0 = self.center[1] - ph // 2
        return x0, y0, x0 + pw, y0 + ph

    def fits(self, width: int, height: int) -> bool:
        x0, y0, x1, y1 = self.box()
        return x0 >= 0 and y0 >= 0 and x1 <= width and y1 <= height


def clamp_region(center: tuple[int, int], extent: tuple[int, int], width: int, height: int,
                 id: int = 0) -> RegionSpec:
    """Shrink the extent to the sensor and shift the box so it lies inside."""
    pw, ph = min(extent[0], width), min(extent[1], height)
    cx = int(np.clip(center[0], pw // 2, width - pw + pw // 2))
    cy = int(np.clip(center[1], ph // 2, height - ph + ph // 2))
    return RegionSpec((cx, cy), (pw, ph), id)


def extract_speckle_regions(accum: np.ndarray, min_count: int = 1, min_area: int = 1,
                            patch_extent: tuple[int, int] = (32, 32)) -> list[RegionSpec]:
    """Find bright speckles in an accumulated event frame.

    Pixels with at least ``min_count`` events are grouped into 8-connected
    components; components smaller than ``min_area`` are dropped. Regions are
    centred on the count-weighted centroid and ordered by total count.
    """
    if min_count < 1 or min_area < 1:
        raise ValueError("thresholds must be >= 1")
    accum = np.asarray(accum)
    height, width = accum.shape
    labels, n = ndimage.label(accum >= min_count, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    area = ndimage.sum_labels(np.ones_like(accum), labels, idx)
    total = ndimage.sum_labels(accum.astype(np.float64), labels, idx)
    yy, xx = np.indices(accum.shape)
    cx = ndimage.sum_labels(accum * xx, labels, idx) / total
    cy = ndimage.sum_labels(accum * yy, labels, idx) / total
    keep = [k for k in range(n) if area[k] >= min_area]
    # stable sort on -total keeps label order (raster order) on ties
    keep.sort(key=lambda k: -total[k])
    return [
        clamp_region((int(round(cx[k])), int(round(cy[k]))), patch_extent, width, height, id=i)
        for i, k in enumerate(keep)
    ]


@dataclass
class PatchSet:
    """Crops of a voxel grid, each ``T x 2 x ph x pw``."""

    patches: list[np.ndarray]
    regions: list[RegionSpec]
    window_start: int = 0
    window_end: int = 1

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def bins(self) -> int:
        return self.patches[0].shape[0]

    @property
    def sample_rate(self) -> float:
        return self.bins / ((self.window_end - self.window_start) * 1e-6)

    def stacked(self) -> np.ndarray:
        """N x T x 2 x ph x pw array; all patches must share one extent."""
        return np.stack(self.patches)


def crop_patches(voxel: VoxelGrid, regions: Sequence[RegionSpec]) -> PatchSet:
    if not regions:
        raise ValueError("at least one region is required")
    patches = []
    for r in regions:
        if not r.fits(voxel.width, voxel.height):
            raise ValueError(f"region {r.id} box {r.box()} outside {voxel.width}x{voxel.height} grid")
        x0, y0, x1, y1 = r.box()
        patches.append(voxel.values[:, :, y0:y1, x0:x1].copy())
    return PatchSet(patches, list(regions), voxel.window_start, voxel.window_end)
