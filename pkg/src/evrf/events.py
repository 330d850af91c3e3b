"""Event streams, bin splitting and the spatial-temporal attention masks."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"EVRF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
RECORD_DTYPE = np.dtype([("x", "<u4"), ("y", "<u4"), ("t", "<u4"), ("p", "<i4")])


class EventFormatError(ValueError):
    pass


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


class EventStream:
    """Time-sorted events of one exposure, stored column-wise.

    Timestamps are integer microseconds; ``t_start``/``t_end`` bound the
    exposure.
    """

    def __init__(self, x, y, t, p, t_start, t_end, width: int, height: int):
        self.x = np.asarray(x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(y, dtype=np.int64).reshape(-1)
        self.t = np.asarray(t, dtype=np.int64).reshape(-1)
        self.p = np.asarray(p, dtype=np.int64).reshape(-1)
        self.t_start = t_start
        self.t_end = t_end
        self.width = int(width)
        self.height = int(height)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns differ in length")
        if t_end < t_start:
            raise ValueError("t_end must not precede t_start")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ValueError("events must be sorted by timestamp")
            if self.t[0] < t_start or self.t[-1] > t_end:
                raise ValueError("event timestamps fall outside the exposure")
            if self.x.min() < 0 or self.x.max() >= self.width or self.y.min() < 0 or self.y.max() >= self.height:
                raise ValueError("event coordinates outside the sensor")
            if not np.all(np.abs(self.p) == 1):
                raise ValueError("polarity must be +1 or -1")
        for arr in (self.x, self.y, self.t, self.p):
            arr.flags.writeable = False

    @classmethod
    def from_events(cls, events, t_start, t_end, width, height) -> "EventStream":
        events = list(events)
        cols = np.array([tuple(e) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], t_start, t_end, width, height)

    @classmethod
    def empty(cls, t_start, t_end, width, height) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, t_start, t_end, width, height)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def t_exp(self):
        return self.t_end - self.t_start

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def subset(self, idx) -> "EventStream":
        return EventStream(self.x[idx], self.y[idx], self.t[idx], self.p[idx],
                           self.t_start, self.t_end, self.width, self.height)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.shape == other.shape and self.t_start == other.t_start and self.t_end == other.t_end
                and all(np.array_equal(a, b) for a, b in
                        ((self.x, other.x), (self.y, other.y), (self.t, other.t), (self.p, other.p))))


@dataclass(frozen=True, eq=False)
class BinSet:
    """``b`` event bins, their ``b + 1`` split timestamps and derived data.

    ``index_bounds`` holds ``b + 1`` offsets into the parent stream: bin ``k``
    (zero-based) is ``stream[index_bounds[k]:index_bounds[k + 1]]``.
    """

    stream: EventStream
    index_bounds: np.ndarray
    split_times: np.ndarray

    @property
    def b(self) -> int:
        return len(self.index_bounds) - 1

    @property
    def bins(self) -> list[EventStream]:
        lo = self.index_bounds
        return [self.stream.subset(slice(lo[k], lo[k + 1])) for k in range(self.b)]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.index_bounds)

    @property
    def weights(self) -> np.ndarray:
        return time_weights(self.split_times)

    @property
    def counts(self) -> np.ndarray:
        return signed_counts(self)


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Per-pixel blur/sharp split; ``blur`` is a boolean (height, width) array."""

    blur: np.ndarray

    @property
    def sharp(self) -> np.ndarray:
        return ~self.blur

    @property
    def blur_pixels(self) -> set[tuple[int, int]]:
        ys, xs = np.nonzero(self.blur)
        return set(zip(xs.tolist(), ys.tolist()))

    @property
    def sharp_pixels(self) -> set[tuple[int, int]]:
        ys, xs = np.nonzero(~self.blur)
        return set(zip(xs.tolist(), ys.tolist()))

    @property
    def blur_fraction(self) -> float:
        return float(self.blur.mean())


def split_by_time(stream: EventStream, b: int) -> BinSet:
    """Equal-duration bins; bin k holds events with t in (t_{k-1}, t_k].

    Events stamped exactly ``t_start`` go to the first bin so the bins still
    partition the stream.
    """
    if b < 1:
        raise ValueError(f"b must be >= 1, got {b}")
    splits = stream.t_start + (np.arange(b + 1) / b) * stream.t_exp
    splits = splits.astype(np.float64)
    bounds = np.searchsorted(stream.t, splits, side="right")
    bounds[0] = 0
    bounds[-1] = len(stream)
    return BinSet(stream, bounds.astype(np.int64), splits)


def split_by_count(stream: EventStream, b: int) -> BinSet:
    """Equal-count bins over the time-sorted event indices.

    With one-based index i, bin k holds s(k-1)/b < i <= sk/b. Interior split
    times are the timestamps of each bin's last event. Streams with fewer
    events than bins fall back to :func:`split_by_time`.
    """
    if b < 1:
        raise ValueError(f"b must be >= 1, got {b}")
    s = len(stream)
    if s < b:
        logger.warning("only %d events for %d bins; splitting by time instead", s, b)
        return split_by_time(stream, b)
    bounds = (s * np.arange(b + 1)) // b
    splits = np.empty(b + 1, dtype=np.float64)
    splits[0] = stream.t_start
    splits[-1] = stream.t_end
    splits[1:-1] = stream.t[bounds[1:-1] - 1]
    return BinSet(stream, bounds.astype(np.int64), splits)


def time_weights(split_times) -> np.ndarray:
    """Trapezoidal weights W_k = (t_{k+1} - t_{k-1}) / (2 t_exp).

    Boundary convention: t_{-1} = t_0 and t_{b+1} = t_b. The weights sum to 1.
    """
    t = np.asarray(split_times, dtype=np.float64)
    if t.ndim != 1 or len(t) < 2:
        raise ValueError("need at least two split times")
    if np.any(np.diff(t) < 0):
        raise ValueError("split times must be non-decreasing")
    t_exp = t[-1] - t[0]
    if not t_exp > 0:
        raise ValueError("exposure must be positive")
    padded = np.concatenate([t[:1], t, t[-1:]])
    return (padded[2:] - padded[:-2]) / (2.0 * t_exp)


def signed_counts(binset: BinSet) -> np.ndarray:
    """Per-bin, per-pixel (#positive - #negative); shape (b, height, width)."""
    st = binset.stream
    out = np.zeros((binset.b, st.height, st.width), dtype=np.int64)
    k = np.repeat(np.arange(binset.b), binset.sizes)
    np.add.at(out, (k, st.y, st.x), st.p)
    return out


def spatial_mask(binset: BinSet) -> AttentionMask:
    """Pixels touched by at least one event are blur, the rest sharp."""
    st = binset.stream
    blur = np.zeros((st.height, st.width), dtype=bool)
    blur[st.y, st.x] = True
    return AttentionMask(blur)


def write_events(path, stream: EventStream) -> None:
    path = Path(path)
    rec = np.empty(len(stream), dtype=RECORD_DTYPE)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, stream.width, stream.height, len(stream)))
        f.write(rec.tobytes())


def read_events(path, t_start=None, t_end=None) -> EventStream:
    """Read the binary event format.

    The file carries no exposure bounds; they default to the first and last
    event timestamps.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise EventFormatError(f"{path}: truncated header")
    magic, version, width, height, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise EventFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise EventFormatError(f"{path}: unsupported version {version}")
    body = data[_HEADER.size:]
    if len(body) != count * RECORD_DTYPE.itemsize:
        raise EventFormatError(f"{path}: expected {count} records, found {len(body)} bytes")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE)
    return _from_records(rec["x"], rec["y"], rec["t"], rec["p"], width, height, t_start, t_end, path)


def write_events_csv(path, stream: EventStream) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "t_us", "p"])
        w.writerows(zip(stream.x.tolist(), stream.y.tolist(), stream.t.tolist(), stream.p.tolist()))


def read_events_csv(path, width: int, height: int, t_start=None, t_end=None) -> EventStream:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["x", "y", "t_us", "p"]:
            raise EventFormatError(f"{path}: unexpected CSV header {header}")
        rows = np.array([[int(v) for v in row] for row in reader], dtype=np.int64).reshape(-1, 4)
    return _from_records(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], width, height, t_start, t_end, path)


def _from_records(x, y, t, p, width, height, t_start, t_end, path) -> EventStream:
    t = np.asarray(t, dtype=np.int64)
    if t_start is None:
        t_start = int(t[0]) if len(t) else 0
    if t_end is None:
        t_end = int(t[-1]) if len(t) else t_start
    try:
        return EventStream(x, y, t, p, t_start, t_end, width, height)
    except ValueError as e:
        raise EventFormatError(f"{path}: {e}") from None
