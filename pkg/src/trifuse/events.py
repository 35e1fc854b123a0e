"""Event-camera streams: CSV parsing, time windowing, and rasterization
into dense polarity/temporal-bin frames.

CSV wire format: header line exactly ``t_us,x,y,polarity`` followed by rows
of four comma-separated decimal integers; timestamps are non-decreasing
microseconds, polarity is 0 (OFF) or 1 (ON).  Sensor geometry arrives
out of band.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from trifuse.tensor import Tensor, _wrap

HEADER = "t_us,x,y,polarity"
KERNELS = ("delta", "bilinear_t")


class EventError(ValueError):
    """Base for event CSV violations; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EventParseError(EventError):
    pass


class EventOrderError(EventError):
    pass


class EventBoundsError(EventError):
    pass


class Event(NamedTuple):
    t: int          # microseconds
    x: int
    y: int
    polarity: int   # 0 = OFF, 1 = ON


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events within a fixed sensor geometry."""

    width: int
    height: int
    t: np.ndarray         # uint64
    x: np.ndarray         # int32
    y: np.ndarray         # int32
    polarity: np.ndarray  # int8

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"sensor geometry must be positive, got {self.width}x{self.height}")
        t = np.ascontiguousarray(self.t, dtype=np.uint64)
        x = np.ascontiguousarray(self.x, dtype=np.int32)
        y = np.ascontiguousarray(self.y, dtype=np.int32)
        p = np.ascontiguousarray(self.polarity, dtype=np.int8)
        n = len(t)
        if not (len(x) == len(y) == len(p) == n):
            raise ValueError("event field arrays must have equal length")
        if n:
            if (t[1:] < t[:-1]).any():
                raise ValueError("timestamps must be non-decreasing")
            if (x < 0).any() or (x >= self.width).any() or (y < 0).any() or (y >= self.height).any():
                raise ValueError("event coordinates out of sensor bounds")
            if ((p != 0) & (p != 1)).any():
                raise ValueError("polarity must be 0 or 1")
        for name, arr in (("t", t), ("x", x), ("y", y), ("polarity", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.polarity[i]))

    @classmethod
    def from_events(cls, width: int, height: int, events: Iterable[Event]) -> "EventStream":
        ev = list(events)
        return cls(
            width,
            height,
            np.array([e.t for e in ev], dtype=np.uint64),
            np.array([e.x for e in ev], dtype=np.int32),
            np.array([e.y for e in ev], dtype=np.int32),
            np.array([e.polarity for e in ev], dtype=np.int8),
        )

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        return cls.from_events(width, height, [])


@dataclass(frozen=True, eq=False)
class Window:
    """Events of one half-open time window [start, end)."""

    events: EventStream
    start: int
    end: int


@dataclass(frozen=True, eq=False)
class EventFrame:
    """Dense frame of one window: (2 * bins, H, W), bin-major with the
    OFF channel before the ON channel inside each bin."""

    tensor: Tensor
    bins: int
    start: int
    end: int


def parse_events(source, width: int, height: int) -> EventStream:
    """Parse the event CSV format into a validated stream.

    ``source`` may be text, bytes, or a readable file object.  Errors carry
    the offending 1-based line number (the header is line 1).
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    else:
        raise TypeError(f"unsupported source type {type(source).__name__}")

    lines = text.splitlines()
    if not lines:
        raise EventParseError(1, f"missing header, expected {HEADER!r}")
    if lines[0].strip() != HEADER:
        raise EventParseError(1, f"bad header {lines[0]!r}, expected {HEADER!r}")

    ts: list[int] = []
    xs: list[int] = []
    ys: list[int] = []
    ps: list[int] = []
    prev_t = -1
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 4:
            raise EventParseError(lineno, f"expected 4 comma-separated fields, got {len(fields)}")
        try:
            t, x, y, p = (int(f.strip()) for f in fields)
        except ValueError:
            raise EventParseError(lineno, f"fields must be decimal integers, got {line!r}") from None
        if t < 0:
            raise EventParseError(lineno, f"timestamp must be non-negative, got {t}")
        if p not in (0, 1):
            raise EventParseError(lineno, f"polarity must be 0 or 1, got {p}")
        if t < prev_t:
            raise EventOrderError(lineno, f"timestamp {t} decreases below previous {prev_t}")
        if not (0 <= x < width):
            raise EventBoundsError(lineno, f"x={x} outside sensor width {width}")
        if not (0 <= y < height):
            raise EventBoundsError(lineno, f"y={y} outside sensor height {height}")
        prev_t = t
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)

    return EventStream(
        width,
        height,
        np.array(ts, dtype=np.uint64),
        np.array(xs, dtype=np.int32),
        np.array(ys, dtype=np.int32),
        np.array(ps, dtype=np.int8),
    )


def split_windows(s: EventStream, delta_t: int) -> list[Window]:
    """Half-open windows [t0 + k*delta_t, t0 + (k+1)*delta_t) anchored at the
    first event's timestamp.

    Every event lands in exactly one window.  Interior windows with no events
    are emitted (so window indices stay time-aligned); there are never empty
    trailing windows because the sequence stops at the last event's window.
    """
    if delta_t <= 0:
        raise ValueError(f"delta_t must be positive, got {delta_t}")
    if len(s) == 0:
        return []
    t0 = int(s.t[0])
    k = (s.t.astype(np.int64) - t0) // delta_t
    k_max = int(k[-1])
    starts = np.searchsorted(k, np.arange(k_max + 2))
    windows = []
    for i in range(k_max + 1):
        lo, hi = int(starts[i]), int(starts[i + 1])
        sub = EventStream(s.width, s.height, s.t[lo:hi], s.x[lo:hi], s.y[lo:hi], s.polarity[lo:hi])
        windows.append(Window(sub, start=t0 + i * delta_t, end=t0 + (i + 1) * delta_t))
    return windows


def rasterize(w: Window, bins: int, kernel: str = "delta") -> EventFrame:
    """Deposit each event's unit mass into a (2 * bins, H, W) frame.

    ``delta`` puts the whole unit into the event's temporal bin;
    ``bilinear_t`` splits it linearly between the two bins bracketing the
    normalized bin coordinate ``bins * (t - start) / (end - start) - 0.5``,
    clamped at the ends.  The spatial footprint is always the exact pixel and
    the polarity channel is 2 * bin + polarity.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}, expected one of {KERNELS}")
    if w.end < w.start:
        raise ValueError(f"window end {w.end} before start {w.start}")

    s = w.events
    acc = np.zeros((2 * bins, s.height, s.width), dtype=np.float64)
    if len(s):
        rel = s.t.astype(np.int64) - w.start
        if (rel < 0).any() or (w.end > w.start and (rel >= w.end - w.start).any()):
            raise ValueError("window holds events outside [start, end)")
        duration = w.end - w.start
        pol = s.polarity.astype(np.int64)
        if kernel == "delta":
            if duration > 0:
                b = np.minimum(bins * rel // duration, bins - 1)
            else:  # single-timestamp window
                b = np.zeros(len(s), dtype=np.int64)
            np.add.at(acc, (2 * b + pol, s.y, s.x), 1.0)
        else:
            if duration > 0:
                coord = bins * (rel.astype(np.float64) / duration) - 0.5
            else:
                coord = np.full(len(s), -0.5)
            lo = np.floor(coord).astype(np.int64)
            # weights are quantized to float32 up front so a cell holding a
            # single deposit stays exact in the stored float32 frame
            frac = (coord - lo).astype(np.float32).astype(np.float64)
            lo_c = np.clip(lo, 0, bins - 1)
            hi_c = np.clip(lo + 1, 0, bins - 1)
            np.add.at(acc, (2 * lo_c + pol, s.y, s.x), 1.0 - frac)
            np.add.at(acc, (2 * hi_c + pol, s.y, s.x), frac)

    return EventFrame(tensor=_wrap(acc.astype(np.float32)), bins=bins, start=w.start, end=w.end)
