"""Event-stream ingestion and preparation.

File format (".evt", little-endian), documented byte-exact:

* one ASCII header line: ``#EVT1 <width> <height>\\n``
* then fixed-width 8-byte records: ``uint32 addr``, ``uint32 timestamp_us``.

``addr`` packs, from the least significant bit:

* bit 0        polarity (1 = on, 0 = off)
* bits 1..14   x  (14 bits)
* bits 15..27  y  (13 bits)
* bits 28..31  record type; type 0 is a polarity event, any other type is
  skipped by the reader (and counted on ``EventStream.skipped_records``).

Records must be written in non-decreasing timestamp order; the reader
stable-sorts by timestamp, so round-trips are exact.  A payload whose
length is not a multiple of 8 raises :class:`EventParseError` with the
byte offset of the truncated record; an unknown header version raises
:class:`UnsupportedFormatError`.

Dataset directory layout: one ``.evt`` file per recording plus a
``manifest.tsv`` table with a header row and one line per recording:
``file<TAB>label<TAB>subject<TAB>light``.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    EventParseError,
    SampleTooShortError,
    ShapeMismatchError,
    UnsupportedFormatError,
)

logger = logging.getLogger(__name__)

_MAGIC = "#EVT1"
_X_BITS, _Y_BITS = 14, 13
MAX_WIDTH, MAX_HEIGHT = 1 << _X_BITS, 1 << _Y_BITS


@dataclass
class EventStream:
    """Time-sorted events from an event camera or generator.

    t: int64 microseconds (non-decreasing); x, y: int32 pixel coordinates;
    polarity: uint8, 1 = on, 0 = off.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray
    width: int
    height: int
    skipped_records: int = field(default=0, compare=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.polarity = np.asarray(self.polarity, dtype=np.uint8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.polarity) == n):
            raise ShapeMismatchError("event field lengths differ")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ConfigurationError("event timestamps must be non-decreasing")
            if self.x.min() < 0 or self.x.max() >= self.width:
                raise ConfigurationError("event x out of sensor bounds")
            if self.y.min() < 0 or self.y.max() >= self.height:
                raise ConfigurationError("event y out of sensor bounds")

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.polarity, other.polarity)
        )

    @property
    def duration_ms(self) -> float:
        return float(self.t[-1]) / 1000.0 if len(self) else 0.0


@dataclass
class FrameSequence:
    """Dense binned view of a stream: [T, 2, H, W] counts.

    Channel 0 holds on-polarity counts, channel 1 off-polarity.
    """

    data: np.ndarray
    dt_ms: float
    origin: str = ""

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != 2:
            raise ShapeMismatchError(f"frames must be [T, 2, H, W], got {self.data.shape}")


def parse_event_file(data: bytes) -> EventStream:
    """Decode an event file; see the module docstring for the byte layout.

    Unsupported record types are skipped and counted on the returned
    stream's ``skipped_records``.
    """
    nl = data.find(b"\n")
    if nl < 0:
        raise EventParseError("missing header line", offset=0)
    header = data[:nl].decode("ascii", errors="replace").split()
    if not header or not header[0].startswith("#EVT"):
        raise EventParseError("bad header magic", offset=0)
    if header[0] != _MAGIC:
        raise UnsupportedFormatError(f"unsupported event file version {header[0]!r}")
    if len(header) != 3:
        raise EventParseError("header must be '#EVT1 <width> <height>'", offset=0)
    try:
        width, height = int(header[1]), int(header[2])
    except ValueError as exc:
        raise EventParseError(f"bad header dimensions: {exc}", offset=0)

    payload = data[nl + 1:]
    if len(payload) % 8:
        raise EventParseError(
            "truncated record", offset=nl + 1 + (len(payload) // 8) * 8
        )
    raw = np.frombuffer(payload, dtype="<u4").reshape(-1, 2)
    addr, t = raw[:, 0], raw[:, 1]
    rectype = addr >> 28
    keep = rectype == 0
    skipped = int((~keep).sum())
    if skipped:
        logger.warning("skipped %d unsupported event records", skipped)
        addr, t = addr[keep], t[keep]
    polarity = (addr & 1).astype(np.uint8)
    x = ((addr >> 1) & (MAX_WIDTH - 1)).astype(np.int32)
    y = ((addr >> 15) & (MAX_HEIGHT - 1)).astype(np.int32)
    t = t.astype(np.int64)
    order = np.argsort(t, kind="stable")
    return EventStream(
        t=t[order], x=x[order], y=y[order], polarity=polarity[order],
        width=width, height=height, skipped_records=skipped,
    )


def write_event_file(stream: EventStream) -> bytes:
    """Serialize a stream; ``parse_event_file(write_event_file(s)) == s``."""
    if stream.width > MAX_WIDTH or stream.height > MAX_HEIGHT:
        raise ConfigurationError(
            f"sensor {stream.width}x{stream.height} exceeds the {MAX_WIDTH}x{MAX_HEIGHT} "
            "address range of the file format"
        )
    header = f"{_MAGIC} {stream.width} {stream.height}\n".encode("ascii")
    addr = (
        stream.polarity.astype(np.uint32)
        | (stream.x.astype(np.uint32) << 1)
        | (stream.y.astype(np.uint32) << 15)
    )
    raw = np.empty((len(stream), 2), dtype="<u4")
    raw[:, 0] = addr
    raw[:, 1] = stream.t.astype(np.uint32)
    return header + raw.tobytes()


def downsample_sum(stream: EventStream, factor: int) -> EventStream:
    """Merge factor x factor pixel blocks into one: x' = x // factor.

    Timestamps, polarities and the event count are preserved.
    """
    if factor == 1:
        return stream
    if factor < 1 or stream.width % factor or stream.height % factor:
        raise ConfigurationError(
            f"factor {factor} must divide sensor dims {stream.width}x{stream.height}"
        )
    return EventStream(
        t=stream.t,
        x=stream.x // factor,
        y=stream.y // factor,
        polarity=stream.polarity,
        width=stream.width // factor,
        height=stream.height // factor,
    )


def crop(stream: EventStream, width: int, height: int) -> EventStream:
    """Keep events inside the top-left width x height window."""
    keep = (stream.x < width) & (stream.y < height)
    return EventStream(
        t=stream.t[keep], x=stream.x[keep], y=stream.y[keep],
        polarity=stream.polarity[keep], width=width, height=height,
    )


def bin_to_frames(
    stream: EventStream, dt_ms: float, T: int, start_us: int = 0
) -> FrameSequence:
    """Sum events into [T, 2, H, W] count frames of dt_ms each.

    Bin k covers [start + k*dt, start + (k+1)*dt); events outside
    [start, start + T*dt) are dropped.  An event exactly on a boundary
    lands in the later bin.
    """
    if not (dt_ms > 0):
        raise ConfigurationError(f"dt_ms must be > 0, got {dt_ms}")
    H, W = stream.height, stream.width
    rel = stream.t - start_us
    bin_us = dt_ms * 1000.0
    if float(bin_us).is_integer():
        k = rel // np.int64(bin_us)
    else:
        k = np.floor(rel / bin_us).astype(np.int64)
    keep = (rel >= 0) & (k < T)
    k = k[keep]
    c = 1 - stream.polarity[keep].astype(np.int64)  # channel 0 = on
    flat = ((k * 2 + c) * H + stream.y[keep]) * W + stream.x[keep]
    counts = np.bincount(flat, minlength=T * 2 * H * W).astype(np.int32)
    return FrameSequence(
        data=counts.reshape(T, 2, H, W), dt_ms=dt_ms, origin=f"start_us={start_us}"
    )


def random_slice(duration_ms: float, recording_len_ms: float, rng) -> int:
    """Uniform integer start offset so a full slice fits the recording."""
    if recording_len_ms < duration_ms:
        raise SampleTooShortError(
            f"recording {recording_len_ms} ms shorter than slice {duration_ms} ms"
        )
    hi = int(recording_len_ms - duration_ms)
    return int(rng.integers(0, hi, endpoint=True))


@dataclass
class RegressionTask:
    """Fixed Poisson input with three time-varying pseudo-targets.

    input: binary [T, n_in]; targets: (ramp, high-frequency sinusoid,
    low-frequency sinusoid), each [T] in [0, 1].  The input realization is
    fixed by the seed, so every epoch replays the identical spike train.
    """

    input: np.ndarray
    targets: tuple
    dt_ms: float = 1.0


def poisson_regression_task(
    n_in: int = 512,
    rate_hz: float = 50.0,
    T_ms: int = 500,
    seed: int = 0,
    dt_ms: float = 1.0,
    freq_hi_hz: float = 20.0,
    freq_lo_hz: float = 5.0,
) -> RegressionTask:
    """Build the fixed Poisson-input regression task.

    Spikes are i.i.d. Bernoulli(rate * dt) per input and bin.
    """
    p = rate_hz * dt_ms / 1000.0
    if not (0.0 <= p <= 1.0):
        raise ConfigurationError(f"rate {rate_hz} Hz too high for dt {dt_ms} ms")
    T = int(round(T_ms / dt_ms))
    rng = np.random.default_rng(seed)
    spikes = (rng.random((T, n_in)) < p).astype(np.float32)
    tt = np.arange(T, dtype=np.float64) * dt_ms / 1000.0
    ramp = (np.arange(T, dtype=np.float64) / max(T - 1, 1)).astype(np.float32)
    hi = (0.5 + 0.5 * np.sin(2 * np.pi * freq_hi_hz * tt)).astype(np.float32)
    lo = (0.5 + 0.5 * np.sin(2 * np.pi * freq_lo_hz * tt)).astype(np.float32)
    return RegressionTask(input=spikes, targets=(ramp, hi, lo), dt_ms=dt_ms)


@dataclass
class Recording:
    """One dataset entry: an event file plus its manifest row."""

    path: Path
    label: int
    subject: str = ""
    light: str = ""

    def load(self) -> EventStream:
        return parse_event_file(self.path.read_bytes())


def load_dataset_dir(path) -> list[Recording]:
    """Read ``manifest.tsv`` and return recordings in manifest order."""
    root = Path(path)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise ConfigurationError(f"no manifest.tsv in {root}")
    recs = []
    lines = manifest.read_text().splitlines()
    if not lines or lines[0].split("\t")[0] != "file":
        raise ConfigurationError(f"{manifest}: first line must be the header 'file\\tlabel\\tsubject\\tlight'")
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise ConfigurationError(f"{manifest}:{ln}: expected 'file<TAB>label...'")
        fname, label = parts[0], parts[1]
        subject = parts[2] if len(parts) > 2 else ""
        light = parts[3] if len(parts) > 3 else ""
        fpath = root / fname
        if not fpath.exists():
            raise ConfigurationError(f"{manifest}:{ln}: missing event file {fpath}")
        recs.append(Recording(path=fpath, label=int(label), subject=subject, light=light))
    return recs


def save_dataset_dir(path, entries) -> None:
    """Write (stream, label, subject, light) tuples as a dataset directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    rows = ["file\tlabel\tsubject\tlight"]
    for i, (stream, label, subject, light) in enumerate(entries):
        fname = f"rec{i:05d}.evt"
        (root / fname).write_bytes(write_event_file(stream))
        rows.append(f"{fname}\t{label}\t{subject}\t{light}")
    (root / "manifest.tsv").write_text("\n".join(rows) + "\n")
