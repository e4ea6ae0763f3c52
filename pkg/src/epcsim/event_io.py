"""Bit-exact binary event-stream format and CSV exports.

Layout (little-endian throughout)::

    magic   4 bytes  b"EPEV"
    version u16
    hit tick      u64 numerator, u64 denominator   (seconds, exact rational)
    tdc tick      u64 numerator, u64 denominator
    metadata      u32 length + UTF-8 bytes
    packets       repeated: 1 type byte + body
        type 0 (pixel hit):  x u16, y u16, toa_ticks u64   -> 13 bytes total
        type 1 (TDC tag):    ticks u64, channel u8         -> 10 bytes total

Timestamps are unsigned tick counts from run start; an unknown type
byte or a truncated packet is a hard, structured error.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DomainError, StreamParseError

MAGIC = b"EPEV"
FORMAT_VERSION = 1

HIT_TICK = Fraction(25, 16_000_000_000)     # 1.5625 ns
TDC_TICK = Fraction(1, 3_840_000_000)       # ~260 ps

PACKET_HIT = 0
PACKET_TDC = 1

_HEADER = struct.Struct("<4sHQQQQI")
_HIT_BODY = struct.Struct("<HHQ")
_TDC_BODY = struct.Struct("<QB")

PIXEL_GRID = 512


@dataclass(frozen=True)
class HitPacket:
    """Single pixel hit: position and time of arrival in hit ticks."""

    x: int
    y: int
    toa_ticks: int

    def __post_init__(self):
        if not (0 <= self.x < PIXEL_GRID and 0 <= self.y < PIXEL_GRID):
            raise DomainError(f"pixel ({self.x}, {self.y}) outside grid")
        if not (0 <= self.toa_ticks < 2 ** 64):
            raise DomainError("toa_ticks out of u64 range")


@dataclass(frozen=True)
class TdcPacket:
    """Time-to-digital tag: timestamp in TDC ticks and channel id."""

    ticks: int
    channel: int

    def __post_init__(self):
        if self.channel not in (0, 1):
            raise DomainError(f"TDC channel must be 0 or 1, got {self.channel}")
        if not (0 <= self.ticks < 2 ** 64):
            raise DomainError("ticks out of u64 range")


@dataclass
class EventStream:
    """Ordered sequence of hit and TDC packets with tick definitions.

    Packets are stored column-wise (type codes plus per-type arrays in
    stream order) so that encoding and analysis stay vectorised.
    """

    types: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.uint8))
    hit_x: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.uint16))
    hit_y: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.uint16))
    hit_toa: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.uint64))
    tdc_ticks: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.uint64))
    tdc_channel: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.uint8))
    metadata: str = ""
    hit_tick: Fraction = HIT_TICK
    tdc_tick: Fraction = TDC_TICK
    version: int = FORMAT_VERSION

    def __post_init__(self):
        n_hit = int(np.count_nonzero(self.types == PACKET_HIT))
        n_tdc = int(np.count_nonzero(self.types == PACKET_TDC))
        if n_hit != len(self.hit_x) or n_tdc != len(self.tdc_ticks):
            raise DomainError("type codes inconsistent with packet arrays")
        if len(self.hit_x) != len(self.hit_y) or len(self.hit_x) != len(self.hit_toa):
            raise DomainError("hit arrays must have equal length")
        if len(self.tdc_ticks) != len(self.tdc_channel):
            raise DomainError("tdc arrays must have equal length")

    # -- construction -------------------------------------------------------

    @staticmethod
    def from_packets(packets, metadata=""):
        """Build a stream from an iterable of Hit/Tdc packets in order."""
        types, hx, hy, ht, tt, tc = [], [], [], [], [], []
        for p in packets:
            if isinstance(p, HitPacket):
                types.append(PACKET_HIT)
                hx.append(p.x); hy.append(p.y); ht.append(p.toa_ticks)
            elif isinstance(p, TdcPacket):
                types.append(PACKET_TDC)
                tt.append(p.ticks); tc.append(p.channel)
            else:
                raise DomainError(f"unknown packet object {p!r}")
        return EventStream(
            types=np.array(types, dtype=np.uint8),
            hit_x=np.array(hx, dtype=np.uint16),
            hit_y=np.array(hy, dtype=np.uint16),
            hit_toa=np.array(ht, dtype=np.uint64),
            tdc_ticks=np.array(tt, dtype=np.uint64),
            tdc_channel=np.array(tc, dtype=np.uint8),
            metadata=metadata)

    @staticmethod
    def from_arrays(hit_x, hit_y, hit_toa, tdc_ticks, tdc_channel,
                    metadata=""):
        """Build a time-interleaved stream from separate hit/TDC arrays.

        Packets are merged into a single sequence ordered by time in
        seconds (hits before TDC tags on exact ties).
        """
        hit_x = np.asarray(hit_x, dtype=np.uint16)
        hit_y = np.asarray(hit_y, dtype=np.uint16)
        hit_toa = np.asarray(hit_toa, dtype=np.uint64)
        tdc_ticks = np.asarray(tdc_ticks, dtype=np.uint64)
        tdc_channel = np.asarray(tdc_channel, dtype=np.uint8)
        t_hit = hit_toa.astype(np.float64) * float(HIT_TICK)
        t_tdc = tdc_ticks.astype(np.float64) * float(TDC_TICK)
        times = np.concatenate([t_hit, t_tdc])
        kinds = np.concatenate([
            np.zeros(len(t_hit), dtype=np.uint8),
            np.ones(len(t_tdc), dtype=np.uint8)])
        order = np.lexsort((kinds, times))
        return EventStream(
            types=kinds[order],
            hit_x=hit_x, hit_y=hit_y, hit_toa=hit_toa,
            tdc_ticks=tdc_ticks, tdc_channel=tdc_channel,
            metadata=metadata)

    # -- accessors ----------------------------------------------------------

    @property
    def n_packets(self):
        return len(self.types)

    @property
    def hit_times_s(self):
        return self.hit_toa.astype(np.float64) * float(self.hit_tick)

    @property
    def tdc_times_s(self):
        return self.tdc_ticks.astype(np.float64) * float(self.tdc_tick)

    def packets(self):
        """Iterate packets in stream order (slow path, for tests)."""
        i_hit = i_tdc = 0
        for t in self.types:
            if t == PACKET_HIT:
                yield HitPacket(int(self.hit_x[i_hit]), int(self.hit_y[i_hit]),
                                int(self.hit_toa[i_hit]))
                i_hit += 1
            else:
                yield TdcPacket(int(self.tdc_ticks[i_tdc]),
                                int(self.tdc_channel[i_tdc]))
                i_tdc += 1

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.version == other.version
                and self.hit_tick == other.hit_tick
                and self.tdc_tick == other.tdc_tick
                and self.metadata == other.metadata
                and np.array_equal(self.types, other.types)
                and np.array_equal(self.hit_x, other.hit_x)
                and np.array_equal(self.hit_y, other.hit_y)
                and np.array_equal(self.hit_toa, other.hit_toa)
                and np.array_equal(self.tdc_ticks, other.tdc_ticks)
                and np.array_equal(self.tdc_channel, other.tdc_channel))


# --------------------------------------------------------------------------
# encode / decode
# --------------------------------------------------------------------------

def header_length(metadata):
    return _HEADER.size + len(metadata.encode("utf-8"))


def encode(stream):
    """Serialise a stream to bytes; deterministic for equal streams."""
    if np.any((stream.hit_x >= PIXEL_GRID) | (stream.hit_y >= PIXEL_GRID)):
        raise DomainError("hit pixel outside 512x512 grid")
    if np.any(stream.tdc_channel > 1):
        raise DomainError("TDC channel must be 0 or 1")
    meta = stream.metadata.encode("utf-8")
    out = io.BytesIO()
    out.write(_HEADER.pack(
        MAGIC, stream.version,
        stream.hit_tick.numerator, stream.hit_tick.denominator,
        stream.tdc_tick.numerator, stream.tdc_tick.denominator,
        len(meta)))
    out.write(meta)

    n = stream.n_packets
    sizes = np.where(stream.types == PACKET_HIT, 13, 10).astype(np.int64)
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    body = np.zeros(int(offsets[-1]), dtype=np.uint8)
    is_hit = stream.types == PACKET_HIT
    hit_off = offsets[:-1][is_hit]
    tdc_off = offsets[:-1][~is_hit]
    body[offsets[:-1]] = stream.types
    # scatter hit fields byte-wise (little-endian)
    hx = stream.hit_x.astype("<u2").view(np.uint8).reshape(-1, 2)
    hy = stream.hit_y.astype("<u2").view(np.uint8).reshape(-1, 2)
    ht = stream.hit_toa.astype("<u8").view(np.uint8).reshape(-1, 8)
    for b in range(2):
        body[hit_off + 1 + b] = hx[:, b]
        body[hit_off + 3 + b] = hy[:, b]
    for b in range(8):
        body[hit_off + 5 + b] = ht[:, b]
    tt = stream.tdc_ticks.astype("<u8").view(np.uint8).reshape(-1, 8)
    for b in range(8):
        body[tdc_off + 1 + b] = tt[:, b]
    body[tdc_off + 9] = stream.tdc_channel
    out.write(body.tobytes())
    return out.getvalue()


def decode(data):
    """Parse bytes into an EventStream; total on arbitrary input.

    Raises StreamParseError (with byte offset) on any malformed input;
    never raises anything else for ``bytes`` input.
    """
    if len(data) < _HEADER.size:
        raise StreamParseError("truncated header", offset=0,
                               expected=_HEADER.size, available=len(data))
    magic, version, hn, hd, tn, td, meta_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise StreamParseError(f"bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise StreamParseError(f"unsupported format version {version}",
                               offset=4)
    if hd == 0 or td == 0:
        raise StreamParseError("zero tick denominator", offset=6)
    pos = _HEADER.size
    if len(data) < pos + meta_len:
        raise StreamParseError("truncated metadata", offset=pos,
                               expected=meta_len, available=len(data) - pos)
    try:
        metadata = bytes(data[pos:pos + meta_len]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise StreamParseError(f"metadata is not valid UTF-8: {exc}",
                               offset=pos) from None
    pos += meta_len

    types, hx, hy, ht, tt, tc = [], [], [], [], [], []
    view = memoryview(data)
    n_bytes = len(data)
    while pos < n_bytes:
        ptype = data[pos]
        if ptype == PACKET_HIT:
            if pos + 13 > n_bytes:
                raise StreamParseError("truncated hit packet", offset=pos,
                                       expected=13, available=n_bytes - pos)
            x, y, toa = _HIT_BODY.unpack_from(view, pos + 1)
            if x >= PIXEL_GRID or y >= PIXEL_GRID:
                raise StreamParseError(
                    f"hit pixel ({x}, {y}) outside grid", offset=pos)
            types.append(PACKET_HIT)
            hx.append(x); hy.append(y); ht.append(toa)
            pos += 13
        elif ptype == PACKET_TDC:
            if pos + 10 > n_bytes:
                raise StreamParseError("truncated TDC packet", offset=pos,
                                       expected=10, available=n_bytes - pos)
            ticks, channel = _TDC_BODY.unpack_from(view, pos + 1)
            if channel > 1:
                raise StreamParseError(f"invalid TDC channel {channel}",
                                       offset=pos)
            types.append(PACKET_TDC)
            tt.append(ticks); tc.append(channel)
            pos += 10
        else:
            raise StreamParseError(f"unknown packet type {ptype}", offset=pos)

    return EventStream(
        types=np.array(types, dtype=np.uint8),
        hit_x=np.array(hx, dtype=np.uint16),
        hit_y=np.array(hy, dtype=np.uint16),
        hit_toa=np.array(ht, dtype=np.uint64),
        tdc_ticks=np.array(tt, dtype=np.uint64),
        tdc_channel=np.array(tc, dtype=np.uint8),
        metadata=metadata,
        hit_tick=Fraction(hn, hd), tdc_tick=Fraction(tn, td),
        version=version)


def write_stream(path, stream):
    with open(path, "wb") as f:
        f.write(encode(stream))


def read_stream(path):
    with open(path, "rb") as f:
        return decode(f.read())


# --------------------------------------------------------------------------
# CSV exports
# --------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def export_stream_csv(stream):
    """Packet list as CSV text (stable column order, repr precision)."""
    lines = ["type,x,y,ticks,channel"]
    for p in stream.packets():
        if isinstance(p, HitPacket):
            lines.append(f"hit,{p.x},{p.y},{p.toa_ticks},")
        else:
            lines.append(f"tdc,,,{p.ticks},{p.channel}")
    return "\n".join(lines) + "\n"


def export_map_csv(values, channel="value"):
    """2-D map as (x_idx, y_idx, value) rows."""
    values = np.asarray(values)
    lines = [f"x_idx,y_idx,{channel}"]
    for (ix, iy), v in np.ndenumerate(values):
        lines.append(f"{ix},{iy},{_fmt(v)}")
    return "\n".join(lines) + "\n"


def export_histogram_csv(hist):
    """Coincidence histogram as edge-annotated bin rows.

    Columns: time_bin, energy_bin, dt_low_s, energy_low_ev, counts.
    Re-importing with :func:`import_histogram_csv` reproduces the bin
    contents exactly.
    """
    lines = ["time_bin,energy_bin,dt_low_s,energy_low_ev,counts"]
    counts = hist.counts
    for it in range(counts.shape[0]):
        for ie in range(counts.shape[1]):
            lines.append(
                f"{it},{ie},{_fmt(hist.time_edges_s[it])},"
                f"{_fmt(hist.energy_edges_ev[ie])},{int(counts[it, ie])}")
    return "\n".join(lines) + "\n"


def import_histogram_csv(text):
    """Inverse of export_histogram_csv; returns (counts, t_edges, e_edges)."""
    lines = [ln for ln in text.strip().split("\n")]
    header = lines[0].split(",")
    if header != ["time_bin", "energy_bin", "dt_low_s", "energy_low_ev",
                  "counts"]:
        raise DomainError("unexpected histogram CSV header")
    rows = [ln.split(",") for ln in lines[1:]]
    if not rows:
        return (np.zeros((0, 0), dtype=np.int64), np.empty(0), np.empty(0))
    nt = max(int(r[0]) for r in rows) + 1
    ne = max(int(r[1]) for r in rows) + 1
    counts = np.zeros((nt, ne), dtype=np.int64)
    t_low = np.full(nt, np.nan)
    e_low = np.full(ne, np.nan)
    for r in rows:
        it, ie = int(r[0]), int(r[1])
        counts[it, ie] = int(r[4])
        t_low[it] = float(r[2])
        e_low[ie] = float(r[3])
    return counts, t_low, e_low
