"""Classic (microsecond) libpcap reading and writing.

Records are streamed one at a time; the byte order of the input is kept so
an untouched trace is written back byte for byte.
"""

from __future__ import annotations

import io
import os
import struct
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field

from . import dissect
from .errors import BadHeader, BadMagic, RecordInvariant, TruncatedRecord

MAGIC_USEC = 0xA1B2C3D4
GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
USEC_PER_SEC = 1_000_000

_MAGIC_BYTES = {
    b"\xd4\xc3\xb2\xa1": "<",
    b"\xa1\xb2\xc3\xd4": ">",
}


@dataclass(frozen=True, slots=True)
class GlobalHeader:
    snaplen: int = 65535
    linktype: int = dissect.LINKTYPE_ETHERNET
    version_major: int = 2
    version_minor: int = 4
    thiszone: int = 0
    sigfigs: int = 0
    byteorder: str = "<"

    def __post_init__(self):
        if self.byteorder not in ("<", ">"):
            raise ValueError(f"byteorder must be '<' or '>', got {self.byteorder!r}")
        if self.snaplen <= 0:
            raise BadHeader(f"snaplen must be positive, got {self.snaplen}")

    @property
    def magic(self) -> int:
        return MAGIC_USEC

    @property
    def swapped(self) -> bool:
        """True when the file order differs from little-endian (the common native order)."""
        return self.byteorder == ">"

    def pack(self) -> bytes:
        return struct.pack(
            self.byteorder + "IHHiIII",
            MAGIC_USEC,
            self.version_major,
            self.version_minor,
            self.thiszone,
            self.sigfigs,
            self.snaplen,
            self.linktype,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> GlobalHeader:
        if len(raw) < GLOBAL_HEADER_LEN:
            if len(raw) < 4 or raw[:4] not in _MAGIC_BYTES:
                raise BadMagic(int.from_bytes(raw[:4].ljust(4, b"\0"), "big"))
            raise BadHeader(f"global header needs {GLOBAL_HEADER_LEN} bytes, got {len(raw)}")
        order = _MAGIC_BYTES.get(raw[:4])
        if order is None:
            raise BadMagic(int.from_bytes(raw[:4], "big"))
        _, vmaj, vmin, zone, sigfigs, snaplen, linktype = struct.unpack(order + "IHHiIII", raw[:24])
        return cls(snaplen, linktype, vmaj, vmin, zone, sigfigs, order)


@dataclass(frozen=True, slots=True)
class PacketRecord:
    ts_sec: int
    ts_usec: int
    incl_len: int
    orig_len: int
    data: bytes

    @classmethod
    def from_data(cls, data: bytes, ts_sec: int = 0, ts_usec: int = 0,
                  orig_len: int | None = None) -> PacketRecord:
        data = bytes(data)
        return cls(ts_sec, ts_usec, len(data), len(data) if orig_len is None else orig_len, data)

    @property
    def timestamp(self) -> tuple[int, int]:
        return self.ts_sec, self.ts_usec


@dataclass(frozen=True)
class TraceFile:
    header: GlobalHeader
    records: tuple[PacketRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not isinstance(self.records, tuple):
            object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PacketRecord]:
        return iter(self.records)


@dataclass(frozen=True, slots=True)
class Finding:
    kind: str
    index: int
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind} at record {self.index}" + (f": {self.detail}" if self.detail else "")


def _open_source(source):
    if isinstance(source, (bytes, bytearray, memoryview)):
        return io.BytesIO(bytes(source)), True
    if isinstance(source, (str, os.PathLike)):
        return open(source, "rb"), True
    return source, False


class PcapReader:
    """Iterate over the records of a pcap stream, one record in memory at a time."""

    def __init__(self, source):
        self._stream, self._owned = _open_source(source)
        try:
            self.header = GlobalHeader.unpack(self._stream.read(GLOBAL_HEADER_LEN))
        except Exception:
            self.close()
            raise
        self._rec = struct.Struct(self.header.byteorder + "IIII")

    def __iter__(self) -> Iterator[PacketRecord]:
        read = self._stream.read
        unpack = self._rec.unpack
        index = 0
        while True:
            raw = read(RECORD_HEADER_LEN)
            if not raw:
                return
            if len(raw) < RECORD_HEADER_LEN:
                raise TruncatedRecord(index - 1, "partial record header")
            ts_sec, ts_usec, incl_len, orig_len = unpack(raw)
            data = read(incl_len)
            if len(data) < incl_len:
                raise TruncatedRecord(index - 1, f"record {index} wants {incl_len} bytes, got {len(data)}")
            yield PacketRecord(ts_sec, ts_usec, incl_len, orig_len, data)
            index += 1

    def close(self) -> None:
        if self._owned:
            self._stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class PcapWriter:
    """Write a global header, then records on demand. Tracks bytes written."""

    def __init__(self, sink, header: GlobalHeader, *, allow_usec_overflow: bool = False):
        if isinstance(sink, (str, os.PathLike)):
            self._stream, self._owned = open(sink, "wb"), True
        else:
            self._stream, self._owned = sink, False
        self.header = header
        self.allow_usec_overflow = allow_usec_overflow
        self._rec = struct.Struct(header.byteorder + "IIII")
        self._stream.write(header.pack())
        self.bytes_written = GLOBAL_HEADER_LEN
        self.count = 0

    def write(self, record: PacketRecord) -> int:
        if len(record.data) != record.incl_len:
            raise RecordInvariant(
                f"record {self.count}: incl_len {record.incl_len} != data length {len(record.data)}"
            )
        if record.ts_usec >= USEC_PER_SEC and not self.allow_usec_overflow:
            raise RecordInvariant(f"record {self.count}: ts_usec {record.ts_usec} >= 1000000")
        self._stream.write(self._rec.pack(record.ts_sec, record.ts_usec, record.incl_len, record.orig_len))
        self._stream.write(record.data)
        n = RECORD_HEADER_LEN + record.incl_len
        self.bytes_written += n
        self.count += 1
        return n

    def write_all(self, records: Iterable[PacketRecord]) -> int:
        for r in records:
            self.write(r)
        return self.bytes_written

    def close(self) -> None:
        if self._owned:
            self._stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(source) -> TraceFile:
    """Read a whole trace from bytes, a path, or a binary stream."""
    with PcapReader(source) as reader:
        return TraceFile(reader.header, tuple(reader))


def write_trace(trace: TraceFile, sink, *, allow_usec_overflow: bool = False) -> int:
    """Write ``trace`` to a path or binary stream; returns the byte count."""
    with PcapWriter(sink, trace.header, allow_usec_overflow=allow_usec_overflow) as w:
        return w.write_all(trace.records)


def trace_bytes(trace: TraceFile, **kw) -> bytes:
    buf = io.BytesIO()
    write_trace(trace, buf, **kw)
    return buf.getvalue()


def record_findings(index: int, record: PacketRecord, header: GlobalHeader) -> list[Finding]:
    found = []
    if record.ts_usec >= USEC_PER_SEC:
        found.append(Finding("UsecOverflow", index, f"ts_usec={record.ts_usec}"))
    if record.incl_len > header.snaplen:
        found.append(Finding("CaplenExceedsSnaplen", index,
                             f"incl_len={record.incl_len} snaplen={header.snaplen}"))
    if header.linktype == dissect.LINKTYPE_ETHERNET:
        view = dissect.dissect_bytes(record.data)
        if view.transport is dissect.Transport.UDP:
            implied = ip_payload_length(record.data, view)
            udp_len = int.from_bytes(record.data[view.transport_offset + 4:view.transport_offset + 6], "big")
            if udp_len != implied:
                found.append(Finding("UdpLengthMismatch", index, f"udp_len={udp_len} ip_implies={implied}"))
    return found


def ip_payload_length(data: bytes, view: dissect.PacketView) -> int:
    """IP total length minus IP header length (may be negative for bogus headers)."""
    o = view.ip_header_offset
    return ((data[o + 2] << 8) | data[o + 3]) - view.ihl * 4


def validate_trace(trace: TraceFile) -> list[Finding]:
    findings = []
    for i, record in enumerate(trace.records):
        findings.extend(record_findings(i, record, trace.header))
    return findings
