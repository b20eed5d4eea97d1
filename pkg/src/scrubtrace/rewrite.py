"""Apply a policy to a whole trace: field rewriting, checksum repair, UDP length repair."""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field

from . import pcap_io
from .dissect import (
    LINKTYPE_ETHERNET,
    FieldId,
    PacketView,
    Transport,
    dissect_bytes,
    locate_field,
    read_field,
    write_field,
)
from .errors import UnsupportedLinktype
from .pcap_io import PacketRecord, PcapReader, PcapWriter, TraceFile
from .policy import PolicyField, PolicySet, build_transform, validate_policy
from .primitives import TimestampTransform


@dataclass
class RewriteConfig:
    fix_checksums: bool = True
    normalize_udp_length: bool = False
    shift_underflow: str = "redraw"  # or "clamp"

    def __post_init__(self):
        if self.shift_underflow not in ("redraw", "clamp"):
            raise ValueError("shift_underflow must be 'redraw' or 'clamp'")


@dataclass
class RewriteReport:
    packets_total: int = 0
    packets_modified: int = 0
    fields_rewritten: Counter = field(default_factory=Counter)
    fields_absent: Counter = field(default_factory=Counter)
    checksums_fixed: int = 0
    checksums_skipped: int = 0
    udp_lengths_normalized: int = 0
    findings: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "packets_total": self.packets_total,
            "packets_modified": self.packets_modified,
            "fields_rewritten": {f.value: n for f, n in sorted(self.fields_rewritten.items())},
            "fields_absent": {f.value: n for f, n in sorted(self.fields_absent.items())},
            "checksums_fixed": self.checksums_fixed,
            "checksums_skipped": self.checksums_skipped,
            "udp_lengths_normalized": self.udp_lengths_normalized,
            "findings": [str(f) for f in self.findings],
        }

    def summary(self) -> str:
        lines = [
            f"packets: {self.packets_total} total, {self.packets_modified} modified",
            f"checksums fixed: {self.checksums_fixed} (skipped {self.checksums_skipped})",
        ]
        if self.udp_lengths_normalized:
            lines.append(f"udp lengths normalized: {self.udp_lengths_normalized}")
        for f, n in sorted(self.fields_rewritten.items()):
            lines.append(f"rewritten {f.value}: {n}")
        for f, n in sorted(self.fields_absent.items()):
            lines.append(f"absent {f.value}: {n}")
        if self.findings:
            lines.append(f"findings: {len(self.findings)}")
        return "\n".join(lines)


# -- checksums -------------------------------------------------------------

def ones_complement_sum(data) -> int:
    """16-bit ones'-complement sum, folded, odd tail zero-padded."""
    if len(data) % 2:
        data = bytes(data) + b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def internet_checksum(data) -> int:
    return ~ones_complement_sum(data) & 0xFFFF


def _segment_length(data, view: PacketView) -> int:
    t = view.transport_offset
    if view.transport is Transport.UDP:
        return (data[t + 4] << 8) | data[t + 5]
    return pcap_io.ip_payload_length(data, view)


def _pseudo_header(data, view: PacketView, seg_len: int) -> bytes:
    ip = view.ip_header_offset
    return bytes(data[ip + 12:ip + 20]) + bytes((0, data[ip + 9])) + (seg_len & 0xFFFF).to_bytes(2, "big")


def _covered(data, view: PacketView, start: int, end: int, ck: int) -> bytes:
    """Bytes data[start:end] with the checksum word zeroed."""
    seg = bytearray(data[start:end])
    seg[ck - start:ck - start + 2] = b"\0\0"
    return bytes(seg)


def fix_checksums(buf: bytearray, view: PacketView, original: bytes | None = None,
                  report: RewriteReport | None = None) -> bool:
    """Repair IPv4 header and TCP/UDP checksums in place; True if any checksum byte changed.

    ``view`` must describe the packet before rewriting. With ``original``,
    only checksums whose covered bytes changed are touched, and segments cut
    short by the snaplen are updated incrementally (RFC 1624) instead of
    being skipped. A disabled UDP checksum (0) stays 0. If the protocol byte
    itself was rewritten the transport checksum is left alone, since the
    bytes no longer belong to the original transport.
    """
    if not view.is_ipv4:
        return False
    changed = False
    ip = view.ip_header_offset
    hlen = view.ihl * 4
    if original is None or buf[ip:ip + hlen] != original[ip:ip + hlen]:
        old = bytes(buf[ip + 10:ip + 12])
        buf[ip + 10:ip + 12] = b"\0\0"
        new = internet_checksum(buf[ip:ip + hlen]).to_bytes(2, "big")
        buf[ip + 10:ip + 12] = new
        changed = new != old

    if view.transport not in (Transport.TCP, Transport.UDP) or buf[ip + 9] != view.protocol:
        return changed
    t = view.transport_offset
    udp = view.transport is Transport.UDP
    ck = t + (6 if udp else 16)
    old_ck = (buf[ck] << 8) | buf[ck + 1]
    if udp and old_ck == 0:
        return changed
    seg_len = _segment_length(buf, view)
    if original is not None and buf[t:] == original[t:] and seg_len == _segment_length(original, view):
        return changed

    min_hdr = 8 if udp else 20
    if min_hdr <= seg_len and t + seg_len <= len(buf):
        covered = _pseudo_header(buf, view, seg_len) + _covered(buf, view, t, t + seg_len, ck)
        new_ck = internet_checksum(covered)
    elif original is not None:
        before = _pseudo_header(original, view, _segment_length(original, view)) + _covered(
            original, view, t, len(original), ck)
        after = _pseudo_header(buf, view, seg_len) + _covered(buf, view, t, len(buf), ck)
        x = (~old_ck & 0xFFFF) + (~ones_complement_sum(before) & 0xFFFF) + ones_complement_sum(after)
        while x >> 16:
            x = (x & 0xFFFF) + (x >> 16)
        new_ck = ~x & 0xFFFF
    else:
        if report is not None:
            report.checksums_skipped += 1
        return changed
    if udp and new_ck == 0:
        new_ck = 0xFFFF
    if new_ck != old_ck:
        buf[ck:ck + 2] = new_ck.to_bytes(2, "big")
        changed = True
    return changed


def normalize_udp_length(buf: bytearray, view: PacketView) -> bool:
    """Set the UDP length field to what the IP header implies; True if it changed."""
    if view.transport is not Transport.UDP:
        raise ValueError("normalize_udp_length needs a UDP packet")
    implied = pcap_io.ip_payload_length(buf, view)
    if not 0 <= implied <= 0xFFFF:
        return False
    t = view.transport_offset
    if (buf[t + 4] << 8) | buf[t + 5] == implied:
        return False
    buf[t + 4:t + 6] = implied.to_bytes(2, "big")
    return True


# -- rewriting -----------------------------------------------------------------

class Anonymizer:
    """Bound transforms for one run over one trace.

    Randomized options keep per-run tables, so a fresh Anonymizer is needed
    for each independent replication.
    """

    def __init__(self, policy: PolicySet, cfg: RewriteConfig | None = None, *,
                 key: bytes | None = None, seed=None, linktype: int = LINKTYPE_ETHERNET):
        validate_policy(policy)
        self.cfg = cfg or RewriteConfig()
        self.linktype = linktype
        self.entries = []
        self.timestamps: TimestampTransform | None = None
        for entry in policy:
            fn = build_transform(entry, key=key, seed=seed, on_underflow=self.cfg.shift_underflow)
            if entry.field is PolicyField.TIMESTAMP:
                self.timestamps = fn
            else:
                self.entries.append((fn, entry.targets, entry.protocol_gate))
        self._dissect = bool(self.entries) or self.cfg.normalize_udp_length
        if self._dissect and linktype != LINKTYPE_ETHERNET:
            raise UnsupportedLinktype(linktype)

    @property
    def needs_time_bounds(self) -> bool:
        return self.timestamps is not None and self.timestamps.mode == "shift"

    def begin_trace(self, earliest=None, latest=None) -> None:
        if self.timestamps is not None:
            self.timestamps.begin_trace(earliest, latest)

    def rewrite(self, record: PacketRecord, report: RewriteReport) -> PacketRecord:
        report.packets_total += 1
        data = record.data
        new_data = data
        if self._dissect:
            view = dissect_bytes(data)
            buf = None
            for fn, targets, gate in self.entries:
                # Gate on the protocol byte as captured, not as rewritten.
                if gate is not None and view.protocol != gate:
                    continue
                for fid in targets:
                    loc = locate_field(view, fid)
                    if loc is None:
                        report.fields_absent[fid] += 1
                        continue
                    v = read_field(data, loc)
                    nv = fn(v)
                    if nv != v:
                        if buf is None:
                            buf = bytearray(data)
                        write_field(buf, loc, nv)
                        report.fields_rewritten[fid] += 1
            if self.cfg.normalize_udp_length and view.transport is Transport.UDP:
                if buf is None:
                    buf = bytearray(data)
                if normalize_udp_length(buf, view):
                    report.udp_lengths_normalized += 1
            if buf is not None and buf != data:
                if self.cfg.fix_checksums and fix_checksums(buf, view, data, report):
                    report.checksums_fixed += 1
                new_data = bytes(buf)

        sec, usec = record.ts_sec, record.ts_usec
        if self.timestamps is not None:
            sec, usec = self.timestamps(sec, usec)
            if (sec, usec) != (record.ts_sec, record.ts_usec):
                report.fields_rewritten[FieldId.TIMESTAMP] += 1
        if new_data is data and (sec, usec) == (record.ts_sec, record.ts_usec):
            return record
        report.packets_modified += 1
        return PacketRecord(sec, usec, record.incl_len, record.orig_len, new_data)


def _time_bounds(records):
    stamps = [(r.ts_sec, r.ts_usec) for r in records]
    return (min(stamps), max(stamps)) if stamps else (None, None)


def apply_policy(trace: TraceFile, policy: PolicySet, cfg: RewriteConfig | None = None, *,
                 key: bytes | None = None, seed=None) -> tuple[TraceFile, RewriteReport]:
    report = RewriteReport(findings=pcap_io.validate_trace(trace))
    anon = Anonymizer(policy, cfg, key=key, seed=seed, linktype=trace.header.linktype)
    anon.begin_trace(*_time_bounds(trace.records))
    records = tuple(anon.rewrite(r, report) for r in trace.records)
    return TraceFile(trace.header, records), report


def anonymize_file(src, dst, policy: PolicySet, cfg: RewriteConfig | None = None, *,
                   key: bytes | None = None, seed=None) -> RewriteReport:
    """Streaming variant of :func:`apply_policy` between two paths."""
    report = RewriteReport()
    with PcapReader(src) as reader:
        header = reader.header
        anon = Anonymizer(policy, cfg, key=key, seed=seed, linktype=header.linktype)
        if anon.needs_time_bounds:
            # One extra pass over record headers only.
            with PcapReader(src) as pre:
                anon.begin_trace(*_time_bounds(pre))
        else:
            anon.begin_trace()
        # Input quirks such as ts_usec overflow pass through; they are reported as findings.
        with PcapWriter(dst, header, allow_usec_overflow=True) as writer:
            for i, record in enumerate(reader):
                report.findings.extend(pcap_io.record_findings(i, record, header))
                writer.write(anon.rewrite(record, report))
    return report
