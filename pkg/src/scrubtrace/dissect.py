"""Locate the anonymizable header fields inside raw Ethernet frames.

Classification never raises on malformed content: layers that cannot be
resolved are reported as absent, and every write is confined to the bytes
of the targeted field.
"""

from __future__ import annotations

import enum
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass

from .errors import UnsupportedLinktype, ValueOverflow

LINKTYPE_ETHERNET = 1

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_ARP = 0x0806
ETHERTYPE_VLAN = 0x8100

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

ETH_HEADER_LEN = 14
VLAN_TAG_LEN = 4
TCP_MIN_HEADER = 20
UDP_HEADER = 8
ICMP_MIN_HEADER = 8

# TCP flag bits in the low six bits of the flags byte.
TCP_FLAG_BITS = {"urg": 0x20, "ack": 0x10, "psh": 0x08, "rst": 0x04, "syn": 0x02, "fin": 0x01}
TCP_CONTROL_MASK = 0x3F

# Fragmentation flag bits, as the 3-bit field value.
FRAG_FLAG_BITS = {"rb": 0b100, "df": 0b010, "mf": 0b001}


class FieldId(str, enum.Enum):
    """The anonymizable single fields. TIMESTAMP lives in the pcap record header."""

    PROTOCOL = "protocol"
    TOTAL_LENGTH = "length"
    TTL = "ttl"
    TOS = "tos"
    FRAG_FLAGS = "frag"
    SRC_PORT = "src_port"
    DST_PORT = "dst_port"
    SEQ = "seq"
    WINDOW = "window"
    TCP_FLAGS = "tcpflags"
    TIMESTAMP = "timestamp"

    @property
    def width(self) -> int:
        return _WIDTHS[self]

    @property
    def is_transport(self) -> bool:
        return self in _TRANSPORT_FIELDS


_WIDTHS = {
    FieldId.PROTOCOL: 8,
    FieldId.TOTAL_LENGTH: 16,
    FieldId.TTL: 8,
    FieldId.TOS: 8,
    FieldId.FRAG_FLAGS: 3,
    FieldId.SRC_PORT: 16,
    FieldId.DST_PORT: 16,
    FieldId.SEQ: 32,
    FieldId.WINDOW: 16,
    FieldId.TCP_FLAGS: 8,
    FieldId.TIMESTAMP: 64,
}

_TRANSPORT_FIELDS = frozenset(
    {FieldId.SRC_PORT, FieldId.DST_PORT, FieldId.SEQ, FieldId.WINDOW, FieldId.TCP_FLAGS}
)

# (offset from IP header start, bit width)
_IP_LAYOUT = {
    FieldId.TOS: (1, 8),
    FieldId.TOTAL_LENGTH: (2, 16),
    FieldId.FRAG_FLAGS: (6, 3),
    FieldId.TTL: (8, 8),
    FieldId.PROTOCOL: (9, 8),
}

# (offset from transport header start, bit width, transports carrying it)
_TRANSPORT_LAYOUT = {
    FieldId.SRC_PORT: (0, 16, ("tcp", "udp")),
    FieldId.DST_PORT: (2, 16, ("tcp", "udp")),
    FieldId.SEQ: (4, 32, ("tcp",)),
    FieldId.TCP_FLAGS: (13, 8, ("tcp",)),
    FieldId.WINDOW: (14, 16, ("tcp",)),
}


class Transport(str, enum.Enum):
    TCP = "tcp"
    UDP = "udp"
    ICMP = "icmp"
    OTHER = "other"
    NONE = "none"


@dataclass(frozen=True, slots=True)
class PacketView:
    """Classification of one frame.

    ``ip_header_offset`` and ``ihl`` are None unless a complete IPv4 header
    is present. ``transport_offset`` is None when ``transport`` is NONE.
    """

    ethertype: int | None = None
    ip_header_offset: int | None = None
    ihl: int | None = None
    protocol: int | None = None
    transport: Transport = Transport.NONE
    transport_offset: int | None = None

    @property
    def is_ipv4(self) -> bool:
        return self.ip_header_offset is not None


@dataclass(frozen=True, slots=True)
class FieldLocation:
    field: FieldId
    byte_offset: int
    bit_width: int

    @property
    def span(self) -> range:
        return range(self.byte_offset, self.byte_offset + (self.bit_width + 7) // 8)


_NO_L2 = PacketView()


def dissect_bytes(data: bytes | bytearray) -> PacketView:
    """Classify an Ethernet frame. Total over all byte strings."""
    n = len(data)
    if n < ETH_HEADER_LEN:
        return _NO_L2
    ethertype = (data[12] << 8) | data[13]
    l3 = ETH_HEADER_LEN
    if ethertype == ETHERTYPE_VLAN:
        if n < ETH_HEADER_LEN + VLAN_TAG_LEN:
            return PacketView(ethertype=ethertype)
        ethertype = (data[16] << 8) | data[17]
        l3 += VLAN_TAG_LEN
    if ethertype != ETHERTYPE_IPV4 or n < l3 + 20:
        return PacketView(ethertype=ethertype)
    vihl = data[l3]
    ihl = vihl & 0x0F
    if vihl >> 4 != 4 or ihl < 5 or n < l3 + ihl * 4:
        return PacketView(ethertype=ethertype)

    protocol = data[l3 + 9]
    frag_offset = ((data[l3 + 6] & 0x1F) << 8) | data[l3 + 7]
    l4 = l3 + ihl * 4
    transport = Transport.NONE
    if frag_offset == 0:
        if protocol == PROTO_TCP:
            if n >= l4 + TCP_MIN_HEADER:
                transport = Transport.TCP
        elif protocol == PROTO_UDP:
            if n >= l4 + UDP_HEADER:
                transport = Transport.UDP
        elif protocol == PROTO_ICMP:
            if n >= l4 + ICMP_MIN_HEADER:
                transport = Transport.ICMP
        else:
            transport = Transport.OTHER
    return PacketView(
        ethertype=ethertype,
        ip_header_offset=l3,
        ihl=ihl,
        protocol=protocol,
        transport=transport,
        transport_offset=None if transport is Transport.NONE else l4,
    )


def dissect_packet(record, linktype: int = LINKTYPE_ETHERNET) -> PacketView:
    if linktype != LINKTYPE_ETHERNET:
        raise UnsupportedLinktype(linktype)
    return dissect_bytes(record.data)


def locate_field(view: PacketView, field: FieldId) -> FieldLocation | None:
    """Resolve ``field`` within a classified packet; None when absent."""
    if field is FieldId.TIMESTAMP:
        raise ValueError("timestamps live in the record header, not packet bytes")
    if field in _IP_LAYOUT:
        if view.ip_header_offset is None:
            return None
        rel, width = _IP_LAYOUT[field]
        return FieldLocation(field, view.ip_header_offset + rel, width)
    rel, width, carriers = _TRANSPORT_LAYOUT[field]
    if view.transport.value not in carriers:
        return None
    return FieldLocation(field, view.transport_offset + rel, width)


def read_field(record, loc: FieldLocation) -> int:
    """Read a field from a record or any bytes-like buffer."""
    data = getattr(record, "data", record)
    o = loc.byte_offset
    w = loc.bit_width
    if w == 8:
        return data[o]
    if w == 16:
        return (data[o] << 8) | data[o + 1]
    if w == 32:
        return int.from_bytes(data[o:o + 4], "big")
    if w == 3:
        return data[o] >> 5
    raise ValueError(f"unsupported field width {w}")


def write_field(buf: bytearray, loc: FieldLocation, value: int) -> None:
    """Write ``value`` in network byte order; bytes outside the field are untouched."""
    w = loc.bit_width
    if value < 0 or value >> w:
        raise ValueOverflow(value, w)
    o = loc.byte_offset
    if w == 8:
        buf[o] = value
    elif w == 16:
        buf[o] = value >> 8
        buf[o + 1] = value & 0xFF
    elif w == 32:
        buf[o:o + 4] = value.to_bytes(4, "big")
    elif w == 3:
        buf[o] = (value << 5) | (buf[o] & 0x1F)
    else:
        raise ValueError(f"unsupported field width {w}")


def field_value(record, view: PacketView, field: FieldId) -> int | None:
    """Current value of ``field`` in ``record`` (timestamps as sec<<32 | usec)."""
    if field is FieldId.TIMESTAMP:
        return (record.ts_sec << 32) | record.ts_usec
    loc = locate_field(view, field)
    return None if loc is None else read_field(record, loc)


def field_histogram(
    records: Iterable, fields: Iterable[FieldId], linktype: int = LINKTYPE_ETHERNET
) -> dict[FieldId, Counter]:
    """Count values per field over ``records``; absent fields count under None."""
    fields = list(fields)
    hist = {f: Counter() for f in fields}
    for record in records:
        view = dissect_packet(record, linktype)
        for f in fields:
            hist[f][field_value(record, view, f)] += 1
    return hist
