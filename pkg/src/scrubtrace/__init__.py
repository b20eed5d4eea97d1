"""Single-field, multi-level anonymization of pcap header fields, plus a harness
that measures how each option shifts IDS alarm counts."""

__version__ = "0.1.0"

from .dissect import FieldId, PacketView, dissect_packet, locate_field, read_field, write_field
from .pcap_io import GlobalHeader, PacketRecord, TraceFile, read_trace, validate_trace, write_trace
from .policy import PolicySet, generate_grid, parse_policy, validate_policy
from .rewrite import RewriteConfig, RewriteReport, anonymize_file, apply_policy

__all__ = [
    "FieldId",
    "GlobalHeader",
    "PacketRecord",
    "PacketView",
    "PolicySet",
    "RewriteConfig",
    "RewriteReport",
    "TraceFile",
    "anonymize_file",
    "apply_policy",
    "dissect_packet",
    "generate_grid",
    "locate_field",
    "parse_policy",
    "read_field",
    "read_trace",
    "validate_policy",
    "validate_trace",
    "write_field",
    "write_trace",
]
