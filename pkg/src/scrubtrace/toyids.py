"""A tiny conjunctive header-signature matcher used as a stand-in IDS.

Rule file format, one rule per line (``#`` comments)::

    web-syn: protocol == 6 && dst_port == 80 && tcp_flags has syn
    high:    protocol == 17 && src_port in 1024-65535
    frag:    frag_flags has mf

Each packet raises one alert per rule whose predicates all hold.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

from .dissect import (
    FRAG_FLAG_BITS,
    LINKTYPE_ETHERNET,
    TCP_FLAG_BITS,
    Transport,
    dissect_bytes,
)
from .errors import RuleSyntaxError, UnsupportedLinktype
from .pcap_io import PcapReader

_NUMERIC = ("protocol", "src_port", "dst_port")
_BITS = {"tcp_flags": TCP_FLAG_BITS, "frag_flags": FRAG_FLAG_BITS}

_PRED = re.compile(r"^(?P<field>\w+)\s+(?P<op>==|in|has)\s+(?P<value>\S+)$")


@dataclass(frozen=True)
class Predicate:
    field: str
    op: str
    value: int | tuple[int, int]

    def render(self) -> str:
        if self.op == "in":
            return f"{self.field} in {self.value[0]}-{self.value[1]}"
        if self.op == "has":
            names = {v: k for k, v in _BITS[self.field].items()}
            return f"{self.field} has {names[self.value]}"
        return f"{self.field} == {self.value}"


@dataclass(frozen=True)
class ToyRule:
    id: str
    predicates: tuple[Predicate, ...]

    def render(self) -> str:
        return f"{self.id}: " + " && ".join(p.render() for p in self.predicates)


def _parse_predicate(text: str, line: int) -> Predicate:
    m = _PRED.match(text.strip())
    if not m:
        raise RuleSyntaxError(f"bad predicate {text.strip()!r}", line)
    field, op, value = m["field"], m["op"], m["value"]
    if field in _NUMERIC:
        limit = 0xFF if field == "protocol" else 0xFFFF
        try:
            if op == "==":
                v = int(value)
                if not 0 <= v <= limit:
                    raise ValueError
                return Predicate(field, op, v)
            if op == "in" and field != "protocol":
                lo, hi = (int(x) for x in value.split("-", 1))
                if not 0 <= lo <= hi <= limit:
                    raise ValueError
                return Predicate(field, op, (lo, hi))
        except ValueError:
            raise RuleSyntaxError(f"bad value {value!r} for {field}", line) from None
        raise RuleSyntaxError(f"operator {op!r} not allowed on {field}", line)
    if field in _BITS:
        if op != "has" or value.lower() not in _BITS[field]:
            raise RuleSyntaxError(f"{field} supports 'has' with one of {', '.join(_BITS[field])}", line)
        return Predicate(field, op, _BITS[field][value.lower()])
    raise RuleSyntaxError(f"unknown rule field {field!r}", line)


def parse_rules(text: str) -> list[ToyRule]:
    rules = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        rule_id, sep, body = line.partition(":")
        rule_id = rule_id.strip()
        if not sep or not rule_id or not body.strip():
            raise RuleSyntaxError("expected 'id: predicate [&& predicate ...]'", lineno)
        if rule_id in seen:
            raise RuleSyntaxError(f"duplicate rule id {rule_id!r}", lineno)
        seen.add(rule_id)
        preds = tuple(_parse_predicate(p, lineno) for p in body.split("&&"))
        rules.append(ToyRule(rule_id, preds))
    return rules


def _facts(data: bytes) -> dict:
    view = dissect_bytes(data)
    facts = {}
    if view.is_ipv4:
        ip = view.ip_header_offset
        facts["protocol"] = view.protocol
        facts["frag_flags"] = data[ip + 6] >> 5
    if view.transport in (Transport.TCP, Transport.UDP):
        t = view.transport_offset
        facts["src_port"] = (data[t] << 8) | data[t + 1]
        facts["dst_port"] = (data[t + 2] << 8) | data[t + 3]
        if view.transport is Transport.TCP:
            facts["tcp_flags"] = data[t + 13]
    return facts


def _holds(p: Predicate, facts: dict) -> bool:
    got = facts.get(p.field)
    if got is None:
        return False
    if p.op == "==":
        return got == p.value
    if p.op == "in":
        return p.value[0] <= got <= p.value[1]
    return bool(got & p.value)


def match_packet(rules: list[ToyRule], data: bytes) -> list[str]:
    """Ids of the rules that fire on one Ethernet frame."""
    facts = _facts(data)
    return [r.id for r in rules if all(_holds(p, facts) for p in r.predicates)]


def count_matches(rules: list[ToyRule], source) -> int:
    total = 0
    with PcapReader(source) as reader:
        if reader.header.linktype != LINKTYPE_ETHERNET:
            raise UnsupportedLinktype(reader.header.linktype)
        for record in reader:
            total += len(match_packet(rules, record.data))
    return total


def rules_digest(rules: list[ToyRule]) -> str:
    text = "\n".join(r.render() for r in rules)
    return hashlib.sha256(text.encode()).hexdigest()
