"""Per-field anonymization option catalog, policy files, and the experiment grid.

Policy file grammar (one entry per line, ``#`` starts a comment)::

    field[.scope] = option[(param=value, ...)]

e.g. ``ports.src = black_marker`` or ``timestamp = truncate(gran=60)``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

from .dissect import TCP_CONTROL_MASK, TCP_FLAG_BITS, FieldId
from .errors import (
    BadScope,
    DuplicateField,
    MultiFieldDisabled,
    OptionNotInCatalog,
    PolicySyntaxError,
    UnknownField,
)
from . import primitives as P

CATALOG_VERSION = "1"
GRID_SIZE = 67


class PolicyField(str, enum.Enum):
    PROTOCOL = "protocol"
    LENGTH = "length"
    TTL = "ttl"
    TOS = "tos"
    FRAG = "frag"
    PORTS = "ports"
    SEQ = "seq"
    WINDOW = "window"
    TCPFLAGS = "tcpflags"
    TIMESTAMP = "timestamp"


class Scope(str, enum.Enum):
    ALL = "all"
    TCP = "tcp"
    UDP = "udp"
    BOTH = "both"
    SRC = "src"
    DST = "dst"

    @property
    def long_name(self) -> str:
        return _SCOPE_LONG[self]


_SCOPE_LONG = {
    Scope.ALL: "all",
    Scope.TCP: "tcp_only",
    Scope.UDP: "udp_only",
    Scope.BOTH: "both",
    Scope.SRC: "src_only",
    Scope.DST: "dst_only",
}

SCOPES = {
    PolicyField.PROTOCOL: (Scope.ALL, Scope.TCP, Scope.UDP),
    PolicyField.PORTS: (Scope.BOTH, Scope.SRC, Scope.DST),
}


def default_scope(f: PolicyField) -> Scope:
    return SCOPES.get(f, (Scope.ALL,))[0]


_TARGETS = {
    PolicyField.PROTOCOL: (FieldId.PROTOCOL,),
    PolicyField.LENGTH: (FieldId.TOTAL_LENGTH,),
    PolicyField.TTL: (FieldId.TTL,),
    PolicyField.TOS: (FieldId.TOS,),
    PolicyField.FRAG: (FieldId.FRAG_FLAGS,),
    PolicyField.SEQ: (FieldId.SEQ,),
    PolicyField.WINDOW: (FieldId.WINDOW,),
    PolicyField.TCPFLAGS: (FieldId.TCP_FLAGS,),
    PolicyField.TIMESTAMP: (FieldId.TIMESTAMP,),
}


# -- catalog ---------------------------------------------------------------

@dataclass(frozen=True)
class Param:
    name: str
    choices: tuple[str, ...] | None = None  # None: signed integer
    default: str | int | None = None  # None: required


@dataclass(frozen=True)
class OptionSpec:
    name: str
    long_name: str
    params: tuple[Param, ...] = ()
    # Parameter whose values are enumerated as separate grid experiments.
    variant: str | None = None


BM = OptionSpec("black_marker", "black_marker")
PURE = OptionSpec("pure_rand", "pure_randomization")
KEYED = OptionSpec("keyed_rand", "keyed_randomization")
BILATERAL = OptionSpec("bilateral", "bilateral_classification")
GROUPING = OptionSpec("grouping", "grouping")

FLAG_CHOICES = ("all",) + tuple(TCP_FLAG_BITS)

CATALOG: dict[PolicyField, dict[str, OptionSpec]] = {
    PolicyField.PROTOCOL: {o.name: o for o in (BM, PURE, KEYED, BILATERAL)},
    PolicyField.LENGTH: {o.name: o for o in (BM, PURE, KEYED, GROUPING)},
    PolicyField.TTL: {o.name: o for o in (BM, PURE, KEYED, GROUPING)},
    PolicyField.TOS: {o.name: o for o in (BM, PURE, KEYED, BILATERAL)},
    PolicyField.FRAG: {o.name: o for o in (BM, PURE, KEYED)},
    PolicyField.PORTS: {o.name: o for o in (BM, BILATERAL, PURE, KEYED)},
    PolicyField.SEQ: {o.name: o for o in (BM, PURE, KEYED, GROUPING)},
    PolicyField.WINDOW: {o.name: o for o in (BM, PURE, KEYED, BILATERAL, GROUPING)},
    PolicyField.TCPFLAGS: {
        "black_marker": OptionSpec("black_marker", "black_marker",
                                   (Param("flag", FLAG_CHOICES, "all"),), variant="flag"),
        "grouping": OptionSpec("grouping", "grouping", (Param("clear", ("rsf", "uap")),), variant="clear"),
        "pure_rand": PURE,
        "keyed_rand": KEYED,
    },
    PolicyField.TIMESTAMP: {
        "black_marker": BM,
        "annihilate": OptionSpec("annihilate", "annihilation", (Param("unit", ("sec", "usec")),), variant="unit"),
        "truncate": OptionSpec("truncate", "truncation", (Param("gran", None, P.DEFAULT_TRUNCATE_SECONDS),)),
        "enumerate": OptionSpec("enumerate", "enumeration"),
        "shift": OptionSpec("shift", "random_shift", (Param("min", None, P.DEFAULT_SHIFT_RANGE[0]),
                                                      Param("max", None, P.DEFAULT_SHIFT_RANGE[1]))),
        "pure_rand": PURE,
        "keyed_rand": KEYED,
    },
}

# Bucket tables; representative of each bucket is its lower bound.
LENGTH_BUCKETS = ((0, 100), (101, 2000), (2001, 65535))
TTL_BUCKETS = ((0, 0), (1, 32), (33, 64), (65, 255))
SEQ_BUCKETS = ((0, 999_999), (1_000_000, 1_999_999), (2_000_000, 2_999_999), (3_000_000, 2**32 - 1))
WINDOW_BUCKETS = ((0, 1024), (1025, 8192), (8193, 16384), (16385, 32768), (32769, 65535))

WELL_KNOWN_PROTOCOLS = frozenset({1, 6, 17})
PROTO_WELL_KNOWN_REP = 253
PROTO_OTHER_REP = 254
PORT_BILATERAL_THRESHOLD = 1024
WINDOW_BILATERAL_THRESHOLD = 10000
TCPFLAG_GROUP_MASKS = {
    "rsf": TCP_FLAG_BITS["rst"] | TCP_FLAG_BITS["syn"] | TCP_FLAG_BITS["fin"],
    "uap": TCP_FLAG_BITS["urg"] | TCP_FLAG_BITS["ack"] | TCP_FLAG_BITS["psh"],
}


def _protocol_is_well_known(v: int) -> bool:
    # The well-known class also owns its own marker value so re-application is stable.
    return v in WELL_KNOWN_PROTOCOLS or v == PROTO_WELL_KNOWN_REP


def _tos_msb_clear(v: int) -> bool:
    return not v & 0x80


def _port_is_low(v: int) -> bool:
    return v < PORT_BILATERAL_THRESHOLD


def _window_is_low(v: int) -> bool:
    return v < WINDOW_BILATERAL_THRESHOLD


_BILATERAL = {
    PolicyField.PROTOCOL: (_protocol_is_well_known, PROTO_WELL_KNOWN_REP, PROTO_OTHER_REP),
    PolicyField.TOS: (_tos_msb_clear, 0x00, 0xFF),
    PolicyField.PORTS: (_port_is_low, 0, PORT_BILATERAL_THRESHOLD),
    PolicyField.WINDOW: (_window_is_low, 0, WINDOW_BILATERAL_THRESHOLD),
}

_GROUPS = {
    PolicyField.LENGTH: LENGTH_BUCKETS,
    PolicyField.TTL: TTL_BUCKETS,
    PolicyField.SEQ: SEQ_BUCKETS,
    PolicyField.WINDOW: WINDOW_BUCKETS,
}


# -- policy types -------------------------------------------------------------

@dataclass(frozen=True)
class Option:
    name: str
    params: tuple[tuple[str, str | int], ...] = ()

    def get(self, name: str, default=None):
        return dict(self.params).get(name, default)

    def render(self) -> str:
        if not self.params:
            return self.name
        return f"{self.name}({', '.join(f'{k}={v}' for k, v in self.params)})"


@dataclass(frozen=True)
class FieldPolicy:
    field: PolicyField
    option: Option
    scope: Scope = Scope.ALL

    @property
    def targets(self) -> tuple[FieldId, ...]:
        if self.field is PolicyField.PORTS:
            return {
                Scope.BOTH: (FieldId.SRC_PORT, FieldId.DST_PORT),
                Scope.SRC: (FieldId.SRC_PORT,),
                Scope.DST: (FieldId.DST_PORT,),
            }[self.scope]
        return _TARGETS[self.field]

    @property
    def protocol_gate(self) -> int | None:
        """IP protocol number the entry is restricted to, if any."""
        if self.field is PolicyField.PROTOCOL:
            return {Scope.TCP: 6, Scope.UDP: 17}.get(self.scope)
        return None

    def render(self) -> str:
        lhs = self.field.value
        if self.field in SCOPES:
            lhs += "." + self.scope.value
        return f"{lhs} = {self.option.render()}"

    @property
    def experiment_id(self) -> str:
        spec = CATALOG[self.field][self.option.name]
        parts = [self.field.value, self.scope.long_name, spec.long_name]
        if spec.variant:
            parts.append(str(self.option.get(spec.variant)))
        return "/".join(parts)


@dataclass(frozen=True)
class PolicySet:
    entries: tuple[FieldPolicy, ...] = ()
    multi_field: bool = False

    def __post_init__(self):
        if not isinstance(self.entries, tuple):
            object.__setattr__(self, "entries", tuple(self.entries))

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def needs_key(self) -> bool:
        return any(e.option.name == "keyed_rand" for e in self.entries)

    def render(self) -> str:
        return "".join(e.render() + "\n" for e in self.entries)


# -- parsing -------------------------------------------------------------------

_LINE = re.compile(
    r"^(?P<field>[A-Za-z_]\w*)(?:\.(?P<scope>\w+))?\s*=\s*(?P<opt>[A-Za-z_]\w*)\s*"
    r"(?:\((?P<params>[^()]*)\))?$"
)
_PARAM = re.compile(r"^(?P<k>[A-Za-z_]\w*)\s*=\s*(?P<v>[+-]?\d+|[A-Za-z_]\w*)$")


def _normalize_option(f: PolicyField, name: str, raw: dict[str, str], line: int | None) -> Option:
    spec = CATALOG[f].get(name)
    if spec is None:
        raise OptionNotInCatalog(f"option {name!r} is not in the catalog for field {f.value!r}", line)
    known = {p.name: p for p in spec.params}
    for k in raw:
        if k not in known:
            raise OptionNotInCatalog(f"{f.value}: option {name!r} takes no parameter {k!r}", line)
    params = []
    for p in spec.params:
        if p.name in raw:
            value = raw[p.name]
            if p.choices is None:
                try:
                    value = int(value)
                except ValueError:
                    raise OptionNotInCatalog(f"{f.value}: {p.name} must be an integer, got {value!r}", line)
            elif value not in p.choices:
                raise OptionNotInCatalog(
                    f"{f.value}: {p.name}={value} not one of {', '.join(p.choices)}", line)
        elif p.default is not None:
            value = p.default
        else:
            raise OptionNotInCatalog(f"{f.value}: option {name!r} requires {p.name}=", line)
        params.append((p.name, value))
    opt = Option(name, tuple(params))
    if name == "truncate" and opt.get("gran") <= 0:
        raise OptionNotInCatalog("truncate: gran must be positive", line)
    if name == "shift" and opt.get("min") > opt.get("max"):
        raise OptionNotInCatalog("shift: min exceeds max", line)
    return opt


def make_entry(field_name: str, option: str, scope: str | None = None, *,
               line: int | None = None, **params) -> FieldPolicy:
    """Build a validated catalog entry from names, as a policy line would."""
    try:
        f = PolicyField(field_name)
    except ValueError:
        raise UnknownField(f"unknown field {field_name!r}", line) from None
    allowed = SCOPES.get(f)
    if scope is None:
        sc = default_scope(f)
    elif allowed is None:
        raise BadScope(f"field {f.value!r} takes no scope (got {scope!r})", line)
    else:
        try:
            sc = Scope(scope)
        except ValueError:
            sc = None
        if sc not in allowed:
            raise BadScope(
                f"scope {scope!r} invalid for {f.value!r}; use one of {', '.join(s.value for s in allowed)}", line)
    opt = _normalize_option(f, option, {k: str(v) for k, v in params.items()}, line)
    return FieldPolicy(f, opt, sc)


def parse_policy(text: str, *, multi_field: bool = False) -> PolicySet:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if not m:
            raise PolicySyntaxError(f"cannot parse {raw.strip()!r}; expected field[.scope] = option[(k=v,...)]",
                                    lineno)
        params = {}
        if m["params"] and m["params"].strip():
            for item in m["params"].split(","):
                pm = _PARAM.match(item.strip())
                if not pm:
                    raise PolicySyntaxError(f"bad parameter {item.strip()!r}", lineno)
                if pm["k"] in params:
                    raise PolicySyntaxError(f"parameter {pm['k']!r} given twice", lineno)
                params[pm["k"]] = pm["v"]
        entries.append((lineno, make_entry(m["field"], m["opt"], m["scope"], line=lineno, **params)))
    policy = PolicySet(tuple(e for _, e in entries), multi_field)
    validate_policy(policy, lines=[n for n, _ in entries])
    return policy


def validate_policy(policy: PolicySet, *, lines: list[int] | None = None) -> None:
    seen: dict[FieldId, int] = {}
    for i, entry in enumerate(policy.entries):
        line = lines[i] if lines else None
        spec = CATALOG.get(entry.field, {}).get(entry.option.name)
        if spec is None:
            raise OptionNotInCatalog(
                f"option {entry.option.name!r} is not in the catalog for field {entry.field.value!r}", line)
        if entry.scope not in SCOPES.get(entry.field, (Scope.ALL,)):
            raise BadScope(f"scope {entry.scope.value!r} invalid for {entry.field.value!r}", line)
        raw = {k: str(v) for k, v in entry.option.params}
        if _normalize_option(entry.field, entry.option.name, raw, line) != entry.option:
            raise OptionNotInCatalog(f"{entry.field.value}: parameters {raw} are not canonical", line)
        for target in entry.targets:
            if target in seen:
                raise DuplicateField(f"field {target.value!r} already set by entry {seen[target] + 1}", line)
            seen[target] = i
    if len(policy.entries) > 1 and not policy.multi_field:
        raise MultiFieldDisabled("more than one entry requires the multi-field flag")


def load_policy(path, *, multi_field: bool = False) -> PolicySet:
    with open(path, encoding="utf-8") as fh:
        return parse_policy(fh.read(), multi_field=multi_field)


# -- transforms ------------------------------------------------------------------

def _derive_seed(seed, label: str):
    return None if seed is None else f"{seed}/{label}"


def build_transform(entry: FieldPolicy, *, key: bytes | None = None, seed=None,
                    on_underflow: str = "redraw"):
    """Instantiate the primitive for ``entry``.

    Header fields get an int -> int callable shared by all targets of the
    entry; timestamps get a :class:`~scrubtrace.primitives.TimestampTransform`.
    Randomized options hold per-run state, so build one per trace.
    """
    f, opt = entry.field, entry.option
    name = opt.name
    seed = _derive_seed(seed, entry.experiment_id)
    if f is PolicyField.TIMESTAMP:
        return P.TimestampTransform(
            name,
            unit=opt.get("unit", "usec"),
            granularity=opt.get("gran", P.DEFAULT_TRUNCATE_SECONDS),
            shift_range=(opt.get("min", P.DEFAULT_SHIFT_RANGE[0]), opt.get("max", P.DEFAULT_SHIFT_RANGE[1])),
            seed=seed, key=key, on_underflow=on_underflow,
        )
    width = entry.targets[0].width
    if f is PolicyField.TCPFLAGS:
        if name == "black_marker":
            flag = opt.get("flag")
            return P.ClearBits(width, TCP_CONTROL_MASK if flag == "all" else TCP_FLAG_BITS[flag])
        if name == "grouping":
            return P.ClearBits(width, TCPFLAG_GROUP_MASKS[opt.get("clear")])
        if name == "pure_rand":
            return P.LowBits(width, P.PureRandomization(6, seed))
        return P.LowBits(width, P.KeyedRandomization(6, key or b""))
    if name == "black_marker":
        return P.BlackMarker(width, 0)
    if name == "pure_rand":
        return P.PureRandomization(width, seed)
    if name == "keyed_rand":
        return P.KeyedRandomization(width, key or b"")
    if name == "bilateral":
        is_low, lo, hi = _BILATERAL[f]
        return P.BilateralClassification(width, is_low, lo, hi)
    if name == "grouping":
        return P.Grouping(width, _GROUPS[f])
    raise OptionNotInCatalog(f"no transform for {entry.render()!r}")


# -- grid ----------------------------------------------------------------------

def generate_grid() -> list[tuple[str, PolicySet]]:
    """One single-entry policy per catalog (field, scope, option, variant)."""
    grid = []
    for f, options in CATALOG.items():
        for scope in SCOPES.get(f, (Scope.ALL,)):
            for spec in options.values():
                variants = [None]
                if spec.variant:
                    variants = next(p.choices for p in spec.params if p.name == spec.variant)
                for v in variants:
                    params = {spec.variant: v} if v is not None else {}
                    entry = make_entry(f.value, spec.name, scope.value if f in SCOPES else None, **params)
                    grid.append((entry.experiment_id, PolicySet((entry,))))
    return grid


def split_experiment_id(exp_id: str) -> tuple[str, str, str, str]:
    """(field, scope, option, variant) columns for an experiment id."""
    parts = exp_id.split("/")
    parts += [""] * (4 - len(parts))
    return tuple(parts[:4])


def grid_note() -> str:
    return (f"catalog v{CATALOG_VERSION}: {GRID_SIZE} experiments, one per listed "
            f"(field, scope, option, variant); unlisted parameterizations are not enumerated")
