"""Value-level anonymization algorithms.

Header-field transforms operate on fixed-width unsigned integers and always
return a value of the same width, so rewritten packets keep syntactically
valid fields. Timestamp transforms operate on (seconds, microseconds) pairs
and are stateful per trace.
"""

from __future__ import annotations

import bisect
import hashlib
import hmac
import random
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

from .errors import EmptyKey, OutputSpaceExhausted, ShiftUnderflow, ValueOverflow

USEC_PER_SEC = 1_000_000
# Number of valid (sec, usec) pairs: 32-bit seconds, usec below one million.
TS_SPACE = (1 << 32) * USEC_PER_SEC


def _check(v: int, width: int) -> None:
    if v < 0 or v >> width:
        raise ValueOverflow(v, width)


def black_marker(v: int, width: int, constant: int = 0) -> int:
    _check(v, width)
    _check(constant, width)
    return constant


class RandSession:
    """Injective random mapping built lazily as inputs are seen.

    Each unseen input gets an output drawn uniformly from the outputs not
    yet assigned. ``seed=None`` draws fresh OS entropy, so two sessions map
    the same input differently. ``space`` sets the output range directly
    for domains that are not a power of two (timestamps).
    """

    def __init__(self, width: int | None = None, *, space: int | None = None, seed=None):
        if (width is None) == (space is None):
            raise TypeError("give exactly one of width or space")
        self.width = width
        self.space = space if space is not None else 1 << width
        self._rng = random.Random(seed)
        self.table: dict[int, int] = {}
        self.used_outputs: set[int] = set()

    def map(self, v: int) -> int:
        # With an explicit output space, inputs are only required to be non-negative.
        if v < 0 or (self.width is not None and v >> self.width):
            raise ValueOverflow(v, self.width or 0)
        out = self.table.get(v)
        if out is not None:
            return out
        if len(self.used_outputs) >= self.space:
            raise OutputSpaceExhausted(f"all {self.space} outputs already assigned")
        draw = self._rng.randrange
        # Rejection sampling is uniform over the unused outputs.
        out = draw(self.space)
        while out in self.used_outputs:
            out = draw(self.space)
        self.table[v] = out
        self.used_outputs.add(out)
        return out

    def __len__(self) -> int:
        return len(self.table)


def pure_randomize(session: RandSession, v: int, width: int) -> int:
    if session.width != width:
        raise ValueError(f"session is {session.width}-bit, asked for {width}-bit")
    return session.map(v)


def keyed_digest(key: bytes, v: int) -> int:
    """HMAC-SHA256 of ``v`` as 8 big-endian bytes, as an unsigned integer."""
    if not key:
        raise EmptyKey()
    mac = hmac.new(key, v.to_bytes(8, "big"), hashlib.sha256).digest()
    return int.from_bytes(mac, "big")


def keyed_randomize(key: bytes, v: int, width: int) -> int:
    """Low ``width`` bits of the keyed hash. Deterministic; not guaranteed injective."""
    _check(v, width)
    return keyed_digest(key, v) & ((1 << width) - 1)


def bilateral_classify(v: int, classifier: Callable[[int], bool], low_rep: int, high_rep: int) -> int:
    return low_rep if classifier(v) else high_rep


def group_value(v: int, buckets: Sequence[tuple[int, int]], representatives: Sequence[int]) -> int:
    """Representative of the inclusive bucket holding ``v``.

    ``buckets`` must be sorted and contiguous.
    """
    i = bisect.bisect_right([lo for lo, _ in buckets], v) - 1
    if i < 0 or v > buckets[i][1]:
        raise ValueError(f"{v} falls outside every bucket")
    return representatives[i]


# -- configured header-field transforms ------------------------------------

@dataclass
class BlackMarker:
    width: int
    constant: int = 0

    def __post_init__(self):
        _check(self.constant, self.width)

    def __call__(self, v: int) -> int:
        return black_marker(v, self.width, self.constant)


@dataclass
class PureRandomization:
    width: int
    seed: object = None
    session: RandSession = field(init=False, repr=False)

    def __post_init__(self):
        self.session = RandSession(self.width, seed=self.seed)

    def __call__(self, v: int) -> int:
        return self.session.map(v)


@dataclass
class KeyedRandomization:
    width: int
    key: bytes = field(repr=False, default=b"")

    def __post_init__(self):
        if not self.key:
            raise EmptyKey()

    def __call__(self, v: int) -> int:
        return keyed_randomize(self.key, v, self.width)


@dataclass
class BilateralClassification:
    """Two-class partition; ``is_low`` decides membership of the low class."""

    width: int
    is_low: Callable[[int], bool]
    low_rep: int
    high_rep: int

    def __post_init__(self):
        _check(self.low_rep, self.width)
        _check(self.high_rep, self.width)
        if not self.is_low(self.low_rep) or self.is_low(self.high_rep):
            raise ValueError("each representative must belong to the class it stands for")

    def __call__(self, v: int) -> int:
        _check(v, self.width)
        return bilateral_classify(v, self.is_low, self.low_rep, self.high_rep)


@dataclass
class Grouping:
    width: int
    buckets: tuple[tuple[int, int], ...]
    representatives: tuple[int, ...] = ()

    def __post_init__(self):
        self.buckets = tuple(tuple(b) for b in self.buckets)
        if not self.representatives:
            self.representatives = tuple(lo for lo, _ in self.buckets)
        if len(self.representatives) != len(self.buckets):
            raise ValueError("one representative per bucket")
        expected = 0
        for (lo, hi), rep in zip(self.buckets, self.representatives):
            if lo != expected or hi < lo:
                raise ValueError(f"buckets must be ordered, disjoint and contiguous; bad bucket {lo}-{hi}")
            if not lo <= rep <= hi:
                raise ValueError(f"representative {rep} outside bucket {lo}-{hi}")
            expected = hi + 1
        if expected != 1 << self.width:
            raise ValueError(f"buckets stop at {expected - 1}, domain ends at {(1 << self.width) - 1}")
        self._lows = [lo for lo, _ in self.buckets]

    def __call__(self, v: int) -> int:
        _check(v, self.width)
        return self.representatives[bisect.bisect_right(self._lows, v) - 1]


@dataclass
class ClearBits:
    """Black marker applied to a subset of bits (zeroes the bits in ``mask``)."""

    width: int
    mask: int

    def __post_init__(self):
        _check(self.mask, self.width)

    def __call__(self, v: int) -> int:
        _check(v, self.width)
        return v & ~self.mask


@dataclass
class LowBits:
    """Apply ``inner`` to the low ``inner.width`` bits, keeping the high bits."""

    width: int
    inner: Callable[[int], int]

    def __call__(self, v: int) -> int:
        _check(v, self.width)
        bits = self.inner.width
        low_mask = (1 << bits) - 1
        return (v & ~low_mask) | self.inner(v & low_mask)


# -- timestamps -------------------------------------------------------------

TS_MODES = ("black_marker", "annihilate", "truncate", "enumerate", "shift", "pure_rand", "keyed_rand")

DEFAULT_TRUNCATE_SECONDS = 60
DEFAULT_SHIFT_RANGE = (-365 * 86400, 365 * 86400)


def _to_us(sec: int, usec: int) -> int:
    return sec * USEC_PER_SEC + usec


class TimestampTransform:
    """Per-trace timestamp rewriting.

    Call :meth:`begin_trace` with the earliest and latest timestamps of a
    trace before feeding it pairs in file order; ``enumerate`` and ``shift``
    keep state between calls.
    """

    def __init__(self, mode: str, *, unit: str = "usec", granularity: int = DEFAULT_TRUNCATE_SECONDS,
                 shift_range: tuple[int, int] = DEFAULT_SHIFT_RANGE, seed=None, key: bytes | None = None,
                 on_underflow: str = "redraw", offset_us: int | None = None):
        if mode not in TS_MODES:
            raise ValueError(f"unknown timestamp mode {mode!r}")
        if unit not in ("sec", "usec"):
            raise ValueError("annihilation unit is 'sec' or 'usec'")
        if granularity <= 0:
            raise ValueError("truncation granularity must be positive")
        if shift_range[0] > shift_range[1]:
            raise ValueError("shift range min exceeds max")
        if on_underflow not in ("redraw", "clamp"):
            raise ValueError("on_underflow is 'redraw' or 'clamp'")
        if mode == "keyed_rand" and not key:
            raise EmptyKey()
        self.mode = mode
        self.unit = unit
        self.granularity = granularity
        self.shift_range = shift_range
        self.on_underflow = on_underflow
        self.key = key
        self._rng = random.Random(seed)
        self._fixed_offset = offset_us
        self.offset_us: int | None = None
        self._index = 0
        self._session = RandSession(space=TS_SPACE, seed=self._rng.getrandbits(64)) if mode == "pure_rand" else None

    def begin_trace(self, earliest: tuple[int, int] | None = None, latest: tuple[int, int] | None = None) -> None:
        self._index = 0
        self.offset_us = None
        if self.mode == "shift":
            self.offset_us = self._draw_offset(earliest, latest)

    def _draw_offset(self, earliest, latest) -> int:
        lo = self.shift_range[0] * USEC_PER_SEC
        hi = self.shift_range[1] * USEC_PER_SEC
        if earliest is None:
            return self._fixed_offset if self._fixed_offset is not None else self._rng.randint(lo, hi)
        floor = -_to_us(*earliest)
        ceil = TS_SPACE - 1 - _to_us(*(latest or earliest))
        if self._fixed_offset is not None:
            delta = self._fixed_offset
        elif self.on_underflow == "redraw":
            # Uniform over the admissible part of the range, i.e. what
            # redrawing until the shift fits converges to.
            a, b = max(lo, floor), min(hi, ceil)
            if a > b:
                raise ShiftUnderflow(f"no offset in [{lo}, {hi}] us keeps timestamps in range")
            return self._rng.randint(a, b)
        else:
            delta = self._rng.randint(lo, hi)
        if floor <= delta <= ceil:
            return delta
        if self.on_underflow == "clamp":
            return min(max(delta, floor), ceil)
        raise ShiftUnderflow(f"offset {delta} us moves a timestamp out of range")

    def __call__(self, sec: int, usec: int) -> tuple[int, int]:
        mode = self.mode
        if mode == "black_marker":
            return 0, 0
        if mode == "annihilate":
            return (0, usec) if self.unit == "sec" else (sec, 0)
        if mode == "truncate":
            return sec - sec % self.granularity, 0
        if mode == "enumerate":
            i = self._index
            self._index += 1
            return divmod(i, USEC_PER_SEC)
        if mode == "shift":
            if self.offset_us is None:
                self.offset_us = self._draw_offset(None, None)
            total = _to_us(sec, usec) + self.offset_us
            if not 0 <= total < TS_SPACE:
                if self.on_underflow != "clamp":
                    raise ShiftUnderflow(f"({sec}, {usec}) shifted out of range")
                total = min(max(total, 0), TS_SPACE - 1)
            return divmod(total, USEC_PER_SEC)
        packed = (sec << 32) | usec
        if mode == "pure_rand":
            return divmod(self._session.map(packed), USEC_PER_SEC)
        return divmod(keyed_digest(self.key, packed) % TS_SPACE, USEC_PER_SEC)


def ts_transform(t: TimestampTransform, series: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Transform a whole series (one trace) in file order."""
    series = list(series)
    if series:
        t.begin_trace(min(series), max(series))
    else:
        t.begin_trace()
    return [t(s, u) for s, u in series]
