"""Exception hierarchy shared by every scrubtrace module."""


class ScrubError(Exception):
    """Base class for all scrubtrace errors."""


# -- pcap_io --------------------------------------------------------------

class PcapError(ScrubError):
    pass


class BadMagic(PcapError):
    def __init__(self, magic: int):
        super().__init__(f"unsupported pcap magic 0x{magic:08x}")
        self.magic = magic


class BadHeader(PcapError):
    pass


class TruncatedRecord(PcapError):
    """Stream ended mid-record. ``last_complete`` is -1 if no record was complete."""

    def __init__(self, last_complete: int, detail: str = ""):
        msg = f"trace truncated after record index {last_complete}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.last_complete = last_complete


class RecordInvariant(PcapError):
    pass


# -- dissect --------------------------------------------------------------

class UnsupportedLinktype(ScrubError):
    def __init__(self, linktype: int):
        super().__init__(f"linktype {linktype} is not Ethernet (1)")
        self.linktype = linktype


class ValueOverflow(ScrubError, ValueError):
    def __init__(self, value: int, width: int):
        super().__init__(f"value {value} does not fit in {width} bits")
        self.value = value
        self.width = width


# -- anon primitives ------------------------------------------------------

class EmptyKey(ScrubError, ValueError):
    def __init__(self, msg: str = "keyed randomization requires a non-empty key"):
        super().__init__(msg)


class OutputSpaceExhausted(ScrubError):
    pass


class ShiftUnderflow(ScrubError):
    pass


# -- policy ---------------------------------------------------------------

class PolicyError(ScrubError):
    """Policy parse or validation failure; ``line`` is 1-based when known."""

    def __init__(self, reason: str, line: int | None = None):
        self.reason = reason
        self.line = line
        super().__init__(f"line {line}: {reason}" if line is not None else reason)


class PolicySyntaxError(PolicyError):
    pass


class UnknownField(PolicyError):
    pass


class OptionNotInCatalog(PolicyError):
    pass


class BadScope(PolicyError):
    pass


class DuplicateField(PolicyError):
    pass


class MultiFieldDisabled(PolicyError):
    pass


# -- harness --------------------------------------------------------------

class AdapterFailure(ScrubError):
    pass


class ZeroBenchmark(ScrubError, ZeroDivisionError):
    def __init__(self):
        super().__init__("benchmark alarm count is zero; percent deviation undefined")


class RuleSyntaxError(ScrubError):
    def __init__(self, reason: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {reason}" if line is not None else reason)
