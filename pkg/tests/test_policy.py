from collections import Counter

import pytest

from scrubtrace.dissect import FieldId
from scrubtrace.errors import (
    BadScope,
    DuplicateField,
    MultiFieldDisabled,
    OptionNotInCatalog,
    PolicySyntaxError,
    UnknownField,
)
from scrubtrace.policy import (
    GRID_SIZE,
    Option,
    PolicyField,
    PolicySet,
    Scope,
    FieldPolicy,
    generate_grid,
    make_entry,
    parse_policy,
    split_experiment_id,
    validate_policy,
)


def test_ttl_grouping():
    (e,) = parse_policy("ttl = grouping").entries
    assert e.field is PolicyField.TTL and e.option == Option("grouping") and e.scope is Scope.ALL
    assert e.targets == (FieldId.TTL,)


def test_source_port_black_marker():
    (e,) = parse_policy("ports.src = black_marker").entries
    assert e.targets == (FieldId.SRC_PORT,) and e.scope is Scope.SRC


def test_ports_default_scope_is_both():
    (e,) = parse_policy("ports = keyed_rand").entries
    assert e.targets == (FieldId.SRC_PORT, FieldId.DST_PORT)


def test_comments_and_blank_lines():
    p = parse_policy("# header\n\n  timestamp = truncate(gran=30)  # half a minute\n")
    assert p.entries[0].option == Option("truncate", (("gran", 30),))


def test_defaults_are_filled():
    (e,) = parse_policy("timestamp = shift").entries
    assert e.option.get("min") == -365 * 86400 and e.option.get("max") == 365 * 86400
    (e,) = parse_policy("tcpflags = black_marker").entries
    assert e.option.get("flag") == "all"


def test_empty_policy_is_valid():
    p = parse_policy("# nothing\n")
    assert len(p) == 0
    validate_policy(PolicySet())


@pytest.mark.parametrize("text, exc, line", [
    ("ttl = aggregation", OptionNotInCatalog, 1),
    ("seq = bilateral", OptionNotInCatalog, 1),
    ("frag = grouping", OptionNotInCatalog, 1),
    ("\n\naddress = black_marker", UnknownField, 3),
    ("ttl.tcp = grouping", BadScope, 1),
    ("protocol.src = black_marker", BadScope, 1),
    ("ports.tcp = black_marker", BadScope, 1),
    ("ttl grouping", PolicySyntaxError, 1),
    ("ttl = grouping(", PolicySyntaxError, 1),
    ("timestamp = truncate(gran=1, gran=2)", PolicySyntaxError, 1),
    ("timestamp = annihilate", OptionNotInCatalog, 1),
    ("timestamp = annihilate(unit=ms)", OptionNotInCatalog, 1),
    ("timestamp = truncate(gran=0)", OptionNotInCatalog, 1),
    ("timestamp = truncate(gran=x)", OptionNotInCatalog, 1),
    ("timestamp = shift(min=5, max=1)", OptionNotInCatalog, 1),
    ("ttl = grouping(n=3)", OptionNotInCatalog, 1),
])
def test_rejections_name_line(text, exc, line):
    with pytest.raises(exc) as info:
        parse_policy(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_duplicate_field():
    with pytest.raises(DuplicateField):
        parse_policy("ttl = grouping\nttl = black_marker", multi_field=True)
    with pytest.raises(DuplicateField):
        parse_policy("ports = black_marker\nports.dst = bilateral", multi_field=True)


def test_multi_field_flag():
    with pytest.raises(MultiFieldDisabled):
        parse_policy("ttl = grouping\ntos = bilateral")
    p = parse_policy("ttl = grouping\ntos = bilateral\nports.src = black_marker\nports.dst = bilateral",
                     multi_field=True)
    assert len(p) == 4


def test_validate_rejects_hand_built_entries():
    with pytest.raises(OptionNotInCatalog):
        validate_policy(PolicySet((FieldPolicy(PolicyField.SEQ, Option("bilateral")),)))
    with pytest.raises(BadScope):
        validate_policy(PolicySet((FieldPolicy(PolicyField.TTL, Option("grouping"), Scope.TCP),)))
    with pytest.raises(OptionNotInCatalog):
        validate_policy(PolicySet((FieldPolicy(PolicyField.TIMESTAMP, Option("truncate")),)))


def test_protocol_gate():
    assert make_entry("protocol", "black_marker", "tcp").protocol_gate == 6
    assert make_entry("protocol", "black_marker", "udp").protocol_gate == 17
    assert make_entry("protocol", "black_marker").protocol_gate is None


def test_needs_key():
    assert parse_policy("ttl = keyed_rand").needs_key
    assert not parse_policy("ttl = pure_rand").needs_key


# -- grid -------------------------------------------------------------------------


def test_grid_size_and_ids():
    grid = generate_grid()
    ids = [i for i, _ in grid]
    assert len(ids) == GRID_SIZE == 67
    assert len(set(ids)) == 67
    assert ids == [i for i, _ in generate_grid()]


def test_grid_per_field_counts():
    counts = Counter(i.split("/")[0] for i, _ in generate_grid())
    assert counts == {"protocol": 12, "length": 4, "ttl": 4, "tos": 4, "frag": 3, "ports": 12,
                      "seq": 4, "window": 5, "tcpflags": 11, "timestamp": 8}


def test_grid_examples():
    ids = {i for i, _ in generate_grid()}
    assert "protocol/udp_only/keyed_randomization" in ids
    assert "ttl/all/grouping" in ids
    assert "timestamp/all/annihilation/usec" in ids
    per_flag = [i for i in ids if i.startswith("tcpflags/all/black_marker/") and not i.endswith("/all")]
    assert len(per_flag) == 6
    assert not any(i.split("/")[0] in ("address", "payload") for i in ids)


def test_grid_entries_validate_and_round_trip():
    for exp_id, policy in generate_grid():
        validate_policy(policy)
        assert len(policy) == 1
        reparsed = parse_policy(policy.render())
        assert reparsed == policy
        assert policy.entries[0].experiment_id == exp_id


def test_split_experiment_id():
    assert split_experiment_id("ttl/all/grouping") == ("ttl", "all", "grouping", "")
    assert split_experiment_id("tcpflags/all/black_marker/syn") == ("tcpflags", "all", "black_marker", "syn")
