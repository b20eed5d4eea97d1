import csv
import json
import math
import random
import shlex
import sys

import pytest
from hypothesis import given
from hypothesis import strategies as st

from packets import fragment, mixed_frames, tcp, trace, udp
from scrubtrace import toyids
from scrubtrace.errors import AdapterFailure, RuleSyntaxError, ZeroBenchmark
from scrubtrace.harness import (
    AlertLogAdapter,
    BenchmarkCache,
    CommandAdapter,
    ToyAdapter,
    aggregate,
    count_alarms,
    emit_reports,
    list_corpus,
    parse_adapter,
    percent_diff,
    run_experiment,
    run_experiments,
)
from scrubtrace.pcap_io import write_trace
from scrubtrace.policy import PolicySet, parse_policy

PY = shlex.quote(sys.executable)
WEB_RULE = "web: protocol == 6 && dst_port == 80"


def _write(path, frames):
    write_trace(trace(frames), path)
    return path


def _corpus(tmp_path, per_file=(5, 3, 1, 4, 2)):
    d = tmp_path / "corpus"
    d.mkdir()
    for i, n in enumerate(per_file):
        _write(d / f"f{i}.pcap", [tcp(dport=80, sport=2000 + j) for j in range(n)] + [udp()])
    return d


# -- toy rules ---------------------------------------------------------------------


def test_rule_grammar():
    rules = toyids.parse_rules(
        "# comment\n"
        "web-syn: protocol == 6 && dst_port == 80 && tcp_flags has syn\n"
        "high: src_port in 1024-65535\n"
        "frag: frag_flags has mf\n"
    )
    assert [r.id for r in rules] == ["web-syn", "high", "frag"]
    assert toyids.parse_rules("\n".join(r.render() for r in rules)) == rules


@pytest.mark.parametrize("text", [
    "nocolon protocol == 6",
    "x: ttl == 5",
    "x: protocol == 300",
    "x: protocol in 1-5",
    "x: dst_port in 9-3",
    "x: tcp_flags has nope",
    "x: tcp_flags == 2",
    "x: protocol == 6 &&",
    "x: protocol == 6\nx: protocol == 17",
])
def test_rule_errors(text):
    with pytest.raises(RuleSyntaxError):
        toyids.parse_rules(text)


def test_match_packet():
    rules = toyids.parse_rules("web: protocol == 6 && dst_port == 80\nsyn: tcp_flags has syn\n"
                               "mf: frag_flags has mf\nudp: protocol == 17 && src_port in 5000-6000")
    assert toyids.match_packet(rules, tcp()) == ["web", "syn"]
    assert toyids.match_packet(rules, tcp(flags="A", dport=22)) == []
    assert toyids.match_packet(rules, udp(sport=5353)) == ["udp"]
    assert toyids.match_packet(rules, tcp(ipflags=1)) == ["web", "syn", "mf"]
    # Non-first fragment: no ports, so port predicates fail.
    assert toyids.match_packet(rules, fragment()) == []


def test_toy_adapter_counts(tmp_path):
    adapter = ToyAdapter(toyids.parse_rules(WEB_RULE))
    path = _write(tmp_path / "t.pcap", [tcp(dport=80)] * 5 + [tcp(dport=22), udp(dport=80)])
    assert count_alarms(adapter, path) == 5
    assert count_alarms(adapter, _write(tmp_path / "e.pcap", [])) == 0


def test_toy_adapter_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"not a pcap at all")
    with pytest.raises(AdapterFailure):
        ToyAdapter(toyids.parse_rules(WEB_RULE)).count(bad)


# -- external adapters -------------------------------------------------------------


def _script(tmp_path, name, body):
    p = tmp_path / name
    p.write_text(body)
    return f"{PY} {shlex.quote(str(p))}"


def test_command_adapter(tmp_path):
    cmd = _script(tmp_path, "count.py", "print(17)\n")
    assert CommandAdapter(cmd + " {input}").count(tmp_path / "whatever") == 17


def test_command_adapter_failures(tmp_path):
    with pytest.raises(ValueError):
        CommandAdapter("echo 1")
    with pytest.raises(ValueError):
        CommandAdapter("cat {input} {input}")
    bad_out = _script(tmp_path, "bad.py", "print('many alarms')\n")
    with pytest.raises(AdapterFailure):
        CommandAdapter(bad_out + " {input}").count("x")
    exit1 = _script(tmp_path, "exit.py", "import sys; print(3); sys.exit(1)\n")
    with pytest.raises(AdapterFailure):
        CommandAdapter(exit1 + " {input}").count("x")
    with pytest.raises(AdapterFailure):
        CommandAdapter("/nonexistent/ids {input}").count("x")


def test_alert_log_adapter(tmp_path):
    ids = _script(tmp_path, "ids.py", (
        "import sys, pathlib\n"
        "log = pathlib.Path(sys.argv[2])\n"
        "(log / 'alert').write_text('[**] a\\n\\n[**] b\\nnoise\\n')\n"
        "(log / 'sub').mkdir()\n"
        "(log / 'sub' / 'more').write_text('[**] c\\n')\n"
    ))
    assert AlertLogAdapter(ids + " {input} {log}").count("t.pcap") == 4
    assert AlertLogAdapter(ids + " {input} {log}", pattern=r"^\[\*\*\]").count("t.pcap") == 3
    with pytest.raises(ValueError):
        AlertLogAdapter("ids {input}")


def test_parse_adapter(tmp_path):
    rules = tmp_path / "r.rules"
    rules.write_text(WEB_RULE + "\n")
    assert isinstance(parse_adapter(f"toy:{rules}"), ToyAdapter)
    assert isinstance(parse_adapter("cmd:count {input}"), CommandAdapter)
    assert parse_adapter("alertlog:ids {input} {log}", pattern="x").pattern == "x"
    for bad in ("snort", "toy:", "zeek:foo {input}"):
        with pytest.raises(ValueError):
            parse_adapter(bad)


def test_adapter_digests_differ(tmp_path):
    a = CommandAdapter("a {input}").digest()
    b = AlertLogAdapter("a {input} {log}").digest()
    c = ToyAdapter(toyids.parse_rules(WEB_RULE)).digest()
    assert len({a, b, c}) == 3


# -- statistics --------------------------------------------------------------------


def test_percent_diff():
    assert percent_diff(465, 25957) == pytest.approx(100 * 25492 / 465)
    assert round(percent_diff(465, 25957), 2) == 5482.15
    assert percent_diff(7, 0) == -100
    with pytest.raises(ZeroBenchmark):
        percent_diff(0, 3)


@given(st.integers(1, 10**6), st.integers(0, 10**6))
def test_percent_diff_lower_bound(b, a):
    assert percent_diff(b, a) >= -100


def test_aggregate_examples():
    s = aggregate([-100, 0, 100])
    assert (s.mean, s.stdev, s.min, s.max, s.n) == (0, 100, -100, 100, 3)
    s = aggregate([4.5])
    assert (s.mean, s.stdev, s.min, s.max) == (4.5, None, 4.5, 4.5)
    s = aggregate([])
    assert s.n == 0 and s.mean is None and s.stdev is None and s.min is None


def brute_force(xs):
    n = len(xs)
    mean = sum(xs) / n
    var = sum((x - mean) ** 2 for x in xs) / (n - 1)
    return mean, math.sqrt(var), min(xs), max(xs)


def test_aggregate_against_brute_force():
    rng = random.Random(7)
    for _ in range(100):
        xs = [rng.uniform(-100, 6000) for _ in range(rng.randrange(2, 140))]
        s = aggregate(xs)
        for got, want in zip((s.mean, s.stdev, s.min, s.max), brute_force(xs)):
            assert math.isclose(got, want, rel_tol=1e-9, abs_tol=1e-12)


@given(st.lists(st.floats(-100, 1e6), min_size=1, max_size=50))
def test_aggregate_ordering(xs):
    s = aggregate(xs)
    assert s.min <= s.mean + 1e-9 and s.mean <= s.max + 1e-9


# -- experiments -------------------------------------------------------------------


def test_zero_sum_direction(tmp_path):
    corpus = list_corpus(_corpus(tmp_path))
    adapter = ToyAdapter(toyids.parse_rules(WEB_RULE))
    black = run_experiment(corpus, parse_policy("protocol = black_marker"), adapter)
    assert black.stats.mean == -100 and black.stats.stdev == 0
    ttl = run_experiment(corpus, parse_policy("ttl = grouping"), adapter)
    assert ttl.stats.mean == 0
    null = run_experiment(corpus, PolicySet(), adapter)
    assert all(r.pct_diff == 0 for r in null.rows)


def test_zero_benchmark_excluded(tmp_path):
    d = _corpus(tmp_path, per_file=(2, 0, 3))
    res = run_experiment(list_corpus(d), parse_policy("protocol = black_marker"),
                         ToyAdapter(toyids.parse_rules(WEB_RULE)))
    assert [r.status for r in res.rows] == ["ok", "excluded", "ok"]
    assert res.stats.n + len(res.stats.excluded) == 3
    assert res.stats.excluded == ("f1.pcap",)


def test_failed_file_does_not_stop_run(tmp_path):
    d = _corpus(tmp_path, per_file=(2, 2))
    (d / "broken.pcap").write_bytes(b"\xd4\xc3\xb2\xa1junk")
    res = run_experiment(list_corpus(d), parse_policy("ttl = black_marker"),
                         ToyAdapter(toyids.parse_rules(WEB_RULE)))
    status = {r.file: r.status for r in res.rows}
    assert status == {"broken.pcap": "failed", "f0.pcap": "ok", "f1.pcap": "ok"}
    assert res.completed and res.stats.n == 2


def test_benchmark_cache(tmp_path):
    d = _corpus(tmp_path, per_file=(2,))
    calls = []

    class Counting(ToyAdapter):
        def count(self, path):
            calls.append(path)
            return super().count(path)

    adapter = Counting(toyids.parse_rules(WEB_RULE))
    cache = BenchmarkCache(tmp_path / "bench.json")
    corpus = list_corpus(d)
    run_experiments(corpus, [("a", parse_policy("ttl = grouping")), ("b", parse_policy("tos = bilateral"))],
                    adapter, cache=cache)
    # one benchmark plus one count per experiment
    assert len(calls) == 3
    cache.save()
    again = BenchmarkCache(tmp_path / "bench.json")
    assert again.get(corpus[0], adapter) == 2
    assert len(calls) == 3


def test_parallel_matches_serial(tmp_path):
    corpus = list_corpus(_corpus(tmp_path))
    adapter = ToyAdapter(toyids.parse_rules(WEB_RULE))
    policy = parse_policy("ports = pure_rand")
    a = run_experiment(corpus, policy, adapter, seed=3)
    b = run_experiment(corpus, policy, adapter, seed=3, jobs=4)
    assert a.rows == b.rows


def test_list_corpus(tmp_path):
    (tmp_path / "a.pcap").write_bytes(b"")
    (tmp_path / "b.txt").write_text("")
    (tmp_path / "c.CAP").write_bytes(b"")
    assert [p.name for p in list_corpus(tmp_path)] == ["a.pcap", "c.CAP"]
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(FileNotFoundError):
        list_corpus(empty)


# -- reports -----------------------------------------------------------------------


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_emit_reports(tmp_path):
    d = _corpus(tmp_path, per_file=(2, 0, 3))
    adapter = ToyAdapter(toyids.parse_rules(WEB_RULE))
    results = run_experiments(list_corpus(d), [("protocol/all/black_marker", parse_policy("protocol = black_marker")),
                                               ("ttl/all/grouping", parse_policy("ttl = grouping"))], adapter)
    paths = emit_reports(results, tmp_path / "out", {"note": "x"})

    agg = _rows(paths["aggregate"])
    assert agg[0] == ["field", "scope", "option", "variant", "n", "excluded", "mean", "stdev", "min", "max"]
    assert agg[1] == ["protocol", "all", "black_marker", "", "2", "1", "-100.00", "0.00", "-100.00", "-100.00"]
    assert agg[2][:4] == ["ttl", "all", "grouping", ""] and agg[2][6] == "0.00"

    per_file = _rows(paths["per_file"] / "protocol__all__black_marker.csv")
    assert per_file[0] == ["file", "benchmark", "alarms", "pct_diff", "status"]
    assert per_file[2] == ["f1.pcap", "0", "", "", "excluded"]

    scatter = _rows(paths["scatter"])
    assert scatter[0] == ["experiment", "file", "pct_diff"]
    assert len(scatter) - 1 == sum(r.stats.n for r in results)

    meta = json.loads(paths["run"].read_text())
    assert meta["note"] == "x" and len(meta["experiments"]) == 2


def test_emit_reports_hand_oracle(tmp_path):
    from scrubtrace.harness import ExperimentResult, FileRow

    rows = [FileRow(f"f{i}", 10, a, percent_diff(10, a)) for i, a in enumerate((0, 10, 20))]
    res = ExperimentResult("ttl/all/grouping", parse_policy("ttl = grouping"), rows,
                           aggregate([r.pct_diff for r in rows]))
    paths = emit_reports([res], tmp_path)
    assert _rows(paths["aggregate"])[1][4:] == ["3", "0", "0.00", "100.00", "-100.00", "100.00"]


def test_emit_reports_requires_results(tmp_path):
    with pytest.raises(ValueError):
        emit_reports([], tmp_path)


def test_mixed_trace_toy_counts_are_deterministic(tmp_path):
    path = _write(tmp_path / "m.pcap", mixed_frames())
    adapter = ToyAdapter(toyids.parse_rules(WEB_RULE + "\nany: protocol == 17"))
    assert adapter.count(path) == adapter.count(path) == 4
