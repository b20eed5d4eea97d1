"""Privacy/analysis tradeoff measurement.

For each trace a benchmark alarm count is taken with no anonymization.
Each experiment anonymizes every trace independently, recounts alarms,
and summarizes the per-file percent deviations.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import re
import shlex
import statistics
import subprocess
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import toyids
from .errors import AdapterFailure, PcapError, ScrubError, ZeroBenchmark
from .policy import PolicySet, split_experiment_id
from .rewrite import RewriteConfig, anonymize_file

log = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_EXCLUDED = "excluded"
STATUS_FAILED = "failed"

TRACE_SUFFIXES = (".pcap", ".cap", ".dmp")


# -- IDS adapters ----------------------------------------------------------------

class ToyAdapter:
    def __init__(self, rules: list[toyids.ToyRule]):
        if not rules:
            raise ValueError("toy adapter needs at least one rule")
        self.rules = list(rules)

    @classmethod
    def from_file(cls, path) -> ToyAdapter:
        return cls(toyids.parse_rules(Path(path).read_text(encoding="utf-8")))

    def count(self, trace_path) -> int:
        try:
            return toyids.count_matches(self.rules, trace_path)
        except (PcapError, ScrubError, OSError) as exc:
            raise AdapterFailure(f"toy matcher failed on {trace_path}: {exc}") from exc

    def digest(self) -> str:
        return "toy:" + toyids.rules_digest(self.rules)

    def describe(self) -> str:
        return f"toy ({len(self.rules)} rules)"


def _run(argv: list[str], timeout: float | None) -> subprocess.CompletedProcess:
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise AdapterFailure(f"{argv[0]}: {exc}") from exc
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-1:] or [""]
        raise AdapterFailure(f"{argv[0]} exited with {proc.returncode}: {tail[0]}")
    return proc


def _substitute(template: str, **values) -> list[str]:
    argv = []
    for token in shlex.split(template):
        for k, v in values.items():
            token = token.replace("{" + k + "}", str(v))
        argv.append(token)
    return argv


@dataclass
class CommandAdapter:
    """External counter: ``{input}`` is replaced by the trace path; stdout is one integer."""

    template: str
    timeout: float | None = None

    def __post_init__(self):
        if self.template.count("{input}") != 1:
            raise ValueError("command template must contain {input} exactly once")

    def count(self, trace_path) -> int:
        out = _run(_substitute(self.template, input=trace_path), self.timeout).stdout.strip()
        if not re.fullmatch(r"\d+", out):
            raise AdapterFailure(f"expected a decimal alarm count on stdout, got {out[:60]!r}")
        return int(out)

    def digest(self) -> str:
        return "cmd:" + hashlib.sha256(self.template.encode()).hexdigest()

    def describe(self) -> str:
        return f"command {self.template!r}"


@dataclass
class AlertLogAdapter:
    """External IDS writing alert logs.

    ``{log}`` is replaced by a fresh empty directory; afterwards every line
    matching ``pattern`` in any file below it counts as one alarm.
    """

    template: str
    pattern: str = r"\S"
    timeout: float | None = None

    def __post_init__(self):
        if self.template.count("{input}") != 1:
            raise ValueError("alert-log template must contain {input} exactly once")
        if "{log}" not in self.template:
            raise ValueError("alert-log template must contain {log}")
        self._regex = re.compile(self.pattern)

    def count(self, trace_path) -> int:
        with tempfile.TemporaryDirectory(prefix="scrubtrace-log-") as logdir:
            _run(_substitute(self.template, input=trace_path, log=logdir), self.timeout)
            total = 0
            for root, _, files in os.walk(logdir):
                for name in files:
                    with open(os.path.join(root, name), encoding="utf-8", errors="replace") as fh:
                        total += sum(1 for line in fh if self._regex.search(line))
            return total

    def digest(self) -> str:
        return "alertlog:" + hashlib.sha256(f"{self.template}\0{self.pattern}".encode()).hexdigest()

    def describe(self) -> str:
        return f"alert log {self.template!r} pattern {self.pattern!r}"


def parse_adapter(spec: str, *, pattern: str | None = None, timeout: float | None = None):
    """``toy:RULES`` | ``cmd:TEMPLATE`` | ``alertlog:TEMPLATE``."""
    kind, sep, rest = spec.partition(":")
    if not sep or not rest:
        raise ValueError(f"adapter spec {spec!r}: expected toy:PATH, cmd:TEMPLATE or alertlog:TEMPLATE")
    if kind == "toy":
        return ToyAdapter.from_file(rest)
    if kind == "cmd":
        return CommandAdapter(rest, timeout)
    if kind == "alertlog":
        return AlertLogAdapter(rest, pattern or r"\S", timeout)
    raise ValueError(f"unknown adapter kind {kind!r}")


def count_alarms(adapter, trace_path) -> int:
    return adapter.count(trace_path)


# -- benchmarks --------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class BenchmarkCache:
    """Benchmark alarm counts keyed by (trace digest, adapter digest); optionally persisted."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._counts: dict[str, int] = {}
        if self.path and self.path.exists():
            self._counts = {k: int(v) for k, v in json.loads(self.path.read_text()).items()}

    def get(self, trace_path, adapter) -> int:
        key = f"{file_digest(trace_path)}:{adapter.digest()}"
        with self._lock:
            if key in self._counts:
                return self._counts[key]
        n = adapter.count(trace_path)
        with self._lock:
            self._counts[key] = n
        return n

    def save(self) -> None:
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self._lock:
                self.path.write_text(json.dumps(self._counts, indent=1, sort_keys=True))


# -- statistics ------------------------------------------------------------------------

def percent_diff(benchmark: int, anonymized: int) -> float:
    if benchmark < 0 or anonymized < 0:
        raise ValueError("alarm counts are non-negative")
    if benchmark == 0:
        raise ZeroBenchmark()
    return 100.0 * (anonymized - benchmark) / benchmark


@dataclass(frozen=True)
class AlarmStats:
    diffs: tuple[float, ...]
    excluded: tuple[str, ...] = ()
    mean: float | None = None
    stdev: float | None = None
    min: float | None = None
    max: float | None = None

    @property
    def n(self) -> int:
        return len(self.diffs)


def aggregate(diffs, excluded=()) -> AlarmStats:
    """Mean, sample standard deviation and range; absent where undefined."""
    diffs = tuple(float(d) for d in diffs)
    excluded = tuple(excluded)
    if not diffs:
        return AlarmStats(diffs, excluded)
    return AlarmStats(
        diffs,
        excluded,
        mean=statistics.fmean(diffs),
        stdev=statistics.stdev(diffs) if len(diffs) >= 2 else None,
        min=min(diffs),
        max=max(diffs),
    )


# -- experiments ------------------------------------------------------------------------

@dataclass
class FileRow:
    file: str
    benchmark: int | None = None
    alarms: int | None = None
    pct_diff: float | None = None
    status: str = STATUS_OK
    detail: str = ""


@dataclass
class ExperimentResult:
    experiment_id: str
    policy: PolicySet
    rows: list[FileRow] = field(default_factory=list)
    stats: AlarmStats | None = None

    @property
    def completed(self) -> bool:
        return any(r.status != STATUS_FAILED for r in self.rows)


def list_corpus(directory) -> list[Path]:
    d = Path(directory)
    files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in TRACE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no trace files ({', '.join(TRACE_SUFFIXES)}) in {d}")
    return files


def policy_id(policy: PolicySet) -> str:
    return "+".join(e.experiment_id for e in policy) or "null"


def run_experiment(corpus, policy: PolicySet, adapter, cfg: RewriteConfig | None = None, *,
                   experiment_id: str | None = None, key: bytes | None = None, seed=None,
                   cache: BenchmarkCache | None = None, jobs: int = 1, workdir=None) -> ExperimentResult:
    """Anonymize each trace independently and compare its alarms with its benchmark."""
    exp_id = experiment_id or policy_id(policy)
    cache = cache or BenchmarkCache()
    corpus = [Path(p) for p in corpus]

    def one(path: Path) -> FileRow:
        row = FileRow(path.name)
        try:
            row.benchmark = cache.get(path, adapter)
        except AdapterFailure as exc:
            row.status, row.detail = STATUS_FAILED, f"benchmark: {exc}"
            return row
        if row.benchmark == 0:
            row.status, row.detail = STATUS_EXCLUDED, "zero benchmark"
            return row
        file_seed = None if seed is None else f"{seed}/{exp_id}/{path.name}"
        with tempfile.TemporaryDirectory(prefix="scrubtrace-", dir=workdir) as tmp:
            out = Path(tmp) / path.name
            try:
                anonymize_file(path, out, policy, cfg, key=key, seed=file_seed)
                row.alarms = adapter.count(out)
            except (AdapterFailure, ScrubError, OSError) as exc:
                row.status, row.detail = STATUS_FAILED, str(exc)
                log.warning("%s: %s: %s", exp_id, path.name, exc)
                return row
        row.pct_diff = percent_diff(row.benchmark, row.alarms)
        return row

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, corpus))
    else:
        rows = [one(p) for p in corpus]
    stats = aggregate(
        [r.pct_diff for r in rows if r.status == STATUS_OK],
        [r.file for r in rows if r.status != STATUS_OK],
    )
    return ExperimentResult(exp_id, policy, rows, stats)


def run_experiments(corpus, experiments, adapter, cfg=None, **kw) -> list[ExperimentResult]:
    """Run ``(experiment_id, PolicySet)`` pairs over one corpus with a shared benchmark cache."""
    kw.setdefault("cache", BenchmarkCache())
    results = []
    for exp_id, policy in experiments:
        log.info("experiment %s", exp_id)
        results.append(run_experiment(corpus, policy, adapter, cfg, experiment_id=exp_id, **kw))
    return results


# -- reports --------------------------------------------------------------------------------

def _fmt(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.2f}"


def _opt(x) -> str:
    return "" if x is None else str(x)


def per_file_name(exp_id: str) -> str:
    return exp_id.replace("/", "__").replace("+", "--") + ".csv"


def emit_reports(results: list[ExperimentResult], out_dir, metadata: dict | None = None) -> dict[str, Path]:
    """Write per-file, aggregate and scatter CSVs (plus run.json); return their paths."""
    if not results:
        raise ValueError("no experiment results to report")
    out = Path(out_dir)
    per_file_dir = out / "per_file"
    per_file_dir.mkdir(parents=True, exist_ok=True)
    paths = {"per_file": per_file_dir}

    for res in results:
        with open(per_file_dir / per_file_name(res.experiment_id), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "benchmark", "alarms", "pct_diff", "status"])
            for r in res.rows:
                w.writerow([r.file, _opt(r.benchmark), _opt(r.alarms), _fmt(r.pct_diff), r.status])

    paths["aggregate"] = out / "aggregate.csv"
    with open(paths["aggregate"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["field", "scope", "option", "variant", "n", "excluded", "mean", "stdev", "min", "max"])
        for res in results:
            s = res.stats
            w.writerow([*split_experiment_id(res.experiment_id), s.n, len(s.excluded),
                        _fmt(s.mean), _fmt(s.stdev), _fmt(s.min), _fmt(s.max)])

    paths["scatter"] = out / "scatter.csv"
    with open(paths["scatter"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "file", "pct_diff"])
        for res in results:
            for r in res.rows:
                if r.status == STATUS_OK:
                    w.writerow([res.experiment_id, r.file, _fmt(r.pct_diff)])

    paths["run"] = out / "run.json"
    meta = dict(metadata or {})
    meta["experiments"] = [
        {"id": r.experiment_id, "policy": r.policy.render(), "completed": r.completed,
         "failed": [x.file for x in r.rows if x.status == STATUS_FAILED]}
        for r in results
    ]
    paths["run"].write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return paths
