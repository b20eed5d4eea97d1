"""Command line entry point: ``scrubtrace {anonymize,inspect,policy-check,grid,bench}``.

Exit codes: 0 success, 1 policy/argument validation error, 2 I/O or trace format error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .dissect import FieldId, field_histogram
from .errors import EmptyKey, PcapError, PolicyError, RuleSyntaxError, ScrubError, UnsupportedLinktype
from .harness import BenchmarkCache, emit_reports, list_corpus, parse_adapter, policy_id, run_experiments
from .pcap_io import PcapReader, record_findings
from .policy import PolicySet, generate_grid, grid_note, load_policy
from .rewrite import RewriteConfig, anonymize_file

log = logging.getLogger("scrubtrace")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _read_key(path) -> bytes | None:
    if path is None:
        return None
    try:
        key = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read key file: {exc}", EXIT_IO)
    if not key:
        raise CliError(f"EmptyKey: key file {path} is empty", EXIT_INVALID)
    return key


def _load_policy(path, multi_field: bool) -> PolicySet:
    try:
        return load_policy(path, multi_field=multi_field)
    except OSError as exc:
        raise CliError(f"cannot read policy: {exc}", EXIT_IO)
    except PolicyError as exc:
        raise CliError(f"{path}: {type(exc).__name__}: {exc}", EXIT_INVALID)


def _config(args) -> RewriteConfig:
    return RewriteConfig(
        fix_checksums=not args.no_fix_checksums,
        normalize_udp_length=args.normalize_udp_length,
        shift_underflow=args.shift_underflow,
    )


def cmd_anonymize(args) -> int:
    policy = _load_policy(args.policy, args.multi_field)
    key = _read_key(args.key_file)
    if policy.needs_key and key is None:
        raise CliError("EmptyKey: policy uses keyed randomization; pass --key-file", EXIT_INVALID)
    try:
        report = anonymize_file(args.input, args.output, policy, _config(args), key=key, seed=args.seed)
    except (OSError, PcapError, UnsupportedLinktype) as exc:
        raise CliError(f"{type(exc).__name__}: {exc}", EXIT_IO)
    print(report.summary())
    for finding in report.findings:
        print(f"finding: {finding}", file=sys.stderr)
    return EXIT_OK


def _parse_fields(text: str) -> list[FieldId]:
    fields = []
    for name in (t.strip() for t in text.split(",")):
        if not name:
            continue
        if name == "ports":
            fields += [FieldId.SRC_PORT, FieldId.DST_PORT]
            continue
        try:
            fields.append(FieldId(name))
        except ValueError:
            valid = ", ".join([f.value for f in FieldId] + ["ports"])
            raise CliError(f"unknown field {name!r}; choose from {valid}", EXIT_INVALID)
    return fields


def cmd_inspect(args) -> int:
    fields = _parse_fields(args.fields) if args.fields else []
    try:
        with PcapReader(args.input) as reader:
            header = reader.header
            records = list(reader)
    except (OSError, PcapError) as exc:
        raise CliError(f"{type(exc).__name__}: {exc}", EXIT_IO)
    order = "big-endian" if header.byteorder == ">" else "little-endian"
    print(f"{args.input}: {len(records)} records, snaplen {header.snaplen}, linktype {header.linktype}, {order}")
    if not fields:
        findings = [f for i, r in enumerate(records) for f in record_findings(i, r, header)]
        for f in findings:
            print(f)
        if not findings:
            print("no findings")
        return EXIT_OK
    try:
        hist = field_histogram(records, fields, header.linktype)
    except UnsupportedLinktype as exc:
        raise CliError(str(exc), EXIT_IO)
    for f in fields:
        counts = hist[f]
        print(f"{f.value}:")
        for value in sorted(v for v in counts if v is not None):
            print(f"  {value}: {counts[value]}")
        if counts[None]:
            print(f"  absent: {counts[None]}")
    return EXIT_OK


def cmd_policy_check(args) -> int:
    policy = _load_policy(args.policy, args.multi_field)
    print(policy.render(), end="")
    print(f"# ok: {len(policy)} entr{'y' if len(policy) == 1 else 'ies'}; experiment id {policy_id(policy)}")
    return EXIT_OK


def _grid_file_name(exp_id: str) -> str:
    return exp_id.replace("/", "__") + ".policy"


def cmd_grid(args) -> int:
    out = Path(args.out)
    grid = generate_grid()
    try:
        out.mkdir(parents=True, exist_ok=True)
        index = [f"# {grid_note()}"]
        for exp_id, policy in grid:
            name = _grid_file_name(exp_id)
            (out / name).write_text(f"# experiment {exp_id}\n{policy.render()}", encoding="utf-8")
            index.append(f"{exp_id}\t{name}")
        (out / "index.tsv").write_text("\n".join(index) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write grid: {exc}", EXIT_IO)
    print(f"wrote {len(grid)} policies to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        corpus = list_corpus(args.corpus)
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO)
    if args.grid:
        experiments = [(i, p) for i, p in generate_grid() if not args.only or args.only in i]
        if not experiments:
            raise CliError(f"no grid experiment matches {args.only!r}", EXIT_INVALID)
    else:
        policy = _load_policy(args.policy, args.multi_field)
        experiments = [(policy_id(policy), policy)]
    try:
        adapter = parse_adapter(args.adapter, pattern=args.alert_pattern, timeout=args.timeout)
    except (ValueError, RuleSyntaxError) as exc:
        raise CliError(f"adapter: {exc}", EXIT_INVALID)
    except OSError as exc:
        raise CliError(f"adapter: {exc}", EXIT_IO)

    key = _read_key(args.key_file)
    key_origin = "file"
    if key is None and any(p.needs_key for _, p in experiments):
        if not args.grid:
            raise CliError("EmptyKey: policy uses keyed randomization; pass --key-file", EXIT_INVALID)
        key, key_origin = os.urandom(32), "ephemeral"
        log.warning("no --key-file: keyed experiments use an ephemeral random key")

    out = Path(args.out)
    cache = BenchmarkCache(out / "benchmarks.json")
    results = run_experiments(corpus, experiments, adapter, _config(args), key=key, seed=args.seed,
                              cache=cache, jobs=args.jobs)
    meta = {
        "tool": f"scrubtrace {__version__}",
        "grid_note": grid_note(),
        "corpus": [p.name for p in corpus],
        "adapter": adapter.describe(),
        "key_sha256": hashlib.sha256(key).hexdigest() if key else None,
        "key_origin": key_origin if key else None,
        "seeded": args.seed is not None,
        "config": vars(_config(args)),
    }
    try:
        cache.save()
        paths = emit_reports(results, out, meta)
    except OSError as exc:
        raise CliError(f"cannot write reports: {exc}", EXIT_IO)
    done = sum(r.completed for r in results)
    print(f"{done}/{len(results)} experiments completed over {len(corpus)} files; "
          f"aggregate report at {paths['aggregate']}")
    return EXIT_OK if done else EXIT_IO


def _add_rewrite_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--key-file", help="raw key bytes for keyed randomization")
    p.add_argument("--seed", help="seed for randomized options (reproducible runs)")
    p.add_argument("--no-fix-checksums", action="store_true", help="leave IP/TCP/UDP checksums as written")
    p.add_argument("--normalize-udp-length", action="store_true",
                   help="rewrite UDP length fields to match the IP total length")
    p.add_argument("--shift-underflow", choices=("redraw", "clamp"), default="redraw",
                   help="what a random time shift does when it would leave the valid range")
    p.add_argument("--multi-field", action="store_true", help="allow several entries in one policy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scrubtrace", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("anonymize", help="rewrite one trace under a policy")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--policy", required=True)
    _add_rewrite_flags(p)
    p.set_defaults(func=cmd_anonymize)

    p = sub.add_parser("inspect", help="print field histograms or trace findings")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--fields", help="comma-separated: " + ", ".join(f.value for f in FieldId) + ", ports")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("policy-check", help="validate a policy file and print its canonical form")
    p.add_argument("--policy", required=True)
    p.add_argument("--multi-field", action="store_true")
    p.set_defaults(func=cmd_policy_check)

    p = sub.add_parser("grid", help="write one policy file per catalog experiment")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("bench", help="measure alarm deviations over a corpus")
    p.add_argument("--corpus", required=True, help="directory of .pcap files")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--grid", action="store_true", help="run every catalog experiment")
    what.add_argument("--policy", help="run a single policy file")
    p.add_argument("--only", help="with --grid, keep experiment ids containing this text")
    p.add_argument("--adapter", required=True, help="toy:RULES | cmd:TEMPLATE | alertlog:TEMPLATE")
    p.add_argument("--alert-pattern", help="regex counted per alert-log line (default: non-empty)")
    p.add_argument("--timeout", type=float, help="seconds per adapter invocation")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1, help="files processed in parallel")
    _add_rewrite_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"scrubtrace: {exc}", file=sys.stderr)
        return exc.code
    except EmptyKey as exc:
        print(f"scrubtrace: EmptyKey: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ScrubError as exc:
        print(f"scrubtrace: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
