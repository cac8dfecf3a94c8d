"""Command line: ``confedlearn {generate,run,sweep,report}``."""

import argparse
import json
import os
import sys
import time
import warnings

from threadpoolctl import threadpool_limits

from .cohort import cohort_stats, export_cohort, generate_cohort
from .exceptions import ConfedError, ConfigError
from .experiment import (
    PRESETS,
    load_config,
    prepare,
    run_methods,
    run_sweep,
    sweep_csv,
    sweep_table,
    write_atomic,
    write_manifest,
    write_run,
)
from .metrics import MetricsReport, format_table


def _out_dir(args, config):
    return args.out or config.output_dir


def cmd_generate(config, out_dir):
    """Write the cohort export and its statistics; returns the stats dict."""
    start = time.perf_counter()
    cohort = generate_cohort(config.cohort_config())
    if len(cohort) == 0:
        raise ConfigError("cohort.n_people", "empty cohort: n_people must be positive")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "cohort.tsv")
    tmp = path + ".part"
    export_cohort(cohort, tmp)
    os.replace(tmp, path)
    stats = cohort_stats(cohort, cohort.disease_names, config.cohort.n_regions).to_dict()
    write_atomic(os.path.join(out_dir, "cohort_stats.json"),
                 json.dumps(stats, indent=2, sort_keys=True) + "\n")
    write_manifest(out_dir, config, ["cohort.tsv", "cohort_stats.json"],
                   {"generate_s": time.perf_counter() - start}, {"kind": "generate"})
    means = stats["mean_codes"]
    print(f"{stats['n_people']} people; mean codes per person: "
          f"{means['diag']:.1f} diagnoses, {means['med']:.1f} medications, "
          f"{means['lab']:.1f} lab tests")
    for name, p in stats["prevalence"].items():
        print(f"  {name}: prevalence {p:.3f}")
    return stats


def cmd_run(config, out_dir):
    """Run every configured method; returns the manifest."""
    start = time.perf_counter()
    prep = prepare(config)
    result = run_methods(config, prep)
    result.timings["total_s"] = time.perf_counter() - start
    manifest = write_run(out_dir, config, result)
    sys.stdout.write(format_table(result.reports))
    sys.stdout.write(result.audit.to_text())
    return manifest


def cmd_sweep(config, out_dir):
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        rows, skipped, audits = run_sweep(config)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    files = {"sweep.csv": sweep_csv(rows), "sweep.txt": sweep_table(rows),
             "audit.jsonl": "".join(a.to_jsonl() for a in audits)}
    for name, data in files.items():
        write_atomic(os.path.join(out_dir, name), data)
    manifest = write_manifest(out_dir, config, list(files),
                              {"total_s": time.perf_counter() - start},
                              {"kind": "sweep", "skipped_regions": skipped,
                               "audit_passed": all(a.passed for a in audits)})
    sys.stdout.write(files["sweep.txt"])
    return manifest


def cmd_report(run_dir):
    """Consolidated report for a run directory; returns ``(text, exit_code)``."""
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        return f"missing: {manifest_path}\n", 1
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    missing = [name for name in manifest.get("files", {})
               if not os.path.exists(os.path.join(run_dir, name))]
    lines = []
    code = 0
    if missing:
        lines += ["missing files:"] + [f"  {m}" for m in missing]
        code = 1
    reports = []
    for name in sorted(manifest.get("files", {})):
        if name.startswith("reports/") and name not in missing:
            with open(os.path.join(run_dir, name), encoding="utf-8") as fh:
                reports.append(MetricsReport.from_dict(json.load(fh)))
    if reports:
        diseases = list(dict.fromkeys(r.disease for r in reports))
        for disease in diseases:
            lines.append(format_table([r for r in reports if r.disease == disease],
                                      [disease]).rstrip("\n"))
            lines.append("")
    if os.path.exists(os.path.join(run_dir, "sweep.txt")):
        with open(os.path.join(run_dir, "sweep.txt"), encoding="utf-8") as fh:
            lines.append(fh.read().rstrip("\n"))
    audit_path = os.path.join(run_dir, "audit.jsonl")
    failures = []
    if os.path.exists(audit_path):
        with open(audit_path, encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                if "rule" in row:
                    failures.append(row)
    if failures:
        lines.append("ISOLATION AUDIT FAILED")
        lines += [f"  silo {f['silo']}: rule ({f['rule']}) {f['detail']}" for f in failures]
        code = code or 2
    elif os.path.exists(audit_path):
        lines.append("isolation audit: PASS")
    return "\n".join(lines) + "\n", code


def build_parser():
    parser = argparse.ArgumentParser(
        prog="confedlearn",
        description="Confederated learning over silos separated by individual, "
                    "data type and identity, on a synthetic cohort.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("generate", "write a synthetic cohort and its statistics"),
                       ("run", "compare the four training methods"),
                       ("sweep", "vary the central analyzer region")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads")
        p.add_argument("--preset", choices=PRESETS, default="desk")
    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("run_dir")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            text, code = cmd_report(args.run_dir)
            sys.stdout.write(text)
            return code
        config = load_config(args.config, args.preset, args.seed, args.out)
        out_dir = _out_dir(args, config)
        with threadpool_limits(limits=max(1, args.threads)):
            if args.command == "generate":
                cmd_generate(config, out_dir)
            elif args.command == "run":
                manifest = cmd_run(config, out_dir)
                if not manifest["audit_passed"]:
                    return 2
            else:
                manifest = cmd_sweep(config, out_dir)
                if not manifest["audit_passed"]:
                    return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ConfedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
