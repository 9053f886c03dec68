import logging
from pathlib import Path

from app.services.checkpoint import load_bench_configs, save_report, save_table
from app.services.runtime import SCHEMES, BenchReport, bench_report, parse_schemes
from app.utils import format_table, human_readable_kib, percent, sci

logger = logging.getLogger(__name__)

REPORT_FORMAT = "coreguard-bench"

def register(sub, common):
    p = sub.add_parser("bench", parents=[common], help="overhead comparison across schemes")
    p.add_argument("--configs", required=True, help='JSON {"models": {name: config}}')
    p.add_argument("--schemes", default=",".join(SCHEMES),
                   help="comma list, or ';'-separated with parameters (soter:fraction=0.2;coreguard)")
    p.add_argument("--out", required=True, help="JSON report; the CSV table goes next to it")
    p.add_argument("--csv", help="CSV table path (default: --out with .csv suffix)")
    p.add_argument("--no-measure", action="store_true", help="skip live ledger measurements")
    p.set_defaults(func=bench_cmd)

def _print_table(report: BenchReport):
    rows = [
        (r.model, r.scheme, sci(r.tee_flops), percent(r.tee_flops_fraction),
         human_readable_kib(r.transfer_bytes), r.transfer_rounds)
        for r in report.rows
    ]
    print(format_table(("model", "scheme", "tee_flops", "fraction", "kib", "rounds"), rows))
    for name, m in report.measurements.items():
        print(f"measured model={name} on={m.measured_on} rounds={m.rounds} bytes={m.bytes} "
              f"tee_flops={m.tee_flops} matches={str(m.matches).lower()}")

# bench --configs <file> --schemes <list> --out <report>
def bench_cmd(args) -> int:
    cfgs = load_bench_configs(args.configs)
    schemes = parse_schemes(args.schemes)
    report = bench_report(cfgs, schemes, seed=args.seed, threads=args.threads, measure=not args.no_measure)
    csv_path = args.csv or str(Path(args.out).with_suffix(".csv"))
    save_table(csv_path, BenchReport.COLUMNS, report.table_rows(), args.seed)
    save_report(args.out, REPORT_FORMAT, report.to_document())
    logger.info("Bench wrote %s and %s", args.out, csv_path)
    _print_table(report)
    print(f"report={args.out} table={csv_path}")
    return 0
