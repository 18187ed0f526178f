"""Run the Table 1 grid and print it next to the target values stored in the scenario file.

    python3 scripts/run_table1.py [--scenario scenarios/table1.json] [--seed 42] [--out table1.csv]
"""

import argparse
import csv
import io
import sys
from pathlib import Path

from twostage_inference import montecarlo as M

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default=str(ROOT / "scenarios" / "table1.json"))
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int, default=M.default_workers())
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    cfg = M.load_scenario_file(args.scenario)
    cells = M.scenarios_from_config(cfg, args.seed, Path(args.scenario).parent)
    reports = M.run_grid(cells, workers=args.workers)
    csv_text, _ = M.emit_table(reports)
    if args.out:
        Path(args.out).write_text(csv_text)

    targets = {(t["icc"], t["n_I"], t["n_i"]): t for t in cfg.get("targets", [])}
    cols = ["rb_HAJ_A", "rb_HAJ", "rs_HAJ_A", "rs_HAJ", "ci_HAJ_A", "ci_HAJ"]
    print(f"{'icc':>4} {'n_I':>4} {'n_i':>3}  " + "  ".join(f"{c:>17}" for c in cols))
    for row in csv.DictReader(io.StringIO(csv_text)):
        key = (float(row["icc"]), int(row["n_I"]), int(row["n_i"]))
        ref = targets.get(key, {})
        cells_txt = []
        for c in cols:
            ours = float(row[c])
            theirs = ref.get(c)
            cells_txt.append(f"{ours:8.2f}/{theirs:<8.2f}" if theirs is not None else f"{ours:8.2f}/{'-':<8}")
        print(f"{key[0]:>4} {key[1]:>4} {key[2]:>3}  " + "  ".join(cells_txt))
    problems = M.check_bands(reports, cfg.get("bands", []))
    for p in problems:
        print("band violated:", p, file=sys.stderr)
    return 3 if problems else 0


if __name__ == "__main__":
    sys.exit(main())
