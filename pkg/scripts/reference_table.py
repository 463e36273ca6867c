"""Clean-condition EER/minDCF of every system on the reference regime, per seed and as medians.

    python scripts/reference_table.py --seeds 0 1 2 3 4
    python scripts/reference_table.py --seeds 101 102 --lr 1.0 --systems C
"""

import csv

from regime import SeedRun, common_parser, median

from avfusion.verifeval import run_condition_matrix


def main():
    args = common_parser(__doc__.splitlines()[0]).parse_args()
    rows = []
    for seed in args.seeds:
        run = SeedRun(seed, args)
        table = run_condition_matrix(run.test_set, run.trials, run.scorers(), ["clean"], calibration=run.calibration())
        for system, _, report in table.rows():
            rows.append({"seed": seed, "system": system, "eer": report.eer, "min_dcf": report.min_dcf})
            print(f"seed {seed}  {system:<13} EER {100 * report.eer:6.2f}%  minDCF {report.min_dcf:.4f}", flush=True)

    print("\nmedian over seeds")
    for system in dict.fromkeys(r["system"] for r in rows):
        mine = [r for r in rows if r["system"] == system]
        eer = median(r["eer"] for r in mine)
        dcf = median(r["min_dcf"] for r in mine)
        print(f"  {system:<13} EER {100 * eer:6.2f}%  minDCF {dcf:.4f}")

    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


if __name__ == "__main__":
    main()
