"""EER under each corruption condition at several corruption fractions.

    python scripts/robustness_sweep.py --fractions 0.25 0.5 1.0
    python scripts/robustness_sweep.py --raw-noise     # un-normalised N(0, I) null embeddings
"""

import csv

from regime import SeedRun, common_parser, median

from avfusion.verifeval import CONDITIONS, run_condition_matrix


def main():
    p = common_parser(__doc__.splitlines()[0])
    p.add_argument("--fractions", type=float, nargs="+", default=[1.0])
    p.add_argument("--raw-noise", action="store_true")
    args = p.parse_args()

    rows = []
    for seed in args.seeds:
        run = SeedRun(seed, args)
        scorers, calibration = run.scorers(), run.calibration()
        for fraction in args.fractions:
            table = run_condition_matrix(
                run.test_set,
                run.trials,
                scorers,
                CONDITIONS,
                calibration=calibration,
                fraction=fraction,
                renormalize_noise=not args.raw_noise,
            )
            for system, condition, report in table.rows():
                rows.append({"seed": seed, "fraction": fraction, "system": system, "condition": condition, "eer": report.eer})

    systems = list(dict.fromkeys(r["system"] for r in rows))
    for fraction in args.fractions:
        print(f"\nmedian EER (%) at fraction {fraction:g}")
        print(f"  {'system':<13}" + "".join(f"{c:>14}" for c in CONDITIONS))
        for system in systems:
            cells = []
            for condition in CONDITIONS:
                vals = [r["eer"] for r in rows if (r["fraction"], r["system"], r["condition"]) == (fraction, system, condition)]
                cells.append(f"{100 * median(vals):14.2f}")
            print(f"  {system:<13}" + "".join(cells))

    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


if __name__ == "__main__":
    main()
