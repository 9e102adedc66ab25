"""Train and evaluate the full system ladder, then print seed-averaged ROUGE.

    python3 scripts/run_experiment.py --out runs/ladder [--config exp.cfg] [key=value ...]
"""

import argparse
import logging
import time
from pathlib import Path

from mhsum.pipeline import REPORT_HEADER, ExperimentConfig, mean_by_system, rows_to_csv, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path, help="flat key = value file")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("overrides", nargs="*", help="extra key=value settings")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    text = args.config.read_text() if args.config else ""
    cfg = ExperimentConfig.from_text(text + "\n".join(args.overrides), out_dir=str(args.out))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "experiment.cfg").write_text(cfg.to_text())

    t0 = time.time()
    rows = run_experiment(cfg, checkpoint_dir=args.out / "checkpoints")
    (args.out / "experiment.csv").write_text(rows_to_csv(rows, REPORT_HEADER))

    r1 = mean_by_system(rows)
    wer = mean_by_system(rows, "input_wer")
    print(f"{'system':18s} {'WER':>6s} {'ROUGE-1':>8s}")
    for system in cfg.systems:
        if system in r1:
            print(f"{system:18s} {100 * wer[system]:6.1f} {100 * r1[system]:8.2f}")
        else:
            print(f"{system:18s} {'':6s} {'failed':>8s}")
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
