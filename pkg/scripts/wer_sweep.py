"""ROUGE-1 gain over the retrained 1-best system as the channel gets noisier.

Reuses checkpoints written by ``run_experiment.py`` (same config) and prints
one row per rate and system.

    python3 scripts/wer_sweep.py --run runs/ladder [rate ...]
"""

import argparse
import logging
from pathlib import Path

from mhsum import numcore as nc
from mhsum.pipeline import SWEEP_HEADER, SYSTEM_SPECS, ExperimentConfig, prepare_data, rows_to_csv, wer_sweep
from mhsum.summodel import Summarizer


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run", type=Path, required=True, help="directory written by run_experiment.py")
    ap.add_argument("rates", nargs="*", type=float, help="channel substitution rates (default: config grid)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ExperimentConfig.from_text((args.run / "experiment.cfg").read_text())
    if args.rates:
        cfg = ExperimentConfig.from_mapping({**cfg.__dict__, "channel_grid": tuple(args.rates)})
    data = prepare_data(cfg)
    models = {}
    with nc.precision(cfg.dtype):
        for system in cfg.systems:
            if system == "oracle-text":
                continue
            name = SYSTEM_SPECS[system][2]
            for seed in cfg.seeds:
                model = Summarizer(cfg.model_config(name, len(data.vocab), seed))
                model.load(args.run / "checkpoints" / f"{name}.seed{seed}.ckpt")
                models[(system, seed)] = model

    rows = wer_sweep(cfg, models, data)
    (args.run / "sweep.csv").write_text(rows_to_csv(rows, SWEEP_HEADER))
    for r in rows:
        print(f"rate {r['rate']:.2f}  WER {100 * r['wer']:5.1f}  {r['system']:18s} {100 * r['rouge1_delta']:+6.2f}")


if __name__ == "__main__":
    main()
