"""Train the desk model on clean data, then probe gain and noise trends on staircase-corrupted episodes."""

import argparse
from pathlib import Path

from dynakf.evalkit import PROBE_COLUMNS, write_csv, write_json
from dynakf.experiments import desk_config, held_out_episodes, missing_modality, probe_trained, train_desk

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", type=Path, default=Path("runs/gain_probe"))
args = parser.parse_args()

cfg = desk_config(args.seed)
run = train_desk(cfg)
rep = probe_trained(run.model, cfg)
for row in rep.rows():
    print("  ".join(f"{k} {v:.4f}" for k, v in zip(PROBE_COLUMNS, row)))
print("spearman", rep.correlations)
held_out = held_out_episodes(cfg)
drops = {m: missing_modality(run.model, held_out, cfg.seed, drop=m) for m in range(len(cfg.model.modalities))}
for m, r in drops.items():
    print(f"drop block {m} for the last half: rmse {r['dropped_rmse']:.4f} vs {r['full_rmse']:.4f} (x{r['ratio']:.2f})")
args.out.mkdir(parents=True, exist_ok=True)
write_csv(args.out / "probe.csv", PROBE_COLUMNS, rep.rows())
write_json(args.out / "probe.json", {**rep.to_dict(), "missing_modality": {str(k): v for k, v in drops.items()}})
