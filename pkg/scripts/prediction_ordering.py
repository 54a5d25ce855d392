"""Open-loop 10-step prediction: Dirichlet vs deterministic vs same-capacity LSTM over several seeds."""

import argparse
import json
from pathlib import Path

from dynakf.experiments import ordering_trial, ordering_verdict

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
parser.add_argument("--epochs", type=int, default=None, help="override the desk epoch count")
parser.add_argument("--out", type=Path, default=Path("runs/prediction_ordering"))
args = parser.parse_args()

overrides = {} if args.epochs is None else {"train.epochs": args.epochs}
trials = {}
for seed in args.seeds:
    trials[seed] = ordering_trial(seed, **overrides)
    row = "  ".join(f"{k} {v['rmse']:.4f}" for k, v in trials[seed].items())
    print(f"seed {seed}: {row}", flush=True)
verdict = ordering_verdict(trials)
print(json.dumps(verdict))
args.out.mkdir(parents=True, exist_ok=True)
(args.out / "ordering.json").write_text(json.dumps({"trials": trials, "verdict": verdict}, indent=2) + "\n")
