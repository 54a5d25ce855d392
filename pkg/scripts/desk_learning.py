"""Train the d=16 desk model and report validation RMSE against the untrained model."""

import argparse
import json
from pathlib import Path

from dynakf.experiments import desk_config, train_desk

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--mode", choices=("dirichlet", "deterministic", "lstm"), default="dirichlet")
parser.add_argument("--out", type=Path, default=Path("runs/desk_learning"))
args = parser.parse_args()

run = train_desk(desk_config(args.seed), args.mode)
print(f"untrained {run.untrained_rmse:.4f}  trained {run.final_rmse:.4f}  ratio {run.ratio:.3f}  {run.seconds:.0f}s")
for e, loss, val in zip(run.history.epochs, run.history.loss, run.history.val_rmse):
    print(f"epoch {e:3d}  loss {loss:.5f}  val_rmse {val:.5f}")
args.out.mkdir(parents=True, exist_ok=True)
(args.out / "summary.json").write_text(json.dumps(
    {"seed": args.seed, "mode": args.mode, "untrained_rmse": run.untrained_rmse, "final_rmse": run.final_rmse,
     "ratio": run.ratio, "seconds": run.seconds, "loss": run.history.loss, "val_rmse": run.history.val_rmse},
    indent=2) + "\n")
