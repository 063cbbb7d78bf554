"""Train the reference model on 20 synthetic sequences and track 10 held-out ones.

    python scripts/desk_experiment.py --out runs/desk
"""

import argparse
import time
from pathlib import Path

from afsn.experiment import run_desk_experiment
from afsn.tensor import save_checkpoint
from afsn.train import write_history


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/desk", help="directory for checkpoint, history and reports")
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--pairs", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    def progress(epoch, lr, mean):
        print(f"epoch={epoch} lr={lr:.3e} mean_loss={mean:.6f} t={time.perf_counter() - start:.0f}s", flush=True)

    result = run_desk_experiment(args.epochs, args.pairs, args.seed, progress)
    save_checkpoint(out / "model.ckpt", result.model.params)
    write_history(out / "loss.csv", result.history)
    result.report.write(out / "heldout")
    result.baseline.write(out / "static_baseline")
    print("held-out:")
    print(result.report.to_text(), end="")
    print("static baseline (box frozen at frame 0):")
    print(result.baseline.to_text(), end="")
    print(f"minutes={result.seconds / 60:.1f}")


if __name__ == "__main__":
    main()
