"""Overfit a tiny sedenion U-Net on 8 toy-city windows and compare with persistence.

    python scripts/overfit_toy_city.py --out runs/overfit

Writes metrics.csv and checkpoints to --out and prints a summary line.
"""

import argparse
import os
import time

os.environ.setdefault("OMP_NUM_THREADS", "1")

from sedunet.data import Dataset, GeneratorConfig, persistence_forecast, write_dataset  # noqa: E402
from sedunet.model import TINY_CONFIG, ModelConfig, SedUNet  # noqa: E402
from sedunet.train import TrainConfig, evaluate, fit  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--target", type=float, default=1e-4, help="stop once train MSE reaches this")
    args = p.parse_args()

    data = os.path.join(args.out, "city")
    write_dataset(data, GeneratorConfig(height=16, width=16, num_days=3, seed=args.seed), force=True)
    ds = Dataset(data)
    model = SedUNet(ModelConfig(**TINY_CONFIG, seed=args.seed))
    cfg = TrainConfig(lr_init=args.lr, batch_size=8, max_epochs=args.max_steps, max_train_windows=8,
                      max_val_windows=16, plateau_patience=10 ** 6, seed=args.seed)

    t0 = time.perf_counter()

    def progress(row):
        if row["epoch"] % 25 == 0:
            print(f"step {row['epoch']:5d}  train {row['train_mse']:.3e}  val16 {row['val_mse']:.3e}  "
                  f"{time.perf_counter() - t0:.0f}s", flush=True)
        return row["train_mse"] <= args.target

    _, hist = fit(model, ds, cfg, out_dir=args.out, callback=progress)
    val = evaluate(model.predict, ds, "val")
    persist = evaluate(lambda s, d: persistence_forecast(d), ds, "val")
    print(f"steps {len(hist)}  train {hist[-1]['train_mse']:.3e}  val {val['mse']:.3e}  "
          f"persistence {persist['mse']:.3e}  gain {1 - val['mse'] / persist['mse']:.1%}  "
          f"{time.perf_counter() - t0:.0f}s")
    for h in ("h5", "h10", "h15", "h30", "h45", "h60"):
        print(f"  {h}: model {val[h]:.3e}  persistence {persist[h]:.3e}")


if __name__ == "__main__":
    main()
