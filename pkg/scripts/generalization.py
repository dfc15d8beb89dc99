"""Train on 200 synthetic scenarios (4-8 devices), test on 50 incl. 9-10 devices."""

import argparse
import json

from tracegnn.experiments import RUN_LR, RUN_T_MAX, generalization


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=RUN_LR)
    ap.add_argument("--t-max", type=int, default=RUN_T_MAX)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="checkpoint directory")
    args = ap.parse_args()

    def log(r):
        print(json.dumps({**r.record(), "wall_time_s": round(r.wall_time_s, 1)}), flush=True)

    out = generalization(args.seed, args.epochs, args.lr, args.t_max, checkpoint_dir=args.out, log=log)
    print(f"best epoch {out.result.best_epoch}  val MAPE {out.result.best_val_mape:.2f}%")
    for label, ev in (("test", out.test), ("  4-8 devices", out.test_seen), ("  9-10 devices", out.test_unseen)):
        print(f"{label:15s} model {ev.mape:6.2f}%   no-queuing baseline {ev.baseline_mape:6.2f}%")
    print(f"total {out.seconds / 60:.1f} min")


if __name__ == "__main__":
    main()
