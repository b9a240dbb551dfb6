"""Augmentation ratio sweep: one augmentation at a time over a ratio grid,
each followed by frozen-encoder QA fine-tuning.

    python3 scripts/ratio_sweep.py --grid 0.25,0.5,0.75 --out runs/sweep
"""

import argparse

from turngraph import pipeline as P
from turngraph.config import TrainConfig
from turngraph.data import SynthConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--videos", type=int, default=120)
    ap.add_argument("--grid", default="0.25,0.5,0.75")
    ap.add_argument("--pretrain-epochs", type=int, default=2)
    ap.add_argument("--finetune-epochs", type=int, default=5)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--no-finetune", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    videos = generate(SynthConfig(videos=args.videos, qa_per_video=3, seed=args.seed))
    cfg = TrainConfig(hidden_dim=args.dim, max_epochs=args.pretrain_epochs, batch_size=5, lr=3e-3,
                      seed=args.seed)
    cfg.finetune.max_epochs = args.finetune_epochs
    grid = [float(x) for x in args.grid.split(",")]
    rows = P.sweep_ratios(cfg, videos, args.out, grid, finetune=not args.no_finetune)
    print(f"{'augmentation':<14}{'ratio':>6}{'loss':>9}{'val acc':>9}")
    for r in rows:
        acc = r.get("max_val_accuracy")
        print(f"{r['augmentation']:<14}{r['ratio']:>6.2f}{r['final_loss']:>9.4f}"
              f"{'' if acc is None else f'{100 * acc:8.1f}%'}")


if __name__ == "__main__":
    main()
