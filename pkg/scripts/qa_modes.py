"""QA accuracy of the encoder variants on planted-answer synthetic data:
frozen factorized, frozen mean-of-nodes, frozen video-level and supervised
training from scratch.
"""

import argparse
import time
from pathlib import Path

from turngraph import pipeline as P
from turngraph.config import TrainConfig
from turngraph.data import SynthConfig, generate


def run(name, videos, out, mode, factor_mode="factorized", epochs=15, pretrain=2, seed=0):
    cfg = TrainConfig(max_epochs=pretrain, batch_size=5, lr=3e-3, factor_mode=factor_mode, seed=seed)
    cfg.finetune.mode = mode
    cfg.finetune.max_epochs = epochs
    if factor_mode == "video_level":
        cfg.finetune.graph_scope = "video_level"
    start = time.perf_counter()
    ck = None
    if mode == "frozen":
        P.cmd_pretrain(cfg, videos, out / name)
        ck = out / name / P.CHECKPOINT_NAME
    cfg.lr, cfg.batch_size = 1e-3, 15
    res = P.cmd_finetune(cfg, videos, ck, out / name / "finetune")
    print(f"{name:<22}{100 * res['max_val_accuracy']:7.1f}%  best epoch {res['best_epoch']:>2}"
          f"  {time.perf_counter() - start:6.0f}s", flush=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--videos", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/qa_modes")
    args = ap.parse_args()

    videos = generate(SynthConfig(videos=args.videos, qa_per_video=3, seed=args.seed))
    out = Path(args.out)
    kw = {"epochs": args.epochs, "seed": args.seed}
    run("frozen factorized", videos, out, "frozen", **kw)
    run("frozen mean readout", videos, out, "frozen", "mean_readout", **kw)
    run("frozen video level", videos, out, "frozen", "video_level", **kw)
    run("supervised scratch", videos, out, "supervised_scratch", **kw)


if __name__ == "__main__":
    main()
