"""Does a factorization vector know who is speaking?

Pretrains on data with and without a speaker signal and probes same-speaker
versus different-speaker turn pairs.
"""

import argparse
import tempfile
from pathlib import Path

from turngraph import pipeline as P
from turngraph.config import TrainConfig
from turngraph.data import SynthConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--signals", default="0,1,3")
    ap.add_argument("--pretrain-videos", type=int, default=150)
    ap.add_argument("--probe-videos", type=int, default=6000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    root = Path(tempfile.mkdtemp(prefix="probe_"))
    for sig in (float(s) for s in args.signals.split(",")):
        cfg = TrainConfig(max_epochs=3, batch_size=5, lr=3e-3, seed=args.seed)
        P.cmd_pretrain(cfg, generate(SynthConfig(videos=args.pretrain_videos, speaker_signal=sig,
                                                 seed=args.seed)), root / str(sig))
        probe = generate(SynthConfig(videos=args.probe_videos, speaker_signal=sig, seed=args.seed + 100))
        res = P.cmd_probe_speaker(root / str(sig) / P.CHECKPOINT_NAME, probe)
        print(f"speaker signal {sig:4.1f}: accuracy {100 * res.accuracy:5.1f}%  "
              f"({res.val_size} validation pairs, stopped at epoch {res.best_epoch})", flush=True)


if __name__ == "__main__":
    main()
