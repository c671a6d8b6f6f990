"""Held-out reconstruction MSE of generator pretraining versus the weights of
the auxiliary perceptual and adversarial terms.

    python scripts/pretrain_sweep.py --steps 1500 --grid 0:0 1:0 0:0.05 0.01:0.005
"""
import argparse
import dataclasses
import time

import numpy as np
import torch

from tvp.config import ModelConfig, PretrainConfig
from tvp.dataset import make_balanced
from tvp.generator import pretrain_generator


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--grid", nargs="+", default=["0:0", "0.01:0.005"], help="perc:adv pairs")
    args = ap.parse_args()
    torch.set_num_threads(1)
    m = ModelConfig()
    train = make_balanced(512, 0, (m.height, m.width, 9))
    val = make_balanced(64, 0, (m.height, m.width, 9), offset=512)
    frames = np.concatenate([c.frames for c in train])
    held = np.concatenate([c.frames for c in val])
    for pair in args.grid:
        perc, adv = (float(v) for v in pair.split(":"))
        cfg = dataclasses.replace(PretrainConfig(), steps=args.steps, perc_weight=perc, adv_weight=adv)
        t0 = time.time()
        res = pretrain_generator(frames, held, m, cfg)
        print(f"perc={perc:<6} adv={adv:<6} recon_mse={res.recon_mse:.4f}  {time.time() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
