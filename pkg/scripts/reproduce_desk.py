"""Desk-scale suite: data, generator pretraining, all five variants, table.

    python scripts/reproduce_desk.py --out runs/desk [--config my.ini] [--variants tvp,nvp]
"""
import argparse
import logging
from pathlib import Path

import torch

from tvp.cli import _progress, run_reproduce
from tvp.config import VARIANTS, load_run_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--config", type=Path)
    ap.add_argument("--variants", default=",".join(VARIANTS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    cfg = load_run_config(args.config)
    summary = run_reproduce(cfg, args.out, [v for v in args.variants.split(",") if v], _progress(300))
    print(summary["table"])
    for name, ok in summary["checks"].items():
        print("PASS" if ok else "FAIL", name)
    print("train seconds:", {k: round(v) for k, v in summary["train_seconds"].items()})


if __name__ == "__main__":
    main()
