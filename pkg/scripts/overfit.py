"""Overfit eight 64x64 scenes with the full model and report train mIoU."""
import argparse
import logging

from metaseg.experiments import run_overfit

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=300)
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    rep, res, dt = run_overfit(a.seed, a.steps)
    print(f"train mIoU {rep.miou:.4f}  OA {rep.oa:.4f}  final loss {res.loss_trace[-1]:.4f}  {dt:.1f}s")
