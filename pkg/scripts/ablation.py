"""Run the prompt and component ablations plus the cross-dataset transfer test.

Writes the per-seed table (CSV), the mean table and a JSON summary to --out.
"""
import argparse
import json
import logging
from pathlib import Path

from metaseg.experiments import SEEDS, UNION_GRID, run_study


def summarize(study) -> dict:
    t = study.table
    out = {"seconds": study.seconds, "miou": {}, "zero_shot": {}}
    for v, p in t.cells():
        out["miou"][f"{v}/{p}"] = t.mean(v, p)
        out["zero_shot"][f"{v}/{p}"] = study.zero_shot_mean(v, p)
    out["rows"] = [{"variant": r.variant, "prompt_mode": r.prompt_mode, "seed": r.seed, "miou": r.miou,
                    "status": r.status, **r.extra} for r in t.rows]
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    study = run_study(UNION_GRID, seeds=a.seeds, with_zero_shot=True)
    out = Path(a.out)
    study.table.write(out / "table.csv")
    summary = summarize(study)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print("\n".join(study.table.lines()))
    print(json.dumps({k: summary[k] for k in ("miou", "zero_shot", "seconds")}, indent=1))
