"""Write the packaged 0.5-degree climate grid.

Only a handful of boxes are populated: the Potsdam and Nanjing regions used
by the fixtures, plus a few boxes giving the synthetic data harness its
climates. Every other cell is treated as ocean / no data.
"""
import argparse
from pathlib import Path

import numpy as np

# (lat_min, lat_max, lon_min, lon_max, code)
BOXES = [
    (50.0, 55.0, 10.0, 16.0, "Dfb"),    # Brandenburg, Potsdam
    (29.0, 35.0, 114.0, 122.0, "Cwa"),  # lower Yangtze, Nanjing
    (49.0, 53.0, -4.0, 4.0, "Cfb"),
    (-15.0, -8.0, 25.0, 35.0, "Aw"),
    (12.0, 17.0, -5.0, 10.0, "BSh"),
    (36.0, 40.0, -8.0, -1.0, "Csa"),
]


def cells(boxes):
    for la0, la1, lo0, lo1, code in boxes:
        for lat in np.arange(la0 + 0.25, la1, 0.5):
            for lon in np.arange(lo0 + 0.25, lo1, 0.5):
                yield round(float(lat), 2), round(float(lon), 2), code


def main():
    ap = argparse.ArgumentParser()
    default = Path(__file__).resolve().parents[1] / "src/metaseg/data/climate_grid.csv"
    ap.add_argument("--out", default=str(default))
    args = ap.parse_args()
    rows = sorted(set(cells(BOXES)))
    Path(args.out).write_text("".join(f"{la},{lo},{c}\n" for la, lo, c in rows), encoding="utf-8")
    print(f"wrote {len(rows)} cells to {args.out}")


if __name__ == "__main__":
    main()
