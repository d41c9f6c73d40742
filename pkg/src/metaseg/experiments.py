"""Fixed recipes for the overfit run, the two ablation grids and the
cross-dataset transfer test, shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DataConfig, generate_split
from .train import (AblationTable, PromptSource, TrainConfig, ablate, evaluate, train,
                    zero_shot_eval)

PROMPT_GRID = [("full", "none"), ("full", "simple"), ("full", "full")]
COMPONENT_GRID = [("baseline", "none"), ("alignment", "full"), ("full", "full")]
# "full" with no prompt builds the same network as "baseline", so one grid covers both tables
UNION_GRID = [("baseline", "none"), ("full", "simple"), ("alignment", "full"), ("full", "full")]
SEEDS = (0, 1, 2)

# foreign label set: only building and tree are shared with the source classes
FOREIGN_CLASSES = ["building", "tree", "water"]
FOREIGN_MAPPING = [(1, 0), (2, 1)]  # (source id, foreign id)


def overfit_config(seed: int = 0, steps: int = 300) -> TrainConfig:
    return TrainConfig(learning_rate=1e-3, seed=seed, max_epochs=steps // 4, max_steps=steps,
                       prompt_mode="full", variant="full", flip_augment=False)


def overfit_scenes(seed: int = 0):
    return generate_split(DataConfig(seed=seed, splits={"train": 8}, scene_size=64), "train")


def run_overfit(seed: int = 0, steps: int = 300):
    scenes = overfit_scenes(seed)
    cfg = overfit_config(seed, steps)
    t0 = time.time()
    res = train(cfg, scenes)
    with T.precision(cfg.precision):
        rep = evaluate(res.model, scenes, PromptSource("full", scenes[0].class_names))
    return rep, res, time.time() - t0


def ablation_data(seed: int = 2024) -> DataConfig:
    return DataConfig(seed=seed, climates=["Dfb", "Cwa"], splits={"train": 12, "val": 4, "test": 8},
                      scene_size=128, patch=64, K=5)


def foreign_data(seed: int = 2024) -> DataConfig:
    return DataConfig(seed=seed + 1, climates=["Cwa"], splits={"test": 8}, scene_size=128,
                      patch=64, class_names=FOREIGN_CLASSES)


def ablation_config(**kw) -> TrainConfig:
    base = dict(learning_rate=1e-3, max_epochs=20, early_stopping_patience=10)
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class Study:
    table: AblationTable
    zero_shot: dict = field(default_factory=dict)  # (variant, mode, seed) -> mean overlapping IoU
    seconds: float = 0.0

    def zero_shot_mean(self, variant: str, mode: str) -> float:
        vals = [v for (va, m, _), v in self.zero_shot.items() if (va, m) == (variant, mode)]
        return float(np.mean(vals)) if vals else float("nan")


def run_study(grid, seeds=SEEDS, data_cfg: DataConfig | None = None, cfg: TrainConfig | None = None,
              with_zero_shot: bool = False) -> Study:
    data_cfg = data_cfg or ablation_data()
    cfg = cfg or ablation_config()
    splits = {s: generate_split(data_cfg, s) for s in data_cfg.splits}
    foreign = generate_split(foreign_data(data_cfg.seed), "test") if with_zero_shot else None
    zs = {}

    def hook(row, res, model, prompts):
        if foreign is not None:
            with T.precision(res.checkpoint.train_config().precision):
                rep = zero_shot_eval(model, foreign, FOREIGN_MAPPING, prompts, FOREIGN_CLASSES)
            zs[(row.variant, row.prompt_mode, row.seed)] = rep.mean_iou
            row.extra["zero_shot_iou"] = rep.iou

    t0 = time.time()
    table = ablate(cfg, grid, seeds, splits["train"], splits["test"], splits.get("val"), on_result=hook)
    return Study(table, zs, time.time() - t0)
