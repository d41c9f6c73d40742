"""Training loop, evaluation, zero-shot transfer, ablation grids and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import LabeledScene, augment_flip
from .encoders import EncoderConfig, Vocabulary
from .metrics import ConfusionMatrix, MetricReport, derive_metrics
from .model import ModelConfig, PromptedSegmenter
from .optim import AdamW, cosine_lr
from .prompts import (CannedProvider, ClimateGrid, PromptBundle, assemble_bundle, build_vocabulary,
                      default_grid, lookup_climate, simple_prompt_bundle)
from .tensor import NumericError

log = logging.getLogger(__name__)

PROMPT_MODES = ("full", "simple", "none")
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 2
    weight_decay: float = 2.5e-4
    max_epochs: int = 45
    schedule: str = "cosine"
    early_stopping_patience: int = 10
    seed: int = 0
    freeze_text_encoder: bool = True
    prompt_mode: str = "full"
    variant: str = "full"
    max_steps: int | None = None
    flip_augment: bool = True
    precision: str = "float32"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        for name in ("learning_rate", "batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.max_epochs < 0 or self.early_stopping_patience < 1:
            raise ValueError("weight_decay and max_epochs must be >= 0, patience >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.variant not in ("baseline", "alignment", "full"):
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def model_variant(self) -> str:
        # no text means no text branch at all
        return "baseline" if self.prompt_mode == "none" else self.variant

    @property
    def effective_prompt_mode(self) -> str:
        return "none" if self.variant == "baseline" else self.prompt_mode

    def model_config(self, K: int) -> ModelConfig:
        return ModelConfig(K=K, variant=self.model_variant, encoder=self.encoder, seed=self.seed,
                           freeze_text_encoder=self.freeze_text_encoder)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["depths"] = list(d["encoder"]["depths"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# prompts per scene


class PromptSource:
    """Maps scenes to token rows according to the prompt mode."""

    def __init__(self, mode: str, class_names, vocab: Vocabulary | None = None, provider=None,
                 grid: ClimateGrid | None = None):
        if mode not in PROMPT_MODES:
            raise ValueError(f"prompt mode must be one of {PROMPT_MODES}")
        self.mode = mode
        self.class_names = list(class_names)
        self.vocab = vocab or build_vocabulary()
        self.provider = provider or CannedProvider()
        self.grid = grid or default_grid()
        self._bundles: dict = {}

    def bundle_for(self, scene: LabeledScene) -> PromptBundle | None:
        if self.mode == "none":
            return None
        if self.mode == "simple":
            key = "simple"
        else:
            key = lookup_climate(scene.metadata.latitude, scene.metadata.longitude, self.grid).code
        if key not in self._bundles:
            if self.mode == "simple":
                b = simple_prompt_bundle(self.vocab)
            else:
                b = assemble_bundle(scene.metadata, self.class_names, self.provider, self.vocab, self.grid)
                if [n for n, _ in b.per_class_prompts] != self.class_names:
                    raise ValueError("prompt bundle class order differs from the dataset")
            self._bundles[key] = b
        return self._bundles[key]

    def batch(self, scenes):
        if self.mode == "none":
            return None, None
        bundles = [self.bundle_for(s) for s in scenes]
        return np.stack([b.token_ids for b in bundles]), np.stack([b.pad_mask for b in bundles])


def stack_batch(scenes):
    images = np.stack([s.image for s in scenes]).astype(T.get_dtype())
    labels = np.stack([s.labels for s in scenes]).astype(np.int64)
    return images, labels


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict  # TrainConfig snapshot
    K: int
    class_names: list
    params: dict
    optimizer: dict | None = None
    epoch: int = 0
    step: int = 0
    best_val_miou: float = float("-inf")
    vocab: list | None = None
    format_version: int = CHECKPOINT_VERSION

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {k: getattr(self, k) for k in ("format_version", "config", "K", "class_names", "epoch",
                                              "step", "best_val_miou", "vocab")}
        meta["best_val_miou"] = _json_float(self.best_val_miou)
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        if self.optimizer is not None:
            meta["optimizer_t"] = self.optimizer["t"]
            arrays.update({f"adam_m/{k}": v for k, v in self.optimizer["m"].items()})
            arrays.update({f"adam_v/{k}": v for k, v in self.optimizer["v"].items()})
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(z["meta"].tobytes().decode("utf-8"))
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
            params, m, v = {}, {}, {}
            for key in z.files:
                group, _, name = key.partition("/")
                target = {"param": params, "adam_m": m, "adam_v": v}.get(group)
                if target is not None:
                    target[name] = z[key]
        opt = {"t": meta["optimizer_t"], "m": m, "v": v} if "optimizer_t" in meta else None
        best = meta["best_val_miou"]
        return cls(meta["config"], meta["K"], meta["class_names"], params, opt, meta["epoch"],
                   meta["step"], float("-inf") if best is None else best, meta.get("vocab"),
                   meta["format_version"])

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(dict(self.config))

    def build_model(self) -> PromptedSegmenter:
        cfg = self.train_config()
        model = PromptedSegmenter(cfg.model_config(self.K))
        model.load_state_dict(self.params)
        return model


def _json_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


def snapshot(model: PromptedSegmenter, cfg: TrainConfig, class_names, opt: AdamW | None = None, epoch=0,
             step=0, best=float("-inf"), vocab: Vocabulary | None = None) -> Checkpoint:
    return Checkpoint(cfg.to_dict(), model.cfg.K, list(class_names), model.state_dict(),
                      opt.state_dict() if opt else None, epoch, step, best,
                      vocab.tokens if vocab is not None else None)


def text_encoder_checksum(params: dict) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        if k.startswith("text_encoder."):
            h.update(k.encode())
            h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# evaluation


def evaluate(model: PromptedSegmenter, scenes, prompts: PromptSource | None = None, batch_size: int = 8,
             flip_tta: bool = False, ignore_label=None) -> MetricReport:
    """One confusion matrix over the whole split."""
    cm = evaluate_confusion(model, scenes, prompts, batch_size, flip_tta, ignore_label)
    names = scenes[0].class_names if scenes else None
    return derive_metrics(cm, names)


def predict_scenes(model: PromptedSegmenter, scenes, prompts, batch_size: int = 8, flip_tta: bool = False):
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        images, _ = stack_batch(chunk)
        tokens, pad = prompts.batch(chunk) if prompts is not None else (None, None)
        if not flip_tta:
            yield chunk, model.predict(images, tokens, pad)
            continue
        with T.no_grad():
            acc = 0.0
            for axes in ((), (-1,), (-2,), (-2, -1)):
                x = np.flip(images, axes) if axes else images
                p = T.softmax(model(np.ascontiguousarray(x), tokens, pad).logits, axis=1).data
                acc = acc + (np.flip(p, axes) if axes else p)
        yield chunk, acc.argmax(axis=1)


def evaluate_confusion(model, scenes, prompts=None, batch_size=8, flip_tta=False, ignore_label=None):
    K = model.cfg.K
    for s in scenes:
        if s.K != K:
            raise ValueError(f"scene {s.scene_id} has {s.K} classes, model has {K}")
    cm = ConfusionMatrix(K)
    for chunk, pred in predict_scenes(model, scenes, prompts, batch_size, flip_tta):
        cm.update(pred, np.stack([s.labels for s in chunk]), ignore_label)
    return cm


@dataclass
class ZeroShotReport:
    iou: dict  # target class name -> IoU
    mean_iou: float
    confusion: ConfusionMatrix


def zero_shot_eval(model: PromptedSegmenter, scenes, mapping, prompts: PromptSource | None = None,
                   target_names=None, batch_size: int = 8) -> ZeroShotReport:
    """IoU of the classes shared between the model's label set and a foreign one.

    ``mapping`` is a list of (source id, target id) pairs. Predictions and
    references outside the mapping collapse into one extra "other" bucket.
    """
    mapping = [(int(s), int(t)) for s, t in mapping]
    if not mapping:
        raise ValueError("class mapping is empty")
    src = [s for s, _ in mapping]
    tgt = [t for _, t in mapping]
    if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
        raise ValueError("class mapping must be one-to-one")
    if max(src) >= model.cfg.K:
        raise ValueError("source id outside the model's classes")
    target_names = target_names or (scenes[0].class_names if scenes else None)
    n = len(mapping)
    pred_lut = np.full(model.cfg.K, n, dtype=np.int64)
    pred_lut[src] = np.arange(n)
    n_tgt = max(max(tgt) + 1, scenes[0].K if scenes else 0)
    ref_lut = np.full(n_tgt, n, dtype=np.int64)
    ref_lut[tgt] = np.arange(n)
    cm = ConfusionMatrix(n + 1)
    for chunk, pred in predict_scenes(model, scenes, prompts, batch_size):
        ref = np.stack([s.labels for s in chunk]).astype(np.int64)
        cm.update(pred_lut[pred], ref_lut[ref])
    rep = derive_metrics(cm)
    names = [target_names[t] if target_names else str(t) for t in tgt]
    iou = {name: float(rep.iou[i]) for i, name in enumerate(names)}
    vals = [v for v in iou.values() if not math.isnan(v)]
    return ZeroShotReport(iou, float(np.mean(vals)) if vals else float("nan"), cm)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best on validation (or last without validation)
    final: Checkpoint
    initial: Checkpoint
    history: list
    loss_trace: list
    model: PromptedSegmenter

    def best_model(self) -> PromptedSegmenter:
        return self.checkpoint.build_model()


def _dump_batch(out_dir, batch_id, scenes, err):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite_batch_{batch_id}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"batch_id": batch_id, "scene_ids": [s.scene_id for s in scenes],
                                "error": str(err)}, indent=1), encoding="utf-8")
    return path


def train(cfg: TrainConfig, train_set, val_set=None, prompts: PromptSource | None = None,
          out_dir=None, log_every: int = 0) -> TrainResult:
    if not train_set:
        raise ValueError("training set is empty")
    names = list(train_set[0].class_names)
    for s in list(train_set) + list(val_set or []):
        if list(s.class_names) != names:
            raise ValueError(f"scene {s.scene_id} has a different class order")
    mode = cfg.effective_prompt_mode
    if prompts is None or prompts.mode != mode:
        prompts = PromptSource(mode, names, prompts.vocab if prompts else None)
    if prompts.class_names != names:
        raise ValueError("prompt class order differs from the dataset")

    with T.precision(cfg.precision):
        model = PromptedSegmenter(cfg.model_config(len(names)))
        opt = AdamW(model.trainable_parameters(), cfg.learning_rate, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng(cfg.seed)
        n = len(train_set)
        spe = math.ceil(n / cfg.batch_size)
        total = cfg.max_epochs * spe
        if cfg.max_steps is not None:
            total = min(total, cfg.max_steps)
        initial = snapshot(model, cfg, names, opt, vocab=prompts.vocab)
        best_ckpt, best, stale = None, float("-inf"), 0
        history, trace = [], []
        step = 0
        for epoch in range(cfg.max_epochs):
            if step >= total:
                break
            order = rng.permutation(n)
            losses = []
            for b in range(spe):
                if step >= total:
                    break
                scenes = [train_set[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                if cfg.flip_augment:
                    scenes = [augment_flip(s, rng) for s in scenes]
                images, labels = stack_batch(scenes)
                tokens, pad = prompts.batch(scenes)
                batch_id = f"e{epoch}b{b}"
                try:
                    rep = model.compute_loss(images, labels, tokens, pad)
                except NumericError as e:
                    T.tape.clear()
                    dump = _dump_batch(out_dir, batch_id, scenes, e)
                    raise NumericError(f"non-finite loss at batch {batch_id} (scenes "
                                       f"{[s.scene_id for s in scenes]}; dump: {dump}): {e}") from e
                T.backward(rep.tensor)
                lr = cosine_lr(step, total, cfg.learning_rate) if cfg.schedule == "cosine" else cfg.learning_rate
                opt.step(lr)
                opt.zero_grad()
                step += 1
                trace.append(rep.total)
                losses.append(rep.total)
                if log_every and step % log_every == 0:
                    log.info("step %d/%d loss %.4f lr %.2e", step, total, rep.total, lr)
            rec = {"epoch": epoch + 1, "step": step, "loss": float(np.mean(losses))}
            if val_set:
                miou = evaluate(model, val_set, prompts).miou
                rec["val_miou"] = miou
                if miou > best:
                    best, stale = miou, 0
                    best_ckpt = snapshot(model, cfg, names, opt, epoch + 1, step, best, prompts.vocab)
                else:
                    stale += 1
            history.append(rec)
            if val_set and stale >= cfg.early_stopping_patience:
                log.info("early stop after epoch %d", epoch + 1)
                break
        final = snapshot(model, cfg, names, opt, len(history), step, best, prompts.vocab)
    return TrainResult(best_ckpt or final, final, initial, history, trace, model)


def model_for_eval(ckpt: Checkpoint) -> tuple[PromptedSegmenter, PromptSource]:
    cfg = ckpt.train_config()
    with T.precision(cfg.precision):
        model = ckpt.build_model()
    vocab = Vocabulary(ckpt.vocab) if ckpt.vocab else None
    return model, PromptSource(cfg.effective_prompt_mode, ckpt.class_names, vocab)


# --------------------------------------------------------------------------
# ablation


VARIANT_LABELS = {"baseline": "baseline", "alignment": "+alignment", "full": "+alignment+fusion"}


@dataclass
class AblationRow:
    variant: str
    prompt_mode: str
    seed: int
    miou: float
    status: str = "ok"
    extra: dict = field(default_factory=dict)


@dataclass
class AblationTable:
    rows: list

    def cells(self):
        out = []
        for r in self.rows:
            key = (r.variant, r.prompt_mode)
            if key not in out:
                out.append(key)
        return out

    def mean(self, variant: str, prompt_mode: str) -> float:
        vals = [r.miou for r in self.rows if (r.variant, r.prompt_mode) == (variant, prompt_mode)
                and r.status == "ok"]
        return float(np.mean(vals)) if vals else float("nan")

    def lines(self) -> list[str]:
        out = ["variant,prompt_mode,seed,miou,status"]
        for r in self.rows:
            out.append(f"{VARIANT_LABELS.get(r.variant, r.variant)},{r.prompt_mode},{r.seed},{r.miou:.6f},{r.status}")
        for v, p in self.cells():
            out.append(f"{VARIANT_LABELS.get(v, v)},{p},mean,{self.mean(v, p):.6f},")
        return out

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        flat = [f"{v}.{p}.mean_miou={self.mean(v, p):.10g}" for v, p in self.cells()]
        path.with_suffix(".txt").write_text("\n".join(flat) + "\n", encoding="utf-8")


def ablate(base: TrainConfig, grid, seeds, train_set, eval_set, val_set=None, vocab=None,
           on_result=None) -> AblationTable:
    """Train every (variant, prompt_mode) cell once per seed and score ``eval_set``.

    A failing cell is recorded with its error and the rest continue.
    """
    names = list(train_set[0].class_names)
    rows = []
    for variant, mode in grid:
        for seed in seeds:
            t0 = time.time()
            try:
                cfg = TrainConfig.from_dict({**base.to_dict(), "variant": variant, "prompt_mode": mode,
                                             "seed": seed})
                prompts = PromptSource(cfg.effective_prompt_mode, names, vocab)
                res = train(cfg, train_set, val_set, prompts)
                with T.precision(cfg.precision):
                    model = res.checkpoint.build_model()
                    miou = evaluate(model, eval_set, prompts).miou
                row = AblationRow(variant, mode, seed, miou, extra={"seconds": time.time() - t0})
                if on_result is not None:
                    on_result(row, res, model, prompts)
            except Exception as e:  # noqa: BLE001 - one bad cell must not sink the grid
                log.exception("cell %s/%s seed %d failed", variant, mode, seed)
                row = AblationRow(variant, mode, seed, float("nan"), f"error: {type(e).__name__}: {e}")
            rows.append(row)
    return AblationTable(rows)
