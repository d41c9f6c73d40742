"""Self-checks behind ``metaseg check``: finite-difference gradients for the
primitive ops and the whole model, and a pixel-loop audit of the metrics."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import generate_scene
from .encoders import EncoderConfig
from .metrics import ConfusionMatrix, derive_metrics
from .model import PromptedSegmenter, ModelConfig
from .tensor import Tensor, fd_check
from .train import PromptSource, stack_batch


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}  ({self.seconds:.1f}s)"


def _weighted(y, seed):
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return T.tsum(y * w)


OP_CASES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "div": (lambda a, b: a / (T.exp(b) + 1.0), [(2, 3), (1, 3)]),
    "exp_log": (lambda a: T.log(T.exp(a) + 0.5), [(4,)]),
    "sqrt": (lambda a: T.sqrt(a * a + 1.0), [(2, 2)]),
    "gelu": (lambda a: T.gelu(a), [(2, 5)]),
    "tanh": (lambda a: T.tanh(a), [(3,)]),
    "mean": (lambda a: T.mean(a, axis=(0, 2)), [(2, 3, 2)]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "getitem": (lambda a: a[np.array([0, 2, 0]), 1:], [(3, 4)]),
    "concat_roll": (lambda a, b: T.roll(T.concat([a, b], axis=1), 1, 1), [(2, 3), (2, 2)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 2)]),
    "softmax": (lambda a: T.softmax(a, axis=-1), [(3, 4)]),
    "log_softmax": (lambda a: T.log_softmax(a, axis=0), [(3, 4)]),
    "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b), [(2, 5), (5,), (5,)]),
    "embedding": (lambda w: T.embedding(w, np.array([[0, 2], [2, 1]])), [(3, 4)]),
}


def check_ops(seeds=range(5), tol: float = 1e-4) -> list[CheckResult]:
    out = []
    with T.precision("float64"):
        for name, (fn, shapes) in OP_CASES.items():
            t0 = time.time()
            worst = 0.0
            for seed in seeds:
                r = np.random.default_rng(seed)
                xs = [Tensor(r.standard_normal(s), requires_grad=True) for s in shapes]
                rep = fd_check(lambda *a: _weighted(fn(*a), seed), xs, tol=tol)
                worst = max(worst, rep.max_rel_err)
            out.append(CheckResult(f"grad:{name}", worst <= tol, f"max_rel={worst:.2e}", time.time() - t0))
    return out


def end_to_end_fd(seed: int = 0, max_entries: int = 6, pixel_entries: int = 200, tol: float = 1e-3,
                  variant: str = "full"):
    """FD check of the total loss w.r.t. input pixels and every trainable
    parameter (2 samples, 32x32, K=3, C=16), sampling entries per tensor."""
    with T.precision("float64"):
        enc = EncoderConfig(image_size=32, C=16, heads=4, vocab_size=256)
        model = PromptedSegmenter(ModelConfig(K=3, variant=variant, encoder=enc, seed=seed))
        r = np.random.default_rng(seed)
        for _, p in model.trainable_parameters():
            p.data = p.data + r.standard_normal(p.shape) * 0.05  # move off the symmetric init
        scenes = [generate_scene(seed + i, c, 32, 3) for i, c in enumerate(("Dfb", "Cwa"))]
        images, labels = stack_batch(scenes)
        tokens = pad = None
        if model.cfg.uses_text:
            tokens, pad = PromptSource("full", scenes[0].class_names).batch(scenes)
            model.itm.img_queue.push(r.standard_normal((3, 16)))
            model.itm.txt_queue.push(r.standard_normal((3, 16)))
        x = Tensor(images, requires_grad=True)

        def f(*_):
            return model.compute_loss(x, labels, tokens, pad, enqueue=False).tensor

        params = [p for _, p in model.trainable_parameters()]
        rep_px = fd_check(f, [x], tol=tol, max_entries=pixel_entries, seed=seed)
        rep_p = fd_check(f, params, tol=tol, max_entries=max_entries, seed=seed)
    return rep_px, rep_p


def check_end_to_end(tol: float = 1e-3) -> list[CheckResult]:
    t0 = time.time()
    px, par = end_to_end_fd(tol=tol)
    ok = px.passed and par.passed
    return [CheckResult("grad:end_to_end", ok,
                        f"pixels max_rel={px.max_rel_err:.2e} (n={px.n_checked}), "
                        f"params max_rel={par.max_rel_err:.2e} (n={par.n_checked})", time.time() - t0)]


def _loop_metrics(pred, ref, K):
    tp = [0] * K
    fp = [0] * K
    fn = [0] * K
    hit = 0
    for p, q in zip(pred.ravel().tolist(), ref.ravel().tolist()):
        if p == q:
            tp[q] += 1
            hit += 1
        else:
            fp[p] += 1
            fn[q] += 1

    def ratio(a, b):
        return a / b if b else math.nan

    iou = [ratio(tp[k], tp[k] + fp[k] + fn[k]) for k in range(K)]
    prec = [ratio(tp[k], tp[k] + fp[k]) for k in range(K)]
    rec = [ratio(tp[k], tp[k] + fn[k]) for k in range(K)]
    macro = lambda v: float(np.mean([x for x in v if not math.isnan(x)]))
    P, R = macro(prec), macro(rec)
    return {"oa": hit / pred.size, "miou": macro(iou), "precision": P, "recall": R,
            "f1": 2 * P * R / (P + R) if P + R else 0.0, "iou": iou}


def check_metrics(n: int = 100, tol: float = 1e-12, seed: int = 0) -> list[CheckResult]:
    t0 = time.time()
    r = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        K = int(r.integers(2, 7))
        pred, ref = r.integers(0, K, (32, 32)), r.integers(0, K, (32, 32))
        rep = derive_metrics(ConfusionMatrix(K).update(pred, ref))
        o = _loop_metrics(pred, ref, K)
        pairs = [(getattr(rep, k), o[k]) for k in ("oa", "miou", "precision", "recall", "f1")]
        pairs += list(zip(rep.iou.tolist(), o["iou"]))
        for a, b in pairs:
            if math.isnan(a) != math.isnan(b):
                worst = math.inf
            elif not math.isnan(a):
                worst = max(worst, abs(a - b))
    return [CheckResult("metrics:oracle", worst <= tol, f"{n} pairs, max_abs={worst:.1e}", time.time() - t0)]


def run_checks(suite: str = "all") -> list[CheckResult]:
    out = []
    if suite in ("all", "grad"):
        out += check_ops() + check_end_to_end()
    if suite in ("all", "metrics"):
        out += check_metrics()
    return out
