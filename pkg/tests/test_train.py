import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metaseg import tensor as T
from metaseg.data import generate_scene
from metaseg.encoders import EncoderConfig
from metaseg.metrics import UndefinedMetricsError
from metaseg.optim import AdamW, cosine_lr
from metaseg.tensor import NumericError, Tensor
from metaseg.train import (AblationTable, Checkpoint, PromptSource, TrainConfig, ablate, evaluate,
                           model_for_eval, stack_batch, text_encoder_checksum, train, zero_shot_eval)

TINY = EncoderConfig(image_size=32, C=16, heads=4, vocab_size=256)


def tiny_cfg(**kw):
    base = dict(encoder=TINY, max_epochs=2, precision="float64", flip_augment=True)
    base.update(kw)
    return TrainConfig(**base)


def scenes(n, K=3, seed=0, climates=("Dfb", "Cwa")):
    return [generate_scene(seed * 100 + i, climates[i % len(climates)], 32, K) for i in range(n)]


@pytest.fixture(scope="module")
def small_run():
    cfg = tiny_cfg(max_epochs=2)
    T.set_precision("float64")
    res = train(cfg, scenes(4), scenes(2, seed=1))
    return cfg, res


def params_equal(a, b):
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


# -- config ------------------------------------------------------------------

def test_defaults():
    c = TrainConfig()
    assert (c.learning_rate, c.batch_size, c.weight_decay, c.max_epochs, c.schedule) == \
        (3e-4, 2, 2.5e-4, 45, "cosine")
    assert c.freeze_text_encoder and c.prompt_mode == "full" and c.early_stopping_patience == 10


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(batch_size=-1), dict(weight_decay=-1),
                                dict(prompt_mode="loud"), dict(schedule="step"), dict(variant="x")])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_dict_round_trip():
    c = tiny_cfg(seed=7, prompt_mode="simple")
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})


def test_no_prompt_means_no_text_branch():
    c = TrainConfig(prompt_mode="none", variant="full")
    assert c.model_variant == "baseline"
    assert TrainConfig(variant="baseline").effective_prompt_mode == "none"


# -- schedule and optimizer --------------------------------------------------

@given(st.integers(2, 5000), st.floats(1e-6, 1.0))
def test_cosine_endpoints(total, lr):
    assert cosine_lr(0, total, lr) == lr
    assert cosine_lr(total - 1, total, lr) <= 0.01 * lr
    assert all(cosine_lr(s + 1, total, lr) <= cosine_lr(s, total, lr) for s in range(0, total - 1, max(1, total // 50)))


def test_adamw_matches_hand_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([("w", p)], lr=0.1, weight_decay=0.01)
    m = v = np.zeros(2)
    w = np.array([1.0, -2.0])
    for t, g in enumerate([np.array([0.5, -1.0]), np.array([0.2, 0.3])], start=1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w * (1 - 0.1 * 0.01) - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, w, rtol=0, atol=1e-15)


def test_adamw_state_round_trip():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW([("w", p)])
    p.grad = np.ones(3)
    opt.step()
    q = Tensor(p.data.copy(), requires_grad=True)
    opt2 = AdamW([("w", q)])
    opt2.load_state_dict(opt.state_dict())
    p.grad = q.grad = np.full(3, 0.5)
    opt.step(), opt2.step()
    assert np.array_equal(p.data, q.data)


# -- training ----------------------------------------------------------------

def test_zero_epochs_returns_initialization():
    res = train(tiny_cfg(max_epochs=0), scenes(2))
    assert params_equal(res.checkpoint.params, res.initial.params)
    assert res.loss_trace == [] and res.history == []


def test_frozen_text_encoder_unchanged(small_run):
    _, res = small_run
    assert text_encoder_checksum(res.initial.params) == text_encoder_checksum(res.final.params)
    # something else did move
    assert not params_equal(res.initial.params, res.final.params)


def test_unfrozen_text_encoder_moves():
    res = train(tiny_cfg(max_epochs=1, freeze_text_encoder=False), scenes(2))
    assert text_encoder_checksum(res.initial.params) != text_encoder_checksum(res.final.params)


def test_loss_trace_reproducible(small_run):
    cfg, res = small_run
    again = train(cfg, scenes(4), scenes(2, seed=1))
    assert len(again.loss_trace) == len(res.loss_trace) == 4
    np.testing.assert_allclose(again.loss_trace, res.loss_trace, rtol=0, atol=1e-10)


def test_history_has_validation(small_run):
    _, res = small_run
    assert [h["epoch"] for h in res.history] == [1, 2]
    assert all("val_miou" in h and math.isfinite(h["loss"]) for h in res.history)


def test_best_checkpoint_never_worse_than_history(small_run):
    _, res = small_run
    best = max(h["val_miou"] for h in res.history)
    assert res.checkpoint.best_val_miou == best


def test_early_stopping(monkeypatch):
    # a validation score that only gets worse triggers the stop after `patience` epochs
    import metaseg.train as tr

    seq = iter([0.5, 0.4, 0.3, 0.2, 0.1, 0.0])

    class Fake:
        def __init__(self):
            self.miou = next(seq)

    monkeypatch.setattr(tr, "evaluate", lambda *a, **k: Fake())
    res = train(tiny_cfg(max_epochs=6, early_stopping_patience=2), scenes(2), scenes(1, seed=1))
    assert len(res.history) == 3
    assert res.checkpoint.best_val_miou == 0.5 and res.checkpoint.epoch == 1
    running = -1.0
    for h in res.history:
        running = max(running, h["val_miou"])
        assert res.checkpoint.best_val_miou >= running


def test_non_finite_loss_reports_batch(tmp_path):
    bad = scenes(2)
    bad[0].image[:] = np.nan
    with pytest.raises(NumericError, match=r"batch e0b0"):
        train(tiny_cfg(max_epochs=1, flip_augment=False), bad, out_dir=tmp_path)
    assert (tmp_path / "nonfinite_batch_e0b0.json").exists()
    assert len(T.tape) == 0


def test_class_order_mismatch_rejected():
    a = scenes(2)
    b = [generate_scene(9, "Dfb", 32, 3, class_names=["background", "tree", "building"])]
    with pytest.raises(ValueError):
        train(tiny_cfg(max_epochs=1), a, b)
    with pytest.raises(ValueError):
        train(tiny_cfg(max_epochs=1), a, prompts=PromptSource("full", ["background", "tree", "road"]))


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(tiny_cfg(), [])


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(small_run, tmp_path):
    _, res = small_run
    path = tmp_path / "ck.npz"
    res.final.save(path)
    back = Checkpoint.load(path)
    assert params_equal(back.params, res.final.params)
    assert back.optimizer["t"] == res.final.optimizer["t"]
    assert params_equal(back.optimizer["m"], res.final.optimizer["m"])
    assert (back.epoch, back.step, back.K, back.class_names) == \
        (res.final.epoch, res.final.step, res.final.K, res.final.class_names)
    assert back.best_val_miou == res.final.best_val_miou
    batch = scenes(2, seed=5)
    images, _ = stack_batch(batch)
    m1, p1 = model_for_eval(res.final)
    m2, p2 = model_for_eval(back)
    with T.no_grad():
        a = m1(images, *p1.batch(batch)).logits.data
        b = m2(images, *p2.batch(batch)).logits.data
    assert a.dtype == np.float64 and np.array_equal(a, b)


def test_checkpoint_rejects_unknown_version(small_run, tmp_path):
    _, res = small_run
    ck = res.final
    ck2 = Checkpoint(ck.config, ck.K, ck.class_names, ck.params, format_version=99)
    ck2.save(tmp_path / "v.npz")
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "v.npz")


# -- evaluation --------------------------------------------------------------

def test_evaluate_deterministic(small_run):
    _, res = small_run
    model, prompts = model_for_eval(res.final)
    s = scenes(3, seed=2)
    a, b = evaluate(model, s, prompts).flat(), evaluate(model, s, prompts).flat()
    assert a.keys() == b.keys()
    assert all(a[k] == b[k] or (math.isnan(a[k]) and math.isnan(b[k])) for k in a)


def test_flip_tta_runs(small_run):
    _, res = small_run
    model, prompts = model_for_eval(res.final)
    rep = evaluate(model, scenes(2, seed=2), prompts, flip_tta=True)
    assert 0.0 <= rep.oa <= 1.0


def test_evaluate_empty_split(small_run):
    _, res = small_run
    model, prompts = model_for_eval(res.final)
    with pytest.raises(UndefinedMetricsError):
        evaluate(model, [], prompts)


def test_evaluate_class_count_mismatch(small_run):
    _, res = small_run
    model, prompts = model_for_eval(res.final)
    with pytest.raises(ValueError):
        evaluate(model, scenes(1, K=4), prompts)


def test_zero_shot_identity_matches_evaluate(small_run):
    _, res = small_run
    model, prompts = model_for_eval(res.final)
    s = scenes(3, seed=3)
    full = evaluate(model, s, prompts)
    zs = zero_shot_eval(model, s, [(k, k) for k in range(3)], prompts)
    for k, name in enumerate(s[0].class_names):
        a, b = zs.iou[name], float(full.iou[k])
        assert (math.isnan(a) and math.isnan(b)) or a == b


def test_zero_shot_single_class_and_errors(small_run):
    _, res = small_run
    model, prompts = model_for_eval(res.final)
    s = scenes(2, seed=3)
    assert list(zero_shot_eval(model, s, [(1, 1)], prompts).iou) == [s[0].class_names[1]]
    with pytest.raises(ValueError):
        zero_shot_eval(model, s, [], prompts)
    with pytest.raises(ValueError):
        zero_shot_eval(model, s, [(1, 1), (1, 2)], prompts)


# -- ablation ----------------------------------------------------------------

def test_ablate_table_shape(tmp_path):
    grid = [("baseline", "none"), ("full", "simple")]
    t = ablate(tiny_cfg(max_epochs=1), grid, [0, 1], scenes(2), scenes(1, seed=4))
    assert isinstance(t, AblationTable) and len(t.rows) == 4
    assert all(r.status == "ok" for r in t.rows)
    lines = t.lines()
    assert len(lines) == 1 + 4 + 2 and lines[-1].split(",")[2] == "mean"
    t.write(tmp_path / "abl.csv")
    flat = (tmp_path / "abl.txt").read_text().splitlines()
    assert flat[0].startswith("baseline.none.mean_miou=")


def test_ablate_single_cell_is_train_plus_eval():
    cfg = tiny_cfg(max_epochs=1, prompt_mode="simple")
    train_set, ev = scenes(2), scenes(1, seed=4)
    t = ablate(cfg, [("full", "simple")], [0], train_set, ev)
    res = train(cfg, train_set)
    model, prompts = model_for_eval(res.checkpoint)
    assert t.rows[0].miou == evaluate(model, ev, prompts).miou


def test_ablate_failing_cell_continues():
    t = ablate(tiny_cfg(max_epochs=1), [("bogus", "full"), ("baseline", "none")], [0], scenes(2),
               scenes(1, seed=4))
    assert t.rows[0].status.startswith("error") and math.isnan(t.rows[0].miou)
    assert t.rows[1].status == "ok"
