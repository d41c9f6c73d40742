"""Command-line entry point: ``metaseg <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from . import tensor as T
from .data import DataConfig, DatasetError, make_dataset, read_dataset, read_manifest
from .encoders import Vocabulary
from .metrics import write_report
from .prompts import (CannedProvider, HttpProvider, ImageMetadata, assemble_bundle, build_vocabulary,
                      default_grid, lookup_climate)
from .train import (Checkpoint, PromptSource, TrainConfig, ablate, evaluate, model_for_eval, train,
                    zero_shot_eval)

log = logging.getLogger("metaseg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

GRIDS = {
    "prompt": [("full", "none"), ("full", "simple"), ("full", "full")],
    "component": [("baseline", "none"), ("alignment", "full"), ("full", "full")],
    "union": [("baseline", "none"), ("full", "simple"), ("alignment", "full"), ("full", "full")],
}


class UsageError(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def load_structured(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) if text.strip() else {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a mapping at top level")
    return data


def _add_dataclass_flags(p, cls, skip=()):
    """One flag per field, spelled like the field (dashes also accepted)."""
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        names = [f"--{f.name}"] + ([f"--{f.name.replace('_', '-')}"] if "_" in f.name else [])
        typ = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
        if "bool" in typ:
            p.add_argument(*names, dest=f.name, type=_bool, default=None)
        elif "list" in typ:
            p.add_argument(*names, dest=f.name, nargs="+", default=None)
        elif "dict" in typ:
            p.add_argument(*names, dest=f.name, type=json.loads, default=None)
        elif "float" in typ:
            p.add_argument(*names, dest=f.name, type=float, default=None)
        elif "int" in typ:
            p.add_argument(*names, dest=f.name, type=int, default=None)
        else:
            p.add_argument(*names, dest=f.name, default=None)


def _merge(cls, args, config_path):
    base = load_structured(config_path) if config_path else {}
    for f in dataclasses.fields(cls):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    try:
        return cls.from_dict(base) if hasattr(cls, "from_dict") else cls(**base)
    except TypeError as e:
        raise UsageError(str(e)) from None


def _vocab_for(data_dir) -> Vocabulary:
    path = Path(data_dir) / "vocab.txt"
    return Vocabulary.load(path) if path.exists() else build_vocabulary()


def _split(data, name, class_names=None):
    return read_dataset(data, name, class_names)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(a) -> int:
    cfg = _merge(DataConfig, a, a.config)
    out = make_dataset(cfg, a.out)
    counts = {k: len(v) for k, v in out.items()}
    print(f"wrote {sum(counts.values())} tiles to {a.out}: {counts}")
    return EXIT_OK


def cmd_prompt(a) -> int:
    meta = ImageMetadata(a.lat, a.lon, region_name=a.region)
    vocab = Vocabulary.load(a.vocab) if a.vocab else build_vocabulary()
    if a.provider == "http":
        if not (a.url and a.model):
            raise UsageError("--provider http needs --url and --model")
        provider = HttpProvider(a.url, a.model, a.cache_dir, a.token_env)
    else:
        provider = CannedProvider()
    classes = [c.strip() for c in a.classes.split(",") if c.strip()]
    bundle = assemble_bundle(meta, classes, provider, vocab, default_grid())
    text = bundle.to_json()
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
        zone = lookup_climate(a.lat, a.lon, default_grid())
        print(f"zone {zone.code} ({zone.description}); {int((~bundle.pad_mask).sum())} tokens -> {a.out}")
    else:
        print(text)
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = _merge(TrainConfig, a, a.config)
    manifest = read_manifest(a.data)
    train_set = _split(a.data, "train")
    val_set = _split(a.data, "val") if "val" in manifest.splits else None
    prompts = PromptSource(cfg.effective_prompt_mode, manifest.class_names, _vocab_for(a.data))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(cfg, train_set, val_set, prompts, out_dir=out, log_every=a.log_every)
    res.checkpoint.save(out / "best.npz")
    res.final.save(out / "final.npz")
    (out / "history.json").write_text(json.dumps(res.history, indent=1), encoding="utf-8")
    (out / "loss_trace.txt").write_text("\n".join(f"{v:.10g}" for v in res.loss_trace) + "\n",
                                        encoding="utf-8")
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
    best = res.checkpoint.best_val_miou
    print(f"trained {res.final.step} steps over {len(res.history)} epochs; best val mIoU "
          f"{best if best != float('-inf') else 'n/a'}; checkpoints in {out}")
    return EXIT_OK


def _load(a):
    ckpt = Checkpoint.load(a.checkpoint)
    model, prompts = model_for_eval(ckpt)
    return ckpt, model, prompts


def cmd_eval(a) -> int:
    ckpt, model, prompts = _load(a)
    scenes = _split(a.data, a.split)
    if scenes and scenes[0].K != ckpt.K:
        raise UsageError(f"dataset has {scenes[0].K} classes, checkpoint {ckpt.K}")
    with T.precision(ckpt.train_config().precision):
        rep = evaluate(model, scenes, prompts, flip_tta=a.flip_tta)
    for k, v in rep.flat().items():
        print(f"{k}={v:.6g}")
    if a.out:
        write_report(rep, a.out)
    return EXIT_OK


def _parse_mapping(text, src_names, tgt_names):
    pairs = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise UsageError(f"mapping entry {item!r} is not source=target")
        s, t = (x.strip() for x in item.split("=", 1))
        try:
            pairs.append((src_names.index(s) if not s.isdigit() else int(s),
                          tgt_names.index(t) if not t.isdigit() else int(t)))
        except ValueError:
            raise UsageError(f"unknown class in mapping entry {item!r}") from None
    if not pairs:
        raise UsageError("class mapping is empty")
    return pairs


def cmd_zero_shot(a) -> int:
    ckpt, model, prompts = _load(a)
    scenes = _split(a.data, a.split)
    tgt_names = read_manifest(a.data).class_names
    mapping = _parse_mapping(a.map, ckpt.class_names, tgt_names)
    with T.precision(ckpt.train_config().precision):
        rep = zero_shot_eval(model, scenes, mapping, prompts, tgt_names)
    lines = [f"iou.{k}={v:.10g}" for k, v in rep.iou.items()] + [f"mean_iou={rep.mean_iou:.10g}"]
    print("\n".join(lines))
    if a.out:
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        Path(a.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_ablate(a) -> int:
    cfg = _merge(TrainConfig, a, a.config)
    if a.cells:
        grid = []
        for c in a.cells:
            v, _, m = c.partition(":")
            grid.append((v, m or "full"))
    else:
        grid = GRIDS[a.grid]
    manifest = read_manifest(a.data)
    train_set = _split(a.data, "train")
    val_set = _split(a.data, "val") if "val" in manifest.splits else None
    eval_set = _split(a.data, a.eval_split)
    table = ablate(cfg, grid, a.seeds, train_set, eval_set, val_set, vocab=_vocab_for(a.data))
    table.write(Path(a.out) / "ablation.csv")
    print("\n".join(table.lines()))
    failed = [r for r in table.rows if r.status != "ok"]
    return EXIT_RUNTIME if failed and len(failed) == len(table.rows) else EXIT_OK


def cmd_check(a) -> int:
    from .checks import run_checks

    results = run_checks(a.suite)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# --------------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="metaseg", description="Metadata-conditioned vision-language segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    _add_dataclass_flags(g, DataConfig)
    g.set_defaults(fn=cmd_gen_data)

    pr = sub.add_parser("prompt", help="emit a prompt bundle for a location")
    pr.add_argument("--lat", type=float, required=True)
    pr.add_argument("--lon", type=float, required=True)
    pr.add_argument("--region")
    pr.add_argument("--classes", default="background,building,tree,agriculture,road")
    pr.add_argument("--provider", choices=["canned", "http"], default="canned")
    pr.add_argument("--url")
    pr.add_argument("--model")
    pr.add_argument("--cache-dir", default=".prompt_cache")
    pr.add_argument("--token-env", default="OPENAI_API_KEY")
    pr.add_argument("--vocab")
    pr.add_argument("--out")
    pr.set_defaults(fn=cmd_prompt)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--log-every", type=int, default=0)
    _add_dataclass_flags(t, TrainConfig, skip=("encoder",))
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--flip-tta", action="store_true")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    z = sub.add_parser("zero-shot", help="IoU of shared classes on a foreign dataset")
    z.add_argument("--checkpoint", required=True)
    z.add_argument("--data", required=True)
    z.add_argument("--split", default="test")
    z.add_argument("--map", required=True, help="source=target pairs, e.g. building=building,tree=tree")
    z.add_argument("--out")
    z.set_defaults(fn=cmd_zero_shot)

    ab = sub.add_parser("ablate", help="train a grid of variants over seeds")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--config")
    ab.add_argument("--grid", choices=sorted(GRIDS), default="union")
    ab.add_argument("--cells", nargs="+", help="variant:prompt_mode cells, overrides --grid")
    ab.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ab.add_argument("--eval-split", default="test")
    _add_dataclass_flags(ab, TrainConfig, skip=("encoder", "seed", "variant", "prompt_mode"))
    ab.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("check", help="gradient and metric self-checks")
    c.add_argument("--suite", choices=["all", "grad", "metrics"], default="all")
    c.set_defaults(fn=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return a.fn(a)
    except T.NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, DatasetError, ValueError, KeyError, FileNotFoundError, yaml.YAMLError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - report, do not dump a traceback at the user
        log.debug("failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
