"""Command line entry point: ``refseg <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from .core import load_config, toy_config, toy_train_config
from .data import (heatmap_to_gray, load_dataset, parse_synth_spec, read_image, save_dataset,
                   synthesize, write_mask, write_pgm, SynthSpec)
from .errors import (CheckpointShapeError, DegenerateError, DivergenceError, RefSegError)
from . import harness

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
RUNTIME_ERRORS = (DivergenceError, CheckpointShapeError, DegenerateError)

log = logging.getLogger("refseg")


def _load_model(path: str):
    return harness.load_checkpoint(path).model


def _load_split(root: str, split: str, model):
    return load_dataset(root, split, size=(model.cfg.H2, model.cfg.W2))


def cmd_train(args) -> int:
    if args.config:
        cfg, tcfg = load_config(args.config)
    else:
        cfg, tcfg = toy_config(), toy_train_config()
    train_set = load_dataset(args.data, args.split, size=(cfg.H2, cfg.W2))
    val_set = None
    if (Path(args.data) / f"{args.val_split}.tsv").exists():
        val_set = load_dataset(args.data, args.val_split, size=(cfg.H2, cfg.W2))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "a" if args.resume else "w", encoding="utf-8") as fh:
        res = harness.train(cfg, tcfg, train_set, out, val_set, resume=args.resume,
                            log_stream=fh)
    (out / "evals.json").write_text(json.dumps(res.evals, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({"steps": res.state.step, "best_gIoU": res.state.best_gIoU,
                      "last": str(res.last_path),
                      "best": str(res.best_path) if res.best_path else None}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    ds = _load_split(args.data, args.split, model)
    report = harness.evaluate_model(model, ds, categories=ds.categories)
    if args.out:
        report.save(args.out)
    print(report.to_json(indent=None if args.out else 2))
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_model(args.ckpt)
    image = read_image(args.image, size=(model.cfg.H2, model.cfg.W2))
    mask, p_dense = harness.predict(model, image, args.text)
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    name = args.id or Path(args.image).stem
    write_mask(out / f"{name}.png", mask)
    written = [str(out / f"{name}.png")]
    if args.dump_prompts:
        write_pgm(out / f"{name}.dense.pgm", heatmap_to_gray(p_dense))
        written.append(str(out / f"{name}.dense.pgm"))
    print(json.dumps({"written": written, "foreground": int(mask.sum())}))
    return EXIT_OK


def cmd_dump_prompts(args) -> int:
    model = _load_model(args.ckpt)
    ds = _load_split(args.data, args.split, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for start in range(0, len(ds), 32):
        chunk = [ds[i] for i in range(start, min(start + 32, len(ds)))]
        preds = harness.predict_batch(model, chunk)
        for s, m, d in zip(chunk, preds["masks"], preds["p_dense"]):
            write_mask(out / f"{s.id}.png", m)
            write_pgm(out / f"{s.id}.dense.pgm", heatmap_to_gray(d))
    print(json.dumps({"n": len(ds), "out": str(out)}))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    model = _load_model(args.ckpt)
    ds = _load_split(args.data, args.split, model)
    labels = {}
    for start in range(0, len(ds), 32):
        chunk = [ds[i] for i in range(start, min(start + 32, len(ds)))]
        preds = harness.predict_batch(model, chunk)
        for s, m, d in zip(chunk, preds["masks"], preds["p_dense"]):
            labels[s.id] = harness.diagnose(m, d, s.mask)
    result = {"counts": dict(sorted(Counter(labels.values()).items())), "per_sample": labels}
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = parse_synth_spec(Path(args.spec).read_text(encoding="utf-8")) if args.spec \
        else SynthSpec()
    samples = synthesize(spec, args.n)
    manifest = save_dataset(samples, args.out, args.split)
    print(json.dumps({"n": len(samples), "manifest": str(manifest)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refseg", description="Referring segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value config file (toy preset if omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--val-split", default="val")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="segment one image given a referring text")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--text", required=True)
    pr.add_argument("--out", help="output folder (default: current directory)")
    pr.add_argument("--id", help="output file stem (default: image stem)")
    pr.add_argument("--dump-prompts", action="store_true",
                    help="also write <id>.dense.pgm with the dense prompt map")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("synth-data", help="write a synthetic dataset")
    s.add_argument("--spec", help="key=value generator spec (defaults if omitted)")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("diagnose", help="label each sample ok / localization / segmentation error")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="val")
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagnose)

    dp = sub.add_parser("dump-prompts", help="write masks and dense prompt maps for a split")
    dp.add_argument("--ckpt", required=True)
    dp.add_argument("--data", required=True)
    dp.add_argument("--split", default="val")
    dp.add_argument("--out", required=True)
    dp.set_defaults(func=cmd_dump_prompts)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RefSegError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
