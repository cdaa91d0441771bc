"""``idclab`` command line: data generation, training, evaluation, scoring, studies."""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .dataset import DatasetConfig, DatasetError, Vocab, build_dataset, load_dataset, summary_table
from .metrics import MetricsError, corpus_evaluate
from .imaging import CATEGORIES
from .model import MODULES, count_params
from .training import (
    STUDY_MODEL,
    CheckpointError,
    LoraSettings,
    RunCache,
    TrainConfig,
    TrainingError,
    evaluate,
    load_checkpoint,
    run_ablation,
    run_augmentation_study,
    run_encoder_comparison,
    train,
)

log = logging.getLogger("idclab")

PRESETS = {"default": {}, "study": STUDY_MODEL}


class CliError(Exception):
    pass


def version_string() -> str:
    """``<package version>[+g<commit>[-dirty]]`` when run from a git checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--abbrev=8"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(out_dir, command: str, resolved: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "config": resolved,
        "seed": resolved.get("seed"),
        "version": version_string(),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "run-manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _apply_threads() -> None:
    n = os.environ.get("IDC_THREADS")
    if n:
        try:
            limit = int(n)
        except ValueError:
            raise CliError(f"IDC_THREADS must be an integer, got {n!r}") from None
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=limit)


# -- argument parsing ------------------------------------------------------
def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _tune_flags(text: str) -> dict:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in MODULES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown module(s) {bad}; choose from {','.join(MODULES)}")
    return {m: m in names for m in MODULES}


def _train_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int, default=1000)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=3e-4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--encoder", choices=["joint", "two_stream"], default="joint")
    g.add_argument("--tune", type=_tune_flags, default=_tune_flags("vit,qformer,lm"), help="comma-separated modules to fine-tune")
    g.add_argument("--lora", action="store_true", help="train rank-r adapters on Q/K/V instead of full weights")
    g.add_argument("--lora-rank", type=int, default=8)
    g.add_argument("--lora-alpha", type=float, default=16.0)
    g.add_argument("--augment", action="store_true", help="blur/quantize training inputs")
    g.add_argument("--preset", choices=sorted(PRESETS), default="default", help="model size preset")
    g.add_argument("--model-json", default=None, help="JSON object of ModelConfig overrides")
    g.add_argument("--init-checkpoint", default=None)
    g.add_argument("--val-every", type=int, default=0)
    g.add_argument("--decode", choices=["greedy", "beam"], default="greedy")
    g.add_argument("--beam-size", type=int, default=3)


def _train_config(args, datasets, eval_dataset=None) -> TrainConfig:
    model = dict(PRESETS[args.preset])
    if args.model_json:
        try:
            model.update(json.loads(args.model_json))
        except json.JSONDecodeError as exc:
            raise CliError(f"--model-json is not valid JSON: {exc}") from None
    return TrainConfig(
        seed=args.seed,
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        lora=LoraSettings(args.lora, args.lora_rank, args.lora_alpha),
        tune=args.tune,
        encoder_mode=args.encoder,
        augment=args.augment,
        datasets=[str(d) for d in datasets],
        eval_dataset=str(eval_dataset) if eval_dataset else None,
        model=model,
        init_checkpoint=args.init_checkpoint,
        val_every=args.val_every,
        eval_decode=args.decode,
        beam_size=args.beam_size,
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="idclab", description="Image difference captioning lab")
    ap.add_argument("--version", action="version", version=f"idclab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic triplet dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--originals", type=int, required=True)
    p.add_argument("--variants", type=int, default=8)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-test-shift", action="store_true", help="do not augment test inputs")

    p = sub.add_parser("train", help="train a captioner")
    p.add_argument("--data", nargs="+", required=True, help="one or more dataset directories (concatenated)")
    p.add_argument("--out", required=True)
    _train_options(p)

    p = sub.add_parser("eval", help="caption a split and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--base-checkpoint", default=None, help="base weights for a LoRA-only checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--decode", choices=["greedy", "beam"], default="greedy")
    p.add_argument("--beam-size", type=int, default=3)

    p = sub.add_parser("metrics", help="score prediction JSONL against reference JSONL")
    p.add_argument("--pred", required=True, help='JSONL lines {"id", "caption"}')
    p.add_argument("--refs", required=True, help='JSONL lines {"id", "captions", ["category"]}')
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="CIDEr-D for every non-empty fine-tuned module subset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2])
    _train_options(p)

    p = sub.add_parser("study-aug", help="base vs. base+synthetic training data")
    p.add_argument("--base", nargs="+", required=True)
    p.add_argument("--synthetic", nargs="+", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2])
    _train_options(p)

    p = sub.add_parser("study-encoder", help="joint vs. two-stream encoding")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2])
    _train_options(p)
    return ap


# -- commands --------------------------------------------------------------
def cmd_gen_data(args) -> None:
    cfg = DatasetConfig(
        n_originals=args.originals,
        variants_per_original=args.variants,
        test_fraction=args.test_fraction,
        val_fraction=args.val_fraction,
        seed=args.seed,
        test_shift=not args.no_test_shift,
    )
    manifest = build_dataset(cfg, args.out)
    write_run_manifest(args.out, "gen-data", manifest.config)
    print(summary_table(manifest))


def cmd_train(args) -> None:
    for d in args.data:
        if not Path(d).is_dir():
            raise CliError(f"dataset directory not found: {d}")
    cfg = _train_config(args, args.data)
    write_run_manifest(args.out, "train", cfg.to_dict())
    res = train(cfg, out_dir=args.out)
    pc = count_params(res.model, trainable_only=True)
    print(f"trained {cfg.steps} steps; final loss {res.losses[-1]:.4f}; trainable params {pc.total}")
    print(f"checkpoint: {Path(args.out) / 'checkpoint.idck'}")


def _read_jsonl(path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {p}")
    rows = []
    with p.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                raise CliError(f"{p}:{lineno}: malformed JSON line") from None
            if "id" not in rows[-1]:
                raise CliError(f"{p}:{lineno}: record has no id")
    return rows


def _write_predictions(path, preds: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k in preds:
            fh.write(json.dumps({"id": k, "caption": preds[k]}, ensure_ascii=False) + "\n")


def cmd_eval(args) -> None:
    if not Path(args.checkpoint).is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    model, header = load_checkpoint(args.checkpoint, base=args.base_checkpoint)
    vocab = Vocab.from_tokens(header["vocab"])
    ds = load_dataset(args.data)
    ev = evaluate(model, vocab, ds, args.split, args.decode, args.beam_size)
    out = Path(args.out)
    write_run_manifest(out, "eval", {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split, "decode": args.decode, "beam_size": args.beam_size, "seed": header["config"].get("seed")})
    _write_predictions(out / "predictions.jsonl", ev.predictions)
    ev.report.write(out / "report.csv", out / "report.md")
    print(ev.report.to_markdown(), end="")


def cmd_metrics(args) -> None:
    preds_rows = _read_jsonl(args.pred)
    refs_rows = _read_jsonl(args.refs)
    preds = {}
    for r in preds_rows:
        if "caption" not in r:
            raise CliError(f"prediction {r['id']} has no caption")
        preds[r["id"]] = r["caption"]
    samples = []
    for r in refs_rows:
        caps = r.get("captions")
        if not isinstance(caps, list) or not caps:
            raise CliError(f"reference {r['id']} has no captions list")
        samples.append({"id": r["id"], "captions": caps, "category": r.get("category", "all")})
    report = corpus_evaluate(preds, samples, list(CATEGORIES) + ["all"])
    out = Path(args.out)
    write_run_manifest(out, "metrics", {"pred": str(args.pred), "refs": str(args.refs), "seed": None})
    report.write(out / "report.csv", out / "report.md")
    print(report.to_markdown(), end="")


def cmd_ablate(args) -> None:
    cfg = _train_config(args, [args.data])
    out = Path(args.out)
    write_run_manifest(out, "ablate", {**cfg.to_dict(), "seeds": args.seeds})
    rows = run_ablation(cfg, seeds=args.seeds, out_csv=out / "ablation.csv", cache=RunCache())
    for r in rows:
        print(f"{r['label']:<16} CIDEr-D mean {r['mean']:.4f}")


def cmd_study_aug(args) -> None:
    cfg = _train_config(args, args.base, args.eval_data)
    out = Path(args.out)
    write_run_manifest(out, "study-aug", {**cfg.to_dict(), "synthetic": args.synthetic, "seeds": args.seeds})
    rows = run_augmentation_study(cfg, args.base, args.synthetic, args.eval_data, seeds=args.seeds, out_csv=out / "augmentation.csv")
    for r in rows:
        print(f"{r['setting']:<16} pairs {r['n_train']:>6}  CIDEr-D mean {r['mean']:.4f}  ({r['improvement_pct']:+.2f}%)")


def cmd_study_encoder(args) -> None:
    cfg = _train_config(args, [args.data])
    out = Path(args.out)
    write_run_manifest(out, "study-encoder", {**cfg.to_dict(), "seeds": args.seeds})
    rows = run_encoder_comparison(cfg, seeds=args.seeds, out_csv=out / "encoder.csv")
    for r in rows:
        print(f"{r['encoder_mode']:<11} params {r['n_params']:>8}  CIDEr-D mean {r['mean']:.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "metrics": cmd_metrics,
    "ablate": cmd_ablate,
    "study-aug": cmd_study_aug,
    "study-encoder": cmd_study_encoder,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads()
        COMMANDS[args.command](args)
    except (CliError, DatasetError, MetricsError, TrainingError, CheckpointError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"idclab {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
