"""``mmdt`` command line: dataset synthesis, training, trace export, evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .classifier import (MMDTClassifier, TraceProvider, finetune, load_classifier,
                         save_classifier)
from .config import RunConfig, load_config
from .data import (SHIFTED_RANGES, DatasetManifest, RecaptureRanges, extract_patches, ingest_dataset,
                   make_synthetic_dataset, write_dataset, write_image)
from .errors import MMDTError
from .evaluation import run_protocol
from .trainer import load_disentangler, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="flat section.key = value config file")
    p.add_argument("--seed", type=int, help="overrides every seed in the config")
    p.add_argument("--out", type=Path, help="output directory")
    return p


def build_parser() -> _Parser:
    common = _common()
    parser = _Parser(prog="mmdt", description="Recapture detection with disentangled forensic traces.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth-data", parents=[common], help="render a synthetic genuine/recaptured dataset")
    p.add_argument("--n", type=int, help="images per class (default: synth.n_per_class)")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--shifted", action="store_true", help="use the shifted recapture parameter ranges")
    p.add_argument("--tag", default="synth", help="domain tag recorded in the manifest")

    p = sub.add_parser("train-disentangle", parents=[common], help="train the trace disentangler")
    p.add_argument("--data", type=Path, required=True, help="dataset root with genuine/ and recaptured/")
    p.add_argument("--val", type=Path, help="validation dataset root")
    p.add_argument("--iterations", type=int, help="overrides train.total_iterations")

    p = sub.add_parser("export-traces", parents=[common], help="materialize (C, T) for a dataset")
    p.add_argument("--model", type=Path, required=True, help="disentangler checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--png", action="store_true", help="also write (x+1)/2 previews")

    p = sub.add_parser("train-mmdt", parents=[common], help="fine-tune the multi-modal classifier")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--val", type=Path)
    _trace_source(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate a classifier on a dataset")
    p.add_argument("--model", type=Path, help="classifier checkpoint (required)")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--train-tag", default="train", help="name of the training domain for the report")
    _trace_source(p)

    p = sub.add_parser("viz-traces", parents=[common], help="write G = resize(C) + T as 8-bit PNGs")
    p.add_argument("--model", type=Path, required=True, help="disentangler checkpoint")
    p.add_argument("--data", type=Path, required=True)
    return parser


def _trace_source(p):
    p.add_argument("--disentangler", type=Path, help="disentangler checkpoint used to compute traces")
    p.add_argument("--traces", type=Path, help="trace cache written by export-traces")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            train=dataclasses.replace(cfg.train, seed=args.seed),
            finetune=dataclasses.replace(cfg.finetune, seed=args.seed),
            recapture=dataclasses.replace(cfg.recapture, seed=args.seed),
        )
    return cfg


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"mmdt {args.command}: --out is required")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _provider(args):
    if args.disentangler is None and args.traces is None:
        return None
    model = load_disentangler(args.disentangler) if args.disentangler is not None else None
    return TraceProvider(model, cache_dir=args.traces)


def _dataset(root: Path) -> DatasetManifest:
    """Prefer the manifest written by synth-data (keeps domain tags); else scan the directory."""
    if (root / "manifest.tsv").is_file():
        return DatasetManifest.load(root / "manifest.tsv", root=root)
    return ingest_dataset(root)


def _needs_traces(modalities) -> bool:
    return any(m != "rgb" for m in modalities)


def cmd_synth_data(args, cfg: RunConfig) -> None:
    out = _require_out(args)
    seed = args.seed if args.seed is not None else 0
    manifest = make_synthetic_dataset(
        args.n if args.n is not None else cfg.synth.n_per_class, seed,
        (args.height or cfg.synth.height, args.width or cfg.synth.width),
        SHIFTED_RANGES if args.shifted else RecaptureRanges(), args.tag)
    write_dataset(manifest, out)
    print(f"wrote {len(manifest.entries)} images to {out}")


def cmd_train_disentangle(args, cfg: RunConfig) -> None:
    out = _require_out(args)
    tc = cfg.train_config()
    if args.iterations is not None:
        tc = dataclasses.replace(tc, total_iterations=args.iterations)
    val = _dataset(args.val) if args.val else None
    result = train(tc, _dataset(args.data), val, out_dir=out)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"iterations": result.state.iteration, "checkpoint": result.state.last_checkpoint, **last}))


def cmd_export_traces(args, cfg: RunConfig) -> None:
    out = _require_out(args)
    manifest = _dataset(args.data)
    provider = TraceProvider(load_disentangler(args.model), cache_dir=out / "cache")
    side = cfg.backbone.image_side
    for entry in manifest.entries:
        image = manifest.load_image(entry)
        stem = Path(entry.image_ref).with_suffix("")
        # both patch grids, so fine-tuning and evaluation can run from the cache alone
        provider(_patch_tensor(extract_patches(image, side, "train")))
        x = _patch_tensor(extract_patches(image, side, "eval"))
        c, t = provider(x)
        dest = out / "traces" / stem
        dest.parent.mkdir(parents=True, exist_ok=True)
        meta = {"image_ref": entry.image_ref, "label": entry.label, "patch_mode": "eval"}
        ckpt.save_checkpoint({"C": c}, dest.with_name(dest.name + ".C"), meta)
        ckpt.save_checkpoint({"T": t}, dest.with_name(dest.name + ".T"), meta)
        if args.png:
            for i in range(len(x)):
                _write_signed(dest.with_name(f"{dest.name}_p{i}_C.png"), c[i])
                _write_signed(dest.with_name(f"{dest.name}_p{i}_T.png"), t[i])
    print(f"exported traces for {len(manifest.entries)} images to {out}")


def cmd_train_mmdt(args, cfg: RunConfig) -> None:
    out = _require_out(args)
    modalities = tuple(cfg.finetune.active)
    provider = _provider(args)
    if provider is None and _needs_traces(modalities):
        raise UsageError("mmdt train-mmdt: trace modalities need --disentangler or --traces")
    torch.manual_seed(cfg.finetune.seed)
    model = MMDTClassifier(dataclasses.replace(cfg.backbone), modalities)
    val = _dataset(args.val) if args.val else None
    with open(out / "finetune.log", "w", encoding="utf-8") as log:
        result = finetune(model, _dataset(args.data), provider, cfg.finetune, val,
                          log=lambda rec: log.write(json.dumps(rec) + "\n"))
    save_classifier(model, out / "classifier.mmdt", provenance=str(args.data))
    print(json.dumps({"best_epoch": result.best_epoch, "epochs": len(result.history)}))


def cmd_eval(args, cfg: RunConfig) -> None:
    if args.model is None:
        raise UsageError("mmdt eval: --model <classifier checkpoint> is required")
    out = _require_out(args)
    model = load_classifier(args.model)
    provider = _provider(args)
    if provider is None and _needs_traces(model.modalities):
        raise UsageError("mmdt eval: trace modalities need --disentangler or --traces")
    manifest = _dataset(args.data)
    run_protocol(model, args.train_tag, manifest, provider, out / "report.jsonl",
                 patch_side=model.config.image_side)


def cmd_viz_traces(args, cfg: RunConfig) -> None:
    out = _require_out(args)
    model = load_disentangler(args.model)
    manifest = _dataset(args.data)
    for entry in manifest.entries:
        x = _patch_tensor(extract_patches(manifest.load_image(entry), model.shapes.side, "eval"))
        with torch.no_grad():
            g = model(x).G
        stem = Path(entry.image_ref).with_suffix("")
        for i in range(len(g)):
            dest = out / stem.parent / f"{stem.name}_p{i}_G.png"
            dest.parent.mkdir(parents=True, exist_ok=True)
            _write_signed(dest, g[i])
    print(f"wrote trace previews for {len(manifest.entries)} images to {out}")


def _patch_tensor(patches) -> torch.Tensor:
    return torch.from_numpy(np.stack(patches).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def _write_signed(path, chw: torch.Tensor) -> None:
    write_image(path, ((chw.permute(1, 2, 0).numpy() + 1.0) / 2.0).clip(0.0, 1.0))


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-disentangle": cmd_train_disentangle,
    "export-traces": cmd_export_traces,
    "train-mmdt": cmd_train_mmdt,
    "eval": cmd_eval,
    "viz-traces": cmd_viz_traces,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (MMDTError, OSError, ValueError, KeyError) as exc:
        print(f"mmdt: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
