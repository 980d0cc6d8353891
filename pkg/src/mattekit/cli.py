"""Command-line entry points: corpus synthesis, training, evaluation,
single-image matting, the HTTP service, and checkpoint inspection.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "MAM_DATA_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _default_corpus_dir():
    root = os.environ.get(DATA_DIR_ENV)
    return str(Path(root) / "corpus") if root else None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mattekit",
                     description="Prompt-driven image matting at desk scale")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic blob corpus")
    p.add_argument("--out", default=_default_corpus_dir(),
                   required=_default_corpus_dir() is None,
                   help=f"output directory (default: ${DATA_DIR_ENV}/corpus)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("train", help="run the training loop from a JSON config")
    p.add_argument("--config", required=True, help="TrainConfig as JSON")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--dataset", default=_default_corpus_dir(),
                   required=_default_corpus_dir() is None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", choices=("box", "point"), default="box")
    p.add_argument("--policy", choices=("mask", "os8"), default="os8")
    p.add_argument("--target", type=int, default=64)
    p.add_argument("--split", default="eval")
    p.add_argument("--out", default="report.json")

    p = sub.add_parser("matte", help="matte one image from a box or point prompt")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--box", help="x0,y0,x1,y1 in source pixels")
    p.add_argument("--point", help="x,y in source pixels")
    p.add_argument("--candidates", help="guidance import directory")
    p.add_argument("--alpha", help="ground-truth alpha PNG for oracle guidance")
    p.add_argument("--out", required=True, help="output matte PNG")
    p.add_argument("--depth", type=int, choices=(8, 16), default=8)
    p.add_argument("--composite", help="background PNG to composite over")
    p.add_argument("--composite-out", help="output path for the composite")
    p.add_argument("--policy", choices=("mask", "os8"), default="os8")
    p.add_argument("--target", type=int, default=64)

    p = sub.add_parser("serve", help="start the interactive HTTP service")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", type=int, default=64)
    p.add_argument("--policy", choices=("mask", "os8"), default="os8")
    p.add_argument("--guidance-dir")
    p.add_argument("--alpha-dir")
    p.add_argument("--ttl", type=float, default=3600.0)
    p.add_argument("--ui-dir", help="serve a built web UI under /ui")

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint header info")
    p.add_argument("checkpoint")
    return parser


def _parse_ints(text, n, what):
    parts = text.split(",")
    if len(parts) != n:
        raise ValueError(f"{what} needs {n} comma-separated integers")
    return [int(v) for v in parts]


def cmd_synth(args) -> int:
    from .training import generate_corpus
    manifest = generate_corpus(args.out, count=args.count, seed=args.seed,
                               size=args.size)
    print(f"wrote {args.count} items to {args.out} "
          f"({len(manifest['train'])} train / {len(manifest['eval'])} eval)")
    return 0


def cmd_train(args) -> int:
    from .training import TrainConfig, train_run
    cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    ckpt = train_run(cfg)
    out = Path(cfg.out_dir) if cfg.out_dir else Path(".")
    print(f"finished at iteration {ckpt.iteration}; "
          f"checkpoint: {out / 'ckpt_final.mam'}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .inference import InferenceConfig, MergePolicy
    from .metrics import evaluate_dataset
    ckpt = load_checkpoint(args.checkpoint)
    cfg = InferenceConfig(target=args.target,
                          policy=MergePolicy(base=args.policy))
    report = evaluate_dataset(args.dataset, ckpt, prompt_mode=args.prompt,
                              inference_cfg=cfg, split=args.split)
    Path(args.out).write_text(report.to_json())
    print(report.to_table())
    print(f"report written to {args.out}")
    return 0


def _resolve_candidates(args, image, alpha):
    from .guidance import OracleConfig, load_guidance, oracle_candidates
    from .service import fallback_candidates
    if args.candidates:
        stem = Path(args.image).stem
        cands, _ = load_guidance(args.candidates, stem)
        if cands:
            return cands
        print(f"warning: no candidates for stem {stem!r} under "
              f"{args.candidates}; falling back", file=sys.stderr)
    if alpha is not None:
        return oracle_candidates([alpha], OracleConfig(r_max=0, jitter=0.0))
    return fallback_candidates(image)


def cmd_matte(args) -> int:
    from .checkpoint import load_checkpoint
    from .guidance import Prompt
    from .imageops import (Box, ImageRGB, composite, read_alpha,
                           read_image, resize_plane, write_alpha, write_image)
    from .inference import InferenceConfig, MergePolicy, matte_from_prompt

    if bool(args.box) == bool(args.point):
        _usage_error("matte needs exactly one of --box or --point")
    image = read_image(args.image)
    alpha = read_alpha(args.alpha) if args.alpha else None
    ckpt = load_checkpoint(args.checkpoint)
    if args.box:
        x0, y0, x1, y1 = _parse_ints(args.box, 4, "--box")
        prompt = Prompt(kind="box", box=Box(x0, y0, x1, y1))
    else:
        x, y = _parse_ints(args.point, 2, "--point")
        prompt = Prompt(kind="point", point=(x, y))
    candidates = _resolve_candidates(args, image, alpha)
    cfg = InferenceConfig(target=args.target,
                          policy=MergePolicy(base=args.policy))
    matte, selected, _ = matte_from_prompt(image, prompt, candidates, ckpt, cfg)
    write_alpha(args.out, matte, depth=args.depth)
    print(f"candidate {selected.id} -> {args.out}")
    if args.composite:
        bg = read_image(args.composite)
        if (bg.height, bg.width) != (image.height, image.width):
            bg = ImageRGB(np.clip(np.stack(
                [resize_plane(p, image.height, image.width)
                 for p in bg.planes]), 0, 1))
        out_path = args.composite_out or \
            str(Path(args.out).with_suffix("")) + "_composite.png"
        write_image(out_path, composite(image, bg, matte))
        print(f"composite -> {out_path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    app = create_app(args.checkpoint, target=args.target,
                     default_policy=args.policy,
                     guidance_dir=args.guidance_dir, alpha_dir=args.alpha_dir,
                     ttl_seconds=args.ttl, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_inspect(args) -> int:
    from .checkpoint import describe_checkpoint
    info = describe_checkpoint(args.checkpoint)
    entries = info["entries"]
    split = {"encoder": 0, "m2m": 0, "optim": 0, "other": 0}
    for e in entries:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        for key in split:
            if e["path"].startswith(key):
                split[key] += count
                break
        else:
            split["other"] += count
    iteration = next((e for e in entries if e["path"] == "state/iteration"), None)
    print(json.dumps({"config": info["config"],
                      "trainable_m2m": split["m2m"],
                      "trainable_encoder": split["encoder"],
                      "optimizer_values": split["optim"],
                      "arrays": len(entries),
                      "payload_bytes": info["payload_bytes"]}, indent=1,
                     sort_keys=True))
    return 0


class _UsageError(Exception):
    pass


def _usage_error(message):
    raise _UsageError(message)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
                "matte": cmd_matte, "serve": cmd_serve,
                "inspect-checkpoint": cmd_inspect}
    try:
        return handlers[args.command](args)
    except _UsageError as exc:
        print(f"mattekit: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"mattekit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
