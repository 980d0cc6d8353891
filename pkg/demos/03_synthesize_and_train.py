"""Generate a small blob corpus and train the refinement network briefly.

A real run uses the desk preset (2000 iterations); this demo does 150 so it
finishes in under a minute while still showing the loss fall and the
weight-map schedule switch.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from mattekit.training import TrainConfig, generate_corpus, lr_at, train_run

workdir = Path(tempfile.mkdtemp(prefix="mattekit-demo-"))
corpus = workdir / "corpus"
print(f"working under {workdir}")

manifest = generate_corpus(corpus, count=40, seed=7, size=64)
print(f"corpus: {len(manifest['train'])} train / {len(manifest['eval'])} eval items")

preset = TrainConfig.desk_preset(dataset_dir=str(corpus),
                                 out_dir=str(workdir / "run"), seed=7)
cfg = TrainConfig.from_dict({**preset.to_dict(),
                             "total": 150, "warmup": 30, "batch_size": 4,
                             "checkpoint_every": 75})
print(f"learning rate: lr(0)={lr_at(0, cfg)}, lr(warmup)={lr_at(cfg.warmup, cfg)}, "
      f"lr(total)={lr_at(cfg.total, cfg):.2e}")

ckpt = train_run(cfg)

log = [json.loads(line) for line in
       (workdir / "run" / "train_log.jsonl").read_text().splitlines()]
first = np.mean([r["loss"] for r in log[:15]])
last = np.mean([r["loss"] for r in log[-15:]])
print(f"loss: first-15 mean {first:.4f} -> last-15 mean {last:.4f}")
print(f"checkpoints: {sorted(p.name for p in (workdir / 'run').glob('*.mam'))}")
print(f"final iteration: {ckpt.iteration}; "
      f"m2m parameters: {ckpt.m2m.params.total_count()}")
