"""
Train a small detector and score it
===================================

A short run on synthetic pairs, then micro-averaged metrics on a held-out
split and a colour-coded error map.  White is a hit, black a correct
rejection, green a false alarm and red a miss.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from changekit.config import desk_config
from changekit.data import synthetic_splits
from changekit.metrics import render_confusion, save_png
from changekit.train import evaluate, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 15
splits = synthetic_splits(0, 48, 12, 12, size=64)
cfg = desk_config(epochs=epochs)

result = train(cfg, splits["train"], splits["val"], on_epoch=lambda r: print(f"epoch {r.epoch}: loss {r.train_loss:.4f}, val IoU {r.val_iou:.4f}"))
print("best epoch", result.best_epoch)

m, acc, preds = evaluate(result.model, splits["test"], 64)
print(f"test  OA {m.oa:.4f}  IoU {m.iou:.4f}  F1 {m.f1:.4f}  Rec {m.rec:.4f}  Prec {m.prec:.4f}")

out = Path(tempfile.mkdtemp())
sample = splits["test"][0]
colours = render_confusion(preds[0], sample.mask)
save_png(out / f"{sample.id}.png", colours)
print("error map ->", out / f"{sample.id}.png", "| distinct colours:", len(np.unique(colours.reshape(-1, 3), axis=0)))
