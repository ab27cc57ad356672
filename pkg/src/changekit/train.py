"""Training, evaluation and the CSDW/LED ablation matrix."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig
from .data import SamplePair, augment, stack
from .infer import slide_infer
from .metrics import ConfusionAccumulator, MetricSet
from .model import ChangeDetector
from .tensor import ParamStore

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def lr_at(step: int, total: int, base: float, schedule: str = "constant", warmup: int = 0) -> float:
    """Learning rate for 0-based ``step`` of ``total``."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if schedule == "constant":
        return base
    if schedule == "cosine":
        span = max(total - warmup, 1)
        return 0.5 * base * (1.0 + math.cos(math.pi * (step - warmup) / span))
    raise ValueError(f"unknown lr schedule {schedule!r}")


class AdamW:
    """Adaptive moments with weight decay decoupled from the gradient."""

    def __init__(self, store: ParamStore, lr=1e-3, betas=(0.9, 0.999), weight_decay=1e-2, eps=1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            slots = self.store.state.setdefault(name, {})
            m = slots.get("m")
            if m is None:
                m = slots["m"] = np.zeros_like(p.data)
                slots["v"] = np.zeros_like(p.data)
            v = slots["v"]
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def clip_grad_norm(self, max_norm: float) -> float:
        """Rescale all gradients together so their joint L2 norm is at most
        ``max_norm``; returns the norm before clipping."""
        grads = [p.grad for p in self.store.values() if p.grad is not None]
        total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if total > max_norm:
            scale = max_norm / (total + 1e-12)
            for g in grads:
                g *= scale
        return total

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, slots in self.store.state.items():
            for key, arr in slots.items():
                out[f"{key}/{name}"] = arr.copy()
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.t = step
        for key, arr in arrays.items():
            slot, name = key.split("/", 1)
            self.store.state.setdefault(name, {})[slot] = np.array(arr, dtype=self.store.dtype)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_iou: float
    seconds: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: ChangeDetector
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    data_digest: str = ""


def batch_schedule(n: int, epochs: int, batch_size: int, seed: int):
    """Yield (epoch, sample indices, augmentation seeds) for every step.

    Depends only on ``seed`` and the split size, so runs that differ in model
    configuration see identical sample streams.
    """
    rng = np.random.default_rng([seed, 7919])
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield epoch, idx, [(seed, epoch, int(i)) for i in idx]


def predict_batches(model: ChangeDetector, samples: Sequence[SamplePair], batch_size: int = 8) -> list[np.ndarray]:
    preds = []
    for start in range(0, len(samples), batch_size):
        a, b, _ = stack(samples[start : start + batch_size])
        preds.extend(model.predict(a, b))
    return preds


def evaluate(
    model: ChangeDetector,
    samples: Sequence[SamplePair],
    patch: int | None = None,
    stride: int | None = None,
    batch_size: int = 8,
) -> tuple[MetricSet, ConfusionAccumulator, list[np.ndarray]]:
    """Micro-averaged metrics over ``samples``.

    Images larger than ``patch`` go through sliding-window inference; the
    rest are predicted whole in batches.
    """
    acc = ConfusionAccumulator()
    whole = [s for s in samples if patch is None or s.mask.shape[0] <= patch and s.mask.shape[1] <= patch]
    whole_ids = {id(s) for s in whole}
    by_id = {}
    if whole:
        # group by shape so batches stack
        shapes: dict[tuple, list[SamplePair]] = {}
        for s in whole:
            shapes.setdefault(s.mask.shape, []).append(s)
        for group in shapes.values():
            for s, p in zip(group, predict_batches(model, group, batch_size)):
                by_id[id(s)] = p
    preds = []
    for s in samples:
        p = by_id[id(s)] if id(s) in whole_ids else slide_infer(model, s.img_a, s.img_b, patch, stride, batch_size)
        acc.update(p, s.mask, key=s.id)
        preds.append(p)
    return acc.result(), acc, preds


def train(
    cfg: RunConfig,
    train_set: Sequence[SamplePair],
    val_set: Sequence[SamplePair],
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train from a seeded init; keep the parameters with the best validation IoU."""
    if not train_set or not val_set:
        raise ValueError("training and validation splits must be non-empty")
    model = ChangeDetector(cfg.model, seed=cfg.seed)
    o = cfg.optim
    opt = AdamW(model.store, lr=o.lr, betas=tuple(o.betas), weight_decay=o.weight_decay, eps=o.eps)

    history: list[EpochRecord] = []
    best = (-math.inf, -1, None, None, 0)
    digest = hashlib.sha256()
    losses: list[float] = []
    t0 = time.perf_counter()
    current = 0

    def close_epoch(epoch: int):
        nonlocal best, losses, t0
        val_iou = evaluate(model, val_set, cfg.patch_size, cfg.stride, cfg.batch_size)[0].iou
        rec = EpochRecord(epoch, float(np.mean(losses)), val_iou, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d  loss %.4f  val IoU %.4f  (%.1fs)", epoch, rec.train_loss, val_iou, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
        if val_iou > best[0]:
            best = (val_iou, epoch, model.store.snapshot(), opt.state_arrays(), opt.t)
        losses, t0 = [], time.perf_counter()

    total_steps = cfg.epochs * math.ceil(len(train_set) / cfg.batch_size)
    for epoch, idx, seeds in batch_schedule(len(train_set), cfg.epochs, cfg.batch_size, cfg.seed):
        opt.lr = lr_at(opt.t, total_steps, o.lr, o.schedule, o.warmup_steps)
        if epoch != current:
            close_epoch(current)
            current = epoch
        batch = [train_set[i] for i in idx]
        if cfg.data.augment:
            batch = [augment(s, sd, cfg.data.photo_prob) for s, sd in zip(batch, seeds)]
        a, b, m = stack(batch)
        # fingerprint of exactly what the optimiser saw, for cross-run parity
        for arr in (a, b, m):
            digest.update(np.ascontiguousarray(arr).tobytes())
        loss = model.loss(a, b, m)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss {value} at epoch {epoch} (step {opt.t + 1}); try a lower learning rate"
            )
        losses.append(value)
        model.store.zero_grad()
        loss.backward()
        if o.clip_norm:
            opt.clip_grad_norm(o.clip_norm)
        opt.step()
    if cfg.epochs > 0:
        close_epoch(current)

    best_iou, best_epoch, params, opt_state, step = best
    if params is not None:
        model.store.load(params)
    ckpt = Checkpoint(
        params=model.store.snapshot(),
        config=cfg,
        opt_state=opt_state or {},
        epoch=best_epoch,
        best_val_iou=float(best_iou) if best_epoch >= 0 else float("nan"),
        step=step,
        extra={"final_loss": history[-1].train_loss if history else None, "data_digest": digest.hexdigest()},
    )
    return TrainResult(ckpt, model, history, best_epoch, digest.hexdigest())


def model_from_checkpoint(ckpt: Checkpoint) -> ChangeDetector:
    model = ChangeDetector(ckpt.config.model, seed=ckpt.config.seed)
    model.store.load(ckpt.params)
    return model


ABLATION_ROWS = ((False, False), (True, False), (False, True), (True, True))


@dataclass
class AblationRow:
    csdw: bool
    led: bool
    iou: float
    val_iou: float
    data_digest: str
    metrics: MetricSet


def ablate(
    base: RunConfig,
    train_set: Sequence[SamplePair],
    val_set: Sequence[SamplePair],
    test_set: Sequence[SamplePair] | None = None,
    on_epoch: Callable[[str, EpochRecord], None] | None = None,
) -> list[AblationRow]:
    """Train and score the four (CSDW, LED) on/off combinations from one seed."""
    rows = []
    eval_set = test_set if test_set else val_set
    for csdw, led in ABLATION_ROWS:
        model_cfg = dataclasses.replace(base.model, csdw_enabled=csdw, led_enabled=led)
        cfg = dataclasses.replace(base, model=model_cfg)
        tag = f"csdw={int(csdw)} led={int(led)}"
        cb = (lambda rec, tag=tag: on_epoch(tag, rec)) if on_epoch else None
        result = train(cfg, train_set, val_set, on_epoch=cb)
        m, _, _ = evaluate(result.model, eval_set, cfg.patch_size, cfg.stride, cfg.batch_size)
        rows.append(AblationRow(csdw, led, m.iou, result.checkpoint.best_val_iou, result.data_digest, m))
    return rows


def write_ablation_csv(path: str | Path, rows: Sequence[AblationRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mark = {True: "√", False: "×"}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("Encoder (CSDW)", "Decoder (LED)", "IoU", "val_IoU", "data_digest"))
        for r in rows:
            w.writerow((mark[r.csdw], mark[r.led], f"{100 * r.iou:.2f}", f"{100 * r.val_iou:.2f}", r.data_digest[:16]))
