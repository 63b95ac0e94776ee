"""Toy training loop: triplet sampling, two learning-rate groups, step decay.

After every epoch the parameters and optimiser state are rounded to float32,
the precision the checkpoint stores, so a run resumed from a checkpoint
continues exactly like one that never stopped.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .errors import DataError
from .head import loss as loss_fn
from .model import RGBTModel
from .synth import find_sequences
from .tensor import Tape
from .tracker import CropWindow, crop_square

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.btmt"
LOG_NAME = "train_log.csv"


# -- sampling --------------------------------------------------------------

def sample_frames(rng, n, max_gap):
    """Frame indices static < dynamic < search, with search - dynamic <= max_gap."""
    if n < 3:
        raise DataError(f"sequences need at least 3 frames for training, got {n}")
    c = int(rng.integers(2, n))
    b = int(rng.integers(max(1, c - max_gap), c))
    a = int(rng.integers(0, b))
    return a, b, c


def jittered_window(rng, box, factor, centre_jitter, scale_jitter):
    x, y, w, h = box
    side = factor * math.sqrt(w * h) * math.exp(rng.uniform(-scale_jitter, scale_jitter))
    dx, dy = rng.uniform(-centre_jitter, centre_jitter, size=2) * side
    return CropWindow(x + w / 2 + dx, y + h / 2 + dy, side)


class TripletSampler:
    """Draws (static, dynamic, search) crops and the search-crop target box."""

    def __init__(self, sequences, cfg):
        if not sequences:
            raise DataError("no training sequences found")
        self.sequences = sequences
        self.cfg = cfg

    def batch(self, rng, size):
        c = self.cfg
        out = {k: [] for k in ("zr", "dr", "xr", "zt", "dt", "xt", "gt")}
        for _ in range(size):
            seq = self.sequences[int(rng.integers(len(self.sequences)))]
            a, b, s = sample_frames(rng, len(seq), c.max_frame_gap)
            for key, idx, kind in (("z", a, "t"), ("d", b, "t"), ("x", s, "s")):
                rgb, tir = seq.frame(idx)
                if kind == "t":
                    win = jittered_window(rng, seq.gt[idx], c.template_factor, 0.05, 0.05)
                    px = c.template_size
                else:
                    win = jittered_window(rng, seq.gt[idx], c.search_factor, c.centre_jitter,
                                          c.scale_jitter)
                    px = c.search_size
                    out["gt"].append(np.clip(win.to_crop(seq.gt[idx]), 1e-3, 1.0))
                out[key + "r"].append(crop_square(rgb, win, px))
                out[key + "t"].append(crop_square(tir, win, px))
        arr = {k: np.stack(v) for k, v in out.items()}
        return ((arr["zr"], arr["dr"], arr["xr"]), (arr["zt"], arr["dt"], arr["xt"]), arr["gt"])


# -- optimisation ----------------------------------------------------------

@dataclass
class Group:
    names: list
    params: list
    lr: float


class Optimizer:
    """Momentum SGD (L2 decay on matrices) or AdamW, over named parameter groups."""

    def __init__(self, model, cfg):
        self.cfg = cfg
        named = list(model.named_parameters())
        backbone = {id(p) for p in model.backbone_params()}
        if cfg.bridge_lr_group == "backbone":
            backbone |= {id(p) for n, p in named if n.startswith("backbone.bridges.")}
        self.groups = [
            Group([n for n, p in named if id(p) in backbone],
                  [p for _, p in named if id(p) in backbone], cfg.lr_backbone),
            Group([n for n, p in named if id(p) not in backbone],
                  [p for _, p in named if id(p) not in backbone], cfg.lr),
        ]
        self.state = {n: {} for n, _ in named}
        self.step_count = 0

    def lr_scale(self, epoch):
        decay_epoch = int(round(self.cfg.lr_decay_at * self.cfg.epochs))
        return self.cfg.lr_decay_factor if epoch >= decay_epoch else 1.0

    def clip(self):
        limit = self.cfg.grad_clip
        if limit <= 0:
            return
        total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for g in self.groups for p in g.params
                              if p.grad is not None))
        if total > limit:
            for g in self.groups:
                for p in g.params:
                    if p.grad is not None:
                        p.grad = p.grad * (limit / total)

    def step(self, epoch):
        c = self.cfg
        scale = self.lr_scale(epoch)
        self.step_count += 1
        t = self.step_count
        for g in self.groups:
            lr = g.lr * scale
            for name, p in zip(g.names, g.params):
                if p.grad is None:
                    continue
                st = self.state[name]
                decay = c.weight_decay if p.data.ndim >= 2 else 0.0
                if c.optimizer == "sgd":
                    grad = p.grad + decay * p.data
                    m = st.get("m")
                    m = grad if m is None else c.momentum * m + grad
                    st["m"] = m
                    p.data = p.data - lr * m
                else:
                    b1, b2, eps = c.momentum, 0.999, 1e-8
                    m = st.get("m", np.zeros_like(p.data))
                    v = st.get("v", np.zeros_like(p.data))
                    m = b1 * m + (1 - b1) * p.grad
                    v = b2 * v + (1 - b2) * p.grad ** 2
                    st["m"], st["v"] = m, v
                    mhat = m / (1 - b1 ** t)
                    vhat = v / (1 - b2 ** t)
                    p.data = p.data * (1 - lr * decay) - lr * mhat / (np.sqrt(vhat) + eps)

    def records(self):
        out = {"optim.step": np.array(float(self.step_count))}
        for name, st in self.state.items():
            for k in sorted(st):
                out[f"optim.{k}.{name}"] = st[k]
        return out

    def load_records(self, records):
        self.step_count = int(records.get("optim.step", 0.0))
        for name, st in self.state.items():
            st.clear()
            for k in ("m", "v"):
                key = f"optim.{k}.{name}"
                if key in records:
                    st[k] = records[key].copy()


def snap_float32(model, opt):
    for p in model.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)
    for st in opt.state.values():
        for k in st:
            st[k] = st[k].astype(np.float32).astype(np.float64)


# -- driver ----------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    lr: float
    lr_backbone: float
    loss: float
    cls: float
    giou: float
    l1: float


def epoch_rng(seed, epoch):
    ss = np.random.SeedSequence([int(seed), 7919, int(epoch)])
    return np.random.Generator(np.random.Philox(int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))))


def train_step(model, opt, batch, epoch):
    rgb, tir, gt = batch
    model.zero_grad()
    with Tape() as tape:
        out, _ = model.forward(rgb, tir)
        parts = loss_fn(out, gt, model.cfg.lambda_giou, model.cfg.lambda_l1)
        tape.backward(parts.total)
    opt.clip()
    opt.step(epoch)
    return parts.floats()


def save_state(path, model, opt, epoch):
    rec = ckpt.model_records(model)
    rec.update(opt.records())
    rec["train.epoch"] = np.array(float(epoch))
    ckpt.save(path, rec)


def train(cfg, data_dir, out_dir, resume=True, epochs=None, progress=None):
    """Train on every sequence under ``data_dir``; writes checkpoint and CSV log to ``out_dir``.

    ``epochs`` stops early (after that many total epochs) without changing the
    schedule, which is what resuming relies on. Returns the model and per-epoch stats.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sampler = TripletSampler(find_sequences(data_dir), cfg)
    model = RGBTModel(cfg.model_config())
    opt = Optimizer(model, cfg)
    history, start = [], 0
    ck_path, log_path = out / CHECKPOINT_NAME, out / LOG_NAME
    if resume and ck_path.exists():
        rec = ckpt.load(ck_path)
        ckpt.load_into(model, rec)
        opt.load_records(rec)
        start = int(rec.get("train.epoch", 0.0))
        if log_path.exists():
            with open(log_path) as f:
                history = [EpochStats(int(r["epoch"]), *(float(r[k]) for k in
                           ("lr", "lr_backbone", "loss", "cls", "giou", "l1")))
                           for r in csv.DictReader(f)][:start]
        log.info("resuming from epoch %d", start)
    else:
        snap_float32(model, opt)

    stop = cfg.epochs if epochs is None else min(epochs, cfg.epochs)
    steps = max(1, cfg.samples_per_epoch // cfg.batch_size)
    for epoch in range(start, stop):
        rng = epoch_rng(cfg.seed, epoch)
        acc = np.zeros(4)
        t0 = time.perf_counter()
        for _ in range(steps):
            acc += train_step(model, opt, sampler.batch(rng, cfg.batch_size), epoch)
        acc /= steps
        scale = opt.lr_scale(epoch)
        history.append(EpochStats(epoch + 1, cfg.lr * scale, cfg.lr_backbone * scale, *acc))
        snap_float32(model, opt)
        save_state(ck_path, model, opt, epoch + 1)
        write_log(log_path, history)
        log.info("epoch %d/%d loss %.5f (%.1fs)", epoch + 1, cfg.epochs, acc[0],
                 time.perf_counter() - t0)
        if progress:
            progress(history[-1])
    return model, history


def write_log(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "lr", "lr_backbone", "loss", "cls", "giou", "l1"])
        for s in history:
            w.writerow([s.epoch, repr(s.lr), repr(s.lr_backbone)]
                       + [f"{v:.8f}" for v in (s.loss, s.cls, s.giou, s.l1)])


def load_model(cfg, path):
    model = RGBTModel(cfg.model_config())
    ckpt.load_into(model, ckpt.load(path))
    return model
