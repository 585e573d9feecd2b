"""Triplet-loss training: sampling, augmentation, Adam, and the loop.

An epoch is ceil(train_sketches / batch_size) batches of freshly sampled
triplets (anchor sketch, its own logo, a random other logo). RNG streams are
keyed per epoch as default_rng([seed, stream, epoch]), so a run of N epochs
and the same N epochs done in chunks (passing epoch_offset and a shared
optimizer) consume identical randomness.
"""

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, backward
from . import ops
from .images import bilinear_resize, decode_image
from .model import LogoNetModel, embed_triplet

_SAMPLE_STREAM = 101
_AUGMENT_STREAM = 202


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-4
    margin: float = 0.2
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    crop_fraction: float = 0.9
    hflip_prob: float = 0.5

    def __post_init__(self):
        problems = []
        if self.epochs < 0:
            problems.append(f"epochs {self.epochs} < 0")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate {self.learning_rate} <= 0")
        if self.margin < 0:
            problems.append(f"margin {self.margin} < 0")
        if self.batch_size < 1:
            problems.append(f"batch_size {self.batch_size} < 1")
        if not 0 < self.crop_fraction <= 1:
            problems.append(f"crop_fraction {self.crop_fraction} outside (0,1]")
        if not 0 <= self.hflip_prob <= 1:
            problems.append(f"hflip_prob {self.hflip_prob} outside [0,1]")
        if self.seed < 0:
            problems.append(f"seed {self.seed} < 0")
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))


@dataclass(frozen=True)
class Triplet:
    anchor_sketch_id: str
    positive_logo_id: str
    negative_logo_id: str


def triplet_loss(e_s: Tensor, e_plus: Tensor, e_minus: Tensor,
                 margin: float) -> Tensor:
    """Mean over the batch of max(0, margin + D(s,p+) - D(s,p-)).

    Rows already satisfying the margin contribute exactly zero gradient.
    """
    if not (e_s.shape == e_plus.shape == e_minus.shape):
        raise ValueError(f"embedding shapes differ: {e_s.shape}, "
                         f"{e_plus.shape}, {e_minus.shape}")
    if margin < 0:
        raise ValueError(f"margin {margin} < 0")
    d_pos = ops.euclidean_distance(e_s, e_plus)
    d_neg = ops.euclidean_distance(e_s, e_minus)
    return ops.tensor_mean(ops.relu(ops.add(ops.sub(d_pos, d_neg), margin)))


def sample_triplets(manifest, split: str, rng):
    """Endless uniform triplet stream over the given split."""
    anchors = manifest.sketches_in(split)
    if not anchors:
        raise ValueError(f"split {split!r} has no sketches to sample")
    instance_ids = [logo.instance_id for logo in manifest.logos]
    if len(instance_ids) < 2:
        raise ValueError(f"need at least 2 instances, got {len(instance_ids)}")
    index_of = {iid: i for i, iid in enumerate(instance_ids)}
    while True:
        anchor = anchors[int(rng.integers(len(anchors)))]
        pos = index_of[anchor.instance_id]
        neg = int(rng.integers(len(instance_ids) - 1))
        if neg >= pos:
            neg += 1
        yield Triplet(anchor.sketch_id, anchor.instance_id, instance_ids[neg])


def augment(image: Tensor, cfg: TrainConfig, rng) -> Tensor:
    """Random crop resized back to full size, then maybe a horizontal flip.

    Draws happen in a fixed order regardless of the config so RNG streams
    stay aligned across parameter choices.
    """
    data = image.data
    s = data.shape[1]
    side = int(round(cfg.crop_fraction * s))
    oy = int(rng.integers(0, s - side + 1))
    ox = int(rng.integers(0, s - side + 1))
    if side == s:
        out = data.copy()
    else:
        crop = data[:, oy:oy + side, ox:ox + side].astype(np.float64)
        out = bilinear_resize(crop, s, s).astype(np.float32)
    if rng.random() < cfg.hflip_prob:
        out = out[:, :, ::-1].copy()
    return Tensor(out)


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} has no gradient; run backward first")
            g = p.grad.astype(p.data.dtype, copy=False)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @classmethod
    def for_model(cls, model: LogoNetModel, cfg: TrainConfig) -> "Adam":
        return cls([t for _, t in model.parameters()], lr=cfg.learning_rate,
                   beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)


class ImageCache:
    """Base images decoded once per path at the model's input geometry."""

    def __init__(self, channels: int, size: int):
        self.channels, self.size = channels, size
        self._store: dict = {}

    def get(self, path) -> Tensor:
        key = str(path)
        if key not in self._store:
            self._store[key] = decode_image(path, self.channels, self.size)
        return self._store[key]


def format_log_csv(rows) -> str:
    lines = ["epoch,mean_loss,val_acc1,wall_seconds"]
    for r in rows:
        val = "" if r["val_acc1"] is None else f"{r['val_acc1']:.4f}"
        lines.append(f"{r['epoch']},{r['mean_loss']:.6f},{val},"
                     f"{r['wall_seconds']:.3f}")
    return "\n".join(lines) + "\n"


def train(model: LogoNetModel, manifest, cfg: TrainConfig, *,
          val_every: int = 0, val_split: str = "test",
          optimizer: Optional[Adam] = None, epoch_offset: int = 0,
          cache: Optional[ImageCache] = None):
    """Run cfg.epochs of triplet training in place; returns per-epoch log rows.

    Pass optimizer/epoch_offset/cache back in to continue a run in chunks
    with the same arithmetic as one uninterrupted call.
    """
    train_sketches = manifest.sketches_in("train")
    if not train_sketches and cfg.epochs > 0:
        raise ValueError("training split is empty")
    opt = optimizer if optimizer is not None else Adam.for_model(model, cfg)
    mc = model.config
    cache = cache if cache is not None else ImageCache(mc.input_channels,
                                                       mc.input_size)
    sketch_by_id = {sk.sketch_id: sk for sk in manifest.sketches}
    logo_by_id = {l.instance_id: l for l in manifest.logos}
    steps = max(1, math.ceil(len(train_sketches) / cfg.batch_size)) \
        if train_sketches else 0
    log = []
    for e in range(cfg.epochs):
        epoch = epoch_offset + e
        rng_sample = np.random.default_rng([cfg.seed, _SAMPLE_STREAM, epoch])
        rng_aug = np.random.default_rng([cfg.seed, _AUGMENT_STREAM, epoch])
        stream = sample_triplets(manifest, "train", rng_sample)
        started = time.perf_counter()
        losses = []
        for _ in range(steps):
            branches = ([], [], [])
            for _ in range(cfg.batch_size):
                trip = next(stream)
                sources = (cache.get(sketch_by_id[trip.anchor_sketch_id].path),
                           cache.get(logo_by_id[trip.positive_logo_id].image_path),
                           cache.get(logo_by_id[trip.negative_logo_id].image_path))
                for store, src in zip(branches, sources):
                    store.append(augment(src, cfg, rng_aug).data)
            batches = [Tensor(np.stack(b)) for b in branches]
            e_s, e_p, e_n = embed_triplet(model, *batches)
            loss = triplet_loss(e_s, e_p, e_n, cfg.margin)
            opt.zero_grad()
            backward(loss)
            # attention params of disabled modes take their true (zero) grad
            for _, p in model.parameters():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            losses.append(loss.data.item())
        row = {"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses
               else 0.0, "val_acc1": None,
               "wall_seconds": time.perf_counter() - started}
        if val_every and (epoch + 1) % val_every == 0:
            from .retrieval import evaluate
            report = evaluate(model, manifest, split=val_split, cache=cache)
            row["val_acc1"] = report.overall_acc(1)
        log.append(row)
    return log
