"""Losses, metrics, optimiser, schedule, augmentation, synthetic data and the
train/evaluate loops."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import functional as F
from .model import PMTrans, PMTransConfig
from .nn import Parameter
from .serialization import (
    bytes_to_text, load_archive, load_tensor, save_archive, save_tensor, text_to_bytes,
)
from .tensor import ConfigError, ContractError, ShapeError, Tensor, backward, no_grad

log = logging.getLogger(__name__)

CONFIG_ENTRY = "__config__"
METRIC_COLUMNS = ["epoch", "lr", "train_loss", "val_dice", "gates_trainable", "wallclock_s"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SegmentationSample:
    id: str
    image: np.ndarray  # (C, H, W) in [0, 1]
    mask: np.ndarray  # (1, H, W) in {0, 1}

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ShapeError(f"sample {self.id}: image {self.image.shape}, mask {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ShapeError(f"sample {self.id}: image and mask spatial dims differ")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ContractError(f"sample {self.id}: mask is not binary")


@dataclass
class TrainConfig:
    batch_size: int = 2
    base_lr: float = 1e-3
    max_epochs: int = 400
    poly_power: float = 0.9
    gate_freeze_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True
    shift_frac: float = 0.1
    rotate_deg: float = 15.0
    flip_prob: float = 0.5
    val_fraction: float = 0.25
    split_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 <= self.gate_freeze_epochs < self.max_epochs:
            raise ConfigError("gate_freeze_epochs must be in [0, max_epochs)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 while batchnorm trains")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")


# -------------------------------------------------------------------- losses


def bce_loss(pred: Tensor, target, reduction: str = "sum", eps: float = 1e-7) -> Tensor:
    """Pixel-summed (or averaged) binary cross-entropy of probabilities."""
    return F.binary_cross_entropy(pred, target, eps=eps, reduction=reduction)


def bce_report(pred: Tensor, target, eps: float = 1e-7) -> dict[str, float]:
    with no_grad():
        total = float(bce_loss(pred, target, "sum", eps).data)
    return {"sum": total, "mean": total / pred.size}


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour downsampling (top-left sample of each block)."""
    return mask[..., ::factor, ::factor]


def total_supervised_loss(
    outputs: dict[str, Tensor],
    mask: np.ndarray,
    weights: Sequence[float] = (1.0, 0.5, 0.25),
    reduction: str = "mean",
) -> Tensor:
    """Weighted BCE over the full, half and quarter resolution heads.

    Evaluated from the logits (same clamp as :func:`bce_loss`). Zero-weighted terms are not built, so their heads receive no gradient.
    """
    mask = np.asarray(mask)
    terms = []
    for key, factor, wt in zip(("logits_full", "logits_half", "logits_quarter"), (1, 2, 4), weights):
        if wt == 0:
            continue
        if key not in outputs:
            raise ContractError(f"missing output {key}; is the model in training mode?")
        target = downsample_mask(mask, factor).astype(outputs[key].dtype)
        term = F.binary_cross_entropy_with_logits(outputs[key], target, reduction=reduction)
        terms.append(term if wt == 1 else term * wt)
    if not terms:
        raise ContractError("all deep-supervision weights are zero")
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss


# ------------------------------------------------------------------- metrics


def dice_coefficient(pred_mask, true_mask) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1.0."""
    a = np.asarray(pred_mask)
    b = np.asarray(true_mask)
    if a.shape != b.shape:
        raise ShapeError(f"dice: shapes {a.shape} and {b.shape} differ")
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def format_dice(percent: float) -> str:
    return f"{percent:.2f}"


# ---------------------------------------------------------------- optimiser


def adam_step(param, grad, m, v, t, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update with bias correction. ``t`` is the 1-based step index.

    Returns ``(param, m, v)`` as new arrays.
    """
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a parameter list. Parameters without a gradient this step
    (frozen, or off the loss path) are skipped and keep their step count."""

    def __init__(self, params: Iterable[Parameter], betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def step(self, lr: float) -> None:
        lr = float(lr)
        for i, p in enumerate(self.params):
            if not p.requires_grad or p.grad is None:
                continue
            self.t[i] += 1
            new, self.m[i], self.v[i] = adam_step(
                p.data, p.grad.astype(p.dtype, copy=False), self.m[i], self.v[i],
                self.t[i], lr, self.betas, self.eps,
            )
            p.data = new.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def poly_lr(epoch: int, base_lr: float = 1e-3, max_epochs: int = 400, power: float = 0.9) -> float:
    if not 0 <= epoch <= max_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {max_epochs}]")
    return base_lr * (1 - epoch / max_epochs) ** power


# -------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip_h: bool = False
    flip_v: bool = False
    angle_deg: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)  # fraction of (H, W)

    @property
    def is_identity(self) -> bool:
        return not (self.flip_h or self.flip_v or self.angle_deg or any(self.shift))


def draw_augmentation(rng: np.random.Generator, cfg: Optional[TrainConfig] = None) -> AugmentParams:
    cfg = cfg or TrainConfig()
    return AugmentParams(
        flip_h=bool(rng.random() < cfg.flip_prob),
        flip_v=bool(rng.random() < cfg.flip_prob),
        angle_deg=float(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)),
        shift=(float(rng.uniform(-cfg.shift_frac, cfg.shift_frac)),
               float(rng.uniform(-cfg.shift_frac, cfg.shift_frac))),
    )


def _warp(plane: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    h, w = plane.shape
    th = math.radians(params.angle_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    t = np.array([params.shift[0] * h, params.shift[1] * w])
    # output o = R (i - c) + c + t  =>  i = R^T (o - c - t) + c
    inv = rot.T
    offset = centre - inv @ (centre + t)
    return ndimage.affine_transform(plane, inv, offset=offset, order=order, mode="reflect")


def apply_augmentation(sample: SegmentationSample, params: AugmentParams) -> SegmentationSample:
    img, msk = sample.image, sample.mask
    if params.flip_h:
        img, msk = img[:, :, ::-1], msk[:, :, ::-1]
    if params.flip_v:
        img, msk = img[:, ::-1, :], msk[:, ::-1, :]
    if params.angle_deg or any(params.shift):
        img = np.stack([_warp(c.astype(np.float64), params, 1) for c in img]).astype(sample.image.dtype)
        img = np.clip(img, 0, 1)
        msk = np.stack([_warp(c.astype(np.float64), params, 0) for c in msk])
        msk = (msk > 0.5).astype(sample.mask.dtype)
    return SegmentationSample(sample.id, np.ascontiguousarray(img), np.ascontiguousarray(msk))


def augment_sample(sample: SegmentationSample, rng: np.random.Generator,
                   cfg: Optional[TrainConfig] = None) -> SegmentationSample:
    """Random flip, rotation and shift applied identically to image and mask."""
    return apply_augmentation(sample, draw_augmentation(rng, cfg))


# ------------------------------------------------------------ synthetic data


def _synthetic_sample(rng: np.random.Generator, idx: int, h: int, w: int, channels: int) -> SegmentationSample:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    image = 0.2 + 0.05 * rng.standard_normal((channels, h, w))
    # slow illumination gradient so a global threshold is not enough
    gy, gx = rng.uniform(-0.08, 0.08, size=2)
    image += gy * (yy / h - 0.5) + gx * (xx / w - 0.5)
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 7))):
        # semi-axes from H/32 (diameter below H/8) to H/3 (diameter above H/2)
        a = h * math.exp(rng.uniform(math.log(1 / 32), math.log(1 / 3)))
        b = a * rng.uniform(0.5, 1.0)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        th = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * math.cos(th) + dy * math.sin(th)) / a
        v = (-dx * math.sin(th) + dy * math.cos(th)) / b
        rho = np.sqrt(u * u + v * v)
        inside = rho <= 1
        mask |= inside
        # (1 - rho) * b approximates the signed pixel distance to the boundary
        edge = 1 / (1 + np.exp(-(1 - rho) * b * rng.uniform(0.8, 2.0)))
        image += rng.uniform(0.35, 0.6) * edge
    image = np.clip(image, 0, 1).astype(np.float32)
    return SegmentationSample(f"s{idx:04d}", image, mask[None].astype(np.uint8))


def generate_synthetic_dataset(count: int, H: int, W: int, seed: int = 0,
                               channels: int = 1) -> list[SegmentationSample]:
    """Images of 1-6 soft-edged ellipses on a noisy background with exact masks."""
    if H % 16 or W % 16:
        raise ConfigError(f"H and W must be divisible by 16, got {H}x{W}")
    seqs = np.random.SeedSequence(seed).spawn(count)
    return [_synthetic_sample(np.random.default_rng(s), i, H, W, channels) for i, s in enumerate(seqs)]


def save_dataset(directory, samples: Sequence[SegmentationSample]) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_tensor(d / "images" / f"{s.id}.pmtn", s.image.astype(np.float32))
        save_tensor(d / "masks" / f"{s.id}.pmtn", s.mask.astype(np.uint8))


def load_dataset(directory) -> list[SegmentationSample]:
    d = Path(directory)
    samples = []
    img_dir = d / "images"
    if not img_dir.is_dir():
        return samples
    for path in sorted(img_dir.glob("*.pmtn")):
        mask_path = d / "masks" / path.name
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask for {path.stem}")
        img = load_tensor(path).astype(np.float32)
        msk = load_tensor(mask_path)
        if img.ndim == 2:
            img = img[None]
        if msk.ndim == 2:
            msk = msk[None]
        samples.append(SegmentationSample(path.stem, img, (msk > 0).astype(np.uint8)))
    return samples


def split_dataset(samples: Sequence[SegmentationSample], val_fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    if len(samples) > 1:
        n_val = min(max(n_val, 1 if val_fraction > 0 else 0), len(samples) - 1)
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


def stack_batch(samples: Sequence[SegmentationSample], dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.image for s in samples]).astype(dtype)
    y = np.stack([s.mask for s in samples]).astype(dtype)
    return x, y


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: PMTrans, path, state: Optional[dict[str, np.ndarray]] = None) -> None:
    """PMTC archive of the parameters plus the config text. Tensors are stored
    as float32, so only float32 models round-trip bit-exactly."""
    entries = dict(state if state is not None else model.state_dict())
    entries[CONFIG_ENTRY] = text_to_bytes(model.cfg.to_text())
    save_archive(path, entries)


def load_checkpoint(path) -> PMTrans:
    entries = load_archive(path)
    if CONFIG_ENTRY not in entries:
        raise ContractError(f"{path}: checkpoint lacks a config entry")
    cfg = PMTransConfig.from_text(bytes_to_text(entries.pop(CONFIG_ENTRY)))
    model = PMTrans(cfg)
    model.load_state_dict(entries)
    return model


# ------------------------------------------------------------------ evaluate


def predict_probabilities(model: PMTrans, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        outs = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                x = Tensor(images[i : i + batch_size].astype(model.cfg.np_dtype))
                outs.append(F.sigmoid(model(x)["logits_full"]).data)
        return np.concatenate(outs)
    finally:
        model.train(was_training)


def per_sample_dice(model: PMTrans, samples: Sequence[SegmentationSample], threshold: float = 0.5,
                    batch_size: int = 4) -> list[float]:
    images = np.stack([s.image for s in samples])
    probs = predict_probabilities(model, images, batch_size)
    return [dice_coefficient(p > threshold, s.mask) for p, s in zip(probs, samples)]


def evaluate(model: PMTrans, samples: Sequence[SegmentationSample], threshold: float = 0.5,
             batch_size: int = 4) -> float:
    """Mean per-sample Dice of the full-resolution output, in percent."""
    if not samples:
        raise ContractError("empty-dataset")
    scores = per_sample_dice(model, samples, threshold, batch_size)
    return 100.0 * float(np.mean(scores))


# --------------------------------------------------------------------- train


@dataclass
class TrainResult:
    best_dice: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    best_state: Optional[dict[str, np.ndarray]] = None
    checkpoint: Optional[Path] = None


def _diagnostic_dump(out_dir: Optional[Path], model: PMTrans, epoch: int, step: int, loss: float) -> None:
    info = {
        "epoch": epoch,
        "step": step,
        "loss": repr(loss),
        "params": {
            name: {"finite": bool(np.all(np.isfinite(p.data))), "max_abs": float(np.abs(p.data[np.isfinite(p.data)]).max(initial=0.0))}
            for name, p in model.named_parameters()
        },
    }
    if out_dir is not None:
        (out_dir / "divergence.json").write_text(json.dumps(info, indent=1))


def train(
    model: PMTrans,
    train_set: Sequence[SegmentationSample],
    val_set: Sequence[SegmentationSample],
    cfg: TrainConfig,
    out_dir=None,
    epoch_callback=None,
) -> TrainResult:
    """Adam + poly LR with augmentation; gates frozen for the first epochs.

    Keeps the weights with the best validation Dice. When ``out_dir`` is
    given, writes ``metrics.csv`` and ``best.pmtc`` there. ``epoch_callback``
    is called as ``f(epoch, model, row)`` after every epoch.
    """
    if not train_set:
        raise ContractError("empty-dataset")
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), (cfg.beta1, cfg.beta2), cfg.adam_eps)
    dtype = model.cfg.np_dtype
    weights = model.cfg.ds_weights
    eval_set = val_set if val_set else train_set
    result = TrainResult(best_dice=-1.0, best_epoch=-1)
    t0 = time.perf_counter()
    metrics_file = None
    writer = None
    if out is not None:
        metrics_file = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(metrics_file)
        writer.writerow(METRIC_COLUMNS)
    try:
        for epoch in range(cfg.max_epochs):
            gates_on = epoch >= cfg.gate_freeze_epochs
            model.set_gates_trainable(gates_on)
            lr = poly_lr(epoch, cfg.base_lr, cfg.max_epochs, cfg.poly_power)
            model.train()
            order = rng.permutation(len(train_set))
            losses = []
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
                if cfg.augment:
                    batch = [augment_sample(s, rng, cfg) for s in batch]
                x, y = stack_batch(batch, dtype)
                opt.zero_grad()
                loss = total_supervised_loss(model(Tensor(x)), y, weights, "mean")
                value = float(loss.data)
                if not math.isfinite(value):
                    _diagnostic_dump(out, model, epoch, step, value)
                    raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch + 1}, step {step}")
                backward(loss)
                opt.step(lr)
                losses.append(value)
            val_dice = evaluate(model, eval_set)
            row = {
                "epoch": epoch + 1,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "val_dice": val_dice,
                "gates_trainable": int(gates_on),
                "wallclock_s": round(time.perf_counter() - t0, 3),
            }
            result.history.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in METRIC_COLUMNS])
                metrics_file.flush()
            if val_dice > result.best_dice:
                result.best_dice, result.best_epoch = val_dice, epoch + 1
                result.best_state = model.state_dict()
            log.info("epoch %d lr %.3g loss %.4f val dice %.2f", epoch + 1, lr, row["train_loss"], val_dice)
            if epoch_callback is not None:
                epoch_callback(epoch + 1, model, row)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out is not None and result.best_state is not None:
        result.checkpoint = out / "best.pmtc"
        save_checkpoint(model, result.checkpoint, result.best_state)
    return result
