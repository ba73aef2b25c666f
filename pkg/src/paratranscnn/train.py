"""SGD training with poly learning-rate decay, checkpoints, evaluation and export tools."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as ptio
from .config import ModelConfig, TrainConfig
from .data import DatasetManifest, batch_iterator, batches_per_epoch, prepare, resize_image, resize_label
from .losses import LossWeights, combined_loss
from .metrics import MetricReport, report
from .model import ParaTransCNN
from .tensor import Tensor, backward, no_grad, reset_tape

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def poly_lr(iteration: int, max_iter: int, base_lr: float = 0.01, power: float = 0.9) -> float:
    """``base_lr * (1 - iteration / max_iter) ** power``."""
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    frac = min(max(iteration / max_iter, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


def sgd_step(params: dict, grads: dict, buffers: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4) -> None:
    """In-place momentum SGD: ``v = m*v + (g + wd*p); p -= lr*v``.

    ``params``/``grads``/``buffers`` map names to arrays; missing grads count
    as zero and missing buffers start at zero.
    """
    for name, p in params.items():
        g = grads.get(name)
        d = np.zeros_like(p) if g is None else g.astype(p.dtype, copy=True)
        if weight_decay:
            d += weight_decay * p
        v = buffers.get(name)
        if v is None:
            v = buffers[name] = np.zeros_like(p)
        v *= momentum
        v += d
        p -= lr * v


class SGD:
    def __init__(self, model: ParaTransCNN, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.named = dict(model.named_parameters())
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.named.items()}

    def step(self, lr: float) -> None:
        sgd_step({n: p.data for n, p in self.named.items()},
                 {n: p.grad for n, p in self.named.items() if p.grad is not None},
                 self.buffers, lr, self.momentum, self.weight_decay)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    LOSS_FIELDS = ("iter", "lr", "loss", "dice_loss", "ce_loss")

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.LOSS_FIELDS)
        for r in self.records:
            w.writerow([r["iter"]] + [repr(float(r[k])) for k in self.LOSS_FIELDS[1:]])
        return buf.getvalue()

    def timing_csv(self) -> str:
        lines = ["iter,wall_ms"] + [f"{r['iter']},{r['wall_ms']:.3f}" for r in self.records]
        return "\n".join(lines) + "\n"

    def eval_csv(self) -> str:
        lines = ["epoch,iter,mean_dsc,mean_hd95"]
        lines += [f"{e['epoch']},{e['iter']},{e['mean_dsc']!r},{e['mean_hd95']!r}" for e in self.epochs]
        return "\n".join(lines) + "\n"

    def losses(self) -> list:
        return [r["loss"] for r in self.records]


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    state: dict
    momentum: dict
    iteration: int
    train_cfg: TrainConfig | None = None

    def entries(self) -> dict:
        out = dict(self.state)
        out.update({f"opt.{k}": v for k, v in self.momentum.items()})
        return out

    def save(self, path) -> Path:
        """Binary checkpoint plus a ``.json`` sidecar holding the configs."""
        path = Path(path)
        ptio.save_checkpoint(path, self.entries(), self.iteration)
        payload = {"model": self.model_cfg.to_dict()}
        if self.train_cfg is not None:
            payload["train"] = self.train_cfg.to_dict()
        path.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        entries, iteration = ptio.load_checkpoint(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        model_cfg = ModelConfig.from_dict(meta["model"])
        train_cfg = TrainConfig.from_dict(meta["train"]) if "train" in meta else None
        state = {k: v for k, v in entries.items() if not k.startswith("opt.")}
        momentum = {k[4:]: v for k, v in entries.items() if k.startswith("opt.")}
        return cls(model_cfg, state, momentum, iteration, train_cfg)

    def build_model(self) -> ParaTransCNN:
        model = ParaTransCNN(self.model_cfg)
        model.load_state_dict(self.state)
        return model

    @classmethod
    def capture(cls, model: ParaTransCNN, opt: SGD | None, iteration: int, train_cfg=None) -> "Checkpoint":
        state = {k: np.array(v, copy=True) for k, v in model.state_dict().items()}
        mom = {k: v.copy() for k, v in opt.buffers.items()} if opt is not None else {}
        return cls(model.cfg, state, mom, iteration, train_cfg)


def _as_model(obj) -> ParaTransCNN:
    if isinstance(obj, ParaTransCNN):
        return obj
    if isinstance(obj, Checkpoint):
        return obj.build_model()
    return Checkpoint.load(obj).build_model()


def _as_manifest(obj) -> DatasetManifest:
    if isinstance(obj, DatasetManifest):
        return obj
    from .data import load_manifest
    return load_manifest(obj)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, manifest, out_dir=None, resume=None,
          stop_at: int | None = None, eval_manifest=None) -> tuple[Checkpoint, TrainLog]:
    """Run the full schedule (or up to ``stop_at`` iterations) and return the final checkpoint and log.

    ``resume`` is a :class:`Checkpoint` or path; training continues from its
    iteration counter with the identical data stream.
    """
    manifest = _as_manifest(manifest)
    samples = manifest.load_samples()
    if not samples:
        raise ValueError("empty training manifest")
    if model_cfg.num_classes != manifest.num_classes:
        raise ValueError(f"model has {model_cfg.num_classes} classes, data has {manifest.num_classes}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    model = ParaTransCNN(model_cfg)
    opt = SGD(model, train_cfg.momentum, train_cfg.weight_decay)
    start = 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        model.load_state_dict(ck.state)
        for k, v in ck.momentum.items():
            opt.buffers[k][...] = v
        start = ck.iteration

    weights = LossWeights(train_cfg.lambda_dice, train_cfg.lambda_ce)
    bpe = batches_per_epoch(len(samples), train_cfg.batch_size)
    max_iter = train_cfg.epochs * bpe
    end = max_iter if stop_at is None else min(stop_at, max_iter)
    eval_source = _as_manifest(eval_manifest) if eval_manifest is not None else manifest
    tlog = TrainLog()
    it = start
    model.train()

    def checkpoint():
        ck = Checkpoint.capture(model, opt, it, train_cfg)
        if out_dir is not None:
            ck.save(out_dir / "checkpoint.ptckpt")
        return ck

    for epoch in range(start // bpe, train_cfg.epochs):
        if it >= end:
            break
        stream = batch_iterator(samples, train_cfg.batch_size, shuffle_seed=(train_cfg.seed, epoch),
                                augment_data=train_cfg.augment, input_size=model_cfg.input_size)
        for b, (images, labels) in enumerate(stream):
            if epoch * bpe + b < it:
                continue
            if it >= end:
                break
            t0 = time.perf_counter()
            lr = poly_lr(it, max_iter, train_cfg.base_lr, train_cfg.poly_power)
            reset_tape()
            model.zero_grad()
            logits = model(Tensor(images))
            total, dice, ce = combined_loss(logits, labels, weights, include_background=train_cfg.dice_include_background,
                                            return_parts=True)
            loss = total.item()
            if not math.isfinite(loss):
                reset_tape()
                raise TrainingDiverged(f"non-finite loss {loss} at iteration {it} (lr {lr:.6g})")
            backward(total)
            opt.step(lr)
            wall = (time.perf_counter() - t0) * 1000.0
            if train_cfg.log_every and it % train_cfg.log_every == 0:
                tlog.records.append(dict(iter=it, lr=lr, loss=loss, dice_loss=dice.item(), ce_loss=ce.item(),
                                         wall_ms=wall))
            it += 1
            if train_cfg.checkpoint_every and it % train_cfg.checkpoint_every == 0:
                checkpoint()
        epoch_done = (epoch + 1) * bpe <= it
        if epoch_done and train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0:
            rep = evaluate(model, eval_source)
            tlog.epochs.append(dict(epoch=epoch, iter=it, mean_dsc=rep.mean_dsc, mean_hd95=rep.mean_hd95))
            log.info("epoch %d iter %d loss %.4f train DSC %.4f", epoch, it, loss, rep.mean_dsc)
            model.train()

    final = checkpoint()
    if out_dir is not None:
        (out_dir / "losses.csv").write_text(tlog.loss_csv(), encoding="utf-8")
        (out_dir / "timing.csv").write_text(tlog.timing_csv(), encoding="utf-8")
        if tlog.epochs:
            (out_dir / "eval.csv").write_text(tlog.eval_csv(), encoding="utf-8")
    return final, tlog


def predict_masks(model: ParaTransCNN, manifest, batch_size: int = 4):
    """Eval-mode argmax masks at model resolution, in manifest order, with resized labels."""
    manifest = _as_manifest(manifest)
    samples = manifest.load_samples()
    size = model.cfg.input_size
    preds, truths = [], []
    for images, labels in batch_iterator(samples, batch_size, input_size=size):
        preds.extend(model.predict(images))
        truths.extend(labels)
    return preds, truths, samples


def evaluate(model_or_ckpt, manifest, batch_size: int = 4, mode: str = "3d", csv_path=None,
             include_background: bool = False) -> MetricReport:
    """Case-grouped DSC/HD95 of eval-mode predictions; optionally writes the CSV report."""
    model = _as_model(model_or_ckpt)
    manifest = _as_manifest(manifest)
    preds, truths, samples = predict_masks(model, manifest, batch_size)
    size = model.cfg.input_size
    h, w = samples[0].label.shape
    spacing = (manifest.spacing[0] * h / size, manifest.spacing[1] * w / size)
    rep = report(preds, truths, model.cfg.num_classes, [s.case_id for s in samples],
                 [s.slice_index for s in samples], spacing=spacing, mode=mode,
                 include_background=include_background)
    if csv_path is not None:
        Path(csv_path).write_text(rep.to_csv(), encoding="utf-8")
    return rep


def _load_image(path) -> np.ndarray:
    img = ptio.load_tensor(path).astype(np.float32)
    if img.ndim not in (2, 3):
        raise ValueError(f"{path}: expected H x W or P x H x W image, got shape {img.shape}")
    return img


def predict(model_or_ckpt, image_path, out_dir) -> dict:
    """Write ``mask.ptcn`` (source extents) and ``overlay.pgm`` for one image."""
    model = _as_model(model_or_ckpt)
    img = _load_image(image_path)
    h, w = img.shape[-2:]
    from .data import SegmentationSample
    x, _ = prepare(SegmentationSample(img, np.zeros((h, w), dtype=np.int64)), model.cfg.input_size,
                   model.cfg.in_channels)
    mask = model.predict(x[None])[0]
    mask = resize_label(mask, (h, w))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ptio.save_tensor(out_dir / "mask.ptcn", mask.astype(np.float32))
    plane = img if img.ndim == 2 else img.mean(axis=0)
    k = model.cfg.num_classes
    overlay = 0.6 * np.clip(plane, 0, 1) + 0.4 * mask / (k - 1)
    ptio.save_pgm(out_dir / "overlay.pgm", np.round(overlay * 255))
    return {"mask": mask, "mask_path": out_dir / "mask.ptcn", "overlay_path": out_dir / "overlay.pgm"}


def export_attention(model_or_ckpt, image_path, out_dir) -> dict:
    """Per fused stage: channel weights as PTCN and a channel-mean |feature| heatmap as PGM."""
    model = _as_model(model_or_ckpt)
    img = _load_image(image_path)
    h, w = img.shape[-2:]
    from .data import SegmentationSample
    x, _ = prepare(SegmentationSample(img, np.zeros((h, w), dtype=np.int64)), model.cfg.input_size,
                   model.cfg.in_channels)
    model.eval()
    with no_grad():
        _, feats = model(Tensor(x[None]), return_features=True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = {}
    for i, (fused, f_am) in enumerate(zip(feats.fused, feats.attention), start=1):
        entry = {}
        if f_am is not None:
            vec = f_am.data[0, :, 0, 0]
            ptio.save_tensor(out_dir / f"stage{i}_weights.ptcn", vec)
            entry["weights"] = vec
        heat = np.abs(fused.data[0]).mean(axis=0)
        heat = _upsample_to(heat, (h, w))
        img8 = ptio.to_uint8(heat)
        ptio.save_pgm(out_dir / f"stage{i}_heatmap.pgm", img8)
        entry["heatmap"] = img8
        result[i] = entry
    return result


def _upsample_to(arr: np.ndarray, shape) -> np.ndarray:
    from scipy import ndimage
    zoom = (shape[0] / arr.shape[0], shape[1] / arr.shape[1])
    out = ndimage.zoom(arr.astype(np.float64), zoom, order=1, mode="nearest", grid_mode=True)
    return out[: shape[0], : shape[1]]


def render_loss_curve(tlog: TrainLog, path, width: int = 480, height: int = 240) -> np.ndarray:
    """Rasterize the loss-vs-iteration curve into an 8-bit PGM (dark line on white)."""
    losses = np.asarray(tlog.losses(), dtype=np.float64)
    img = np.full((height, width), 255, dtype=np.uint8)
    margin = 10
    img[height - margin, margin:width - margin] = 160
    img[margin:height - margin, margin] = 160
    if losses.size:
        lo, hi = losses.min(), losses.max()
        span = hi - lo if hi > lo else 1.0
        xs = margin + np.linspace(0, width - 2 * margin - 1, losses.size)
        ys = (height - margin - 1) - (losses - lo) / span * (height - 2 * margin - 1)
        if losses.size == 1:
            img[int(round(ys[0])), int(round(xs[0]))] = 0
        for (x0, y0), (x1, y1) in zip(zip(xs[:-1], ys[:-1]), zip(xs[1:], ys[1:])):
            steps = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
            px = np.round(np.linspace(x0, x1, steps + 1)).astype(int)
            py = np.round(np.linspace(y0, y1, steps + 1)).astype(int)
            img[py, px] = 0
    ptio.save_pgm(path, img)
    return img
