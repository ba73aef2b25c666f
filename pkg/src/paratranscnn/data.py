"""Slices, manifests, intensity windowing, augmentation, batching and a synthetic generator."""
from __future__ import annotations

import json
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io import FormatError, load_tensor, save_tensor


@dataclass
class SegmentationSample:
    image: np.ndarray          # H x W or P x H x W, float32 in [0, 1]
    label: np.ndarray          # H x W integer class ids
    case_id: str = "case0"
    slice_index: int = 0
    spacing_mm: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.image.shape[-2:] != self.label.shape:
            raise ValueError(f"image extents {self.image.shape[-2:]} != label extents {self.label.shape}")


@dataclass
class ManifestRecord:
    image: str
    label: str
    case_id: str
    slice_index: int


@dataclass
class DatasetManifest:
    root: Path
    records: list
    num_classes: int
    spacing: tuple = (1.0, 1.0)
    split: str = "train"
    window: tuple | None = None
    _cache: list | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def to_json(self) -> str:
        payload = {
            "num_classes": self.num_classes,
            "spacing": list(self.spacing),
            "split": self.split,
            "window": list(self.window) if self.window is not None else None,
            "samples": [
                {"image": r.image, "label": r.label, "case_id": r.case_id, "slice_index": r.slice_index}
                for r in self.records
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    def load_samples(self) -> list:
        """Parse every referenced PTCN pair (cached); raw images are windowed when a window is set."""
        if self._cache is not None:
            return self._cache
        samples = []
        for r in self.records:
            img_path, lab_path = self.root / r.image, self.root / r.label
            for p in (img_path, lab_path):
                if not p.exists():
                    raise FileNotFoundError(f"manifest references missing file {p}")
            image = load_tensor(img_path).astype(np.float32)
            if self.window is not None:
                image = normalize_intensity(image, self.window)
            raw_label = load_tensor(lab_path)
            label = np.rint(raw_label).astype(np.int64)
            if not np.array_equal(label, raw_label) or label.min() < 0 or label.max() >= self.num_classes:
                raise FormatError(f"{lab_path}: labels must be integers in [0, {self.num_classes})")
            samples.append(SegmentationSample(image, label, r.case_id, r.slice_index, tuple(self.spacing)))
        self._cache = samples
        return samples


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    raw = json.loads(path.read_text(encoding="utf-8"))
    records = [ManifestRecord(s["image"], s["label"], str(s["case_id"]), int(s["slice_index"]))
               for s in raw["samples"]]
    window = raw.get("window")
    return DatasetManifest(path.parent, records, int(raw["num_classes"]), tuple(raw.get("spacing", (1.0, 1.0))),
                           raw.get("split", "train"), tuple(window) if window else None)


# ---------------------------------------------------------------------------
# intensity and geometry


def normalize_intensity(raw, window) -> np.ndarray:
    """Clamp to ``[lo, hi]`` and map affinely onto ``[0, 1]``."""
    lo, hi = float(window[0]), float(window[1])
    if hi <= lo:
        raise ValueError(f"window upper bound {hi} must exceed lower bound {lo}")
    x = np.clip(np.asarray(raw, dtype=np.float64), lo, hi)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def to_planes(image: np.ndarray, planes: int = 3) -> np.ndarray:
    """Replicate a single H x W plane to ``planes`` x H x W; multi-plane input passes through."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        return np.repeat(image[None], planes, axis=0)
    if image.shape[0] == planes:
        return image
    if image.shape[0] == 1:
        return np.repeat(image, planes, axis=0)
    raise ValueError(f"cannot map {image.shape[0]} planes to {planes}")


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of the trailing two axes to ``size`` x ``size``."""
    h, w = image.shape[-2:]
    if (h, w) == (size, size):
        return image
    zoom = [1.0] * (image.ndim - 2) + [size / h, size / w]
    return ndimage.zoom(image, zoom, order=1, mode="nearest", grid_mode=True).astype(np.float32)


def resize_label(label: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour resize; ``size`` is an int or an (H, W) pair."""
    th, tw = (size, size) if np.isscalar(size) else size
    h, w = label.shape
    if (h, w) == (th, tw):
        return label
    rows = np.minimum(((np.arange(th) + 0.5) * h / th).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(np.int64), w - 1)
    return label[rows[:, None], cols[None, :]]


def augment(sample: SegmentationSample, rng: np.random.Generator, arbitrary_rotation: float = 0.0
            ) -> SegmentationSample:
    """Random horizontal flip, vertical flip (each p=0.5) and k*90 degree rotation.

    The same index permutation is applied to image and label. With
    ``arbitrary_rotation`` > 0 an extra rotation uniform in +-that many degrees
    follows (bilinear image, nearest label).
    """
    img, lab = sample.image, sample.label
    if rng.random() < 0.5:
        img, lab = img[..., ::-1], lab[:, ::-1]
    if rng.random() < 0.5:
        img, lab = img[..., ::-1, :], lab[::-1, :]
    k = int(rng.integers(4))
    img, lab = np.rot90(img, k, axes=(-2, -1)), np.rot90(lab, k)
    if arbitrary_rotation > 0:
        angle = float(rng.uniform(-arbitrary_rotation, arbitrary_rotation))
        axes = (img.ndim - 1, img.ndim - 2)
        img = ndimage.rotate(img, angle, axes=axes, reshape=False, order=1, mode="nearest")
        lab = ndimage.rotate(lab, angle, reshape=False, order=0, mode="nearest")
    return SegmentationSample(np.ascontiguousarray(img), np.ascontiguousarray(lab), sample.case_id,
                              sample.slice_index, sample.spacing_mm)


# ---------------------------------------------------------------------------
# batching


def _seed_list(seed) -> list:
    if seed is None:
        return []
    if np.isscalar(seed):
        return [int(seed)]
    return [int(s) for s in seed]


def prepare(sample: SegmentationSample, input_size: int | None, planes: int = 3):
    image, label = sample.image, sample.label
    if input_size is not None:
        image = resize_image(image, input_size)
        label = resize_label(label, input_size)
    return to_planes(image, planes), label


def batch_iterator(source, batch_size: int, shuffle_seed=None, augment_data: bool = False,
                   input_size: int | None = None, prefetch: int = 0, planes: int = 3):
    """One epoch of ``(images B x planes x H x W, labels B x H x W)`` batches.

    ``shuffle_seed=None`` keeps manifest order; otherwise the order is a
    seeded permutation. Augmentation draws from a generator keyed by the seed
    and the sample's position, so the stream does not depend on ``prefetch``.
    The final partial batch is kept.
    """
    samples = source.load_samples() if isinstance(source, DatasetManifest) else list(source)
    n = len(samples)
    key = _seed_list(shuffle_seed)
    order = np.random.default_rng(key).permutation(n) if shuffle_seed is not None else np.arange(n)

    def build(start):
        imgs, labs = [], []
        for pos in range(start, min(start + batch_size, n)):
            s = samples[order[pos]]
            if augment_data:
                s = augment(s, np.random.default_rng(key + [1, pos]))
            img, lab = prepare(s, input_size, planes)
            imgs.append(img)
            labs.append(lab)
        return np.stack(imgs).astype(np.float32), np.stack(labs).astype(np.int64)

    starts = range(0, n, batch_size)
    if prefetch <= 0:
        for st in starts:
            yield build(st)
        return
    yield from _prefetched((build(st) for st in starts), prefetch)


def _prefetched(gen, depth: int):
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in gen:
                q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    t.join()


def batches_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


# ---------------------------------------------------------------------------
# synthetic data

FG_MIN, FG_MAX = 0.01, 0.40


def _ellipse(size, cy, cx, ay, ax, theta):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    return u * u + v * v <= 1.0


def _draw_case(rng, num_classes, slices, size):
    """Ellipse parameters per foreground class plus per-slice drift; retried until every
    class covers between 1% and 40% of every slice."""
    n_fg = num_classes - 1
    max_axis = 0.30 / math.sqrt(max(1, n_fg) / 2 + 0.5)
    for _ in range(1000):
        params = []
        for _k in range(n_fg):
            params.append(dict(
                cy=rng.uniform(0.25, 0.75) * size, cx=rng.uniform(0.25, 0.75) * size,
                ay=rng.uniform(0.10, max_axis) * size, ax=rng.uniform(0.10, max_axis) * size,
                theta=rng.uniform(0, math.pi),
                vy=rng.uniform(-0.02, 0.02) * size, vx=rng.uniform(-0.02, 0.02) * size,
            ))
        labels = []
        ok = True
        for s in range(slices):
            lab = np.zeros((size, size), dtype=np.int64)
            for k, p in enumerate(params, start=1):
                lab[_ellipse(size, p["cy"] + s * p["vy"], p["cx"] + s * p["vx"], p["ay"], p["ax"], p["theta"])] = k
            frac = np.bincount(lab.ravel(), minlength=num_classes)[1:] / lab.size
            if frac.min() < FG_MIN or frac.max() > FG_MAX:
                ok = False
                break
            labels.append(lab)
        if ok:
            return labels
    raise RuntimeError("could not draw non-degenerate ellipses; reduce num_classes or raise size")


def class_bands(num_classes: int) -> list:
    """Non-overlapping intensity band per class, background darkest."""
    width = 0.8 / num_classes
    return [(0.1 + k * width, 0.1 + k * width + 0.5 * width) for k in range(num_classes)]


def synth_generate(out_dir, n_cases: int, slices_per_case: int, num_classes: int, size: int, seed: int = 0,
                   noise: float = 0.05) -> DatasetManifest:
    """Write a PTCN + manifest dataset of noisy ellipse phantoms and return its manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    bands = class_bands(num_classes)
    records = []
    for c in range(n_cases):
        rng = np.random.default_rng([seed, c])
        labels = _draw_case(rng, num_classes, slices_per_case, size)
        case_id = f"case{c:03d}"
        for s, lab in enumerate(labels):
            levels = np.array([rng.uniform(lo, hi) for lo, hi in bands])
            img = levels[lab] + rng.normal(0.0, noise, lab.shape)
            img = np.clip(img, 0.0, 1.0).astype(np.float32)
            stem = f"{case_id}_s{s:03d}.ptcn"
            save_tensor(out_dir / "images" / stem, img)
            save_tensor(out_dir / "labels" / stem, lab.astype(np.float32))
            records.append(ManifestRecord(f"images/{stem}", f"labels/{stem}", case_id, s))
    manifest = DatasetManifest(out_dir, records, num_classes)
    manifest.save()
    return manifest
