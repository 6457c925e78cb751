"""Synthetic segmentation task: colored shapes on a colored background.

Every sample is a pure function of (seed, index), so datasets never
materialize more than the requested batch and two runs with the same
seed see identical pixels. Class colors come from a fixed palette;
pixel noise keeps the task from being a lookup table.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ContractError, DimensionError

IGNORE_INDEX = 255
_PALETTE_SEED = 918273


def class_palette(num_classes: int) -> np.ndarray:
    """(num_classes, 3) RGB palette, fixed across runs."""
    rng = np.random.default_rng(_PALETTE_SEED)
    return rng.uniform(0.05, 0.95, size=(num_classes, 3))


def gen_sample(seed: int, index: int, hw, num_classes: int,
               noise_sigma: float = 0.05, max_shapes: int = 3,
               void_border: int = 0, class_pool=None):
    """One (image, label) pair; image (3, H, W) float, label (H, W) int64.

    Shapes are axis-aligned rectangles and circles of non-background
    classes painted over a background of class 0, followed by i.i.d.
    Gaussian pixel noise. void_border rows/columns at each edge are
    labeled IGNORE_INDEX. class_pool, when given, restricts which
    shape classes appear (the label space stays [0, num_classes); the
    pool only limits which of them this sample may draw).
    """
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    if max_shapes < 0:
        raise ContractError(f"max_shapes must be >= 0, got {max_shapes}")
    if noise_sigma < 0:
        raise ContractError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if class_pool is not None:
        class_pool = tuple(int(c) for c in class_pool)
        if not class_pool:
            raise ContractError("class_pool must not be empty")
        bad = [c for c in class_pool if not 1 <= c < num_classes]
        if bad:
            raise ContractError(
                f"class_pool entries must be shape classes in "
                f"[1, {num_classes}), got {bad}")
    h, w = hw
    if h < 4 or w < 4:
        raise DimensionError(f"image size {h}x{w} too small")
    rng = np.random.default_rng((seed, index))
    palette = class_palette(num_classes)
    label = np.zeros((h, w), dtype=np.int64)
    image = np.empty((3, h, w), dtype=np.float64)
    image[:] = palette[0][:, None, None]
    yy, xx = np.mgrid[0:h, 0:w]
    n_shapes = int(rng.integers(1, max_shapes + 1)) if max_shapes > 0 else 0
    for s in range(n_shapes):
        if class_pool is None:
            cls = int(rng.integers(1, num_classes))
        else:
            cls = class_pool[int(rng.integers(len(class_pool)))]
        kind = int(rng.integers(2))
        if kind == 0:
            sh = int(rng.integers(h // 4, max(h // 4 + 1, h // 2 + 1)))
            sw = int(rng.integers(w // 4, max(w // 4 + 1, w // 2 + 1)))
            y0 = int(rng.integers(0, h - sh + 1))
            x0 = int(rng.integers(0, w - sw + 1))
            region = np.zeros((h, w), dtype=bool)
            region[y0:y0 + sh, x0:x0 + sw] = True
        else:
            radius = int(rng.integers(max(2, h // 8), max(3, h // 3)))
            cy = int(rng.integers(radius, h - radius + 1))
            cx = int(rng.integers(radius, w - radius + 1))
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        label[region] = cls
        image[:, region] = palette[cls][:, None]
    if noise_sigma > 0:
        image += rng.normal(0.0, noise_sigma, size=image.shape)
        np.clip(image, 0.0, 1.0, out=image)
    if void_border > 0:
        v = void_border
        label[:v, :] = IGNORE_INDEX
        label[-v:, :] = IGNORE_INDEX
        label[:, :v] = IGNORE_INDEX
        label[:, -v:] = IGNORE_INDEX
    return image, label


class _IndexedDataset:
    """Shared batching over anything index-addressable."""

    def __len__(self):
        return self.length

    def batch(self, indices):
        pairs = [self[i] for i in indices]
        images = np.stack([p[0] for p in pairs])
        labels = np.stack([p[1] for p in pairs])
        return images, labels

    def step_batch(self, step: int, batch_size: int):
        """Deterministic batch for a training step: samples cycle in
        index order."""
        start = step * batch_size
        return self.batch([(start + j) % self.length for j in range(batch_size)])


class SyntheticSegmentation(_IndexedDataset):
    """Deterministic, index-addressable dataset of generated samples."""

    def __init__(self, seed: int, length: int, hw, num_classes: int,
                 noise_sigma: float = 0.05, max_shapes: int = 3,
                 void_border: int = 0, class_pool=None):
        if length < 1:
            raise ContractError(f"dataset length must be positive, got {length}")
        self.seed = seed
        self.length = length
        self.hw = tuple(hw)
        self.num_classes = num_classes
        self.noise_sigma = noise_sigma
        self.max_shapes = max_shapes
        self.void_border = void_border
        self.class_pool = None if class_pool is None else tuple(class_pool)

    def __getitem__(self, index: int):
        if not 0 <= index < self.length:
            raise IndexError(index)
        return gen_sample(self.seed, index, self.hw, self.num_classes,
                          self.noise_sigma, self.max_shapes, self.void_border,
                          self.class_pool)


class MixedSegmentation(_IndexedDataset):
    """Round-robin interleave of equally sized datasets over one label
    space, so every training batch mixes all modes. Useful when the
    modes differ (e.g. disjoint shape-class pools) and per-input
    behavior matters."""

    def __init__(self, parts):
        parts = list(parts)
        if not parts:
            raise ContractError("MixedSegmentation needs at least one part")
        first = parts[0]
        for p in parts[1:]:
            if len(p) != len(first):
                raise ContractError(
                    f"parts must have equal lengths, got "
                    f"{[len(q) for q in parts]}")
            if p.hw != first.hw or p.num_classes != first.num_classes:
                raise ContractError(
                    "parts must share image size and label space")
        self.parts = parts
        self.length = sum(len(p) for p in parts)
        self.hw = first.hw
        self.num_classes = first.num_classes

    def __getitem__(self, index: int):
        if not 0 <= index < self.length:
            raise IndexError(index)
        return self.parts[index % len(self.parts)][index // len(self.parts)]


def gen_synthetic(seed: int, n: int, h: int, w: int, num_classes: int,
                  noise_sigma: float = 0.05, max_shapes: int = 3,
                  void_border: int = 0, class_pool=None) -> SyntheticSegmentation:
    """Dataset of n generated samples at h x w; see SyntheticSegmentation."""
    return SyntheticSegmentation(seed, n, (h, w), num_classes,
                                 noise_sigma, max_shapes, void_border,
                                 class_pool)


def save_sample(path, image: np.ndarray, label: np.ndarray) -> None:
    """Write one sample to disk in the tensor-container format under the
    names "image" (float) and "label" (int64)."""
    save_checkpoint(path, {"image": np.asarray(image, dtype=np.float64),
                           "label": np.asarray(label, dtype=np.int64)})


def load_sample(path):
    """Read back a sample written by save_sample."""
    entries = load_checkpoint(path)
    missing = {"image", "label"} - set(entries)
    if missing:
        raise CheckpointError(
            f"sample file {path} lacks entries: {sorted(missing)}")
    return entries["image"], entries["label"]


def confusion_matrix(pred: np.ndarray, label: np.ndarray, num_classes: int,
                     ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """(num_classes, num_classes) counts, rows = true class, columns =
    predicted class; ignored pixels contribute nothing."""
    pred = np.asarray(pred).reshape(-1)
    label = np.asarray(label).reshape(-1)
    if pred.shape != label.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} != label shape {label.shape}")
    valid = label != ignore_index
    pred = pred[valid]
    label = label[valid]
    if np.any((pred < 0) | (pred >= num_classes)):
        raise ContractError("prediction contains out-of-range class ids")
    if np.any((label < 0) | (label >= num_classes)):
        raise ContractError("label contains out-of-range class ids")
    idx = label * num_classes + pred
    return np.bincount(idx, minlength=num_classes ** 2).reshape(
        num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray):
    """Per-class IoU (nan where the class is absent from labels and
    predictions alike) and their mean over present classes."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(cm.shape[0], np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    mean = float(np.nanmean(iou)) if present.any() else float("nan")
    return iou, mean


def miou(preds, labels, num_classes: int, ignore_index: int = IGNORE_INDEX):
    """Mean IoU over a set of prediction/label maps.

    Counts accumulate over the whole set before the per-class ratio, so
    large and small instances of a class weigh by pixel count. Classes
    never seen in either predictions or labels are excluded from the
    mean.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    cm = confusion_matrix(preds, labels, num_classes, ignore_index)
    return iou_from_confusion(cm)


def evaluate_miou(model, dataset, indices=None, ctx=None,
                  batch_size: int = 8) -> float:
    """mIoU of a model over dataset indices at full label resolution."""
    if indices is None:
        indices = range(len(dataset))
    indices = list(indices)
    cm = np.zeros((dataset.num_classes, dataset.num_classes), dtype=np.int64)
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        images, labels = dataset.batch(chunk)
        pred = model.predict(images, ctx, out_hw=labels.shape[-2:])
        cm += confusion_matrix(pred, labels, dataset.num_classes)
    return iou_from_confusion(cm)[1]
