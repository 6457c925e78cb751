"""Shared test oracles: independent, brute-force reference implementations
that the library under test is checked against. Everything here favors
obviousness over speed."""

from __future__ import annotations

import numpy as np

from dynagate.tensor import Tensor


def numeric_grad(fn, arrays, h=1e-5):
    """Central finite-difference gradient of a scalar function.

    fn takes the list of arrays and returns a python float; returns one
    gradient array per input, entry by entry.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(arrays)
            flat[i] = orig - h
            down = fn(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a, b, eps=1e-8):
    """Worst-case elementwise relative error between two arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), eps)
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(build_loss, shapes, seed=0, h=1e-5, tol=1e-4, scale=1.0):
    """Compare autodiff gradients against numeric_grad.

    build_loss takes a list of Tensors (one per shape) and returns a
    scalar Tensor. Returns the worst relative error over all inputs and
    asserts it is within tol.
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(0.0, scale, size=s) for s in shapes]

    def run(arrs):
        ts = [Tensor(a.copy(), requires_grad=True) for a in arrs]
        return float(build_loss(ts).data)

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(tensors)
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = numeric_grad(run, [a.copy() for a in arrays], h=h)
    worst = max(rel_err(an, nu) for an, nu in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: worst relative error {worst}"
    return worst


def topr_keep_oracle(values, kept_count):
    """Indices kept by a value Top-k with ties resolved to the lower
    index, via exhaustive stable sorting."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return sorted(order[:kept_count])


def quartile_oracle(sorted_vals, q):
    """Linear-interpolation quantile of an ascending list."""
    n = len(sorted_vals)
    if n == 1:
        return float(sorted_vals[0])
    pos = q * (n - 1)
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    frac = pos - lo
    return float(sorted_vals[lo] * (1.0 - frac) + sorted_vals[hi] * frac)


def miou_oracle(preds, labels, num_classes, ignore_index=255):
    """Per-pixel counting mIoU, written as plain loops over classes."""
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    keep = labels != ignore_index
    preds = preds[keep]
    labels = labels[keep]
    ious = []
    for c in range(num_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        union = tp + fp + fn
        if union == 0:
            continue
        ious.append(tp / union)
    return float(np.mean(ious)) if ious else float("nan")


def planted_traces(n_neurons, n_instances, seed=0):
    """Per-instance magnitude traces with known neuron categories.

    Returns (traces[n_instances, n_neurons], kinds list). Kind 0:
    constant-high (large median, tiny spread); kind 1: input-switched
    (half the instances high, half near zero -> large IQR); kind 2:
    constant-low (small median, tiny spread).
    """
    rng = np.random.default_rng(seed)
    kinds = [int(rng.integers(3)) for _ in range(n_neurons)]
    traces = np.empty((n_instances, n_neurons))
    for j, kind in enumerate(kinds):
        if kind == 0:
            traces[:, j] = 5.0 + rng.normal(0, 0.05, n_instances)
        elif kind == 1:
            on = rng.random(n_instances) < 0.5
            traces[:, j] = np.where(on, 5.0, 0.05)
            traces[:, j] += rng.normal(0, 0.05, n_instances)
        else:
            traces[:, j] = 0.1 + rng.normal(0, 0.01, n_instances)
    return np.abs(traces), kinds

def patch_oracle(x, k, stride, pad):
    """Naive patch extraction: zero-pad, then one loop per output pixel.

    Column layout is channel-major: index c*(k*k) + ky*k + kx.
    """
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho * wo, c * k * k))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                patch = xp[b, :, i * stride:i * stride + k,
                           j * stride:j * stride + k]
                out[b, i * wo + j] = patch.reshape(-1)
    return out


def depthwise_oracle(x, w):
    """Per-channel 3x3 cross-correlation, stride 1, zero pad 1."""
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(wd):
                    out[b, ch, i, j] = np.sum(
                        xp[b, ch, i:i + 3, j:j + 3] * w[ch])
    return out


def bilinear_oracle(x, out_hw):
    """Half-pixel-center bilinear resize with border clamping."""
    n, c, h, w = x.shape
    ho, wo = out_hw
    out = np.zeros((n, c, ho, wo))
    for i in range(ho):
        sy = min(max((i + 0.5) * h / ho - 0.5, 0.0), h - 1.0)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(wo):
            sx = min(max((j + 0.5) * w / wo - 0.5, 0.0), w - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, :, i, j] = ((1 - fy) * (1 - fx) * x[:, :, y0, x0]
                               + (1 - fy) * fx * x[:, :, y0, x1]
                               + fy * (1 - fx) * x[:, :, y1, x0]
                               + fy * fx * x[:, :, y1, x1])
    return out
