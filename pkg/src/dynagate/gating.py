"""Input-dependent neuron gating for paired linear layers.

A gated pair is two linear maps around a hidden width C̄: the first
produces hidden features (columns of w1), the second consumes them
(rows of w2). A per-instance gate vector G of width C̄ is predicted
from a pooled summary of the layer input, the top fraction of entries
survive, and survivors keep their predicted values, so the gate both
selects and rescales. Both sides of the pair are scaled:

    y = (x w1) * M        M = top_r(G, keep_fraction)
    z = (h * M) w2        h = optional transform of y

Dropped hidden units receive no gradient, and the compact inference
path drops their weight columns and rows entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class GateMask:
    """Gating decision for one pair and one batch.

    logits: pre-selection gate values (B, C̄), None for static masks.
    mask:   post-selection values, zeros at dropped units; (B, C̄), or
            (C̄,) for input-invariant masks.
    kept_count: survivors per instance.
    support: boolean array matching mask's shape, True at survivors.
    """

    logits: Optional[Tensor]
    mask: Tensor
    kept_count: int
    support: np.ndarray


class GatePredictor(Module):
    """Two-layer ReLU MLP producing a non-negative gate vector.

    The predictor sees a pooled, normalized summary of the layer input
    projected through the gated pair's own first weight, so its input
    width equals the gated width C̄. The output bias starts at 1 so
    fresh gates pass (almost) everything with values near 1.
    """

    def __init__(self, in_dim: int, width: int, rng):
        hidden = max(4, width // 4)
        self.norm = LayerNorm(in_dim)
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng)
        self.fc2.bias.data[:] = 1.0


def gate_logits(x: Tensor, w1: Tensor, predictor: GatePredictor) -> Tensor:
    """Pre-selection gate values G >= 0 for input x (B, N, C) through
    pair weight w1 (C, C̄)."""
    pooled = T.avg_pool_rows(x)
    summary = T.matmul(predictor.norm(pooled), w1)
    hidden = T.relu(predictor.fc1(summary))
    return T.relu(predictor.fc2(hidden))


def predict_gate(x: Tensor, w1: Tensor, predictor: GatePredictor,
                 keep_fraction: float) -> GateMask:
    """Predict gate values and keep the top fraction; one mask per
    instance, broadcast over patches."""
    return top_r(gate_logits(x, w1, predictor), keep_fraction)


def kept_count(keep_fraction: float, width: int) -> int:
    """Survivor count: round half up, never below one unit."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ContractError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if width < 1:
        raise ContractError(f"gate width must be positive, got {width}")
    return max(1, int(math.floor(keep_fraction * width + 0.5)))


def top_r(logits: Tensor, keep_fraction: float) -> GateMask:
    """Keep the largest entries of each gate row, preserving their values.

    Ties break toward the lower index. Gradient flows only through the
    surviving entries; the selection itself is constant.
    """
    vals = logits.data
    width = vals.shape[-1]
    k = kept_count(keep_fraction, width)
    rows = vals.reshape(-1, width)
    order = np.argsort(-rows, axis=-1, kind="stable")
    support = np.zeros(rows.shape, dtype=bool)
    np.put_along_axis(support, order[:, :k], True, axis=-1)
    support = support.reshape(vals.shape)
    mask = T.mul(logits, Tensor(support.astype(vals.dtype)))
    return GateMask(logits=logits, mask=mask, kept_count=k, support=support)


class SparsitySchedule:
    """Linear ramp of effective sparsity over the first anneal_steps
    steps: r_t = r * min(1, t / T). anneal_steps == 0 applies the full
    target from step zero."""

    def __init__(self, target_sparsity: float, anneal_steps: int):
        if not 0.0 <= target_sparsity < 1.0:
            raise ContractError(
                f"target_sparsity must be in [0, 1), got {target_sparsity}")
        if anneal_steps < 0:
            raise ContractError(f"anneal_steps must be >= 0, got {anneal_steps}")
        self.target_sparsity = target_sparsity
        self.anneal_steps = anneal_steps

    def sparsity(self, step: int) -> float:
        if self.anneal_steps == 0:
            return self.target_sparsity
        progress = min(1.0, step / self.anneal_steps)
        return self.target_sparsity * progress

    def keep_fraction(self, step: int) -> float:
        return 1.0 - self.sparsity(step)


def anneal(schedule: SparsitySchedule, step: int) -> float:
    """Keep fraction 1 - r_t at a training step."""
    return schedule.keep_fraction(step)


def apply_gate(t: Tensor, gm: Optional[GateMask]) -> Tensor:
    """Scale hidden features (..., N, C̄) by the gate; None means dense."""
    if gm is None:
        return t
    m = gm.mask
    if m.data.ndim == 2:
        m = T.reshape(m, (m.data.shape[0], 1, m.data.shape[1]))
    return T.mul(t, m)


def _check_pair(w1: Tensor, w2: Tensor, gm: Optional[GateMask]):
    width = w1.data.shape[-1]
    if w2.data.shape[0] != width:
        raise DimensionError(
            f"pair width mismatch: w1 columns {width}, w2 rows {w2.data.shape[0]}")
    if gm is not None and gm.mask.data.shape[-1] != width:
        raise DimensionError(
            f"gate width {gm.mask.data.shape[-1]} does not match pair width {width}")


def dgl_pair_forward(x: Tensor, w1: Tensor, w2: Tensor,
                     gm: Optional[GateMask], b1: Optional[Tensor] = None,
                     b2: Optional[Tensor] = None, hidden_fn=None):
    """Masked execution of a gated pair.

    Returns (y, z): the gated hidden features y = (x w1 + b1) * M and
    the pair output z = (h * M) w2 + b2, where h = hidden_fn(y) when a
    transform sits between the two linears.
    """
    _check_pair(w1, w2, gm)
    y = T.matmul(x, w1)
    if b1 is not None:
        y = y + b1
    y = apply_gate(y, gm)
    h = hidden_fn(y) if hidden_fn is not None else y
    z = T.matmul(apply_gate(h, gm), w2)
    if b2 is not None:
        z = z + b2
    return y, z


def dgl_pair_forward_compact(x: np.ndarray, w1: np.ndarray, w2: np.ndarray,
                             gm: Optional[GateMask], b1=None, b2=None,
                             hidden_fn=None):
    """Inference twin of dgl_pair_forward that gathers surviving columns
    and rows instead of multiplying by zeros.

    Returns (y, z) with y scattered back to full width (zeros at dropped
    units) so both paths are directly comparable. hidden_fn, when given,
    receives (hidden (B', N, k), kept_idx) and must match the masked
    path's transform restricted to the kept channels.
    """
    _check_pair(Tensor(w1), Tensor(w2), gm)
    x = np.asarray(x)
    width = w1.shape[-1]
    if gm is None:
        y = x @ w1 + (0.0 if b1 is None else b1)
        h = hidden_fn(y, np.arange(width)) if hidden_fn is not None else y
        return y, h @ w2 + (0.0 if b2 is None else b2)
    support = gm.support
    vals = gm.mask.data
    if support.ndim == 1:
        support = np.broadcast_to(support, (x.shape[0], width))
        vals = np.broadcast_to(vals, support.shape)
    y_full = np.zeros(x.shape[:-1] + (width,), dtype=x.dtype)
    z = np.empty(x.shape[:-1] + (w2.shape[1],), dtype=x.dtype)
    for b in range(x.shape[0]):
        idx = np.flatnonzero(support[b])
        scale = vals[b, idx]
        y = x[b][None] @ w1[:, idx]
        if b1 is not None:
            y = y + b1[idx]
        y = y * scale
        y_full[b][..., idx] = y[0]
        h = hidden_fn(y, idx) if hidden_fn is not None else y
        h = h * scale
        z[b] = (h @ w2[idx, :])[0]
        if b2 is not None:
            z[b] += b2
    return y_full, z


def sparsity_loss(gate_masks, lam: float) -> Tensor:
    """lam times the summed L1 mass of every pre-selection gate vector
    in the batch. Gate values are non-negative by construction, so the
    L1 norm is a plain sum. Returns a scalar tensor, zero when nothing
    is gated."""
    total = None
    for gm in gate_masks:
        if gm is None or gm.logits is None:
            continue
        term = T.sum_all(gm.logits)
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.asarray(0.0))
    return total * lam


def gate_flops(n_patches: int, in_dim: int, width: int) -> int:
    """Closed-form cost of one gate evaluation at one FLOP per
    multiply-accumulate: patch pooling, input normalization (8 per
    element), projection through the pair weight, the two MLP matmuls
    with ReLUs, and an n log n selection term. Only the pooling term
    depends on the sequence length."""
    hidden = max(4, width // 4)
    pool = n_patches * in_dim
    norm = 8 * in_dim
    proj = in_dim * width
    mlp = width * hidden + hidden * width + hidden + width
    select = width * max(1, math.ceil(math.log2(width))) if width > 1 else 1
    return pool + norm + proj + mlp + select


class GateContext:
    """Per-forward gating policy handed to the encoder.

    mode "dynamic" predicts gates from the input, "static" looks up
    fixed masks by (layer_id, kind), "forced" replays provided masks,
    "off" runs dense. With record=True every produced GateMask is
    appended to .records as (layer_id, kind, GateMask).
    """

    MODES = ("dynamic", "static", "forced", "off")

    def __init__(self, mode: str, keep_fraction: float = 1.0,
                 static_masks=None, forced=None, record: bool = False):
        if mode not in self.MODES:
            raise ContractError(f"unknown gate mode {mode!r}; expected one of {self.MODES}")
        self.mode = mode
        self.keep_fraction = keep_fraction
        self.static_masks = static_masks or {}
        self.forced = forced or {}
        self.record = record
        self.records = []

    @staticmethod
    def _as_mask(obj) -> GateMask:
        if isinstance(obj, GateMask):
            return obj
        mask = getattr(obj, "mask", obj)
        vec = np.asarray(mask, dtype=T.DTYPE)
        return GateMask(logits=None, mask=Tensor(vec),
                        kept_count=int(np.count_nonzero(vec)),
                        support=vec > 0)

    def gate(self, layer_id: str, kind: str, x: Tensor, w1: Tensor,
             predictor: Optional[GatePredictor]) -> Optional[GateMask]:
        if self.mode == "off":
            return None
        if self.mode == "dynamic":
            if predictor is None:
                raise ContractError(
                    f"layer {layer_id} has no gate predictor for kind {kind!r}; "
                    "build the model with gated=True")
            gm = predict_gate(x, w1, predictor, self.keep_fraction)
        elif self.mode == "static":
            key = (layer_id, kind)
            if key not in self.static_masks:
                raise ContractError(f"no static mask for {key}")
            gm = self._as_mask(self.static_masks[key])
        else:
            key = (layer_id, kind)
            if key not in self.forced:
                return None
            gm = self._as_mask(self.forced[key])
        if self.record:
            self.records.append((layer_id, kind, gm))
        return gm
