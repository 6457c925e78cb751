"""Input-invariant magnitude pruning baseline.

A pair's hidden units are ranked once by the L1 norm of their incoming
weight column; the smallest columns are masked with a binary vector
that every input shares. Masks are recomputed from current weights
whenever the keep fraction changes, so an annealed run re-ranks at
each tightening; between changes the mask is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gating import GateMask, dgl_pair_forward, kept_count
from .tensor import DTYPE, Tensor


@dataclass
class StaticMask:
    """Binary, input-independent gate over one pair's hidden units."""

    layer_id: str
    mask: np.ndarray
    kept_count: int

    def as_gate(self) -> GateMask:
        return GateMask(logits=None, mask=Tensor(self.mask),
                        kept_count=self.kept_count, support=self.mask > 0)


def magnitude_mask(w1, keep_fraction: float, layer_id: str = "") -> StaticMask:
    """Keep the columns of w1 with the largest L1 norms; ties break
    toward the lower index. Same survivor-count rounding as the dynamic
    gate."""
    w1 = w1.data if isinstance(w1, Tensor) else np.asarray(w1)
    scores = np.abs(w1).sum(axis=0)
    k = kept_count(keep_fraction, scores.shape[0])
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(scores.shape[0], dtype=DTYPE)
    mask[order[:k]] = 1.0
    return StaticMask(layer_id=layer_id, mask=mask, kept_count=k)


def apply_static(x, w1, w2, mask: StaticMask, b1=None, b2=None, hidden_fn=None):
    """Masked pair execution with a binary input-invariant mask; same
    semantics as the dynamic pair forward."""
    return dgl_pair_forward(x, w1, w2, mask.as_gate(), b1, b2, hidden_fn)


def build_static_masks(model, keep_fraction: float) -> dict:
    """(layer_id, kind) -> StaticMask over every gateable pair,
    ranked from the pair's current first weight."""
    return {
        (layer_id, kind): magnitude_mask(w1, keep_fraction, f"{layer_id}.{kind}")
        for layer_id, kind, w1 in model.gated_pairs()
    }
