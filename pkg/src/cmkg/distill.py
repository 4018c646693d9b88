"""Asymmetric attention distillation and total-loss assembly."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import STREAMS, AttentionSnapshot
from .errors import ConfigError, DimensionError, StateError
from .tensor import Tensor


def pool(attn):
    """Sum an attention map over its query (height) axis: out[w] = sum_h map[h, w].

    Accepts an array or a Tensor of shape (..., m, m).
    """
    if isinstance(attn, Tensor):
        return T.sum(attn, axis=-2)
    return np.asarray(attn, dtype=np.float64).sum(axis=-2)


def asym_delta(old_pooled, new_pooled) -> float:
    """|| relu(old - new) ||_2 -- only attention that went missing is penalised."""
    old = np.asarray(old_pooled, dtype=np.float64)
    new = np.asarray(new_pooled, dtype=np.float64)
    if old.shape != new.shape:
        raise DimensionError(f"asym_delta: shapes {old.shape} and {new.shape} differ")
    return float(np.linalg.norm(np.maximum(old - new, 0.0)))


def attention_distill_loss(snap_old: AttentionSnapshot, snap_new: AttentionSnapshot,
                           kind: str = "prescaled") -> Tensor:
    """Sum over streams, interaction layers, heads and examples of asym_delta, divided by batch size.

    ``snap_old`` is treated as a constant; gradients flow only into ``snap_new``.
    """
    old_maps, new_maps = snap_old.maps(kind), snap_new.maps(kind)
    total = None
    batch = None
    for stream in STREAMS:
        olds, news = old_maps.get(stream), new_maps.get(stream)
        if olds is None or news is None or len(olds) != len(news):
            raise StateError(f"snapshot mismatch on the {stream} stream")
        for layer, (old, new) in enumerate(zip(olds, news)):
            if old.shape != new.shape:
                raise StateError(f"{stream} layer {layer}: map shapes {old.shape} vs {new.shape}")
            batch = new.shape[0]
            gap = T.sub(Tensor(pool(old.data)), pool(new))  # (B, H, m)
            term = T.sum(T.l2norm(T.relu(gap), axis=-1))
            total = term if total is None else total + term
    if total is None:
        raise StateError("snapshots contain no interaction layers")
    return total * (1.0 / batch)


def total_loss(ce: Tensor, ad: Tensor | None, lam: float) -> Tensor:
    """lam * L_AD + L_CE; with no distillation term (task 1) this is L_CE itself."""
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    if ad is None or lam == 0:
        return ce
    return ce + ad * lam
