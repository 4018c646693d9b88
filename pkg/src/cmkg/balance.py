"""Gradient modulation toward a balanced visual/textual learning rhythm.

Per batch, each modality's contribution is the softmax probability its own
partial logits assign to the true label.  The ratio gamma of the textual sum to
the visual sum drives a coefficient g = 1 - tanh(alpha * gamma) (gamma > 1,
else 1).  On the first task g scales the update directly; on later tasks the
mean coefficient of the previous task is used for every batch.

Two directions are supported:

``literal``
    g computed from the text/visual ratio scales the Visual encoder.
``symmetric`` (default)
    whichever modality dominates is slowed, using its dominance ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LabelError, StateError
from .tensor import softmax_array

MODES = ("literal", "symmetric")
ENCODER_TAGS = ("Visual", "Textual")


@dataclass
class ContributionStats:
    s_v_sum: float
    s_t_sum: float

    @property
    def gamma_t(self) -> float:
        return ratio(self)


def contribution_scores(partial_logits_v, partial_logits_t, labels, ignore_index: int = -100):
    """Per-example probability of the true label under each modality's own logits.

    Logits are (N, C) arrays (or Tensors); rows whose label equals
    ``ignore_index`` are dropped.
    """
    lv = np.asarray(getattr(partial_logits_v, "data", partial_logits_v), dtype=np.float64)
    lt = np.asarray(getattr(partial_logits_t, "data", partial_logits_t), dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    lv = lv.reshape(-1, lv.shape[-1])
    lt = lt.reshape(-1, lt.shape[-1])
    keep = y != ignore_index
    lv, lt, y = lv[keep], lt[keep], y[keep]
    c = lv.shape[1]
    bad = (y < 0) | (y >= c)
    if bad.any():
        raise LabelError(f"label {int(y[bad][0])} out of range for {c} classes")
    rows = np.arange(len(y))
    return softmax_array(lv, axis=1)[rows, y], softmax_array(lt, axis=1)[rows, y]


def ratio(stats: ContributionStats) -> float:
    """gamma = sum(s_t) / sum(s_v)."""
    if not stats.s_v_sum > 0:
        raise StateError("degenerate batch: visual contribution sum is zero")
    return stats.s_t_sum / stats.s_v_sum


def coefficient(gamma: float, alpha: float) -> float:
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    if not gamma > 1.0:
        return 1.0
    # 1 - tanh(x) == 2 e^{-2x} / (1 + e^{-2x}); this form stays positive for large x
    e = math.exp(-2.0 * alpha * gamma)
    return max(2.0 * e / (1.0 + e), np.finfo(float).tiny)


@dataclass
class ModulationState:
    alpha: float = 0.5
    mode: str = "symmetric"
    g_history: list[dict[str, float]] = field(default_factory=list)
    G_prev: dict[str, float] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"modulation mode must be one of {MODES}, got {self.mode!r}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    def batch_scales(self, gamma: float) -> dict[str, float]:
        """Encoder scales implied by this batch's gamma alone."""
        if self.mode == "literal":
            return {"Visual": coefficient(gamma, self.alpha), "Textual": 1.0}
        if gamma > 1.0:
            return {"Visual": 1.0, "Textual": coefficient(gamma, self.alpha)}
        if 0.0 < gamma < 1.0:
            return {"Visual": coefficient(1.0 / gamma, self.alpha), "Textual": 1.0}
        return {"Visual": 1.0, "Textual": 1.0}

    def record(self, scales: dict[str, float]) -> None:
        for tag in ENCODER_TAGS:
            if not 0.0 < scales[tag] <= 1.0:
                raise StateError(f"coefficient {scales[tag]} for {tag} outside (0, 1]")
        self.g_history.append({tag: float(scales[tag]) for tag in ENCODER_TAGS})

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "mode": self.mode, "g_history": self.g_history, "G_prev": self.G_prev}

    @classmethod
    def from_dict(cls, d: dict) -> "ModulationState":
        return cls(d["alpha"], d["mode"], [dict(g) for g in d["g_history"]], d["G_prev"])


def finish_task(state: ModulationState) -> dict[str, float]:
    """Average the task's coefficients into G, store it as G_prev, clear the history."""
    if not state.g_history:
        raise StateError("finish_task with an empty coefficient history")
    n = len(state.g_history)
    G = {tag: math.fsum(g[tag] for g in state.g_history) / n for tag in ENCODER_TAGS}
    state.G_prev = G
    state.g_history = []
    return G


def modulated_scales(state: ModulationState, gamma: float, k: int) -> dict[str, float]:
    """Full tag -> scale map for an update on task ``k`` (1-based).

    Shared and Head parameters are never modulated.
    """
    if k == 1:
        enc = state.batch_scales(gamma)
    else:
        if state.G_prev is None:
            raise StateError(f"task {k}: no averaged coefficient from task {k - 1}")
        enc = dict(state.G_prev)
    return {**enc, "Shared": 1.0, "Head": 1.0}


def unit_scales() -> dict[str, float]:
    return {"Visual": 1.0, "Textual": 1.0, "Shared": 1.0, "Head": 1.0}
