"""Dual-stream transformer with shared-key interaction layers and task heads.

Both streams share a padded length ``m`` and width ``d``.  Position 0 of each
stream is a learned CLS slot.  The last ``n_interact`` layers replace the
input-dependent self-key with a learnable key of shape (H, m, d/H) that is
shared by the visual and textual stream at that layer, plus a per-stream
(H, m, m) attention bias.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, StateError
from .tensor import Parameter, Tensor

PAD_ID = 0
CLS_ID = 1
N_RESERVED_TOKENS = 2
SPAN_NONE, SPAN_HEAD, SPAN_TAIL = 0, 1, 2
IGNORE = -100
STREAMS = ("visual", "textual")


@dataclass
class EncoderConfig:
    n_layers: int = 4
    n_heads: int = 2
    d_model: int = 32
    seq_len: int = 16
    n_interact: int = 3
    vocab_size: int = 200
    patch_dim: int = 16
    ffn_mult: int = 2

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.n_interact <= self.n_layers:
            raise ConfigError(f"n_interact={self.n_interact} must be in [0, n_layers={self.n_layers}]")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2 (position 0 is the CLS slot)")
        if self.vocab_size <= N_RESERVED_TOKENS or self.patch_dim < 1 or self.ffn_mult < 1:
            raise ConfigError("vocab_size, patch_dim and ffn_mult must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class Batch:
    tokens: np.ndarray  # (B, m) int, CLS at 0
    spans: np.ndarray  # (B, m) int span markers
    patches: np.ndarray  # (B, m, patch_dim), row 0 unused (CLS slot)
    labels: np.ndarray | None = None  # (B,) MRE head rows
    tags: np.ndarray | None = None  # (B, m) MNER tag rows, IGNORE on CLS/pad

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class AttentionSnapshot:
    """Interaction-layer maps, each (B, H, m, m), keyed by stream."""

    prescaled: dict[str, list[Tensor]] = field(default_factory=dict)
    softmax: dict[str, list[Tensor]] = field(default_factory=dict)

    def maps(self, kind: str = "prescaled") -> dict[str, list[Tensor]]:
        if kind not in ("prescaled", "softmax"):
            raise ConfigError(f"unknown attention map kind {kind!r}")
        return self.prescaled if kind == "prescaled" else self.softmax

    def detached(self) -> "AttentionSnapshot":
        return AttentionSnapshot(
            {s: [m.detach() for m in ms] for s, ms in self.prescaled.items()},
            {s: [m.detach() for m in ms] for s, ms in self.softmax.items()},
        )


@dataclass
class MREOutput:
    logits: Tensor
    partial_v: Tensor
    partial_t: Tensor
    snapshot: AttentionSnapshot


@dataclass
class NEROutput:
    logits: Tensor  # (B, m, n_tags)
    partial_v: Tensor
    partial_t: Tensor
    snapshot: AttentionSnapshot


def collate(examples: Sequence, config: EncoderConfig, model: "DualStreamModel | None" = None,
            truncate: bool = False) -> Batch:
    """Pad a list of examples into a Batch; labels are mapped to head rows if ``model`` is given."""
    m, p = config.seq_len, config.patch_dim
    n = len(examples)
    tokens = np.full((n, m), PAD_ID, dtype=np.int64)
    tokens[:, 0] = CLS_ID
    spans = np.zeros((n, m), dtype=np.int64)
    patches = np.zeros((n, m, p))
    labels = tags = None
    task = model.task if model is not None else None
    if task == "mre":
        labels = np.zeros(n, dtype=np.int64)
    elif task == "ner":
        tags = np.full((n, m), IGNORE, dtype=np.int64)
    for b, ex in enumerate(examples):
        toks = list(ex.tokens)
        pats = np.asarray(ex.patches, dtype=np.float64).reshape(-1, p) if len(ex.patches) else np.zeros((0, p))
        if len(toks) > m - 1 or len(pats) > m - 1:
            if not truncate:
                raise InputError(
                    f"example {getattr(ex, 'uid', b)}: {len(toks)} tokens / {len(pats)} patches exceed m-1={m - 1}"
                )
            toks, pats = toks[: m - 1], pats[: m - 1]
        tokens[b, 1 : 1 + len(toks)] = toks
        patches[b, 1 : 1 + len(pats)] = pats
        for marker, span in zip((SPAN_HEAD, SPAN_TAIL), getattr(ex, "spans", None) or ()):
            lo, hi = span
            spans[b, 1 + lo : 1 + min(hi, m - 1)] = marker
        if task == "mre":
            labels[b] = model.row_of(ex.label)
        elif task == "ner":
            for i, tag in enumerate(ex.tags[: m - 1]):
                tags[b, 1 + i] = model.row_of(tag)
    return Batch(tokens, spans, patches, labels, tags)


class DualStreamModel:
    """Visual + textual transformer encoders with an expandable MRE or MNER head."""

    def __init__(self, config: EncoderConfig, task: str = "mre", interaction: bool = True, seed: int = 0):
        config.validate()
        if task not in ("mre", "ner"):
            raise ConfigError(f"task must be 'mre' or 'ner', got {task!r}")
        self.config = config
        self.task = task
        self.interaction = interaction
        self.seed = seed
        self.frozen = False
        self.shared_key_frozen = False
        self.classes: list = []  # MRE: relation ids; MNER: entity type names
        self._rows: dict = {}
        self.params: dict[str, Parameter] = {}
        self._build(np.random.default_rng(seed))

    # ------------------------------------------------------------------ setup

    def _add(self, name: str, data: np.ndarray, tag: str) -> Parameter:
        p = Parameter(data, tag, name)
        self.params[name] = p
        return p

    def _build(self, rng: np.random.Generator) -> None:
        c = self.config
        d, m, H, dh, f = c.d_model, c.seq_len, c.n_heads, c.head_dim, c.d_model * c.ffn_mult
        tags = {"t": "Textual", "v": "Visual"}

        def dense(n_in, n_out):
            return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

        self._add("t.tok_emb", rng.normal(0.0, 1.0, size=(c.vocab_size, d)), "Textual")
        self._add("t.span_emb", rng.normal(0.0, 0.1, size=(3, d)), "Textual")
        self._add("t.pos_emb", rng.normal(0.0, 0.1, size=(m, d)), "Textual")
        self._add("v.patch_w", dense(c.patch_dim, d), "Visual")
        self._add("v.patch_b", np.zeros(d), "Visual")
        self._add("v.cls", rng.normal(0.0, 1.0, size=d), "Visual")
        self._add("v.pos_emb", rng.normal(0.0, 0.1, size=(m, d)), "Visual")
        for layer in range(c.n_layers):
            shared = self.is_interaction_layer(layer) and self.interaction
            for s in ("t", "v"):
                pre = f"{s}.{layer}."
                tag = tags[s]
                self._add(pre + "ln1_g", np.ones(d), tag)
                self._add(pre + "ln1_b", np.zeros(d), tag)
                self._add(pre + "wq", dense(d, d), tag)
                self._add(pre + "bq", np.zeros(d), tag)
                if not shared:
                    self._add(pre + "wk", dense(d, d), tag)
                    self._add(pre + "bk", np.zeros(d), tag)
                self._add(pre + "wv", dense(d, d), tag)
                self._add(pre + "bv", np.zeros(d), tag)
                self._add(pre + "wo", dense(d, d), tag)
                self._add(pre + "bo", np.zeros(d), tag)
                self._add(pre + "ln2_g", np.ones(d), tag)
                self._add(pre + "ln2_b", np.zeros(d), tag)
                self._add(pre + "w1", dense(d, f), tag)
                self._add(pre + "b1", np.zeros(f), tag)
                self._add(pre + "w2", dense(f, d), tag)
                self._add(pre + "b2", np.zeros(d), tag)
        for s in ("t", "v"):
            self._add(f"{s}.lnf_g", np.ones(d), tags[s])
            self._add(f"{s}.lnf_b", np.zeros(d), tags[s])
        if self.interaction:
            for layer in self.interaction_layers:
                self._add(f"shared_key.{layer}", rng.normal(0.0, 1.0, size=(H, m, dh)), "Shared")
            for layer in self.interaction_layers:
                for s in ("t", "v"):
                    self._add(f"{s}.attn_bias.{layer}", np.zeros((H, m, m)), tags[s])
        self._add("head.w", np.zeros((0, 2 * d)), "Head")

    def is_interaction_layer(self, layer: int) -> bool:
        return layer >= self.config.n_layers - self.config.n_interact

    @property
    def interaction_layers(self) -> list[int]:
        return [l for l in range(self.config.n_layers) if self.is_interaction_layer(l)]

    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        ps = list(self.params.values())
        if trainable_only and self.shared_key_frozen:
            ps = [p for p in ps if p.tag != "Shared"]
        return ps

    @property
    def n_rows(self) -> int:
        return self.params["head.w"].shape[0]

    def row_of(self, label) -> int:
        try:
            return self._rows[label]
        except KeyError:
            raise StateError(f"label {label!r} has no head row (seen: {self.classes})") from None

    def tag_names(self) -> list[str]:
        """Tag string for each MNER head row."""
        names = ["O"]
        for etype in self.classes:
            names += [f"B-{etype}", f"I-{etype}"]
        return names

    # --------------------------------------------------------------- encoding

    def _attention(self, x: Tensor, s: str, layer: int) -> tuple[Tensor, Tensor, Tensor]:
        c = self.config
        B, m, d = x.shape
        H, dh = c.n_heads, c.head_dim
        p = self.params
        pre = f"{s}.{layer}."
        h = T.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])

        def heads(w, b):
            y = T.linear(h, p[pre + w], p[pre + b])
            return T.transpose(T.reshape(y, (B, m, H, dh)), (0, 2, 1, 3))

        q, v = heads("wq", "bq"), heads("wv", "bv")
        if self.interaction and self.is_interaction_layer(layer):
            key = T.swapaxes(p[f"shared_key.{layer}"], -1, -2)
            a = T.matmul(q, key)
            a = a + T.broadcast_to(p[f"{s}.attn_bias.{layer}"], a.shape)
        else:
            a = T.matmul(q, T.swapaxes(heads("wk", "bk"), -1, -2))
        a = a * (1.0 / math.sqrt(dh))
        probs = T.softmax(a, axis=-1)
        z = T.matmul(probs, v)
        z = T.reshape(T.transpose(z, (0, 2, 1, 3)), (B, m, d))
        return x + T.linear(z, p[pre + "wo"], p[pre + "bo"]), a, probs

    def _ffn(self, x: Tensor, s: str, layer: int) -> Tensor:
        p = self.params
        pre = f"{s}.{layer}."
        h = T.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
        h = T.relu(T.linear(h, p[pre + "w1"], p[pre + "b1"]))
        return x + T.linear(h, p[pre + "w2"], p[pre + "b2"])

    def embed(self, stream: str, batch: Batch) -> Tensor:
        p = self.params
        m, d = self.config.seq_len, self.config.d_model
        B = len(batch)
        if batch.tokens.shape[1] != m:
            raise InputError(f"batch length {batch.tokens.shape[1]} != seq_len {m}")
        if stream == "textual":
            x = T.embedding(p["t.tok_emb"], batch.tokens) + T.embedding(p["t.span_emb"], batch.spans)
            return x + T.broadcast_to(p["t.pos_emb"], (B, m, d))
        if stream == "visual":
            proj = T.linear(Tensor(batch.patches[:, 1:]), p["v.patch_w"], p["v.patch_b"])
            cls = T.broadcast_to(T.reshape(p["v.cls"], (1, 1, d)), (B, 1, d))
            return T.concat([cls, proj], axis=1) + T.broadcast_to(p["v.pos_emb"], (B, m, d))
        raise ConfigError(f"unknown stream {stream!r}")

    def encode(self, stream: str, batch: Batch) -> tuple[Tensor, list[Tensor], list[Tensor]]:
        """Run one stream; returns hidden states (B, m, d) and the last-layer maps.

        The maps cover the last ``n_interact`` layers, whether or not they use
        the shared key, as (prescaled, softmax) lists of (B, H, m, m) tensors.
        """
        s = stream[0]
        x = self.embed(stream, batch)
        pres, probs = [], []
        for layer in range(self.config.n_layers):
            x, a, pr = self._attention(x, s, layer)
            if self.is_interaction_layer(layer):
                pres.append(a)
                probs.append(pr)
            x = self._ffn(x, s, layer)
        x = T.layer_norm(x, self.params[f"{s}.lnf_g"], self.params[f"{s}.lnf_b"])
        return x, pres, probs

    def encode_both(self, batch: Batch) -> tuple[Tensor, Tensor, AttentionSnapshot]:
        h_v, pv, sv = self.encode("visual", batch)
        h_t, pt, st = self.encode("textual", batch)
        snap = AttentionSnapshot({"visual": pv, "textual": pt}, {"visual": sv, "textual": st})
        return h_v, h_t, snap

    def snapshot(self, batch: Batch) -> AttentionSnapshot:
        """Attention maps only, detached (used with the frozen previous-task model)."""
        with T.no_grad():
            return self.encode_both(batch)[2].detached()

    # ------------------------------------------------------------------ heads

    def _check_head(self) -> None:
        expected = len(self.classes) if self.task == "mre" else 1 + 2 * len(self.classes)
        if self.n_rows != expected or self.n_rows == 0:
            raise StateError(f"head has {self.n_rows} rows but {expected} are expected")

    def _head_blocks(self) -> tuple[Tensor, Tensor]:
        d = self.config.d_model
        w = self.params["head.w"]
        w_t = T.swapaxes(w[:, :d], 0, 1)  # (d, C): textual block
        w_v = T.swapaxes(w[:, d:], 0, 1)  # (d, C): visual block
        return w_t, w_v

    def forward_mre(self, batch: Batch) -> MREOutput:
        if self.task != "mre":
            raise StateError("forward_mre on a model with an MNER head")
        self._check_head()
        h_v, h_t, snap = self.encode_both(batch)
        w_t, w_v = self._head_blocks()
        partial_t = T.matmul(h_t[:, 0, :], w_t)
        partial_v = T.matmul(h_v[:, 0, :], w_v)
        return MREOutput(partial_t + partial_v, partial_v, partial_t, snap)

    def forward_ner(self, batch: Batch) -> NEROutput:
        if self.task != "ner":
            raise StateError("forward_ner on a model with an MRE head")
        self._check_head()
        h_v, h_t, snap = self.encode_both(batch)
        B, m, d = h_t.shape
        w_t, w_v = self._head_blocks()
        vis = T.broadcast_to(T.reshape(h_v[:, 0, :], (B, 1, d)), (B, m, d))
        vis = vis + T.broadcast_to(self.params["t.pos_emb"], (B, m, d))
        partial_t = T.matmul(h_t, w_t)
        partial_v = T.matmul(vis, w_v)
        return NEROutput(partial_t + partial_v, partial_v, partial_t, snap)

    def forward(self, batch: Batch) -> MREOutput | NEROutput:
        return self.forward_mre(batch) if self.task == "mre" else self.forward_ner(batch)

    def expand_head(self, new_classes: Sequence) -> "DualStreamModel":
        """Append zero-mean uniform rows for new classes; existing rows are untouched."""
        new_classes = list(new_classes)
        dup = [c for c in new_classes if c in self._rows or new_classes.count(c) > 1]
        if dup:
            raise StateError(f"classes already present in head: {dup}")
        if not new_classes:
            return self
        if self.task == "ner" and not self.classes and self.n_rows == 0:
            self._rows["O"] = 0
            n_init = 1
        else:
            n_init = 0
        per_class = 1 if self.task == "mre" else 2
        d2 = 2 * self.config.d_model
        n_new = n_init + per_class * len(new_classes)
        rng = np.random.default_rng([self.seed, 104729, self.n_rows])
        scale = 1.0 / math.sqrt(d2)
        w = self.params["head.w"]
        w.resize(np.concatenate([w.data, rng.uniform(-scale, scale, size=(n_new, d2))], axis=0))
        for c in new_classes:
            self.classes.append(c)
            if self.task == "mre":
                self._rows[c] = len(self._rows)
            else:
                k = len(self.classes) - 1
                self._rows[f"B-{c}"] = 1 + 2 * k
                self._rows[f"I-{c}"] = 2 + 2 * k
        return self

    # ---------------------------------------------------------------- copying

    def freeze_copy(self) -> "DualStreamModel":
        """Deep copy with gradient tracking disabled on every parameter."""
        twin = copy.deepcopy(self)
        twin.frozen = True
        for p in twin.params.values():
            p.requires_grad = False
            p.grad = np.zeros_like(p.data)
        return twin

    def state(self) -> dict:
        """JSON-able non-parameter state (config, switches, class roster)."""
        return {
            "config": asdict(self.config),
            "task": self.task,
            "interaction": self.interaction,
            "seed": self.seed,
            "shared_key_frozen": self.shared_key_frozen,
            "classes": list(self.classes),
        }

    @classmethod
    def from_state(cls, state: dict, arrays: dict[str, np.ndarray]) -> "DualStreamModel":
        model = cls(EncoderConfig(**state["config"]), state["task"], state["interaction"], state["seed"])
        model.shared_key_frozen = state["shared_key_frozen"]
        if list(arrays) != list(model.params):
            raise StateError("checkpoint parameter list does not match the model layout")
        classes = state["classes"]
        if classes:
            model.expand_head(classes)
        for name, arr in arrays.items():
            p = model.params[name]
            if p.shape != arr.shape:
                raise StateError(f"parameter {name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = np.array(arr, dtype=np.float64)
        return model
