"""Per-task training (current-task phase, memory update, replay phase) and the lifelong loop."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .balance import ContributionStats, ModulationState, contribution_scores, finish_task, modulated_scales, ratio, unit_scales
from .distill import attention_distill_loss, total_loss
from .encoder import IGNORE, DualStreamModel, EncoderConfig, collate
from .errors import ConfigError, StateError
from .memory import MemoryBank
from .metrics import MetricsReport, ScoreMatrix, f1_counts, f1_from_counts, gold_of
from .taskstream import Example, TaskStream

log = logging.getLogger(__name__)

# rng purpose keys
_INIT, _SHUFFLE, _SELECT, _REPLAY, _JOINT = 11, 12, 13, 14, 15


@dataclass
class DistillConfig:
    lam: float = 0.1
    maps: str = "prescaled"  # or "softmax"

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"distill.lam must be >= 0, got {self.lam}")
        if self.maps not in ("prescaled", "softmax"):
            raise ConfigError(f"distill.maps must be 'prescaled' or 'softmax', got {self.maps!r}")


@dataclass
class TrainerConfig:
    epochs_c: int = 10
    epochs_m: int = 5
    batch_size: int = 16
    lr: float = 0.05
    alpha: float = 0.5
    budget_per_class: int | None = 10  # None = unbounded
    global_budget: int | None = None
    seed: int = 0
    mi: bool = True
    ad: bool = True
    gm: bool = True
    mm: bool = True
    modulation_mode: str = "symmetric"
    freeze_shared_key: bool = False
    eval_batch_size: int = 64

    def validate(self) -> None:
        if self.epochs_c < 0 or self.epochs_m < 0 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epoch counts must be >= 0 and batch sizes >= 1")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"trainer.lr must be positive, got {self.lr}")
        if not self.alpha > 0:
            raise ConfigError(f"trainer.alpha must be positive, got {self.alpha}")
        if self.budget_per_class is not None and self.budget_per_class < 0:
            raise ConfigError("trainer.budget_per_class must be >= 0 or null")
        if self.modulation_mode not in ("symmetric", "literal"):
            raise ConfigError(f"unknown modulation_mode {self.modulation_mode!r}")


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def vanilla(cfg: TrainerConfig) -> TrainerConfig:
    """Plain fine-tuning lower bound: every switch off, no memory."""
    return dataclasses.replace(cfg, mi=False, ad=False, gm=False, mm=False, budget_per_class=0)


def joint_endpoint(cfg: TrainerConfig) -> TrainerConfig:
    """Upper bound: replay of every past training example (unbounded memory), nothing else."""
    return dataclasses.replace(cfg, mi=False, ad=False, gm=False, mm=True, budget_per_class=None,
                               global_budget=None)


def predict(model: DualStreamModel, examples: Sequence[Example], batch_size: int = 64) -> list:
    """Class-incremental predictions: argmax over every head row seen so far."""
    preds: list = []
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            batch = collate(chunk, model.config, None)
            out = model.forward(batch)
            rows = out.logits.data.argmax(axis=-1)
            if model.task == "mre":
                preds.extend(model.classes[r] for r in rows)
            else:
                names = model.tag_names()
                for ex, row in zip(chunk, rows):
                    preds.append([names[r] for r in row[1 : 1 + len(ex.tags)]])
    return preds


def score_mode(task_type: str) -> str:
    return "mre_exclude_na" if task_type == "mre" else "mner_span"


class LifelongTrainer:
    """Owns model, frozen previous model, memory bank and modulation state for one run."""

    def __init__(self, stream: TaskStream, trainer: TrainerConfig | None = None,
                 encoder: EncoderConfig | None = None, distill: DistillConfig | None = None,
                 config_hash: str = "", run_id: str = "run",
                 emit: Callable[[dict], None] | None = None):
        self.stream = stream
        self.cfg = trainer or TrainerConfig()
        self.ecfg = encoder or EncoderConfig()
        self.dcfg = distill or DistillConfig()
        self.cfg.validate()
        self.dcfg.validate()
        self.config_hash = config_hash
        self.run_id = run_id
        self.emit = emit or (lambda rec: None)
        seed = self.cfg.seed
        self.model = DualStreamModel(self.ecfg, stream.task_type, interaction=self.cfg.mi,
                                     seed=int(rng_for(seed, _INIT).integers(2**31)))
        budget = self.cfg.budget_per_class if self.cfg.mm else 0
        self.memory = MemoryBank(budget, seed, self.cfg.global_budget if self.cfg.mm else None)
        self.modulation = ModulationState(self.cfg.alpha, self.cfg.modulation_mode)
        self.frozen: DualStreamModel | None = None
        self.scores = ScoreMatrix(stream.K)
        self.trained = 0
        self.A: list[float] = []
        self.U: list[float] = []
        self.records: list[dict] = []
        self.trace: list[dict] = []
        self.predictions: dict[tuple[int, int], list] = {}
        self.counts: dict[tuple[int, int], tuple[int, int, int]] = {}

    # ---------------------------------------------------------------- steps

    def _base(self, event: str) -> dict:
        return {"event": event, "run_id": self.run_id, "config_hash": self.config_hash, "seed": self.cfg.seed}

    def _loss_parts(self, batch):
        out = self.model.forward(batch)
        if self.model.task == "mre":
            labels = batch.labels
            ce = T.cross_entropy(out.logits, labels)
        else:
            B, m, C = out.logits.shape
            labels = batch.tags.reshape(-1)
            ce = T.cross_entropy(T.reshape(out.logits, (B * m, C)), labels, ignore_index=IGNORE)
        return out, ce, labels

    def step(self, examples: Sequence[Example], k: int, phase: str, epoch: int, index: int,
             distill: bool) -> dict:
        """One SGD update on ``examples``; returns its trace record."""
        model = self.model
        batch = collate(examples, self.ecfg, model)
        T.new_tape()
        out, ce, labels = self._loss_parts(batch)
        ad = None
        if distill:
            old = self.frozen.snapshot(batch)
            ad = attention_distill_loss(old, out.snapshot, self.dcfg.maps)
        loss = total_loss(ce, ad, self.dcfg.lam if distill else 0.0)
        T.backward(loss)

        s_v, s_t = contribution_scores(out.partial_v, out.partial_t, labels, ignore_index=IGNORE)
        gamma = ratio(ContributionStats(float(s_v.sum()), float(s_t.sum())))
        batch_scales = self.modulation.batch_scales(gamma)
        self.modulation.record(batch_scales)
        scales = modulated_scales(self.modulation, gamma, k) if self.cfg.gm else unit_scales()
        if model.shared_key_frozen:
            T.zero_grad(p for p in model.parameters() if p.tag == "Shared")
        T.sgd_step(model.parameters(trainable_only=True), self.cfg.lr, scales)
        rec = {
            **self._base("batch-trace"),
            "task": k, "phase": phase, "epoch": epoch, "batch": index,
            "gamma": gamma, "g": min(batch_scales.values()), "mode": self.modulation.mode,
            "scale_visual": scales["Visual"], "scale_textual": scales["Textual"],
            "gm": self.cfg.gm, "loss": loss.item(), "ce": ce.item(),
            "ad": ad.item() if ad is not None else None,
        }
        self.trace.append(rec)
        self.emit(rec)
        return rec

    # ----------------------------------------------------------------- tasks

    def train_task(self, k: int) -> dict:
        """Train task ``k``: current-task phase, memory update, replay phase."""
        if k != self.trained + 1:
            raise StateError(f"task {k} requested but {self.trained} tasks are trained")
        cfg = self.cfg
        t0 = time.perf_counter()
        snap = self.stream[k]
        self.frozen = self.model.freeze_copy() if k > 1 else None
        self.model.expand_head(snap.new_classes if k > 1 else self._first_classes(snap))
        distill = k > 1 and cfg.ad and self.dcfg.lam > 0
        trace_start = len(self.trace)

        train = list(snap.train)
        for epoch in range(1, cfg.epochs_c + 1):
            order = rng_for(cfg.seed, _SHUFFLE, k, epoch).permutation(len(train))
            for b, start in enumerate(range(0, len(train), cfg.batch_size)):
                chunk = [train[i] for i in order[start : start + cfg.batch_size]]
                self.step(chunk, k, "current", epoch, b, distill)

        if cfg.mm and not self.memory.disabled:
            self.memory.offer(train, rng_for(cfg.seed, _SELECT, k))
            for epoch in range(1, cfg.epochs_m + 1):
                batches = self.memory.replay_batches(cfg.batch_size, rng_for(cfg.seed, _REPLAY, k, epoch))
                for b, chunk in enumerate(batches):
                    self.step(chunk, k, "memory", epoch, b, False)

        G = finish_task(self.modulation) if len(self.trace) > trace_start else self.modulation.G_prev
        if cfg.freeze_shared_key and k == 1:
            self.model.shared_key_frozen = True
        self.trained = k
        self.frozen = None
        metrics = self.evaluate(k)
        task_trace = self.trace[trace_start:]
        gammas = np.array([r["gamma"] for r in task_trace]) if task_trace else np.zeros(0)
        rec = {
            **self._base("task-summary"),
            "task": k, "A": metrics["A"], "U": metrics["U"],
            "scores": [self.scores.get(k, i) for i in range(1, k + 1)],
            "gamma_mean": float(gammas.mean()) if gammas.size else None,
            "gamma_abs_dev": float(np.abs(gammas - 1).mean()) if gammas.size else None,
            "g_mean": float(np.mean([r["g"] for r in task_trace])) if task_trace else None,
            "G": G, "memory_size": len(self.memory), "steps": len(task_trace),
            "wall_time": time.perf_counter() - t0,
        }
        self.records.append(rec)
        self.emit(rec)
        log.info("task %d: A=%.4f U=%.4f (%d steps)", k, rec["A"], rec["U"], rec["steps"])
        return rec

    def _first_classes(self, snap) -> list:
        # N/A leads the MRE roster so it always owns head row 0
        return list(snap.relations) if self.stream.task_type == "mre" else list(snap.entity_types)

    def evaluate(self, k: int) -> dict:
        mode = score_mode(self.stream.task_type)
        tp = fp = fn = 0
        for i in range(1, k + 1):
            test = self.stream[i].test
            preds = predict(self.model, test, self.cfg.eval_batch_size)
            counts = f1_counts(preds, [gold_of(ex) for ex in test], mode)
            self.predictions[(k, i)] = preds
            self.counts[(k, i)] = counts
            self.scores.set(k, i, f1_from_counts(*counts))
            tp, fp, fn = tp + counts[0], fp + counts[1], fn + counts[2]
        self.A.append(f1_from_counts(tp, fp, fn))
        self.U.append(self.scores.get(k, k))
        return {"A": self.A[-1], "U": self.U[-1]}

    def run(self, upto: int | None = None, checkpoint_dir: str | Path | None = None) -> "LifelongTrainer":
        from .checkpoint import save_checkpoint

        upto = self.stream.K if upto is None else upto
        for k in range(self.trained + 1, upto + 1):
            self.train_task(k)
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / f"task_{k}.ckpt", self)
        return self

    def report(self) -> MetricsReport:
        return MetricsReport(list(self.A), list(self.U))

    # ----------------------------------------------------------- persistence

    def state_dict(self) -> dict:
        return {
            "trained": self.trained,
            "A": self.A, "U": self.U,
            "scores": self.scores.to_json(),
            "records": self.records,
            "trace": self.trace,
            "predictions": [[k, i, p] for (k, i), p in sorted(self.predictions.items())],
            "counts": [[k, i, list(c)] for (k, i), c in sorted(self.counts.items())],
            "modulation": self.modulation.to_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.trained = state["trained"]
        self.A, self.U = list(state["A"]), list(state["U"])
        self.scores = ScoreMatrix.from_json(self.stream.K, state["scores"])
        self.records = list(state["records"])
        self.trace = list(state["trace"])
        self.predictions = {(k, i): p for k, i, p in state["predictions"]}
        self.counts = {(k, i): tuple(c) for k, i, c in state["counts"]}
        self.modulation = ModulationState.from_dict(state["modulation"])


# -------------------------------------------------------------- entry points


def train_task(trainer: LifelongTrainer, k: int) -> dict:
    return trainer.train_task(k)


def run_lifelong(stream: TaskStream, trainer: TrainerConfig | None = None, encoder: EncoderConfig | None = None,
                 distill: DistillConfig | None = None, checkpoint_dir=None, **kwargs):
    """Train tasks 1..K; returns (ScoreMatrix, MetricsReport, task-summary records)."""
    tr = LifelongTrainer(stream, trainer, encoder, distill, **kwargs)
    tr.run(checkpoint_dir=checkpoint_dir)
    return tr.scores, tr.report(), tr.records


def train_joint(stream: TaskStream, trainer: TrainerConfig | None = None, encoder: EncoderConfig | None = None,
                upto: int | None = None, epochs: int | None = None) -> dict:
    """From-scratch multitask training on the union of D_1..D_upto, evaluated like a lifelong run."""
    cfg = trainer or TrainerConfig()
    ecfg = encoder or EncoderConfig()
    upto = stream.K if upto is None else upto
    epochs = cfg.epochs_c + cfg.epochs_m if epochs is None else epochs
    plain = dataclasses.replace(cfg, mi=False, ad=False, gm=False, mm=False, budget_per_class=0)
    tr = LifelongTrainer(stream, plain, ecfg, DistillConfig(lam=0.0))
    classes = tr._first_classes(stream[1]) + [c for k in range(2, upto + 1) for c in stream[k].new_classes]
    tr.model.expand_head(classes)
    data = stream.train_union(upto)
    for epoch in range(1, epochs + 1):
        order = rng_for(cfg.seed, _JOINT, epoch).permutation(len(data))
        for b, start in enumerate(range(0, len(data), cfg.batch_size)):
            tr.step([data[i] for i in order[start : start + cfg.batch_size]], 1, "joint", epoch, b, False)
    mode = score_mode(stream.task_type)
    cells, scores = [], []
    for i in range(1, upto + 1):
        test = stream[i].test
        counts = f1_counts(predict(tr.model, test), [gold_of(ex) for ex in test], mode)
        cells.append(counts)
        scores.append(f1_from_counts(*counts))
    total = tuple(int(sum(c[j] for c in cells)) for j in range(3))
    return {"A": f1_from_counts(*total), "scores": scores, "model": tr.model}


ABLATIONS = (("full", {}), ("w/o MI", {"mi": False}), ("w/o AD", {"ad": False}),
             ("w/o GM", {"gm": False}), ("w/o MM", {"mm": False, "budget_per_class": 0}))


def ablate(stream: TaskStream, base: TrainerConfig, encoder: EncoderConfig | None = None,
           distill: DistillConfig | None = None, config_hash: str = "", run_id: str = "ablate",
           emit: Callable[[dict], None] | None = None) -> list[dict]:
    """Full configuration plus the four single-switch removals, all on the same seed."""
    rows = []
    for name, change in ABLATIONS:
        cfg = dataclasses.replace(base, **change)
        tr = LifelongTrainer(stream, cfg, encoder, distill, config_hash, f"{run_id}:{name}")
        tr.run()
        row = {
            "event": "ablation-row", "run_id": run_id, "config_hash": config_hash, "seed": cfg.seed,
            "variant": name, "MI": cfg.mi, "AD": cfg.ad, "GM": cfg.gm, "MM": cfg.mm,
            "A": list(tr.A), "A_K": tr.A[-1], "U_mean": float(np.mean(tr.U)),
        }
        rows.append(row)
        if emit:
            emit(row)
    return rows
