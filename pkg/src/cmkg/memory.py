"""Rehearsal memory bank with per-class random selection and replay batching."""

from __future__ import annotations

from collections import defaultdict
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, StateError
from .taskstream import Example


def select(examples: Sequence[Example], budget_per_class: int | None, rng: np.random.Generator) -> dict:
    """Uniform sample without replacement of min(budget, count) examples per class.

    ``budget_per_class=None`` keeps everything.
    """
    if budget_per_class is not None and budget_per_class < 1:
        raise ConfigError(f"budget_per_class must be >= 1, got {budget_per_class}")
    by_class: dict = defaultdict(list)
    for ex in examples:
        by_class[ex.cls].append(ex)
    chosen = {}
    for cls in sorted(by_class, key=str):
        pool = by_class[cls]
        if budget_per_class is None or len(pool) <= budget_per_class:
            idx = rng.permutation(len(pool)) if budget_per_class is not None else np.arange(len(pool))
        else:
            idx = rng.choice(len(pool), size=budget_per_class, replace=False)
        chosen[cls] = [pool[i] for i in idx]
    return chosen


class MemoryBank:
    """Store O of retained examples, keyed by class.

    Classes that recur across tasks (N/A) are merged so the retained set stays
    a uniform sample of everything offered for that class, at the same budget.
    In global mode (``global_budget`` set) the bank is one pool of at most that
    many examples, uniform over the union of all tasks.
    """

    def __init__(self, budget_per_class: int | None = 10, seed: int = 0, global_budget: int | None = None):
        if budget_per_class is not None and budget_per_class < 0:
            raise ConfigError("budget_per_class must be >= 0 or None (unbounded)")
        if global_budget is not None and global_budget < 0:
            raise ConfigError("global_budget must be >= 0")
        self.budget_per_class = budget_per_class
        self.global_budget = global_budget
        self.seed = seed
        self.entries: dict = {}
        self.seen: dict = defaultdict(int)  # examples offered per class (drives merging)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    @property
    def disabled(self) -> bool:
        return self.budget_per_class == 0 or self.global_budget == 0

    def examples(self) -> list[Example]:
        return [ex for cls in sorted(self.entries, key=str) for ex in self.entries[cls]]

    def _cap(self) -> int | None:
        return self.global_budget if self.global_budget is not None else self.budget_per_class

    def offer(self, examples: Sequence[Example], rng: np.random.Generator) -> None:
        """Select from a finished task's training set and merge into the bank."""
        if self.disabled or not examples:
            return
        if self.global_budget is not None:
            chosen = select([_Pooled(ex) for ex in examples], self.global_budget, rng)
            sample = {"*": [p.ex for p in chosen["*"]]}
            counts = {"*": len(examples)}
        else:
            sample = select(examples, self.budget_per_class, rng)
            counts = defaultdict(int)
            for ex in examples:
                counts[ex.cls] += 1
        self.update(sample, counts, rng)

    def update(self, sample: dict, offered: dict, rng: np.random.Generator) -> None:
        """Merge a selection ``sample`` (class -> examples) drawn from ``offered[cls]`` items."""
        cap = self._cap()
        for cls in sorted(sample, key=str):
            new = list(sample[cls])
            n_new = offered.get(cls, len(new))
            old = self.entries.get(cls, [])
            n_old = self.seen[cls]
            if not old:
                merged = new
            elif cap is None:
                merged = old + new
            else:
                size = min(cap, len(old) + len(new))
                # a uniform sample of the union takes a hypergeometric share from the new items
                take_new = int(rng.hypergeometric(n_new, n_old, size))
                take_new = min(max(take_new, size - len(old)), len(new))
                keep = rng.choice(len(old), size=size - take_new, replace=False)
                merged = [old[i] for i in sorted(keep)] + new[:take_new]
            if cap is not None and len(merged) > cap:
                raise StateError(f"class {cls!r}: {len(merged)} entries exceed budget {cap}")
            if merged:
                self.entries[cls] = merged
            self.seen[cls] += n_new

    def replay_batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[list[Example]]:
        """One shuffled epoch over the bank."""
        pool = self.examples()
        if not pool:
            return
        order = rng.permutation(len(pool))
        for start in range(0, len(pool), batch_size):
            yield [pool[i] for i in order[start : start + batch_size]]

    def to_dict(self) -> dict:
        return {
            "budget_per_class": self.budget_per_class,
            "global_budget": self.global_budget,
            "seed": self.seed,
            "seen": [[k, v] for k, v in sorted(self.seen.items(), key=lambda kv: str(kv[0]))],
            "entries": [[k, [_example_dict(ex) for ex in v]] for k, v in sorted(self.entries.items(), key=lambda kv: str(kv[0]))],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryBank":
        bank = cls(d["budget_per_class"], d["seed"], d["global_budget"])
        bank.seen.update({k: v for k, v in d["seen"]})
        bank.entries = {k: [Example(**e) for e in v] for k, v in d["entries"]}
        return bank


class _Pooled:
    """Wrapper that reports one shared class so ``select`` samples the whole pool."""

    cls = "*"

    def __init__(self, ex: Example):
        self.ex = ex


def _example_dict(ex: Example) -> dict:
    return {"uid": ex.uid, "task": ex.task, "split": ex.split, "tokens": ex.tokens,
            "patches": ex.patches, "label": ex.label, "tags": ex.tags, "spans": ex.spans}
