"""Micro-F1 scoring, the lifelong score matrix, and forgetting/plasticity metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import InputError, StateError

NA_LABEL = 0


def decode_bio(tags: Sequence[str]) -> list[tuple[int, int, str]]:
    """BIO tags -> (start, end_exclusive, type) spans.

    An I-x that does not continue an open x span starts a new span.
    """
    spans = []
    start, etype = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        if tag.startswith("I-") and etype == tag[2:]:
            continue
        if etype is not None:
            spans.append((start, i, etype))
            start, etype = None, None
        if tag.startswith(("B-", "I-")):
            start, etype = i, tag[2:]
    return spans


def encode_bio(spans: Sequence[tuple[int, int, str]], length: int) -> list[str]:
    tags = ["O"] * length
    for start, end, etype in spans:
        tags[start] = f"B-{etype}"
        for i in range(start + 1, end):
            tags[i] = f"I-{etype}"
    return tags


def f1_counts(predictions, golds, mode: str = "mre_exclude_na", na_label=NA_LABEL) -> tuple[int, int, int]:
    """(tp, fp, fn) counts.

    ``mre_exclude_na``: one relation per item, N/A is never a positive.
    ``mner_span``: items are tag sequences; exact span-and-type matches.
    """
    if len(predictions) != len(golds):
        raise InputError(f"{len(predictions)} predictions vs {len(golds)} golds")
    tp = fp = fn = 0
    if mode == "mre_exclude_na":
        for p, g in zip(predictions, golds):
            if p == g:
                if g != na_label:
                    tp += 1
                continue
            if p != na_label:
                fp += 1
            if g != na_label:
                fn += 1
    elif mode == "mner_span":
        for p, g in zip(predictions, golds):
            if len(p) != len(g):
                raise InputError("predicted and gold tag sequences differ in length")
            ps, gs = set(decode_bio(p)), set(decode_bio(g))
            hit = len(ps & gs)
            tp += hit
            fp += len(ps) - hit
            fn += len(gs) - hit
    else:
        raise InputError(f"unknown scoring mode {mode!r}")
    return tp, fp, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """2PR/(P+R) written as 2tp/(2tp+fp+fn): one rounding, and 0 when tp = 0."""
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def micro_f1(predictions, golds, mode: str = "mre_exclude_na", na_label=NA_LABEL) -> float:
    return f1_from_counts(*f1_counts(predictions, golds, mode, na_label))


def token_accuracy(predictions, golds) -> float:
    """Auxiliary MNER diagnostic: fraction of tokens tagged correctly."""
    total = hit = 0
    for p, g in zip(predictions, golds):
        total += len(g)
        hit += sum(a == b for a, b in zip(p, g))
    return hit / total if total else 0.0


def pooled_f1(cells: Sequence[tuple[Sequence, Sequence]], mode: str = "mre_exclude_na") -> float:
    """One global micro-F1 over several (predictions, golds) test sets."""
    tp = fp = fn = 0
    for preds, golds in cells:
        a, b, c = f1_counts(preds, golds, mode)
        tp, fp, fn = tp + a, fp + b, fn + c
    return f1_from_counts(tp, fp, fn)


@dataclass
class ScoreMatrix:
    """a[k][i]: micro-F1 on Q_i after finishing task k (1-based, i <= k)."""

    K: int
    a: dict[tuple[int, int], float] = field(default_factory=dict)

    def set(self, k: int, i: int, value: float) -> None:
        if not 1 <= i <= k <= self.K:
            raise StateError(f"cell ({k}, {i}) outside the lower triangle of a {self.K}-task matrix")
        if (k, i) in self.a:
            raise StateError(f"cell ({k}, {i}) already recorded")
        if not 0.0 <= value <= 1.0:
            raise StateError(f"score {value} outside [0, 1]")
        self.a[(k, i)] = float(value)

    def get(self, k: int, i: int) -> float:
        try:
            return self.a[(k, i)]
        except KeyError:
            raise StateError(f"no score recorded for ({k}, {i})") from None

    def rows(self) -> list[list[float | None]]:
        return [[self.a.get((k, i)) for i in range(1, self.K + 1)] for k in range(1, self.K + 1)]

    def to_csv(self, config_hash: str = "") -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_hash={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k"] + [f"Q{i}" for i in range(1, self.K + 1)])
        for k, row in enumerate(self.rows(), start=1):
            w.writerow([k] + ["" if v is None else repr(v) for v in row])
        return buf.getvalue()

    def to_json(self) -> list:
        return [[k, i, v] for (k, i), v in sorted(self.a.items())]

    @classmethod
    def from_json(cls, K: int, cells: list) -> "ScoreMatrix":
        sm = cls(K)
        for k, i, v in cells:
            sm.set(int(k), int(i), v)
        return sm


@dataclass
class MetricsReport:
    A: list[float]
    U: list[float]

    def to_json(self, config_hash: str = "", seed: int | None = None) -> str:
        return json.dumps({"config_hash": config_hash, "seed": seed, "A": self.A, "U": self.U},
                          indent=2, sort_keys=True)


Predictor = Callable[[Sequence], list]


def forgetting_metric(predict: Predictor, stream, k: int, trained_upto: int | None = None) -> float:
    """A_k: micro-F1 pooled over Q_1 .. Q_k (one global count, not a mean of per-task scores)."""
    if trained_upto is not None and k > trained_upto:
        raise StateError(f"A_{k} requested but only {trained_upto} tasks are trained")
    mode = "mre_exclude_na" if stream.task_type == "mre" else "mner_span"
    cells = []
    for i in range(1, k + 1):
        test = stream[i].test
        cells.append((predict(test), [gold_of(ex) for ex in test]))
    return pooled_f1(cells, mode)


def plasticity_metric(score_matrix: ScoreMatrix, k: int) -> float:
    """U_k = a[k][k]."""
    return score_matrix.get(k, k)


def gold_of(ex):
    return ex.label if ex.label is not None else list(ex.tags)
