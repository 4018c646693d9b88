"""Synthetic lifelong MRE / MNER benchmarks and the line-delimited dataset format.

Class evidence is planted separately in each modality so that their relative
strength (and hence their convergence speed) is a dial:

* text: each content token is drawn from the class's indicator tokens with
  probability ``snr_text`` and from a background vocabulary otherwise;
* vision: patches are Gaussian around a class mean of norm ``snr_visual``.

Every MRE task contains the N/A relation; every MNER example carries entities
of exactly one type, and O tokens come from a vocabulary disjoint from all
entity tokens.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import N_RESERVED_TOKENS
from .errors import ConfigError, ParseError, ValidationError

FORMAT_ID = "cmkg-stream"
FORMAT_VERSION = 1
NA_LABEL = 0
SPLITS = ("train", "val", "test")


@dataclass
class Example:
    uid: str
    task: int
    split: str
    tokens: list[int]
    patches: list[list[float]]
    label: int | None = None
    tags: list[str] | None = None
    spans: list[list[int]] | None = None

    @property
    def cls(self):
        """Class key: relation id (MRE) or the single entity type (MNER)."""
        if self.label is not None:
            return self.label
        for tag in self.tags or ():
            if tag != "O":
                return tag[2:]
        return None

    def to_record(self) -> dict:
        rec = {"uid": self.uid, "task": self.task, "split": self.split,
               "tokens": self.tokens, "patches": self.patches}
        if self.label is not None:
            rec["label"] = self.label
            rec["spans"] = self.spans
        else:
            rec["tags"] = self.tags
        return rec


@dataclass
class Snapshot:
    k: int
    entity_types: list[str]
    relations: list[int]
    new_entity_types: list[str]
    new_relations: list[int]
    train: list[Example] = field(default_factory=list)
    val: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    def split(self, name: str) -> list[Example]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    @property
    def new_classes(self) -> list:
        return self.new_relations if self.relations else self.new_entity_types

    def roster(self) -> dict:
        return {"task": self.k, "entity_types": self.entity_types, "relations": self.relations,
                "new_entity_types": self.new_entity_types, "new_relations": self.new_relations}


@dataclass
class TaskStream:
    task_type: str
    snapshots: list[Snapshot]
    config: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.snapshots)

    @property
    def na_label(self) -> int | None:
        return NA_LABEL if self.task_type == "mre" else None

    def __getitem__(self, k: int) -> Snapshot:
        """1-based task access."""
        if not 1 <= k <= self.K:
            raise IndexError(f"task {k} outside 1..{self.K}")
        return self.snapshots[k - 1]

    def train_union(self, upto: int) -> list[Example]:
        return [ex for k in range(1, upto + 1) for ex in self[k].train]

    def validate(self) -> None:
        for k in range(2, self.K + 1):
            prev, cur = self[k - 1], self[k]
            if not set(prev.entity_types) <= set(cur.entity_types):
                raise ValidationError(f"task {k}: entity types of task {k - 1} are not a subset")
            if not set(prev.relations) <= set(cur.relations):
                raise ValidationError(f"task {k}: relations of task {k - 1} are not a subset")
        for snap in self.snapshots:
            allowed = set(snap.relations) if self.task_type == "mre" else set(snap.entity_types)
            seen = set()
            for name in SPLITS:
                for ex in snap.split(name):
                    if ex.uid in seen:
                        raise ValidationError(f"task {snap.k}: duplicate example id {ex.uid}")
                    seen.add(ex.uid)
                    if ex.cls not in allowed:
                        raise ValidationError(f"task {snap.k}: example {ex.uid} has class {ex.cls!r} outside the roster")
                    if self.task_type == "ner" and not bio_well_formed(ex.tags):
                        raise ValidationError(f"task {snap.k}: example {ex.uid} has malformed BIO tags")


def bio_well_formed(tags) -> bool:
    """No I-x unless the previous tag is B-x or I-x of the same type."""
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and (prev == "O" or prev[2:] != tag[2:]):
            return False
        if tag != "O" and not tag.startswith(("B-", "I-")):
            return False
        prev = tag
    return True


# ---------------------------------------------------------------- generation


@dataclass
class SyntheticConfig:
    task: str = "mre"
    K: int = 5
    classes_per_task: int = 2
    samples_per_class: int = 60
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    vocab_size: int = 200
    patch_dim: int = 16
    seq_len: int = 16
    min_len: int = 8
    snr_text: float = 0.15
    snr_visual: float = 2.5
    patch_noise: float = 1.0
    indicator_tokens: int = 4
    class_pool: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.task not in ("mre", "ner"):
            raise ConfigError(f"data.task must be 'mre' or 'ner', got {self.task!r}")
        if self.K < 1 or self.classes_per_task < 1 or self.samples_per_class < 3:
            raise ConfigError("K >= 1, classes_per_task >= 1 and samples_per_class >= 3 are required")
        if self.snr_text < 0 or self.snr_visual < 0:
            raise ConfigError("snr_text and snr_visual must be non-negative")
        if self.snr_text > 1:
            raise ConfigError("snr_text is a mixing weight and must be <= 1")
        if self.patch_noise <= 0:
            raise ConfigError("patch_noise must be positive")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split must be three non-negative fractions summing to 1")
        if not 1 <= self.min_len <= self.seq_len - 1:
            raise ConfigError("min_len must lie in [1, seq_len - 1]")
        if self.K * self.classes_per_task > self.class_pool:
            raise ConfigError(
                f"class pool exhausted: {self.K} tasks x {self.classes_per_task} classes > pool {self.class_pool}"
            )
        if self._n_background() < 8:
            raise ConfigError(f"vocab_size={self.vocab_size} too small for the class pool")

    def _n_generic(self) -> int:
        return 8 if self.task == "ner" else 0

    def _n_indicator_classes(self) -> int:
        return self.class_pool + (1 if self.task == "mre" else 0)

    def _n_background(self) -> int:
        used = N_RESERVED_TOKENS + self._n_indicator_classes() * self.indicator_tokens + self._n_generic()
        return self.vocab_size - used

    def split_counts(self) -> tuple[int, int, int]:
        n = self.samples_per_class
        n_train = max(1, int(round(self.split[0] * n)))
        n_val = int(round(self.split[1] * n))
        return n_train, n_val, n - n_train - n_val


class _Vocab:
    def __init__(self, cfg: SyntheticConfig):
        n_ind = cfg.indicator_tokens
        start = N_RESERVED_TOKENS
        self.indicators = {
            c: np.arange(start + c * n_ind, start + (c + 1) * n_ind)
            for c in range(cfg._n_indicator_classes())
        }
        start += cfg._n_indicator_classes() * n_ind
        self.generic = np.arange(start, start + cfg._n_generic())
        self.background = np.arange(start + cfg._n_generic(), cfg.vocab_size)


def _class_means(cfg: SyntheticConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 1])
    dirs = rng.normal(size=(cfg._n_indicator_classes(), cfg.patch_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * cfg.snr_visual


def _patches(rng, cfg: SyntheticConfig, mean: np.ndarray) -> list[list[float]]:
    n = int(rng.integers(cfg.min_len, cfg.seq_len))
    arr = mean + cfg.patch_noise * rng.normal(size=(n, cfg.patch_dim))
    return np.round(arr, 6).tolist()


def _mre_example(cfg, vocab, means, k, cls, j) -> tuple[list[int], list[list[float]], list[list[int]]]:
    rng = np.random.default_rng([cfg.seed, 2, k, cls, j])
    n = int(rng.integers(cfg.min_len, cfg.seq_len))
    informative = rng.random(n) < cfg.snr_text
    tokens = np.where(informative, rng.choice(vocab.indicators[cls], size=n), rng.choice(vocab.background, size=n))
    h = int(rng.integers(0, n // 2))
    t = int(rng.integers(n // 2, n))
    spans = [[h, h + 1], [t, t + 1]]
    return tokens.tolist(), _patches(rng, cfg, means[cls]), spans


def _ner_example(cfg, vocab, means, k, type_idx, etype, j) -> tuple[list[int], list[list[float]], list[str]]:
    rng = np.random.default_rng([cfg.seed, 3, k, type_idx, j])
    n = int(rng.integers(cfg.min_len, cfg.seq_len))
    tokens = rng.choice(vocab.background, size=n)
    tags = ["O"] * n
    n_mentions = int(rng.integers(1, 3))
    pos = 0
    for _ in range(n_mentions):
        length = int(rng.integers(1, 4))
        if pos + length > n:
            break
        start = int(rng.integers(pos, n - length + 1))
        for i in range(start, start + length):
            if rng.random() < cfg.snr_text:
                tokens[i] = rng.choice(vocab.indicators[type_idx])
            else:
                tokens[i] = rng.choice(vocab.generic)
            tags[i] = ("B-" if i == start else "I-") + etype
        pos = start + length + 1
        if pos >= n:
            break
    return tokens.tolist(), _patches(rng, cfg, means[type_idx]), tags


def _split_examples(cfg: SyntheticConfig, snap: Snapshot, make) -> None:
    n_train, n_val, _ = cfg.split_counts()
    for j in range(cfg.samples_per_class):
        ex = make(j)
        ex.split = "train" if j < n_train else "val" if j < n_train + n_val else "test"
        snap.split(ex.split).append(ex)


def generate_mre_stream(cfg: SyntheticConfig) -> TaskStream:
    cfg.validate()
    vocab, means = _Vocab(cfg), _class_means(cfg)
    rng = np.random.default_rng([cfg.seed, 0])
    order = (rng.permutation(cfg.class_pool) + 1).tolist()
    relations = [NA_LABEL]
    snaps = []
    for k in range(1, cfg.K + 1):
        new = sorted(order[(k - 1) * cfg.classes_per_task : k * cfg.classes_per_task])
        relations = relations + new
        snap = Snapshot(k, [], list(relations), [], new)
        for cls in [NA_LABEL] + new:
            def make(j, cls=cls, k=k):
                toks, pats, spans = _mre_example(cfg, vocab, means, k, cls, j)
                return Example(f"t{k}-r{cls}-{j}", k, "", toks, pats, label=cls, spans=spans)
            _split_examples(cfg, snap, make)
        snaps.append(snap)
    stream = TaskStream("mre", snaps, asdict(cfg))
    stream.validate()
    return stream


def generate_ner_stream(cfg: SyntheticConfig) -> TaskStream:
    cfg.validate()
    vocab, means = _Vocab(cfg), _class_means(cfg)
    rng = np.random.default_rng([cfg.seed, 0])
    order = rng.permutation(cfg.class_pool).tolist()
    types: list[str] = []
    snaps = []
    for k in range(1, cfg.K + 1):
        idx = sorted(order[(k - 1) * cfg.classes_per_task : k * cfg.classes_per_task])
        new = [f"E{i}" for i in idx]
        types = types + new
        snap = Snapshot(k, list(types), [], new, [])
        for type_idx, etype in zip(idx, new):
            def make(j, type_idx=type_idx, etype=etype, k=k):
                toks, pats, tags = _ner_example(cfg, vocab, means, k, type_idx, etype, j)
                return Example(f"t{k}-{etype}-{j}", k, "", toks, pats, tags=tags)
            _split_examples(cfg, snap, make)
        snaps.append(snap)
    stream = TaskStream("ner", snaps, asdict(cfg))
    stream.validate()
    return stream


def generate_stream(cfg: SyntheticConfig) -> TaskStream:
    return generate_mre_stream(cfg) if cfg.task == "mre" else generate_ner_stream(cfg)


# ------------------------------------------------------------------- file I/O


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def stream_lines(stream: TaskStream) -> list[str]:
    header = {
        "format": FORMAT_ID,
        "version": FORMAT_VERSION,
        "task_type": stream.task_type,
        "num_tasks": stream.K,
        "rosters": [s.roster() for s in stream.snapshots],
        "config": stream.config,
    }
    lines = [_dumps(header)]
    for snap in stream.snapshots:
        for name in SPLITS:
            lines.extend(_dumps(ex.to_record()) for ex in snap.split(name))
    return lines


def save_stream(stream: TaskStream, path) -> None:
    Path(path).write_text("\n".join(stream_lines(stream)) + "\n", encoding="utf-8")


def _require(rec: dict, key: str, line: int):
    if key not in rec:
        raise ParseError(f"record missing field {key!r}", line)
    return rec[key]


def load_stream(path) -> TaskStream:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty dataset file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"bad header: {e.msg}", 1) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_ID:
        raise ParseError(f"not a {FORMAT_ID} file", 1)
    if header.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {header.get('version')!r}", 1)
    task_type = _require(header, "task_type", 1)
    if task_type not in ("mre", "ner"):
        raise ParseError(f"unknown task_type {task_type!r}", 1)
    rosters = _require(header, "rosters", 1)
    if len(rosters) != _require(header, "num_tasks", 1):
        raise ParseError("num_tasks disagrees with the roster list", 1)
    snaps = []
    for i, r in enumerate(rosters, start=1):
        try:
            snaps.append(Snapshot(i, list(r["entity_types"]), list(r["relations"]),
                                  list(r["new_entity_types"]), list(r["new_relations"])))
        except (KeyError, TypeError) as e:
            raise ParseError(f"roster for task {i} malformed: {e}", 1) from None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", lineno) from None
        if not isinstance(rec, dict):
            raise ParseError("record is not an object", lineno)
        task = _require(rec, "task", lineno)
        split = _require(rec, "split", lineno)
        if not isinstance(task, int) or not 1 <= task <= len(snaps):
            raise ParseError(f"task {task!r} outside 1..{len(snaps)}", lineno)
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}", lineno)
        ex = Example(str(_require(rec, "uid", lineno)), task, split,
                     list(_require(rec, "tokens", lineno)), list(_require(rec, "patches", lineno)))
        if task_type == "mre":
            ex.label = _require(rec, "label", lineno)
            ex.spans = _require(rec, "spans", lineno)
        else:
            ex.tags = list(_require(rec, "tags", lineno))
            if len(ex.tags) != len(ex.tokens):
                raise ParseError("tags and tokens differ in length", lineno)
        snaps[task - 1].split(split).append(ex)
    stream = TaskStream(task_type, snaps, header.get("config", {}))
    stream.validate()
    return stream


def manifest(stream: TaskStream) -> dict:
    return {
        "format": FORMAT_ID,
        "task_type": stream.task_type,
        "num_tasks": stream.K,
        "seed": stream.config.get("seed"),
        "tasks": [
            {**s.roster(), "counts": {name: len(s.split(name)) for name in SPLITS}}
            for s in stream.snapshots
        ],
    }
