from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmkg.errors import ConfigError, StateError
from cmkg.memory import MemoryBank, select
from cmkg.taskstream import Example


def exs(cls, n, task=1):
    return [Example(f"t{task}-{cls}-{i}", task, "train", [2], [[0.0]], label=cls) for i in range(n)]


def rng(*k):
    return np.random.default_rng([0, *k])


def test_select_budget_cases():
    assert len(select(exs(1, 6), 10, rng(1))[1]) == 6
    assert len(select(exs(1, 100), 2, rng(1))[1]) == 2
    a = select(exs(1, 50) + exs(2, 50), 5, rng(3))
    b = select(exs(1, 50) + exs(2, 50), 5, rng(3))
    assert {c: [e.uid for e in v] for c, v in a.items()} == {c: [e.uid for e in v] for c, v in b.items()}
    with pytest.raises(ConfigError):
        select(exs(1, 3), 0, rng(1))


def test_bank_size_after_three_tasks():
    bank = MemoryBank(5)
    for k, (a, b) in enumerate([(1, 2), (3, 4), (5, 6)], start=1):
        bank.offer(exs(0, 20, k) + exs(a, 20, k) + exs(b, 20, k), rng(k))
    assert len(bank) <= 30 + 5
    assert all(len(v) <= 5 for v in bank.entries.values())


def test_empty_update_is_noop():
    bank = MemoryBank(3)
    bank.offer(exs(1, 10), rng(1))
    before = [e.uid for e in bank.examples()]
    bank.offer([], rng(2))
    bank.update({}, {}, rng(3))
    assert [e.uid for e in bank.examples()] == before


def test_na_merge_keeps_budget_and_mixes_tasks():
    counts = Counter()
    for trial in range(300):
        bank = MemoryBank(4)
        bank.offer(exs(0, 10, 1), rng(trial, 1))
        bank.offer(exs(0, 30, 2), rng(trial, 2))
        assert len(bank.entries[0]) == 4
        counts.update(e.task for e in bank.entries[0])
    # a uniform sample of the union keeps a quarter of its slots for task 1
    share = counts[1] / (counts[1] + counts[2])
    assert abs(share - 0.25) < 0.05


def test_disabled_bank_stores_nothing():
    bank = MemoryBank(0)
    bank.offer(exs(1, 10), rng(1))
    assert bank.disabled and len(bank) == 0


def test_unbounded_keeps_everything():
    bank = MemoryBank(None)
    bank.offer(exs(0, 7, 1), rng(1))
    bank.offer(exs(0, 5, 2), rng(2))
    assert len(bank) == 12


def test_global_budget():
    bank = MemoryBank(None, global_budget=8)
    bank.offer(exs(1, 10, 1) + exs(2, 10, 1), rng(1))
    bank.offer(exs(3, 10, 2), rng(2))
    assert len(bank) == 8


def test_replay_batches_partition():
    bank = MemoryBank(10)
    bank.offer(exs(1, 10), rng(1))
    sizes = [len(b) for b in bank.replay_batches(4, rng(2))]
    assert sizes == [4, 4, 2]
    e1 = [e.uid for b in bank.replay_batches(4, rng(2)) for e in b]
    e2 = [e.uid for b in bank.replay_batches(4, rng(9)) for e in b]
    assert sorted(e1) == sorted(e.uid for e in bank.examples()) == sorted(e2)
    assert e1 != e2


def test_overflowing_update_rejected():
    bank = MemoryBank(2)
    with pytest.raises(StateError):
        bank.update({1: exs(1, 3)}, {1: 3}, rng(1))


def test_round_trip():
    bank = MemoryBank(3, seed=4)
    bank.offer(exs(0, 9) + exs(1, 9), rng(1))
    twin = MemoryBank.from_dict(bank.to_dict())
    assert [e.uid for e in twin.examples()] == [e.uid for e in bank.examples()]
    assert dict(twin.seen) == dict(bank.seen)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.lists(st.lists(st.integers(1, 15), min_size=1, max_size=4), min_size=1, max_size=4),
       st.integers(0, 2**16))
def test_bank_never_exceeds_budget(budget, tasks, seed):
    bank = MemoryBank(budget)
    offered = Counter()
    for k, sizes in enumerate(tasks, start=1):
        data = [e for cls, n in enumerate(sizes) for e in exs(cls, n, k)]
        bank.offer(data, np.random.default_rng([seed, k]))
        offered.update(e.label for e in data)
        for cls, entries in bank.entries.items():
            assert len(entries) == min(budget, offered[cls])
            assert len({e.uid for e in entries}) == len(entries)
