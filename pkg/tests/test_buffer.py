import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promptforge.buffer import (
    ContextBuffer,
    ExperienceBuffer,
    TrajectoryRecord,
    admit_batch,
    evict,
    sample_history,
    snapshot_lines,
)
from promptforge.critique import CritiqueSet
from promptforge.policy import PromptSequence


def rec(reward, step=0, ctx="c", tok=5):
    return TrajectoryRecord(PromptSequence((tok, 1)), CritiqueSet(0, ()), reward, step, ctx)


def filled(rewards, capacity=64):
    buf = ContextBuffer("c", capacity)
    for i, r in enumerate(rewards):
        admit_batch(buf, [rec(r, i, tok=i)], 0.0)
    return buf


def test_admit_examples():
    rs = (0.9, 0.7, 0.9)
    assert admit_batch(ContextBuffer("c"), [rec(r) for r in rs], 0.0) == [0, 2]
    assert admit_batch(ContextBuffer("c"), [rec(r) for r in rs], 0.25) == [0, 1, 2]
    assert admit_batch(ContextBuffer("c"), [rec(0.3)], 0.0) == [0]


def test_admit_rejects_bad_input():
    with pytest.raises(ValueError):
        admit_batch(ContextBuffer("c"), [rec(0.5), rec(0.5, ctx="d")], 0.0)
    with pytest.raises(ValueError):
        admit_batch(ContextBuffer("c"), [], 0.0)
    with pytest.raises(ValueError):
        rec(1.5)


def test_admit_matches_brute_force_filter():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 10))
        # coarse grid so ties and boundary hits are common
        rs = np.round(rng.integers(0, 11, size=n) / 10, 1)
        eps = float(rng.choice([0.0, 0.05, 0.1, 0.25, 1.0]))
        buf = ContextBuffer("c")
        got = admit_batch(buf, [rec(float(r)) for r in rs], eps)
        want = [i for i in range(n) if rs[i] >= max(rs) - eps]
        assert got == want
        assert [r.reward for r in buf.records] == [float(rs[i]) for i in want]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=1, max_size=6), min_size=1, max_size=8), st.floats(0, 0.5))
def test_stored_max_never_decreases(batches, eps):
    buf = ContextBuffer("c", capacity=4)
    best = -1.0
    for step, batch in enumerate(batches):
        admit_batch(buf, [rec(r, step) for r in batch], eps)
        evict(buf)
        assert buf.best_reward() >= best
        best = buf.best_reward()
        assert len(buf) <= 4


def test_history_examples():
    one = filled([0.4])
    assert sample_history(one, 3, 0) == one.records
    buf = filled([0.1, 0.5, 0.9])
    got = sample_history(buf, 2, 0)
    assert [r.reward for r in got] == [0.1, 0.9]
    assert sample_history(buf, 5, 0) == buf.records
    with pytest.raises(ValueError):
        sample_history(ContextBuffer("c"), 2, 0)


def test_history_ties_prefer_earliest():
    buf = filled([0.9, 0.2, 0.9, 0.2, 0.5])
    got = sample_history(buf, 2, 1)
    assert [r.step_created for r in got] == [0, 1]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=20), st.integers(1, 6), st.integers(0, 2**31))
def test_history_contrastive_and_distinct(rewards, m, seed):
    buf = filled(rewards)
    got = sample_history(buf, m, seed)
    assert len(got) == min(m, len(rewards))
    assert len({r.seq for r in got}) == len(got)
    assert [r.step_created for r in got] == sorted(r.step_created for r in got)
    if len(set(rewards)) >= 2 and m >= 2:
        assert max(rewards) in [r.reward for r in got]
        assert min(rewards) in [r.reward for r in got]
    assert got == sample_history(buf, m, seed)


def test_uniform_history_ablation_is_a_subset():
    buf = filled([0.1 * i for i in range(10)])
    got = sample_history(buf, 3, 7, uniform=True)
    assert len(got) == 3 and all(r in buf.records for r in got)


def test_evict_examples():
    buf = filled([0.2, 0.8, 0.5], capacity=2)
    evict(buf)
    assert sorted(r.reward for r in buf.records) == [0.2, 0.8]
    under = filled([0.1, 0.2], capacity=3)
    before = list(under.records)
    assert evict(under) == [] and under.records == before
    same = filled([0.5] * 4, capacity=1)
    removed = evict(same)
    assert [r.step_created for r in removed] == [0, 1, 2]
    assert same.records[0].step_created == 3


def test_evict_spares_most_recent_failure():
    buf = filled([0.1, 0.9, 0.1, 0.4, 0.6], capacity=3)
    evict(buf)
    assert [(r.reward, r.step_created) for r in buf.records] == [(0.9, 1), (0.1, 2), (0.6, 4)]


def test_global_view_is_union():
    eb = ExperienceBuffer(8)
    admit_batch(eb["a"], [rec(0.5, ctx="a"), rec(0.4, ctx="a")], 0.2)
    admit_batch(eb["b"], [rec(0.1, ctx="b")], 0.0)
    assert len(eb.records()) == len(eb) == sum(eb.sizes().values()) == 3
    clone = eb.clone()
    admit_batch(eb["a"], [rec(0.9, ctx="a")], 0.0)
    assert len(clone) == 3 and len(eb) == 4


def test_snapshot_lines_are_json():
    import json

    eb = ExperienceBuffer()
    admit_batch(eb["c"], [rec(0.5)], 0.0)
    (line,) = list(snapshot_lines(eb))
    row = json.loads(line)
    assert row["reward"] == 0.5 and row["prompt"] == [5, 1] and row["context_id"] == "c"
