import itertools
import json

import numpy as np
import pytest

from promptforge.envs import (
    ContextDescriptor,
    DatasetSplits,
    KeywordSpec,
    KeywordWorker,
    OrderSpec,
    OrderedProtocolWorker,
    TaskInstance,
    load_dataset,
    longest_ordered_prefix,
    make_keyword_task,
    make_ordered_task,
    sample_slice,
    write_dataset,
)
from promptforge.policy import PromptSequence

EOS = 1
A, B, C, T1, T2, F1, CA, CB = 10, 11, 12, 20, 21, 22, 23, 24


def P(*tokens):
    return PromptSequence(tuple(tokens) + (EOS,))


def keyword_worker():
    spec = KeywordSpec((T1, T2), (F1,), {"A": CA, "B": CB})
    return KeywordWorker({"k": ContextDescriptor("k", (), spec)}, EOS)


def inst(cat=None, i=0, ctx="k"):
    return TaskInstance(ctx, f"x{i}", f"y{i}", cat)


def test_keyword_execute_rules():
    w = keyword_worker()
    assert w.execute(P(T2, T1), inst()).correct is True
    assert w.execute(P(T1), inst()).correct is False
    assert w.execute(P(T1, T2, F1), inst()).correct is False
    assert w.execute(P(T1, T2), inst("A")).correct is False
    assert w.execute(P(T1, T2, CA), inst("A")).correct is True
    assert w.score(w.execute(P(T1, T2), inst()), inst(), P(T1, T2)) == 1.0
    assert w.calls == 6


def test_aggregate_reward_enumeration():
    w = keyword_worker()
    sl = [inst("A", 0), inst("A", 1), inst("B", 2), inst(None, 3)]
    prompt = P(T1, T2, CA)
    # enumerate instances independently of aggregate_reward
    needed = {"A": {T1, T2, CA}, "B": {T1, T2, CB}, None: {T1, T2}}
    oracle = np.mean([needed[i.category] <= set(prompt.tokens) for i in sl])
    assert oracle == 0.75
    assert w.aggregate_reward(prompt, sl) == 0.75
    assert w.aggregate_reward(P(T1, T2, CA, CB), sl) == 1.0
    assert w.aggregate_reward(P(F1), sl) == 0.0
    with pytest.raises(ValueError):
        w.aggregate_reward(prompt, [])


def test_keyword_monotonicity():
    rng = np.random.default_rng(0)
    w = keyword_worker()
    sl = [inst(c, i) for i, c in enumerate(["A", "B", None, "A", None])]
    for _ in range(300):
        base = [int(t) for t in rng.choice([A, B, C, T1, T2, CA, CB], size=rng.integers(0, 6))]
        add = int(rng.choice([T1, T2, CA, CB]))
        assert w.aggregate_reward(P(*base, add), sl) >= w.aggregate_reward(P(*base), sl)


def ordered_worker(seq=(A, B, C)):
    return OrderedProtocolWorker({"o": ContextDescriptor("o", (), OrderSpec(seq))}, EOS)


def brute_prefix(seq, tokens):
    """Largest L such that seq[:L] is a subsequence of tokens, by enumerating index tuples."""
    best = 0
    for L in range(1, len(seq) + 1):
        found = any(tuple(tokens[i] for i in idx) == tuple(seq[:L]) for idx in itertools.combinations(range(len(tokens)), L))
        if found:
            best = L
        else:
            break
    return best


def test_ordered_rules():
    w = ordered_worker()
    i = inst(ctx="o")
    assert w.execute(P(9, A, 9, B, C), i).correct is True
    assert w.score(w.execute(P(B, A, C), i), i, P(B, A, C)) == pytest.approx(1 / 3)
    assert brute_prefix((A, B, C), (B, A, C)) == 1
    assert w.score(w.execute(P(), i), i, P()) == 0.0


def test_ordered_score_matches_brute_force():
    rng = np.random.default_rng(5)
    seq = (A, B, C)
    for _ in range(300):
        tokens = tuple(int(t) for t in rng.choice([A, B, C, 9], size=rng.integers(0, 8)))
        assert longest_ordered_prefix(seq, tokens) == brute_prefix(seq, tokens)


def test_sample_slice_rules(keyword_env):
    env, _, _ = keyword_env
    full = env.dataset.split("ctx0", "train")
    whole = sample_slice(env.dataset, "ctx0", "train", len(full), 3)
    assert sorted(i.input_x for i in whole) == sorted(i.input_x for i in full)
    assert sample_slice(env.dataset, "ctx0", "train", 5, 9) == sample_slice(env.dataset, "ctx0", "train", 5, 9)
    with pytest.raises(ValueError):
        sample_slice(env.dataset, "ctx0", "train", 0, 1)
    with pytest.raises(ValueError):
        sample_slice(env.dataset, "ctx0", "train", len(full) + 1, 1)


@pytest.mark.parametrize("maker,seed,kw", [
    (make_keyword_task, s, {"n_contexts": n}) for s in range(4) for n in (1, 4)
] + [(make_ordered_task, s, {"n_contexts": 2}) for s in range(3)])
def test_documented_optimum_scores_one_everywhere(maker, seed, kw):
    env = maker(seed, **kw)
    w = env.make_worker()
    for cid, opt in env.optimal_prompts.items():
        for split in ("train", "validation", "test"):
            assert w.aggregate_reward(PromptSequence(opt), env.dataset.split(cid, split)) == 1.0


def test_generator_spec_shape():
    for seed in range(10):
        env = make_keyword_task(seed, n_contexts=3)
        for ctx in env.contexts.values():
            spec = ctx.hidden_spec
            assert 2 <= len(spec.required) <= 4 and 1 <= len(spec.forbidden) <= 2 and len(spec.categories) <= 2
            hidden = set(spec.required) | set(spec.forbidden) | set(spec.categories.values())
            assert hidden <= set(env.vocab.control)
            assert not hidden & set(ctx.description_tokens)
        assert make_keyword_task(seed).contexts == make_keyword_task(seed).contexts


def test_fixed_prompt_regime_has_empty_description():
    env = make_keyword_task(0)
    assert env.contexts["ctx0"].description_tokens == ()


def test_splits_must_be_disjoint_and_nonempty():
    a = TaskInstance("c", "x", "y")
    with pytest.raises(ValueError):
        DatasetSplits({"c": {"train": (a,), "validation": (a,), "test": (TaskInstance("c", "z", "w"),)}})
    with pytest.raises(ValueError):
        DatasetSplits({"c": {"train": (a,), "validation": (), "test": (TaskInstance("c", "z", "w"),)}})


def test_dataset_roundtrip_and_errors(tmp_path, keyword_env):
    env, _, _ = keyword_env
    path = tmp_path / "d.jsonl"
    write_dataset(path, env.dataset)
    assert load_dataset(path).digest() == env.dataset.digest()
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"context_id": "c", "input": "x", "target": "y", "split": "train"}) + "\n"
                   + json.dumps({"context_id": "c", "input": "x2", "split": "train"}) + "\n")
    with pytest.raises(ValueError, match=":2: missing field 'target'"):
        load_dataset(bad)
