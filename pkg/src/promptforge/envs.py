"""Frozen-worker environments: synthetic task families with known optima and a remote endpoint."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from promptforge.vocab import Vocabulary

SPLITS = ("train", "validation", "test")


class WorkerError(RuntimeError):
    """Worker or critic failure after retries; ``attempts`` holds the per-try log."""

    def __init__(self, message: str, attempts: list | None = None):
        super().__init__(message)
        self.attempts = list(attempts or [])


@dataclass(frozen=True)
class TaskInstance:
    context_id: str
    input_x: str
    target_y: str
    category: str | None = None

    def __post_init__(self):
        if not self.target_y:
            raise ValueError("target must be non-empty")


@dataclass(frozen=True)
class KeywordSpec:
    required: tuple[int, ...]
    forbidden: tuple[int, ...]
    categories: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class OrderSpec:
    sequence: tuple[int, ...]


@dataclass(frozen=True)
class ContextDescriptor:
    context_id: str
    description_tokens: tuple[int, ...]
    hidden_spec: KeywordSpec | OrderSpec | None = None


@dataclass(frozen=True)
class WorkerOutput:
    output_yhat: str
    correct: bool | None = None


@dataclass
class DatasetSplits:
    """Per-context train/validation/test instance collections."""

    splits: dict[str, dict[str, tuple[TaskInstance, ...]]]

    def __post_init__(self):
        for ctx, parts in self.splits.items():
            seen: dict[tuple, str] = {}
            for name in SPLITS:
                items = parts.get(name, ())
                if not items:
                    raise ValueError(f"context {ctx!r} has an empty {name} split")
                for inst in items:
                    key = (inst.input_x, inst.target_y, inst.category)
                    if key in seen and seen[key] != name:
                        raise ValueError(f"context {ctx!r}: instance {inst.input_x!r} in both {seen[key]} and {name}")
                    seen[key] = name

    @property
    def context_ids(self) -> list[str]:
        return sorted(self.splits)

    def split(self, context_id: str, split_name: str) -> tuple[TaskInstance, ...]:
        try:
            return self.splits[context_id][split_name]
        except KeyError:
            raise KeyError(f"no split {split_name!r} for context {context_id!r}") from None

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for ctx in self.context_ids:
            for name in SPLITS:
                for inst in self.splits[ctx][name]:
                    h.update(json.dumps([ctx, name, inst.input_x, inst.target_y, inst.category]).encode())
        return h.hexdigest()[:16]


def sample_slice(splits: DatasetSplits, context_id: str, split_name: str, size: int, rng_seed: int) -> list[TaskInstance]:
    pool = splits.split(context_id, split_name)
    if size <= 0:
        raise ValueError("slice size must be positive")
    if size > len(pool):
        raise ValueError(f"slice of {size} requested from a split of {len(pool)}")
    idx = np.random.default_rng(rng_seed).permutation(len(pool))[:size]
    return [pool[i] for i in idx]


def load_dataset(path: Path | str) -> DatasetSplits:
    """Read line-delimited JSON records (context_id, input, target, category?, split)."""
    parts: dict[str, dict[str, list[TaskInstance]]] = {}
    seen: dict[tuple, tuple[str, int]] = {}
    first_line: dict[str, int] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
            for key in ("context_id", "input", "target", "split"):
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            if rec["split"] not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {rec['split']!r}")
            try:
                inst = TaskInstance(rec["context_id"], str(rec["input"]), str(rec["target"]), rec.get("category"))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            key = (inst.context_id, inst.input_x, inst.target_y, inst.category)
            if key in seen and seen[key][0] != rec["split"]:
                other, at = seen[key]
                raise ValueError(f"{path}:{lineno}: instance {inst.input_x!r} is in {rec['split']} here and in {other} at line {at}")
            seen.setdefault(key, (rec["split"], lineno))
            first_line.setdefault(inst.context_id, lineno)
            parts.setdefault(inst.context_id, {s: [] for s in SPLITS})[rec["split"]].append(inst)
    if not parts:
        raise ValueError(f"{path}: no records")
    for ctx, d in parts.items():
        for name in SPLITS:
            if not d[name]:
                raise ValueError(f"{path}:{first_line[ctx]}: context {ctx!r} (first record) has no {name} records")
    return DatasetSplits({c: {s: tuple(v) for s, v in d.items()} for c, d in parts.items()})


def write_dataset(path: Path | str, splits: DatasetSplits) -> None:
    with open(path, "w") as fh:
        for ctx in splits.context_ids:
            for name in SPLITS:
                for inst in splits.split(ctx, name):
                    rec = {"context_id": ctx, "input": inst.input_x, "target": inst.target_y, "split": name}
                    if inst.category is not None:
                        rec["category"] = inst.category
                    fh.write(json.dumps(rec) + "\n")


# --------------------------------------------------------------------------- workers


def longest_ordered_prefix(sequence: Sequence[int], tokens: Sequence[int]) -> int:
    """Length of the longest prefix of ``sequence`` that is a subsequence of ``tokens``.

    Greedy left-to-right matching is optimal for a fixed prefix.
    """
    k = 0
    for t in tokens:
        if k < len(sequence) and t == sequence[k]:
            k += 1
    return k


class Worker:
    """Common surface: ``execute`` one instance, ``score`` it, ``aggregate_reward`` over a slice.

    ``calls`` counts ``execute`` invocations; it is the cost unit shared by the
    trainer and the evolutionary baseline.
    """

    def __init__(self, contexts: Mapping[str, ContextDescriptor], eos: int):
        self.contexts = dict(contexts)
        self.eos = eos
        self.calls = 0

    def spec(self, instance: TaskInstance):
        try:
            return self.contexts[instance.context_id].hidden_spec
        except KeyError:
            raise KeyError(f"unknown context {instance.context_id!r}") from None

    def _content(self, prompt) -> tuple[int, ...]:
        return prompt.content(self.eos)

    def execute(self, prompt, instance: TaskInstance) -> WorkerOutput:
        raise NotImplementedError

    def score(self, output: WorkerOutput, instance: TaskInstance, prompt) -> float:
        raise NotImplementedError

    def run_slice(self, prompt, instances: Sequence[TaskInstance]) -> list[WorkerOutput]:
        return [self.execute(prompt, inst) for inst in instances]

    def run_group(self, prompts, instances) -> list[list[WorkerOutput]]:
        """Outputs indexed [candidate][instance]."""
        return [self.run_slice(p, instances) for p in prompts]

    def aggregate_reward(self, prompt, instances: Sequence[TaskInstance], outputs=None) -> float:
        if not instances:
            raise ValueError("cannot aggregate over an empty slice")
        if outputs is None:
            outputs = self.run_slice(prompt, instances)
        return float(np.mean([self.score(o, i, prompt) for o, i in zip(outputs, instances)]))


class KeywordWorker(Worker):
    """Correct iff every required token is present, no forbidden token is, and the
    instance's category control token is present (default-category instances need none)."""

    def execute(self, prompt, instance):
        self.calls += 1
        ok = self.is_correct(self._content(prompt), instance)
        return WorkerOutput(instance.target_y if ok else f"not {instance.target_y}", ok)

    def needed(self, instance: TaskInstance) -> tuple[int, ...]:
        spec: KeywordSpec = self.spec(instance)
        extra = () if instance.category is None else (spec.categories[instance.category],)
        return tuple(spec.required) + extra

    def is_correct(self, tokens: Sequence[int], instance: TaskInstance) -> bool:
        present = set(tokens)
        spec: KeywordSpec = self.spec(instance)
        return all(t in present for t in self.needed(instance)) and not any(t in present for t in spec.forbidden)

    def score(self, output, instance, prompt):
        if output.correct is None:
            return float(self.is_correct(self._content(prompt), instance))
        return 1.0 if output.correct else 0.0


class OrderedProtocolWorker(Worker):
    """Partial credit L/k for the longest in-order prefix of the hidden sequence."""

    def execute(self, prompt, instance):
        self.calls += 1
        seq = self.spec(instance).sequence
        ok = longest_ordered_prefix(seq, self._content(prompt)) == len(seq)
        return WorkerOutput(instance.target_y if ok else f"not {instance.target_y}", ok)

    def score(self, output, instance, prompt):
        seq = self.spec(instance).sequence
        return longest_ordered_prefix(seq, self._content(prompt)) / len(seq)


class RemoteWorker(Worker):
    """Black-box worker behind a chat-completions endpoint.

    The prompt is detokenized and sent as the system message, the instance input
    as the user message. Group fan-out uses up to ``client.max_in_flight`` threads;
    results come back in (candidate, instance) order.
    """

    def __init__(self, contexts, eos, vocab: Vocabulary, client, exact_match: bool = False):
        super().__init__(contexts, eos)
        self.vocab = vocab
        self.client = client
        self.exact_match = exact_match

    def execute(self, prompt, instance):
        self.calls += 1
        text = self.vocab.decode(self._content(prompt))
        reply = self.client.chat(system=text, user=instance.input_x)
        return WorkerOutput(reply.text)

    def score(self, output, instance, prompt):
        got, want = output.output_yhat.strip(), instance.target_y.strip()
        if self.exact_match:
            return 1.0 if got == want else 0.0
        return 1.0 if want.casefold() in got.casefold() else 0.0

    def run_group(self, prompts, instances):
        jobs = [(p, inst) for p in prompts for inst in instances]
        with ThreadPoolExecutor(max_workers=max(1, self.client.max_in_flight)) as pool:
            flat = list(pool.map(lambda job: self.execute(*job), jobs))
        m = len(instances)
        return [flat[i * m:(i + 1) * m] for i in range(len(prompts))]

    def run_slice(self, prompt, instances):
        return self.run_group([prompt], instances)[0]


# --------------------------------------------------------------------------- synthetic generators


@dataclass
class SyntheticEnvironment:
    """A generated task family: vocabulary, contexts, splits, worker, and the
    optimal prompt per context (for tests only; never shown to the prompter)."""

    kind: str
    vocab: Vocabulary
    contexts: dict[str, ContextDescriptor]
    dataset: DatasetSplits
    optimal_prompts: dict[str, tuple[int, ...]]

    def make_worker(self) -> Worker:
        cls = KeywordWorker if self.kind == "keyword" else OrderedProtocolWorker
        return cls(self.contexts, self.vocab.eos)


def _instances(ctx: str, split: str, count: int, categories: Sequence[str], default_share: float, rng) -> tuple:
    out = []
    for i in range(count):
        cat = None
        if categories and rng.random() >= default_share:
            cat = categories[int(rng.integers(len(categories)))]
        out.append(TaskInstance(ctx, f"{ctx}/{split}/{i}", f"answer-{ctx}-{split}-{i}", cat))
    return tuple(out)


def _ensure_categories(items: tuple, categories: Sequence[str]) -> tuple:
    # every split contains each category and the default tag at least once
    items = list(items)
    tags = [None, *categories]
    for j, tag in enumerate(tags):
        if j < len(items) and all(inst.category != tag for inst in items):
            inst = items[j]
            items[j] = TaskInstance(inst.context_id, inst.input_x, inst.target_y, tag)
    return tuple(items)


def make_keyword_task(
    seed: int,
    n_contexts: int = 1,
    n_control: int = 8,
    n_filler: int = 24,
    n_required: int | tuple[int, int] = (2, 4),
    n_forbidden: int | tuple[int, int] = (1, 2),
    n_categories: int | tuple[int, int] = (0, 2),
    split_sizes: tuple[int, int, int] = (64, 32, 32),
    default_share: float = 0.5,
    describe: bool | None = None,
) -> SyntheticEnvironment:
    """Seeded KeywordTask family.

    Each context draws its required, forbidden and category control tokens
    disjointly from the control subrange. Integer counts are fixed; (lo, hi)
    pairs are drawn inclusively. With ``describe`` false (the default for a
    single context) the description is empty, i.e. the fixed-prompt regime.
    """
    rng = np.random.default_rng([seed, 11])
    vocab = Vocabulary.build(n_control, n_filler, max(n_contexts, 1))
    describe = n_contexts > 1 if describe is None else describe
    contexts, splits, optimal = {}, {}, {}
    for c in range(n_contexts):
        ctx = f"ctx{c}"
        draw = lambda spec: int(spec) if isinstance(spec, int) else int(rng.integers(spec[0], spec[1] + 1))
        nr, nf, nc = draw(n_required), draw(n_forbidden), draw(n_categories)
        if nr + nf + nc > n_control:
            raise ValueError("control subrange too small for the requested hidden spec")
        picks = [vocab.control[i] for i in rng.permutation(n_control)[: nr + nf + nc]]
        cats = {f"cat{j}": picks[nr + nf + j] for j in range(nc)}
        spec = KeywordSpec(tuple(sorted(picks[:nr])), tuple(sorted(picks[nr:nr + nf])), cats)
        desc = (vocab.tasks[c],) if describe else ()
        contexts[ctx] = ContextDescriptor(ctx, desc, spec)
        splits[ctx] = {
            name: _ensure_categories(_instances(ctx, name, size, sorted(cats), default_share, rng), sorted(cats))
            for name, size in zip(SPLITS, split_sizes)
        }
        optimal[ctx] = tuple(sorted(spec.required + tuple(cats.values()))) + (vocab.eos,)
    return SyntheticEnvironment("keyword", vocab, contexts, DatasetSplits(splits), optimal)


def make_ordered_task(
    seed: int,
    n_contexts: int = 1,
    n_control: int = 8,
    n_filler: int = 24,
    sequence_length: int = 4,
    split_sizes: tuple[int, int, int] = (64, 32, 32),
    describe: bool | None = None,
) -> SyntheticEnvironment:
    """Seeded OrderedProtocolTask family: each context hides an ordered tuple of
    distinct control tokens that must appear in order inside the prompt."""
    rng = np.random.default_rng([seed, 13])
    vocab = Vocabulary.build(n_control, n_filler, max(n_contexts, 1))
    describe = n_contexts > 1 if describe is None else describe
    if sequence_length > n_control:
        raise ValueError("sequence longer than the control subrange")
    contexts, splits, optimal = {}, {}, {}
    for c in range(n_contexts):
        ctx = f"ctx{c}"
        seq = tuple(vocab.control[i] for i in rng.permutation(n_control)[:sequence_length])
        desc = (vocab.tasks[c],) if describe else ()
        contexts[ctx] = ContextDescriptor(ctx, desc, OrderSpec(seq))
        splits[ctx] = {name: _instances(ctx, name, size, (), 1.0, rng) for name, size in zip(SPLITS, split_sizes)}
        optimal[ctx] = seq + (vocab.eos,)
    return SyntheticEnvironment("ordered", vocab, contexts, DatasetSplits(splits), optimal)


def make_environment(kind: str, seed: int, **kwargs) -> SyntheticEnvironment:
    makers: dict[str, Callable[..., SyntheticEnvironment]] = {
        "keyword": make_keyword_task,
        "ordered": make_ordered_task,
    }
    if kind not in makers:
        raise ValueError(f"unknown synthetic environment {kind!r}")
    return makers[kind](seed, **kwargs)
