"""Critics: turn a prompt's failed examples into a bounded critique set."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Sequence

from promptforge.envs import (
    KeywordSpec,
    OrderSpec,
    TaskInstance,
    WorkerOutput,
    longest_ordered_prefix,
)
from promptforge.vocab import Vocabulary


@dataclass(frozen=True)
class Hint:
    kind: str  # "missing" | "forbidden" | "order"
    token: int
    position: int | None = None


@dataclass(frozen=True)
class Critique:
    instance_ref: int
    yhat: WorkerOutput
    feedback_tokens: tuple[int, ...] | str
    hint: Hint | None = None


@dataclass(frozen=True)
class CritiqueSet:
    prompt_ref: tuple[int, ...]
    entries: tuple[Critique, ...] = ()

    def hints(self) -> list[Hint]:
        return [c.hint for c in self.entries if c.hint is not None]

    def summary(self, vocab: Vocabulary | None = None) -> list[str]:
        out = []
        for c in self.entries:
            if isinstance(c.feedback_tokens, str):
                out.append(c.feedback_tokens)
            elif c.hint is not None:
                name = vocab.tokens[c.hint.token] if vocab else str(c.hint.token)
                pos = "" if c.hint.position is None else f"@{c.hint.position}"
                out.append(f"{c.hint.kind.upper()}({name}){pos}")
        return out


def _failed(outputs: Sequence[WorkerOutput]) -> list[int]:
    return [i for i, o in enumerate(outputs) if o.correct is False]


class RuleCritic:
    """Emits one hint per failed example, by fixed priority:
    lowest-index missing token, then lowest-index present forbidden token, then
    the first violated order position."""

    def __init__(self, worker, vocab: Vocabulary):
        self.worker = worker
        self.vocab = vocab

    def hint_for(self, tokens: Sequence[int], instance: TaskInstance) -> Hint | None:
        spec = self.worker.spec(instance)
        present = set(tokens)
        if isinstance(spec, KeywordSpec):
            needed = self.worker.needed(instance)
            forbidden = spec.forbidden
            sequence = ()
        elif isinstance(spec, OrderSpec):
            needed, forbidden, sequence = spec.sequence, (), spec.sequence
        else:
            raise TypeError(f"rule critic cannot read spec {type(spec).__name__}")
        missing = sorted(t for t in needed if t not in present)
        if missing:
            return Hint("missing", missing[0])
        bad = sorted(t for t in forbidden if t in present)
        if bad:
            return Hint("forbidden", bad[0])
        if sequence:
            k = longest_ordered_prefix(sequence, tokens)
            if k < len(sequence):
                return Hint("order", sequence[k], k)
        return None

    def generate_critiques(self, prompt, instances: Sequence[TaskInstance], outputs: Sequence[WorkerOutput], K: int) -> CritiqueSet:
        if len(instances) != len(outputs):
            raise ValueError("outputs must align with the slice")
        tokens = prompt.content(self.vocab.eos)
        entries = []
        for i in _failed(outputs)[:K]:
            hint = self.hint_for(tokens, instances[i])
            if hint is None:
                continue
            entries.append(Critique(i, outputs[i], (self.vocab.hint(hint.kind), hint.token), hint))
        return CritiqueSet(tuple(prompt.tokens), tuple(entries))


def default_critic_template() -> str:
    """The packaged critic template (``assets/critic_template.txt``)."""
    return resources.files("promptforge").joinpath("assets/critic_template.txt").read_text()


class RemoteCritic:
    """Critic backed by a chat-completions endpoint; returns free text per failure.

    Failure detection uses the paired worker's score (< 1 means failed).
    """

    def __init__(self, worker, vocab: Vocabulary, client, template: str | None = None):
        self.worker = worker
        self.vocab = vocab
        self.client = client
        self.template = template if template is not None else default_critic_template()

    def generate_critiques(self, prompt, instances, outputs, K: int) -> CritiqueSet:
        if len(instances) != len(outputs):
            raise ValueError("outputs must align with the slice")
        text = self.vocab.decode(prompt.content(self.vocab.eos))
        failed = [i for i, (o, inst) in enumerate(zip(outputs, instances)) if self.worker.score(o, inst, prompt) < 1.0]
        entries = []
        for i in failed[:K]:
            inst = instances[i]
            msg = self.template.format(prompt=text, input=inst.input_x, target=inst.target_y, output=outputs[i].output_yhat)
            reply = self.client.chat(system="You critique instructions.", user=msg)
            entries.append(Critique(i, outputs[i], reply.text))
        return CritiqueSet(tuple(prompt.tokens), tuple(entries))
