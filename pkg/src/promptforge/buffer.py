"""Contrastive experience buffer: per-context trajectory stores with threshold admission."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class TrajectoryRecord:
    prompt: object  # PromptSequence
    critiques: object  # CritiqueSet
    reward: float
    step_created: int
    context_id: str
    seq: int = 0  # insertion order, breaks step_created ties

    def __post_init__(self):
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"reward {self.reward} outside [0, 1]")


@dataclass
class ContextBuffer:
    context_id: str
    capacity: int = 64
    records: list[TrajectoryRecord] = field(default_factory=list)
    _next_seq: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, rec: TrajectoryRecord) -> None:
        if rec.context_id != self.context_id:
            raise ValueError(f"record for {rec.context_id!r} in buffer {self.context_id!r}")
        self.records.append(TrajectoryRecord(rec.prompt, rec.critiques, rec.reward, rec.step_created, rec.context_id, self._next_seq))
        self._next_seq += 1

    def best_reward(self) -> float:
        return max(r.reward for r in self.records) if self.records else float("-inf")


def admit_batch(buf: ContextBuffer, candidates: Sequence[TrajectoryRecord], epsilon: float) -> list[int]:
    """Append every candidate with reward >= max(batch rewards) - epsilon; returns their indices."""
    if not candidates:
        raise ValueError("empty candidate batch")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    contexts = {c.context_id for c in candidates}
    if contexts != {buf.context_id}:
        raise ValueError(f"candidates span contexts {sorted(contexts)}, buffer is {buf.context_id!r}")
    r_max = max(c.reward for c in candidates)
    admitted = [i for i, c in enumerate(candidates) if c.reward >= r_max - epsilon]
    for i in admitted:
        buf._append(candidates[i])
    return admitted


def _order_key(rec: TrajectoryRecord):
    return (rec.step_created, rec.seq)


def sample_history(buf: ContextBuffer, m: int, rng_seed: int, uniform: bool = False) -> list[TrajectoryRecord]:
    """Contrastive history: the best and worst records plus m-2 uniform draws.

    Extremes tie-break on earliest creation. With ``uniform`` set, all m are
    drawn uniformly (ablation).
    """
    if not buf.records:
        raise ValueError("cannot sample history from an empty buffer")
    if m < 1:
        raise ValueError("history size must be >= 1")
    recs = sorted(buf.records, key=_order_key)
    if len(recs) <= m:
        return recs
    rng = np.random.default_rng(rng_seed)
    if uniform:
        picked = [recs[i] for i in rng.choice(len(recs), size=m, replace=False)]
        return sorted(picked, key=_order_key)
    best = max(range(len(recs)), key=lambda i: (recs[i].reward, -i))
    worst = min(range(len(recs)), key=lambda i: (recs[i].reward, i))
    chosen = [best] if m == 1 or best == worst else [best, worst]
    rest = [i for i in range(len(recs)) if i not in chosen]
    extra = m - len(chosen)
    if extra > 0:
        chosen += [rest[j] for j in rng.choice(len(rest), size=extra, replace=False)]
    return sorted((recs[i] for i in chosen), key=_order_key)


def evict(buf: ContextBuffer) -> list[TrajectoryRecord]:
    """Trim to capacity, sparing the best record and the most recent minimum-reward record.

    Among the rest the lowest reward goes first, oldest on ties. If only spared
    records remain over capacity, the minimum-reward one is dropped.
    """
    removed = []
    while len(buf.records) > buf.capacity:
        recs = buf.records
        newest_first = sorted(recs, key=_order_key, reverse=True)
        best = max(newest_first, key=lambda r: r.reward)
        worst = min(newest_first, key=lambda r: r.reward)
        pool = [r for r in recs if r is not best and r is not worst] or [r for r in recs if r is not best] or recs
        victim = min(pool, key=lambda r: (r.reward, _order_key(r)))
        recs.remove(victim)
        removed.append(victim)
    return removed


@dataclass
class ExperienceBuffer:
    capacity: int = 64
    buffers: dict[str, ContextBuffer] = field(default_factory=dict)

    def __getitem__(self, context_id: str) -> ContextBuffer:
        if context_id not in self.buffers:
            self.buffers[context_id] = ContextBuffer(context_id, self.capacity)
        return self.buffers[context_id]

    def __len__(self) -> int:
        return sum(len(b) for b in self.buffers.values())

    def records(self) -> list[TrajectoryRecord]:
        """Global view: the union of all sub-buffers."""
        return [r for cid in sorted(self.buffers) for r in self.buffers[cid].records]

    def sizes(self) -> dict[str, int]:
        return {cid: len(self.buffers[cid]) for cid in sorted(self.buffers)}

    def clone(self) -> "ExperienceBuffer":
        out = ExperienceBuffer(self.capacity)
        for cid, b in self.buffers.items():
            out.buffers[cid] = ContextBuffer(cid, b.capacity, list(b.records), b._next_seq)
        return out


def snapshot_lines(buffer: ExperienceBuffer, vocab=None) -> Iterable[str]:
    """Line-delimited JSON records for persistence and the inspect command."""
    for rec in buffer.records():
        yield json.dumps(
            {
                "context_id": rec.context_id,
                "step": rec.step_created,
                "seq": rec.seq,
                "reward": rec.reward,
                "prompt": list(rec.prompt.tokens),
                "prompt_text": vocab.decode(rec.prompt.tokens) if vocab is not None else None,
                "critiques": rec.critiques.summary(vocab),
            },
            sort_keys=True,
        )
