"""Reflective evolutionary prompt search, a deliberately simple GEPA-style baseline.

Population of token prompts, critique-guided single-edit mutation, elitist
truncation selection and fitness-proportional parent choice. It shares the
worker, critic, dataset and worker-call meter with the RL trainer so the two
can be compared at equal cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from promptforge import policy as pol
from promptforge.critique import CritiqueSet
from promptforge.envs import DatasetSplits, sample_slice
from promptforge.policy import PolicyDims, PromptSequence
from promptforge.trainer import seed_for
from promptforge.vocab import Vocabulary

LABEL = "evolutionary baseline (GEPA-style stand-in, not GEPA)"


@dataclass
class EvoConfig:
    population_size: int = 8
    survivors: int = 2
    hint_rate: float = 0.8
    generations: int | None = 100
    worker_call_budget: int | None = None
    slice_size: int = 16
    critique_count: int = 2
    max_prompt_len: int = 8
    seed: int = 0
    d_e: int = 16
    d_h: int = 32

    def __post_init__(self):
        if not 1 <= self.survivors < self.population_size:
            raise ValueError("invalid evo config value for 'survivors': need 1 <= survivors < population_size")
        if not 0.0 <= self.hint_rate <= 1.0:
            raise ValueError("invalid evo config value for 'hint_rate'")
        if self.generations is None and self.worker_call_budget is None:
            raise ValueError("invalid evo config value for 'generations': set generations or worker_call_budget")


@dataclass
class Individual:
    prompt: PromptSequence
    fitness: float = 0.0
    lineage: int | None = None  # uid of the parent
    uid: int = 0
    critiques: CritiqueSet | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError("fitness outside [0, 1]")


def _content_tokens(vocab: Vocabulary) -> np.ndarray:
    skip = vocab.frame
    return np.array([i for i in range(len(vocab)) if i not in skip])


def _edit(tokens: list[int], hint, rng, vocab: Vocabulary, cap: int) -> list[int]:
    out = list(tokens)
    if hint is not None and hint.kind == "missing":
        pos = int(rng.integers(len(out) + 1))
        if len(out) >= cap:
            out[min(pos, len(out) - 1)] = hint.token
        else:
            out.insert(pos, hint.token)
        return out
    if hint is not None and hint.kind == "forbidden":
        return [t for t in out if t != hint.token]
    if hint is not None and hint.kind == "order":
        return _fix_order(out, hint, rng, vocab, cap)
    pool = _content_tokens(vocab)
    ops = ["insert", "delete", "substitute"] if out else ["insert"]
    if len(out) >= cap:
        ops.remove("insert")
    op = ops[int(rng.integers(len(ops)))]
    if op == "insert":
        out.insert(int(rng.integers(len(out) + 1)), int(pool[rng.integers(len(pool))]))
    elif op == "delete":
        del out[int(rng.integers(len(out)))]
    else:
        out[int(rng.integers(len(out)))] = int(pool[rng.integers(len(pool))])
    return out


def _fix_order(tokens: list[int], hint, rng, vocab, cap) -> list[int]:
    """Move the offending token to the end of the prompt, which places it after
    every matched predecessor (hidden tokens are distinct)."""
    if hint.token not in tokens:
        return _edit(tokens, type(hint)("missing", hint.token), rng, vocab, cap)
    out = list(tokens)
    src = max(i for i, t in enumerate(out) if t == hint.token)
    out.append(out.pop(src))
    return out


def mutate(ind: Individual, critiques: CritiqueSet | None, rng_seed: int, vocab: Vocabulary,
           hint_rate: float = 1.0, max_prompt_len: int = 8, uid: int = 0) -> Individual:
    """Exactly one edit: hint-guided when a hint exists (with probability ``hint_rate``), random otherwise."""
    rng = np.random.default_rng(rng_seed)
    hints = critiques.hints() if critiques is not None else []
    hint = hints[0] if hints and rng.random() < hint_rate else None
    tokens = _edit(list(ind.prompt.content(vocab.eos)), hint, rng, vocab, max_prompt_len - 1)
    return Individual(PromptSequence(tuple(tokens) + (vocab.eos,)), ind.fitness, ind.uid, uid)


class Evolution:
    def __init__(self, config: EvoConfig, dataset: DatasetSplits, worker, critic, vocab: Vocabulary, contexts: dict):
        self.config = config
        self.dataset = dataset
        self.worker = worker
        self.critic = critic
        self.vocab = vocab
        self.contexts = contexts
        self.calls = {"train": 0, "test": 0}
        self._uid = 0

    def _next_uid(self) -> int:
        self._uid += 1
        return self._uid

    def starter_population(self, context_id: str, j: int = 0) -> list[Individual]:
        """Samples of the freshly initialized reference policy, shared with the RL starter."""
        cfg = self.config
        params = pol.init_params(seed_for(cfg.seed, "policy"), PolicyDims(len(self.vocab), cfg.d_e, cfg.d_h))
        cond = pol.encode_conditioning(self.contexts[context_id], [], self.vocab, 10**6)
        prompts = pol.sample_prompts(params, cond, cfg.population_size, seed_for(cfg.seed, "evo-start", j),
                                     eos=self.vocab.eos, max_prompt_len=cfg.max_prompt_len)
        return [Individual(PromptSequence(p.tokens), 0.0, None, self._next_uid()) for p in prompts]

    def evaluate(self, population: list[Individual], context_id: str, rng_seed: int) -> list[Individual]:
        cfg = self.config
        instances = sample_slice(self.dataset, context_id, "train", cfg.slice_size, rng_seed)
        before = self.worker.calls
        outputs = self.worker.run_group([ind.prompt for ind in population], instances)
        self.calls["train"] += self.worker.calls - before
        scored = []
        for ind, outs in zip(population, outputs):
            fit = self.worker.aggregate_reward(ind.prompt, instances, outs)
            crit = self.critic.generate_critiques(ind.prompt, instances, outs, cfg.critique_count)
            scored.append(Individual(ind.prompt, fit, ind.lineage, ind.uid, crit))
        return scored

    def evolve_step(self, population: list[Individual], context_id: str, rng_seed: int) -> tuple[list[Individual], list[Individual]]:
        """Score ``population``, keep the top q, refill with mutated survivors.

        Returns (scored current generation, next generation).
        """
        if not population:
            raise ValueError("empty population")
        cfg = self.config
        rng = np.random.default_rng(rng_seed)
        scored = self.evaluate(population, context_id, int(rng.integers(2**62)))
        ranked = sorted(range(len(scored)), key=lambda i: (-scored[i].fitness, i))
        survivors = [scored[i] for i in ranked[: cfg.survivors]]
        weights = np.array([s.fitness for s in survivors])
        probs = weights / weights.sum() if weights.sum() > 0 else np.full(len(survivors), 1 / len(survivors))
        children = []
        for _ in range(len(population) - len(survivors)):
            parent = survivors[int(rng.choice(len(survivors), p=probs))]
            children.append(mutate(parent, parent.critiques, int(rng.integers(2**62)), self.vocab,
                                   cfg.hint_rate, cfg.max_prompt_len, self._next_uid()))
        return scored, survivors + children

    def run(self) -> dict:
        cfg = self.config
        ids = self.dataset.context_ids
        per_ctx_budget = None if cfg.worker_call_budget is None else cfg.worker_call_budget // len(ids)
        gen_cost = cfg.population_size * cfg.slice_size
        results = {}
        trajectory = []
        for j, cid in enumerate(ids):
            population = self.starter_population(cid, j)
            best: Individual | None = None
            spent = 0
            gen = 0
            while True:
                # generation 0 only scores the starter population
                if per_ctx_budget is not None and spent + gen_cost > per_ctx_budget and gen > 0:
                    break
                if cfg.generations is not None and gen > cfg.generations:
                    break
                scored, nxt = self.evolve_step(population, cid, seed_for(cfg.seed, "evo", j, gen))
                spent += gen_cost
                top = max(scored, key=lambda s: s.fitness)
                if best is None or top.fitness > best.fitness:
                    best = top
                trajectory.append({"context_id": cid, "generation": gen, "best_ever": best.fitness,
                                   "mean": float(np.mean([s.fitness for s in scored])), "calls": spent})
                population = nxt
                gen += 1
            before = self.worker.calls
            test = self.worker.aggregate_reward(best.prompt, self.dataset.split(cid, "test"))
            self.calls["test"] += self.worker.calls - before
            results[cid] = {"prompt": list(best.prompt.tokens), "text": self.vocab.decode(best.prompt.tokens),
                            "fitness": best.fitness, "test_reward": test, "generations": gen}
        return {
            "label": LABEL,
            "best": results,
            "mean_test_reward": float(np.mean([r["test_reward"] for r in results.values()])),
            "trajectory": trajectory,
            "worker_calls": dict(self.calls),
            "total_worker_calls": sum(self.calls.values()),
        }
