"""Feedback-driven prompt RL: GRPO over candidate groups with a KL anchor and an experience buffer."""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from promptforge import policy as pol
from promptforge.buffer import ExperienceBuffer, TrajectoryRecord, admit_batch, evict, sample_history
from promptforge.critique import CritiqueSet
from promptforge.envs import DatasetSplits, WorkerError, sample_slice
from promptforge.policy import PolicyDims, PolicyParams, PromptSequence
from promptforge.vocab import Vocabulary

log = logging.getLogger(__name__)

ADVANTAGE_DELTA = 1e-8


@dataclass
class TrainerConfig:
    group_size: int = 8
    kl_weight: float = 0.05
    admit_tolerance: float = 0.05
    critique_count: int = 2
    history_size: int = 3
    slice_size: int = 16
    learning_rate: float = 3e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_every: int = 10
    patience: int = 10
    max_steps: int = 1500
    temperature: float = 1.0
    seed: int = 0
    d_e: int = 16
    d_h: int = 32
    max_prompt_len: int = 64
    max_prefix_len: int = 256
    buffer_capacity: int = 64
    top_k: int = 10
    threshold: float = 0.90
    use_buffer: bool = True
    uniform_history: bool = False

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        checks = {
            "group_size": self.group_size >= 2,
            "kl_weight": self.kl_weight >= 0,
            "admit_tolerance": self.admit_tolerance >= 0,
            "critique_count": self.critique_count >= 0,
            "history_size": self.history_size >= 1,
            "slice_size": self.slice_size >= 1,
            "learning_rate": self.learning_rate > 0,
            "adam_betas": len(self.adam_betas) == 2 and all(0 <= b < 1 for b in self.adam_betas),
            "adam_eps": self.adam_eps > 0,
            "eval_every": self.eval_every >= 1,
            "patience": self.patience >= 1,
            "max_steps": self.max_steps >= 0,
            "temperature": self.temperature > 0,
            "d_e": self.d_e >= 1,
            "d_h": self.d_h >= 1,
            "max_prompt_len": self.max_prompt_len >= 1,
            "buffer_capacity": self.buffer_capacity >= 1,
            "top_k": self.top_k >= 1,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid trainer config value for {bad[0]!r}: {getattr(self, bad[0])!r}")

    # published preset for a billion-parameter prompter
    PUBLISHED_LEARNING_RATE = 1e-5


def seed_for(root: int, stream: str, *keys: int) -> int:
    """Stateless named sub-stream seed; component replays need only (root, stream, keys)."""
    seq = np.random.SeedSequence([root, zlib.crc32(stream.encode()), *keys])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)


# --------------------------------------------------------------------------- state


@dataclass
class EvalRecord:
    step: int
    mean_reward: float
    per_context: dict[str, float]


@dataclass
class ArchiveEntry:
    context_id: str
    prompt: PromptSequence
    val_reward: float
    order: int
    source: str  # "greedy" | "candidate"


@dataclass
class TrainState:
    params: PolicyParams
    ref_params: PolicyParams
    moment1: PolicyParams
    moment2: PolicyParams
    buffer: ExperienceBuffer
    vocab: Vocabulary
    contexts: dict
    root_seed: int = 0
    step: int = 0
    adam_t: int = 0
    eval_history: list[EvalRecord] = field(default_factory=list)
    archive: dict[int, list[ArchiveEntry]] = field(default_factory=dict)
    last_candidates: list[tuple[str, PromptSequence]] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    calls: dict[str, int] = field(default_factory=lambda: {"init": 0, "train": 0, "eval": 0, "test": 0})


# --------------------------------------------------------------------------- pure pieces


def grpo_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("group-relative advantages need at least two rewards")
    if np.all(r == r[0]):
        # float means of equal values can be off by an ulp; keep the zero-advantage update exact
        return np.zeros_like(r)
    mu = r.mean()
    sigma = r.std()
    return (r - mu) / (sigma + ADVANTAGE_DELTA)


@dataclass
class LossResult:
    loss: float
    grad: PolicyParams
    logprobs: np.ndarray
    kls: np.ndarray


def grpo_loss(params, ref_params, conditioning, prompts, advantages, kl_weight: float) -> LossResult:
    """loss = -(1/n) sum A_i logprob_i + alpha (1/n) sum kl_i, with its exact gradient.

    Single on-policy update per group, so the importance ratio is identically 1
    and no clipping is applied.
    """
    A = np.asarray(advantages, dtype=float)
    n = len(prompts)
    if A.shape != (n,):
        raise ValueError("advantages must align with prompts")
    gg = pol.group_gradient(params, ref_params, conditioning, prompts, -A / n, np.full(n, kl_weight / n))
    loss = float(-(A @ gg.logprobs) / n + kl_weight * gg.kls.mean())
    return LossResult(loss, gg.grad, gg.logprobs, gg.kls)


def apply_adam(params: PolicyParams, grads: PolicyParams, moments: tuple[PolicyParams, PolicyParams],
               lr: float, betas: tuple[float, float], eps: float, t: int):
    """One bias-corrected Adam step. Returns (params, (m, v), ok); a non-finite
    gradient leaves everything unchanged and returns ok=False."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    if not grads.is_finite():
        return params, moments, False
    b1, b2 = betas
    m_old, v_old = moments
    new_p, new_m, new_v = {}, {}, {}
    for name in pol.FIELDS:
        g = getattr(grads, name)
        m = b1 * getattr(m_old, name) + (1 - b1) * g
        v = b2 * getattr(v_old, name) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[name] = getattr(params, name) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return PolicyParams(**new_p), (PolicyParams(**new_m), PolicyParams(**new_v)), True


def should_stop(eval_history, patience: int) -> bool:
    """True once the best value has not strictly improved over the last ``patience`` evaluations."""
    values = [e.mean_reward if isinstance(e, EvalRecord) else float(e) for e in eval_history]
    if len(values) < patience + 1:
        return False
    return max(values[-patience:]) <= max(values[:-patience])


def select_top_prompts(state: TrainState, k: int) -> list[ArchiveEntry]:
    """Top-k archived prompts of the evaluation step with peak mean validation reward."""
    if not state.eval_history:
        raise ValueError("no evaluations recorded")
    best = max(state.eval_history, key=lambda e: e.mean_reward)  # max keeps the earliest on ties
    entries = state.archive.get(best.step, [])
    ranked = sorted(entries, key=lambda e: (-e.val_reward, e.order))
    return ranked[:k]


# --------------------------------------------------------------------------- loop


class Trainer:
    """Holds the environment handles for a run; all mutable run data lives in ``TrainState``."""

    def __init__(self, config: TrainerConfig, dataset: DatasetSplits, worker, critic, vocab: Vocabulary, contexts: dict):
        self.config = config
        self.dataset = dataset
        self.worker = worker
        self.critic = critic
        self.vocab = vocab
        self.contexts = {cid: contexts[cid] for cid in dataset.context_ids}

    # -- helpers

    def _metered(self, state: TrainState, phase: str, fn: Callable):
        before = self.worker.calls
        try:
            return fn()
        finally:
            state.calls[phase] += self.worker.calls - before

    def conditioning(self, context_id: str, history) -> pol.ConditioningSequence:
        return pol.encode_conditioning(self.contexts[context_id], history, self.vocab, self.config.max_prefix_len)

    def history_for(self, state: TrainState, context_id: str, seed: int):
        buf = state.buffer[context_id]
        if not self.config.use_buffer or not buf.records:
            return []
        return sample_history(buf, self.config.history_size, seed, uniform=self.config.uniform_history)

    def _sample(self, params, cond, n, seed, greedy=False):
        cfg = self.config
        return pol.sample_prompts(params, cond, n, seed, cfg.temperature, eos=self.vocab.eos,
                                  max_prompt_len=cfg.max_prompt_len, greedy=greedy)

    def _critique(self, prompt, instances, outputs) -> CritiqueSet:
        if not self.config.use_buffer or self.config.critique_count == 0:
            return CritiqueSet(tuple(prompt.tokens))
        return self.critic.generate_critiques(prompt, instances, outputs, self.config.critique_count)

    # -- operations

    def initialize_run(self, rng_seed: int | None = None) -> TrainState:
        cfg = self.config
        seed = cfg.seed if rng_seed is None else rng_seed
        dims = PolicyDims(len(self.vocab), cfg.d_e, cfg.d_h)
        params = pol.init_params(seed_for(seed, "policy"), dims)
        state = TrainState(params, params.copy(), params.zeros_like(), params.zeros_like(),
                           ExperienceBuffer(cfg.buffer_capacity), self.vocab, self.contexts, root_seed=seed)
        for j, cid in enumerate(self.dataset.context_ids):
            cond = self.conditioning(cid, [])
            prompt = self._sample(params, cond, 1, seed_for(seed, "init-sample", j))[0]
            instances = sample_slice(self.dataset, cid, "train", min(cfg.slice_size, len(self.dataset.split(cid, "train"))),
                                     seed_for(seed, "init-slice", j))
            outputs = self._metered(state, "init", lambda: self.worker.run_slice(prompt, instances))
            reward = self.worker.aggregate_reward(prompt, instances, outputs)
            crit = self.critic.generate_critiques(prompt, instances, outputs, cfg.critique_count) \
                if cfg.use_buffer and cfg.critique_count else CritiqueSet(tuple(prompt.tokens))
            admit_batch(state.buffer[cid], [TrajectoryRecord(prompt, crit, reward, 0, cid)], cfg.admit_tolerance)
            state.last_candidates.append((cid, prompt))
        return state

    def train_step(self, state: TrainState) -> dict:
        cfg = self.config
        root = state.root_seed
        t = state.step + 1
        ids = self.dataset.context_ids
        cid = ids[int(np.random.default_rng(seed_for(root, "context", t)).integers(len(ids)))]
        history = self.history_for(state, cid, seed_for(root, "history", t))
        cond = self.conditioning(cid, history)
        prompts = self._sample(state.params, cond, cfg.group_size, seed_for(root, "sampling", t))
        instances = sample_slice(self.dataset, cid, "train", cfg.slice_size, seed_for(root, "slices", t))

        # read-only phase: any environment error leaves state untouched
        before = self.worker.calls
        outputs = self.worker.run_group(prompts, instances)
        rewards = np.array([self.worker.aggregate_reward(p, instances, o) for p, o in zip(prompts, outputs)])
        crits = [self._critique(p, instances, o) for p, o in zip(prompts, outputs)]
        used = self.worker.calls - before

        adv = grpo_advantages(rewards)
        res = grpo_loss(state.params, state.ref_params, cond, prompts, adv, cfg.kl_weight)
        new_params, moments, ok = apply_adam(state.params, res.grad, (state.moment1, state.moment2),
                                            cfg.learning_rate, cfg.adam_betas, cfg.adam_eps, state.adam_t + 1)

        # single-writer merge phase
        state.calls["train"] += used
        records = [TrajectoryRecord(p, c, float(r), t, cid) for p, c, r in zip(prompts, crits, rewards)]
        buf = state.buffer[cid]
        admitted = admit_batch(buf, records, cfg.admit_tolerance)
        evict(buf)
        if ok:
            state.params = new_params
            state.moment1, state.moment2 = moments
            state.adam_t += 1
        state.step = t
        state.last_candidates = [(cid, p) for p in prompts]
        grad_norm = float(np.linalg.norm(res.grad.flat())) if ok else float("nan")
        row = {
            "kind": "step",
            "step": t,
            "context_id": cid,
            "rewards": [float(r) for r in rewards],
            "mean_reward": float(rewards.mean()),
            "admitted": len(admitted),
            "buffer_sizes": state.buffer.sizes(),
            "history_len": len(history),
            "loss": res.loss,
            "kl": float(res.kls.mean()),
            "grad_norm": grad_norm,
            "update_rejected": not ok,
        }
        state.metrics.append(row)
        return row

    def greedy_prompt(self, state: TrainState, context_id: str, j: int) -> PromptSequence:
        history = self.history_for(state, context_id, seed_for(state.root_seed, "eval-history", state.step, j))
        cond = self.conditioning(context_id, history)
        return self._sample(state.params, cond, 1, 0, greedy=True)[0]

    def evaluate(self, state: TrainState, split_name: str = "validation") -> EvalRecord:
        """Greedy prompt per context scored on the full split; also archives the
        latest training candidates with their scores on that split."""
        per_ctx = {}
        entries: list[ArchiveEntry] = []
        order = 0
        for j, cid in enumerate(self.dataset.context_ids):
            prompt = self.greedy_prompt(state, cid, j)
            split = self.dataset.split(cid, split_name)
            r = self._metered(state, "eval", lambda: self.worker.aggregate_reward(prompt, split))
            per_ctx[cid] = r
            entries.append(ArchiveEntry(cid, prompt, r, order, "greedy"))
            order += 1
        for cid, prompt in state.last_candidates:
            split = self.dataset.split(cid, split_name)
            r = self._metered(state, "eval", lambda: self.worker.aggregate_reward(prompt, split))
            entries.append(ArchiveEntry(cid, prompt, r, order, "candidate"))
            order += 1
        rec = EvalRecord(state.step, float(np.mean(list(per_ctx.values()))), per_ctx)
        state.eval_history.append(rec)
        state.archive[state.step] = entries
        state.metrics.append({
            "kind": "eval",
            "step": state.step,
            "eval_reward": rec.mean_reward,
            "per_context": per_ctx,
            "archive": [
                {"context_id": e.context_id, "prompt": list(e.prompt.tokens), "val_reward": e.val_reward,
                 "order": e.order, "source": e.source}
                for e in entries
            ],
        })
        return rec

    def run(self, on_eval: Callable[[TrainState], None] | None = None) -> "RunReport":
        cfg = self.config
        state = self.initialize_run()
        self.state = state
        self.evaluate(state)
        if on_eval:
            on_eval(state)
        while state.step < cfg.max_steps:
            try:
                self.train_step(state)
            except WorkerError:
                log.warning("step %d aborted; retrying once", state.step + 1)
                try:
                    self.train_step(state)
                except WorkerError as exc:
                    raise RunFailed(build_report(state, cfg, self.worker, self.dataset, test=False), exc) from exc
            last = state.step == cfg.max_steps
            if state.step % cfg.eval_every == 0 or last:
                self.evaluate(state)
                if on_eval:
                    on_eval(state)
                if should_stop(state.eval_history, cfg.patience):
                    break
        return build_report(state, cfg, self.worker, self.dataset)


class RunFailed(RuntimeError):
    def __init__(self, partial_report: "RunReport", cause: Exception):
        super().__init__(f"run failed: {cause}")
        self.partial_report = partial_report


# --------------------------------------------------------------------------- reporting


@dataclass
class RunReport:
    best_eval_step: int
    best_eval_reward: float
    top_prompts: list[dict]
    mean_test_reward: float | None
    steps_to_threshold: int
    threshold: float
    censored: bool
    steps_run: int
    worker_calls: dict[str, int]
    eval_curve: list[tuple[int, float]]

    @property
    def total_worker_calls(self) -> int:
        return sum(self.worker_calls.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_worker_calls"] = self.total_worker_calls
        d["eval_curve"] = [list(p) for p in self.eval_curve]
        return d


def steps_to_threshold(eval_history, threshold: float, budget: int) -> tuple[int, bool]:
    """First evaluation step reaching ``threshold``; otherwise (budget, censored=True)."""
    for e in eval_history:
        if e.mean_reward >= threshold:
            return e.step, False
    return budget, True


def build_report(state: TrainState, cfg: TrainerConfig, worker, dataset: DatasetSplits, test: bool = True) -> RunReport:
    """Score the selected prompts on the test split, log that as a metrics row,
    and derive the report from the metrics stream alone."""
    top = select_top_prompts(state, cfg.top_k) if state.eval_history else []
    rewards = []
    if test:
        for e in top:
            before = worker.calls
            rewards.append(worker.aggregate_reward(e.prompt, dataset.split(e.context_id, "test")))
            state.calls["test"] += worker.calls - before
    state.metrics.append({"kind": "final", "steps_run": state.step, "test_rewards": rewards if test else None,
                          "worker_calls": dict(state.calls)})
    return report_from_metrics(state.metrics, cfg.top_k, cfg.threshold, cfg.max_steps, state.vocab)


def report_from_metrics(rows: list[dict], top_k: int, threshold: float, budget: int, vocab: Vocabulary | None = None) -> RunReport:
    evals = [r for r in rows if r["kind"] == "eval"]
    final = next((r for r in reversed(rows) if r["kind"] == "final"), None)
    history = [EvalRecord(r["step"], r["eval_reward"], r["per_context"]) for r in evals]
    best = max(history, key=lambda e: e.mean_reward) if history else None
    top = []
    if best is not None:
        archive = next(r["archive"] for r in evals if r["step"] == best.step)
        top = sorted(archive, key=lambda a: (-a["val_reward"], a["order"]))[:top_k]
    test_rewards = (final or {}).get("test_rewards") or None
    prompts = []
    for i, a in enumerate(top):
        row = {"context_id": a["context_id"], "prompt": a["prompt"], "val_reward": a["val_reward"], "source": a["source"]}
        if vocab is not None:
            row["text"] = vocab.decode(a["prompt"])
        if test_rewards:
            row["test_reward"] = test_rewards[i]
        prompts.append(row)
    stt, censored = steps_to_threshold(history, threshold, budget)
    return RunReport(
        best_eval_step=best.step if best else 0,
        best_eval_reward=best.mean_reward if best else float("nan"),
        top_prompts=prompts,
        mean_test_reward=float(np.mean(test_rewards)) if test_rewards else None,
        steps_to_threshold=stt,
        threshold=threshold,
        censored=censored,
        steps_run=(final or {}).get("steps_run", max((r.get("step", 0) for r in rows), default=0)),
        worker_calls=dict((final or {}).get("worker_calls", {})),
        eval_curve=[(e.step, e.mean_reward) for e in history],
    )
