"""Recurrent categorical prompter: sampling, exact log-probabilities, BPTT gradients and KL.

The model reads a conditioning prefix token by token and then emits a prompt::

    h[t+1]    = tanh(recur_h @ h[t] + recur_x @ embedding[token[t]] + recur_b)
    logits[t] = out_w @ h[t] + out_b

All candidates of a group share one prefix, so the prefix is run once and the
emitted spans are processed as a padded batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from promptforge.vocab import Vocabulary

FIELDS = ("embedding", "recur_h", "recur_x", "recur_b", "out_w", "out_b")
CHECKPOINT_FORMAT = 1
_MAX_ELEMENTS = 2**28


@dataclass(frozen=True)
class PolicyDims:
    vocab_size: int
    d_e: int
    d_h: int


@dataclass
class PolicyParams:
    embedding: np.ndarray
    recur_h: np.ndarray
    recur_x: np.ndarray
    recur_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    def __post_init__(self):
        V, d_e = self.embedding.shape
        d_h = self.recur_h.shape[0]
        shapes = {
            "recur_h": (d_h, d_h),
            "recur_x": (d_h, d_e),
            "recur_b": (d_h,),
            "out_w": (V, d_h),
            "out_b": (V,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dims(self) -> PolicyDims:
        return PolicyDims(self.embedding.shape[0], self.embedding.shape[1], self.recur_h.shape[0])

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in FIELDS}

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays().values()])


@dataclass(frozen=True)
class ConditioningSequence:
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class PromptSequence:
    tokens: tuple[int, ...]
    per_step_logprobs: tuple[float, ...] | None = None
    logprob_temperature: float | None = None

    def content(self, eos: int) -> tuple[int, ...]:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == eos else self.tokens


def init_params(rng_seed: int, dims: PolicyDims | dict) -> PolicyParams:
    """Uniform init in [-1/sqrt(d_h), 1/sqrt(d_h)] for every tensor."""
    if isinstance(dims, dict):
        dims = PolicyDims(**dims)
    V, d_e, d_h = dims.vocab_size, dims.d_e, dims.d_h
    if min(V, d_e, d_h) <= 0:
        raise ValueError(f"dimensions must be positive, got {dims}")
    if V * d_e + d_h * d_h + d_h * d_e + V * d_h > _MAX_ELEMENTS:
        raise ValueError(f"dimensions too large: {dims}")
    s = 1.0 / math.sqrt(d_h)
    rng = np.random.default_rng(rng_seed)
    shapes = [(V, d_e), (d_h, d_h), (d_h, d_e), (d_h,), (V, d_h), (V,)]
    return PolicyParams(*(rng.uniform(-s, s, size=shape) for shape in shapes))


def encode_conditioning(context, history, vocab: Vocabulary, budget: int) -> ConditioningSequence:
    """Frame the context description and a history sample as a token prefix.

    Each history entry serializes as its prompt tokens, its critique tokens and
    its reward-decile token. Entries are dropped oldest first when the frame
    would exceed ``budget``; an entry is never cut in half.
    """
    head = (vocab.ctx_begin, *context.description_tokens, vocab.ctx_end, vocab.hist_begin)
    if len(head) + 1 > budget:
        raise ValueError(f"context frame needs {len(head) + 1} tokens, budget is {budget}")
    entries = [_serialize_entry(rec, vocab) for rec in (history or ())]
    room = budget - len(head) - 1
    kept: list[tuple[int, ...]] = []
    for entry in reversed(entries):
        if len(entry) > room:
            break
        kept.append(entry)
        room -= len(entry)
    body = [t for entry in reversed(kept) for t in entry]
    return ConditioningSequence((*head, *body, vocab.hist_end))


def _serialize_entry(record, vocab: Vocabulary) -> tuple[int, ...]:
    frame = vocab.frame
    out = [t for t in record.prompt.tokens if t not in frame]
    for crit in record.critiques.entries:
        fb = crit.feedback_tokens
        if isinstance(fb, tuple):
            out.extend(t for t in fb if t not in frame)
    out.append(vocab.reward_token(record.reward))
    return tuple(out)


# --------------------------------------------------------------------------- forward


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _prefix_states(params: PolicyParams, tokens: Sequence[int]) -> np.ndarray:
    states = np.zeros((len(tokens) + 1, params.recur_h.shape[0]))
    inputs = params.embedding[list(tokens)] @ params.recur_x.T + params.recur_b if len(tokens) else None
    for j in range(len(tokens)):
        states[j + 1] = np.tanh(params.recur_h @ states[j] + inputs[j])
    return states


def _pad(prompts: Sequence[Sequence[int]], fill: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([len(p) for p in prompts])
    if np.any(lengths == 0):
        raise ValueError("prompt must contain at least the EOS token")
    Y = np.full((len(prompts), lengths.max()), fill, dtype=np.int64)
    for i, p in enumerate(prompts):
        Y[i, : len(p)] = p
    mask = np.arange(Y.shape[1])[None, :] < lengths[:, None]
    return Y, mask, lengths


def _emit_states(params: PolicyParams, h0: np.ndarray, Y: np.ndarray) -> np.ndarray:
    n, L = Y.shape
    S = np.empty((n, L, h0.shape[0]))
    S[:, 0] = h0
    for k in range(1, L):
        a = S[:, k - 1] @ params.recur_h.T + params.embedding[Y[:, k - 1]] @ params.recur_x.T + params.recur_b
        S[:, k] = np.tanh(a)
    return S


def _check_tokens(params: PolicyParams, tokens: Iterable[int]) -> None:
    V = params.out_b.shape[0]
    for t in tokens:
        if not 0 <= t < V:
            raise ValueError(f"token index {t} outside vocabulary of size {V}")


@dataclass
class _Rollout:
    prefix: np.ndarray  # (C+1, d_h)
    Y: np.ndarray  # (n, L)
    mask: np.ndarray  # (n, L)
    lengths: np.ndarray
    S: np.ndarray  # (n, L, d_h) states that emit each position
    logp: np.ndarray  # (n, L, V)


def _rollout(params: PolicyParams, conditioning: ConditioningSequence, prompts) -> _Rollout:
    cond = tuple(conditioning.tokens)
    seqs = [tuple(p.tokens) if isinstance(p, PromptSequence) else tuple(p) for p in prompts]
    _check_tokens(params, cond)
    for s in seqs:
        _check_tokens(params, s)
    prefix = _prefix_states(params, cond)
    Y, mask, lengths = _pad(seqs, 0)
    S = _emit_states(params, prefix[-1], Y)
    logp = _log_softmax(S @ params.out_w.T + params.out_b)
    return _Rollout(prefix, Y, mask, lengths, S, logp)


def _token_logprobs(ro: _Rollout) -> np.ndarray:
    picked = np.take_along_axis(ro.logp, ro.Y[..., None], axis=-1)[..., 0]
    return np.where(ro.mask, picked, 0.0)


def log_prob(params: PolicyParams, conditioning: ConditioningSequence, prompt) -> float:
    ro = _rollout(params, conditioning, [prompt])
    return float(_token_logprobs(ro).sum())


def log_probs(params: PolicyParams, conditioning: ConditioningSequence, prompts) -> np.ndarray:
    return _token_logprobs(_rollout(params, conditioning, prompts)).sum(axis=1)


def _step_kl(ro: _Rollout, ref: _Rollout) -> np.ndarray:
    p = np.exp(ro.logp)
    kl = (p * (ro.logp - ref.logp)).sum(axis=-1)
    return np.where(ro.mask, np.maximum(kl, 0.0), 0.0)


def kl_divergence(params: PolicyParams, ref_params: PolicyParams, conditioning: ConditioningSequence, prompt) -> float:
    """Mean per-step KL(policy || reference) along the states visited by ``prompt``."""
    return float(kl_divergences(params, ref_params, conditioning, [prompt])[0])


def kl_divergences(params, ref_params, conditioning, prompts) -> np.ndarray:
    _check_shapes(params, ref_params)
    ro = _rollout(params, conditioning, prompts)
    ref = _rollout(ref_params, conditioning, prompts)
    return _step_kl(ro, ref).sum(axis=1) / ro.lengths


def _check_shapes(a: PolicyParams, b: PolicyParams) -> None:
    for name in FIELDS:
        if getattr(a, name).shape != getattr(b, name).shape:
            raise ValueError(f"parameter shape mismatch on {name}")


# --------------------------------------------------------------------------- backward


def _backprop(params: PolicyParams, ro: _Rollout, conditioning: ConditioningSequence, dZ: np.ndarray) -> PolicyParams:
    """Reverse-mode pass given d(objective)/d(logits) for every emitted position."""
    g = params.zeros_like()
    g.out_w = np.einsum("nlv,nld->vd", dZ, ro.S)
    g.out_b = dZ.sum(axis=(0, 1))
    dS = dZ @ params.out_w
    Wh, Wx = params.recur_h, params.recur_x
    for k in range(ro.Y.shape[1] - 1, 0, -1):
        da = dS[:, k] * (1.0 - ro.S[:, k] ** 2)
        prev = ro.Y[:, k - 1]
        g.recur_h += da.T @ ro.S[:, k - 1]
        g.recur_x += da.T @ params.embedding[prev]
        g.recur_b += da.sum(axis=0)
        np.add.at(g.embedding, prev, da @ Wx)
        dS[:, k - 1] += da @ Wh
    dh = dS[:, 0].sum(axis=0)
    cond = conditioning.tokens
    states = ro.prefix
    for j in range(len(cond), 0, -1):
        da = dh * (1.0 - states[j] ** 2)
        g.recur_h += np.outer(da, states[j - 1])
        g.recur_x += np.outer(da, params.embedding[cond[j - 1]])
        g.recur_b += da
        g.embedding[cond[j - 1]] += Wx.T @ da
        dh = Wh.T @ da
    return g


def _logprob_dZ(ro: _Rollout, weights: np.ndarray) -> np.ndarray:
    dZ = -np.exp(ro.logp)
    n, L = ro.Y.shape
    dZ[np.arange(n)[:, None], np.arange(L)[None, :], ro.Y] += 1.0
    dZ *= (ro.mask * weights[:, None])[..., None]
    return dZ


def _kl_dZ(ro: _Rollout, ref: _Rollout, weights: np.ndarray) -> np.ndarray:
    p = np.exp(ro.logp)
    diff = ro.logp - ref.logp
    step_kl = (p * diff).sum(axis=-1, keepdims=True)
    dZ = p * (diff - step_kl)
    scale = ro.mask * (weights / ro.lengths)[:, None]
    return dZ * scale[..., None]


def grad_log_prob(params: PolicyParams, conditioning: ConditioningSequence, prompt) -> PolicyParams:
    ro = _rollout(params, conditioning, [prompt])
    return _backprop(params, ro, conditioning, _logprob_dZ(ro, np.ones(1)))


def grad_kl_divergence(params, ref_params, conditioning, prompt) -> PolicyParams:
    _check_shapes(params, ref_params)
    ro = _rollout(params, conditioning, [prompt])
    ref = _rollout(ref_params, conditioning, [prompt])
    return _backprop(params, ro, conditioning, _kl_dZ(ro, ref, np.ones(1)))


@dataclass
class GroupGradient:
    logprobs: np.ndarray
    kls: np.ndarray
    grad: PolicyParams


def group_gradient(
    params: PolicyParams,
    ref_params: PolicyParams,
    conditioning: ConditioningSequence,
    prompts,
    logprob_weights: np.ndarray,
    kl_weights: np.ndarray,
) -> GroupGradient:
    """Gradient of sum_i logprob_weights[i]*logprob_i + kl_weights[i]*kl_i in one pass.

    A term whose weights are all zero is skipped entirely, so a zero-advantage
    group yields exactly the KL-only gradient.
    """
    _check_shapes(params, ref_params)
    ro = _rollout(params, conditioning, prompts)
    ref = _rollout(ref_params, conditioning, prompts)
    logprob_weights = np.asarray(logprob_weights, dtype=float)
    kl_weights = np.asarray(kl_weights, dtype=float)
    dZ = np.zeros_like(ro.logp)
    if np.any(logprob_weights != 0):
        dZ += _logprob_dZ(ro, logprob_weights)
    if np.any(kl_weights != 0):
        dZ += _kl_dZ(ro, ref, kl_weights)
    grad = _backprop(params, ro, conditioning, dZ)
    kls = _step_kl(ro, ref).sum(axis=1) / ro.lengths
    return GroupGradient(_token_logprobs(ro).sum(axis=1), kls, grad)


# --------------------------------------------------------------------------- sampling


def sample_prompts(
    params: PolicyParams,
    conditioning: ConditioningSequence,
    n: int,
    rng_seed: int,
    temperature: float = 1.0,
    *,
    eos: int,
    max_prompt_len: int = 64,
    greedy: bool = False,
) -> list[PromptSequence]:
    """Draw ``n`` prompts in lockstep; EOS is forced at ``max_prompt_len``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if max_prompt_len < 1:
        raise ValueError("max_prompt_len must be >= 1")
    _check_tokens(params, conditioning.tokens)
    rng = np.random.default_rng(rng_seed)
    h = np.repeat(_prefix_states(params, conditioning.tokens)[-1][None, :], n, axis=0)
    out = np.full((n, max_prompt_len), eos, dtype=np.int64)
    lps = np.zeros((n, max_prompt_len))
    done = np.zeros(n, dtype=bool)
    lengths = np.full(n, max_prompt_len)
    for k in range(max_prompt_len):
        logp = _log_softmax((h @ params.out_w.T + params.out_b) / temperature)
        if k == max_prompt_len - 1:
            tok = np.full(n, eos)
        elif greedy:
            tok = logp.argmax(axis=1)
        else:
            u = rng.random(n)
            cdf = np.cumsum(np.exp(logp), axis=1)
            tok = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), logp.shape[1] - 1)
        tok = np.where(done, eos, tok)
        out[:, k] = tok
        lps[:, k] = np.where(done, 0.0, logp[np.arange(n), tok])
        finished = (tok == eos) & ~done
        lengths[finished] = k + 1
        done |= finished
        if done.all():
            break
        h = np.tanh(h @ params.recur_h.T + params.embedding[tok] @ params.recur_x.T + params.recur_b)
    return [
        PromptSequence(
            tuple(int(t) for t in out[i, : lengths[i]]),
            tuple(float(x) for x in lps[i, : lengths[i]]),
            float(temperature),
        )
        for i in range(n)
    ]


def sample_prompt(params, conditioning, rng_seed: int, temperature: float = 1.0, *, eos: int,
                  max_prompt_len: int = 64, greedy: bool = False) -> PromptSequence:
    return sample_prompts(params, conditioning, 1, rng_seed, temperature, eos=eos,
                          max_prompt_len=max_prompt_len, greedy=greedy)[0]


def step_distributions(params: PolicyParams, conditioning: ConditioningSequence, prompt) -> np.ndarray:
    """Full categorical distribution at every emitted position, shape (len, V)."""
    ro = _rollout(params, conditioning, [prompt])
    return np.exp(ro.logp[0])


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path: Path | str, params: PolicyParams, vocab: Vocabulary | None = None, **extra) -> None:
    """Write ``params`` as an uncompressed npz archive with a JSON manifest entry."""
    dims = params.dims
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "dims": {"vocab_size": dims.vocab_size, "d_e": dims.d_e, "d_h": dims.d_h},
        "vocab_hash": vocab.digest() if vocab is not None else None,
        "tensors": list(FIELDS),
        **extra,
    }
    with open(path, "wb") as fh:
        np.savez(fh, manifest=np.array(json.dumps(manifest, sort_keys=True)), **params.arrays())


def load_checkpoint(path: Path | str, vocab: Vocabulary | None = None) -> tuple[PolicyParams, dict]:
    with np.load(path, allow_pickle=False) as archive:
        manifest = json.loads(str(archive["manifest"]))
        if manifest.get("format_version") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format_version')}")
        if vocab is not None and manifest.get("vocab_hash") not in (None, vocab.digest()):
            raise ValueError(f"{path}: checkpoint was written for a different vocabulary")
        params = PolicyParams(**{name: archive[name].astype(float) for name in FIELDS})
    return params, manifest
