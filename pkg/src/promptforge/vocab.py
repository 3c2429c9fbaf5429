"""Closed token vocabulary shared by the prompter, the synthetic workers and the critic."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

FRAME_MARKERS = ("<bos>", "<eos>", "<ctx>", "</ctx>", "<hist>", "</hist>")
REWARD_TOKENS = tuple(f"<R{i}>" for i in range(10))
HINT_TOKENS = ("<missing>", "<forbidden>", "<order>")


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token names plus the indices of every structural marker.

    ``control`` is the contiguous index range the synthetic workers draw their
    hidden specifications from; ``tasks`` holds the context-description tokens.
    """

    tokens: tuple[str, ...]
    control: range = field(default=range(0))
    tasks: range = field(default=range(0))

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary token names must be distinct")
        if len(self.tokens) < 4:
            raise ValueError("vocabulary needs at least 4 tokens")
        index = {name: i for i, name in enumerate(self.tokens)}
        missing = [m for m in FRAME_MARKERS + REWARD_TOKENS + HINT_TOKENS if m not in index]
        if missing:
            raise ValueError(f"vocabulary lacks markers: {missing}")
        for r in (self.control, self.tasks):
            if len(r) and (r.start < 0 or r.stop > len(self.tokens)):
                raise ValueError("marker range out of vocabulary bounds")
        object.__setattr__(self, "_index", index)

    @classmethod
    def build(cls, n_control: int = 8, n_filler: int = 24, n_tasks: int = 1) -> "Vocabulary":
        names = list(FRAME_MARKERS + REWARD_TOKENS + HINT_TOKENS)
        task_start = len(names)
        names += [f"<task{i}>" for i in range(n_tasks)]
        control_start = len(names)
        names += [f"c{i}" for i in range(n_control)]
        names += [f"w{i}" for i in range(n_filler)]
        return cls(
            tuple(names),
            control=range(control_start, control_start + n_control),
            tasks=range(task_start, task_start + n_tasks),
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown token {name!r}") from None

    @property
    def bos(self) -> int:
        return self._index["<bos>"]

    @property
    def eos(self) -> int:
        return self._index["<eos>"]

    @property
    def ctx_begin(self) -> int:
        return self._index["<ctx>"]

    @property
    def ctx_end(self) -> int:
        return self._index["</ctx>"]

    @property
    def hist_begin(self) -> int:
        return self._index["<hist>"]

    @property
    def hist_end(self) -> int:
        return self._index["</hist>"]

    @property
    def frame(self) -> frozenset[int]:
        return frozenset(self._index[m] for m in FRAME_MARKERS)

    def reward_token(self, reward: float) -> int:
        """Decile bucket token for a reward in [0, 1]."""
        bucket = int(10 * min(max(reward, 0.0), 0.999))
        return self._index[REWARD_TOKENS[bucket]]

    def hint(self, kind: str) -> int:
        return self._index[f"<{kind}>"]

    def decode(self, tokens) -> str:
        return " ".join(self.tokens[t] for t in tokens)

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(self.index(name) for name in text.split())

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]
