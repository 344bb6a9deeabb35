"""Decode-time eviction: the recycle-bin evictor and the greedy baseline.

Both policies share :class:`CacheState`, an insertion-ordered cache kept
as parallel numpy arrays.  Cache order equals ``original_index`` order,
so "lowest position" and "lowest original index" are the same tie rule.

Per step, the recycle-bin policy (:func:`step_decode`) adds the row to
every live score, appends the new token, marks the lowest-scoring
unmarked entry, and once ``k`` entries are marked drops them all at
once.  Marked entries stay live and keep accumulating attention until
that flush.  The greedy baseline (:func:`greedy_evict_step`) instead
evicts one entry on every step the cache is over budget.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attention import AttentionRow, TokenModality
from .errors import KvEvictError

_MOD_CODES = {TokenModality.VISUAL: 0, TokenModality.TEXT: 1, TokenModality.GENERATED: 2}
_CODE_MODS = {v: k for k, v in _MOD_CODES.items()}

PREFILL_BIRTH = -1


@dataclass(frozen=True)
class KVEntry:
    original_index: int
    modality: TokenModality = TokenModality.TEXT
    beta: float = 0.0
    marked: bool = False
    birth_step: int = PREFILL_BIRTH


@dataclass(frozen=True)
class DdesConfig:
    """Recycle-bin settings.

    ``k`` is the bin capacity (entries flushed together), ``buffer`` the
    maximum growth ``D`` above the post-prefill size, ``protect_recent``
    the number of newest entries that are never marked.  With
    ``prefill_only`` only entries that survived prefill are candidates.
    """

    k: int = 2
    buffer: int = 2
    protect_recent: int = 0
    prefill_only: bool = False

    def __post_init__(self):
        if not 1 < self.k <= self.buffer:
            raise KvEvictError("invalid-config", f"need 1 < k <= D, got k={self.k}, D={self.buffer}")
        if self.protect_recent < 0:
            raise KvEvictError("invalid-config", "protect_recent must be >= 0")


@dataclass(frozen=True)
class GreedyConfig:
    budget: int | None = None  # None: the post-prefill cache size
    recent_window: int = 0
    prefill_only: bool = False

    def __post_init__(self):
        if self.budget is not None and self.budget < 1:
            raise KvEvictError("invalid-budget", f"{self.budget}")
        if self.recent_window < 0:
            raise KvEvictError("invalid-config", "recent_window must be >= 0")
        if self.budget is not None and self.budget < self.recent_window:
            raise KvEvictError("invalid-config", "budget must be >= recent_window")


@dataclass(frozen=True)
class Eviction:
    original_index: int
    score: float
    step: int


@dataclass
class StepEvent:
    step: int
    cache_size: int
    marked: int | None
    flushed: list[int] = field(default_factory=list)
    loss: float = 0.0


class CacheState:
    """Live cache entries, the recycle bin and step counters.

    Mutated in place by the step functions, which also return it.
    """

    def __init__(
        self,
        entries: Iterable[KVEntry],
        config: DdesConfig | None = None,
        *,
        l: int | None = None,
        prefill_only: bool | None = None,
        record_events: bool = False,
        payload_dim: int = 0,
    ):
        entries = sorted(entries, key=lambda e: e.original_index)
        n = len(entries)
        cap = max(16, 2 * n)
        self._idx = np.zeros(cap, dtype=np.int64)
        self._mod = np.zeros(cap, dtype=np.int8)
        self._beta = np.zeros(cap, dtype=np.float64)
        self._key = np.zeros(cap, dtype=np.float64)
        self._birth = np.zeros(cap, dtype=np.int64)
        self._marked = np.zeros(cap, dtype=bool)
        # stand-in for the K/V tensors: moved on every eviction like real cache memory
        self._kv = np.zeros((cap, payload_dim), dtype=np.float32) if payload_dim else None
        self.n = 0
        self.config = config
        if prefill_only is None:
            prefill_only = bool(config and config.prefill_only)
        self.prefill_only = prefill_only
        self.bin: list[int] = []
        self.step = 0
        self.evictions: list[Eviction] = []
        self.argmin_scans = 0
        self.flushes = 0
        self.events: list[StepEvent] | None = [] if record_events else None
        for e in entries:
            self._append(e)
        self.l = n if l is None else l

    # -- array plumbing ----------------------------------------------------

    def _arrays(self):
        arrays = (self._idx, self._mod, self._beta, self._key, self._birth, self._marked)
        return arrays if self._kv is None else arrays + (self._kv,)

    def _append(self, e: KVEntry) -> None:
        if e.beta < 0:
            raise KvEvictError("invalid-entry", "beta must be >= 0")
        if self.n and e.original_index <= self._idx[self.n - 1]:
            raise KvEvictError("invalid-entry", "entries must arrive in increasing original_index")
        if self.n == self._idx.size:
            grown = [np.concatenate([a, np.zeros_like(a)]) for a in self._arrays()]
            self._idx, self._mod, self._beta, self._key, self._birth, self._marked = grown[:6]
            if self._kv is not None:
                self._kv = grown[6]
        i = self.n
        if self._kv is not None:
            self._kv[i] = e.original_index
        self._idx[i] = e.original_index
        self._mod[i] = _MOD_CODES[TokenModality.coerce(e.modality)]
        self._beta[i] = e.beta
        self._birth[i] = e.birth_step
        self._marked[i] = e.marked
        eligible = not e.marked and not (self.prefill_only and e.birth_step != PREFILL_BIRTH)
        self._key[i] = e.beta if eligible else np.inf
        if e.marked:
            self.bin.append(e.original_index)
        self.n += 1

    def _remove_at(self, p: int) -> None:
        n = self.n
        for a in self._arrays():
            a[p : n - 1] = a[p + 1 : n]
        self.n = n - 1

    def _compact(self, keep: np.ndarray) -> None:
        n = self.n
        m = int(keep.sum())
        for a in self._arrays():
            a[:m] = a[:n][keep]
        self.n = m

    # -- read access -------------------------------------------------------

    def __len__(self) -> int:
        return self.n

    @property
    def betas(self) -> np.ndarray:
        return self._beta[: self.n].copy()

    @property
    def indices(self) -> np.ndarray:
        return self._idx[: self.n].copy()

    @property
    def marked(self) -> np.ndarray:
        return self._marked[: self.n].copy()

    @property
    def entries(self) -> list[KVEntry]:
        return [
            KVEntry(
                int(self._idx[i]),
                _CODE_MODS[int(self._mod[i])],
                float(self._beta[i]),
                bool(self._marked[i]),
                int(self._birth[i]),
            )
            for i in range(self.n)
        ]

    @property
    def total_loss(self) -> float:
        return eviction_loss(self.evictions)


def _probs(row) -> np.ndarray:
    return row.probs if isinstance(row, AttentionRow) else np.asarray(row, dtype=np.float64)


def update_scores(state: CacheState, row) -> CacheState:
    """Add one attention row to every live entry's cumulative score (marked ones too)."""
    p = _probs(row)
    n = state.n
    if p.shape != (n,):
        raise KvEvictError("row-cache-misalignment", f"row of {p.size} for {n} live entries")
    state._beta[:n] += p
    state._key[:n] += p  # inf stays inf for ineligible entries
    return state


def _new_entry(state: CacheState, new_entry: KVEntry | None) -> KVEntry:
    if new_entry is not None:
        return new_entry
    nxt = int(state._idx[state.n - 1]) + 1 if state.n else 0
    return KVEntry(nxt, TokenModality.GENERATED, 0.0, False, state.step)


def append_step(state: CacheState, row, new_entry: KVEntry | None = None) -> CacheState:
    """A step with no eviction at all (the full-cache reference)."""
    update_scores(state, row)
    state._append(_new_entry(state, new_entry))
    if state.events is not None:
        state.events.append(StepEvent(state.step, state.n, None))
    state.step += 1
    return state


def step_decode(state: CacheState, row, new_entry: KVEntry | None = None) -> CacheState:
    """One recycle-bin decode step: score, append, mark one, flush when the bin is full."""
    cfg = state.config
    if cfg is None:
        raise KvEvictError("config-mismatch", "state has no DdesConfig")
    update_scores(state, row)
    state._append(_new_entry(state, new_entry))

    n = state.n
    marked = None
    limit = n - cfg.protect_recent
    if limit > 0:
        p = int(state._key[:limit].argmin())
        state.argmin_scans += 1
        if state._key[p] < np.inf:
            state._marked[p] = True
            state._key[p] = np.inf
            marked = int(state._idx[p])
            state.bin.append(marked)

    flushed: list[int] = []
    loss = 0.0
    if len(state.bin) == cfg.k:
        mask = state._marked[:n]
        pos = np.flatnonzero(mask)
        for p in pos:
            ev = Eviction(int(state._idx[p]), float(state._beta[p]), state.step)
            state.evictions.append(ev)
            flushed.append(ev.original_index)
            loss += ev.score
        state._compact(~mask)
        state.bin = []
        state.flushes += 1

    if state.n >= state.l + cfg.buffer:
        raise KvEvictError(
            "buffer-overflow", f"cache size {state.n} reached l + D = {state.l + cfg.buffer}"
        )
    if state.events is not None:
        state.events.append(StepEvent(state.step, state.n, marked, flushed, loss))
    state.step += 1
    return state


def greedy_evict_step(
    state: CacheState,
    row,
    new_entry: KVEntry | None = None,
    budget: int | None = None,
    recent_window: int = 0,
) -> CacheState:
    """Heavy-hitter baseline: while the cache exceeds ``budget``, evict the
    lowest-score entry outside the recent window.

    Once the cache is at budget this is one eviction per step.
    """
    if budget is None:
        budget = state.l
    if budget < 1:
        raise KvEvictError("invalid-budget", f"{budget}")
    if budget < recent_window:
        raise KvEvictError("invalid-config", "budget must be >= recent_window")
    update_scores(state, row)
    state._append(_new_entry(state, new_entry))

    flushed: list[int] = []
    loss = 0.0
    while state.n > budget:
        limit = state.n - recent_window
        p = int(state._key[:limit].argmin())
        state.argmin_scans += 1
        if not state._key[p] < np.inf:
            break
        ev = Eviction(int(state._idx[p]), float(state._beta[p]), state.step)
        state.evictions.append(ev)
        flushed.append(ev.original_index)
        loss += ev.score
        state._remove_at(p)
        state.flushes += 1
    if state.events is not None:
        state.events.append(StepEvent(state.step, state.n, None, flushed, loss))
    state.step += 1
    return state


def select_eviction_set(scores: Sequence[float], k: int) -> tuple[int, ...]:
    """The ``k`` positions with the smallest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if k < 0:
        raise KvEvictError("invalid-k", f"{k}")
    if k > scores.size:
        raise KvEvictError("insufficient-entries", f"k={k} > {scores.size}")
    order = np.argsort(scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def eviction_loss(evicted: Iterable) -> float:
    """Sum of scores at the moment of eviction.

    Accepts :class:`Eviction` records or plain numbers.
    """
    return float(sum(e.score if isinstance(e, Eviction) else float(e) for e in evicted))


def write_event_log(events: Iterable[StepEvent], path) -> None:
    """Append one JSON object per step to ``path``."""
    with open(Path(path), "a", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(asdict(ev), sort_keys=False) + "\n")


def read_event_log(path) -> list[StepEvent]:
    with open(Path(path), encoding="utf-8") as fh:
        return [StepEvent(**json.loads(line)) for line in fh if line.strip()]
