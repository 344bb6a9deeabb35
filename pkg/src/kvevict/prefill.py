"""Dual-attention pruning of visual KV entries at prefill time.

A visual token is evicted when it draws little attention from the text
prompt as a whole (``A_j < r * sum(A)``) *and* no single text token
attends to it strongly (``max_i A[i, j] < alpha``).  The decision is
taken once, on the first layer, and reused by every other layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import AttentionMatrix, TokenModality
from .errors import KvEvictError


@dataclass(frozen=True)
class DapConfig:
    r: float = 0.0015
    alpha: float = 0.0005
    max_evict: int | None = None  # c: strictly fewer than c visual entries are evicted

    def __post_init__(self):
        if self.r < 0 or self.alpha < 0:
            raise KvEvictError("invalid-config", "r and alpha must be >= 0")
        if self.max_evict is not None and self.max_evict < 1:
            raise KvEvictError("invalid-config", "max_evict must be >= 1")


@dataclass(frozen=True)
class PruneDecision:
    retained: tuple[int, ...]
    evicted: tuple[int, ...]
    layer_origin: int = 0

    def to_doc(self) -> dict:
        return {
            "retained": list(self.retained),
            "evicted": list(self.evicted),
            "layer_origin": self.layer_origin,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "PruneDecision":
        return cls(
            tuple(int(i) for i in doc["retained"]),
            tuple(int(i) for i in doc["evicted"]),
            int(doc.get("layer_origin", 0)),
        )


def text_visual_block(m: AttentionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(block, visual_cols)``: text rows x visual columns, plus the
    global column index of each visual column."""
    if m.col_modality is None or m.row_modality is None:
        raise KvEvictError("missing-modality", "prefill matrix needs row and column labels")
    visual_cols = np.array(
        [j for j, lab in enumerate(m.col_modality[: m.shape[1]]) if lab is TokenModality.VISUAL],
        dtype=np.int64,
    )
    block = m.select(TokenModality.TEXT, TokenModality.VISUAL)
    # text rows follow the image in causal order, so every cell should be present
    return np.nan_to_num(block, nan=0.0), visual_cols


def _block(a) -> np.ndarray:
    if isinstance(a, AttentionMatrix):
        return text_visual_block(a)[0]
    block = np.asarray(a, dtype=np.float64)
    if block.ndim == 1:
        block = block[None, :]
    return block


def global_text_attention(a) -> np.ndarray:
    """Total attention each visual column receives from all text rows."""
    block = _block(a)
    if block.shape[0] == 0:
        raise KvEvictError("no-text-context")
    if block.shape[1] == 0:
        raise KvEvictError("no-visual-tokens")
    return block.sum(axis=0)


def select_retained(A: Sequence[float], r: float) -> tuple[int, ...]:
    """Indices ``j`` with ``A[j] >= r * sum(A)``; equality retains."""
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        raise KvEvictError("no-visual-tokens")
    if np.any(A < 0):
        raise KvEvictError("invalid-attention", "global attention must be non-negative")
    cut = r * A.sum()
    return tuple(int(j) for j in np.flatnonzero(A >= cut))


def max_attention_guard(a, candidate: int, alpha: float) -> bool:
    """True when the strongest single text->candidate attention is below ``alpha``."""
    block = _block(a)
    if not 0 <= candidate < block.shape[1]:
        raise KvEvictError("invalid-candidate", f"visual column {candidate} out of range")
    return bool(block[:, candidate].max() < alpha)


def prune_prefill(a: AttentionMatrix, cfg: DapConfig) -> PruneDecision:
    block, visual_cols = text_visual_block(a)
    if visual_cols.size == 0:
        raise KvEvictError("no-visual-tokens")
    A = global_text_attention(block)

    keep = np.zeros(A.size, dtype=bool)
    keep[list(select_retained(A, cfg.r))] = True
    rescued = block.max(axis=0) >= cfg.alpha
    candidates = np.flatnonzero(~keep & ~rescued)

    if cfg.max_evict is not None and candidates.size >= cfg.max_evict:
        # lowest global attention first; stable sort keeps lower index on ties
        order = np.argsort(A[candidates], kind="stable")
        candidates = np.sort(candidates[order[: cfg.max_evict - 1]])

    evicted_mask = np.zeros(A.size, dtype=bool)
    evicted_mask[candidates] = True
    return PruneDecision(
        retained=tuple(int(j) for j in visual_cols[~evicted_mask]),
        evicted=tuple(int(j) for j in visual_cols[evicted_mask]),
        layer_origin=0,
    )


def broadcast(decision: PruneDecision, layer_count: int) -> list[tuple[int, ...]]:
    """Every layer reuses the first-layer eviction indices; nothing is recomputed."""
    if layer_count < 1:
        raise KvEvictError("invalid-layer-count", f"{layer_count}")
    return [decision.evicted for _ in range(layer_count)]


def overlap_rate(
    layer1_evicted: Sequence[int], per_layer_evictable: Sequence[Sequence[int]]
) -> list[float]:
    """Share of the first-layer evictions that each layer would also evict."""
    first = set(layer1_evicted)
    if not first:
        raise KvEvictError("undefined-overlap")
    return [len(first & set(ev)) / len(first) for ev in per_layer_evictable]


def layer_evictable(matrices: Sequence[AttentionMatrix], cfg: DapConfig) -> list[tuple[int, ...]]:
    """Re-run the pruner independently on each layer (analysis only)."""
    return [prune_prefill(m, cfg).evicted for m in matrices]
