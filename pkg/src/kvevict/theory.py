"""Executable forms of the eviction error bounds.

Decay model: a cached token's score after ``t`` steps is
``s1 * (1 - lam) ** t``.  With ``Q = log(eps / attn_max) / log(1 - lam)``,
a token evicted after a delay ``t >= ceil(Q)`` loses at most ``eps``.

Written as ``k <= Q`` the condition would cap the delay from above, but
under this decay model the loss shrinks as the delay grows.  These
oracles check the property that actually holds: loss <= eps exactly
when the delay is >= ceil(Q).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import KvEvictError


@dataclass(frozen=True)
class DecayModelParams:
    lam: float
    attn_max: float
    epsilon: float
    s1: tuple[float, ...] | None = None

    def __post_init__(self):
        _check_lambda(self.lam)
        if self.attn_max <= 0 or self.epsilon <= 0:
            raise KvEvictError("invalid-decay", "attn_max and epsilon must be > 0")


def _check_lambda(lam: float) -> None:
    if not 0.0 < lam < 1.0:
        raise KvEvictError("invalid-decay", f"lambda={lam!r} outside (0, 1)")


def decayed_score(s1: float, lam: float, t: int) -> float:
    _check_lambda(lam)
    if t < 0:
        raise KvEvictError("invalid-decay", f"t={t} < 0")
    return s1 * (1.0 - lam) ** t


def eviction_threshold(p: DecayModelParams, allow_vacuous: bool = False) -> float:
    """``Q = ln(eps / attn_max) / ln(1 - lam)``.

    Raises ``vacuous-bound`` when ``eps > attn_max`` (Q < 0) unless
    ``allow_vacuous`` is set.
    """
    q = math.log(p.epsilon / p.attn_max) / math.log1p(-p.lam)
    if q < 0 and not allow_vacuous:
        raise KvEvictError("vacuous-bound", f"Q={q!r}: epsilon exceeds attn_max")
    return q


def single_token_loss_bound_holds(p: DecayModelParams, t_evict: int) -> bool:
    """Whether a token evicted after ``t_evict`` steps loses at most epsilon."""
    return decayed_score(p.attn_max, p.lam, t_evict) <= p.epsilon


def geometric_total_loss(p: DecayModelParams, k: int) -> float:
    """Closed form of ``sum(attn_max * (1 - lam) ** t for t in 1..k)``."""
    if k < 1:
        raise KvEvictError("invalid-k", f"k={k} < 1")
    tail = -math.expm1(k * math.log1p(-p.lam))  # 1 - (1 - lam)^k
    return p.attn_max * (1.0 - p.lam) * tail / p.lam


def geometric_total_loss_sum(p: DecayModelParams, k: int) -> float:
    """Term-by-term version of :func:`geometric_total_loss`."""
    return math.fsum(p.attn_max * (1.0 - p.lam) ** t for t in range(1, k + 1))


def lowest_d_sum(final_scores: Sequence[float], d: int) -> float:
    scores = np.asarray(final_scores, dtype=np.float64)
    if not 0 <= d <= scores.size:
        raise KvEvictError("invalid-d", f"d={d} for {scores.size} scores")
    return math.fsum(np.sort(scores, kind="stable")[:d])


def corollary_bound(
    final_scores: Sequence[float], d: int, observed_loss: float, tol: float = 1e-9
) -> bool:
    """Whether ``observed_loss`` is within the sum of the ``d`` smallest scores.

    ``tol`` absorbs floating-point accumulation order only.
    """
    return observed_loss <= lowest_d_sum(final_scores, d) + tol


def greedy_stepwise_loss(scores: Sequence[float], d: int) -> float:
    """Remove the current minimum ``d`` times from a fixed score set; return the total."""
    remaining = [float(s) for s in scores]
    if d > len(remaining):
        raise KvEvictError("invalid-d", f"d={d} for {len(remaining)} scores")
    total = []
    for _ in range(d):
        j = min(range(len(remaining)), key=remaining.__getitem__)
        total.append(remaining.pop(j))
    return math.fsum(total)


def attn_max_estimate(text_visual_block, evicted: Iterable[int]) -> float:
    """Min over evicted visual columns of the column max over text rows."""
    evicted = list(evicted)
    if not evicted:
        raise KvEvictError("undefined", "no evicted columns")
    block = np.asarray(text_visual_block, dtype=np.float64)
    return float(block[:, evicted].max(axis=0).min())


# -- Monte-Carlo check -------------------------------------------------------

@dataclass(frozen=True)
class TheoryInstance:
    seed: int
    lam: float
    epsilon: float
    attn_max: float
    q: float
    delay: int
    loss: float
    bound_holds: bool


REPORT_COLUMNS = ("seed", "lambda", "epsilon", "Q", "delay", "loss", "bound_holds")


def monte_carlo_decay_check(instances: int = 1000, seed: int = 0, max_extra_delay: int = 5):
    """Draw decay-model instances and evict each at a delay >= ceil(Q).

    Returns one :class:`TheoryInstance` per draw; ``bound_holds`` is the
    per-token check ``loss <= epsilon``.
    """
    out = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        lam = float(rng.uniform(0.01, 0.99))
        attn_max = float(rng.uniform(1e-3, 1.0))
        epsilon = float(attn_max * rng.uniform(1e-4, 1.0))
        p = DecayModelParams(lam, attn_max, epsilon)
        q = eviction_threshold(p)
        delay = math.ceil(q) + int(rng.integers(0, max_extra_delay + 1))
        loss = decayed_score(attn_max, lam, delay)
        out.append(TheoryInstance(i, lam, epsilon, attn_max, q, delay, loss, loss <= epsilon))
    return out


def write_theory_csv(rows: Sequence[TheoryInstance], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.seed, repr(r.lam), repr(r.epsilon), repr(r.q), r.delay, repr(r.loss), r.bound_holds])
