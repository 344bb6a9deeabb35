"""Seeded synthetic multimodal attention streams and policy replay.

The simulator stands in for a real vision-language model.  Each token
gets a per-layer salience; attention logits are ``(salience + noise) /
sqrt(head_dim)`` and rows are softmaxed directly (no Q/K vectors).
Visual salience is a two-component mixture, mostly very low with a few
heavy tokens, which makes visual columns sparser than text columns.
Salience and noise come from standard-normal latents; layer ``l`` mixes
layer 0's latents with fresh ones as ``rho * z_0 + sqrt(1 - rho**2) * z``,
which keeps every layer's marginal distribution fixed while the
cross-layer correlation is ``rho``.

Every random draw comes from ``numpy.random.PCG64`` keyed by
``SeedSequence([seed, layer, stream, row])``, so any row can be
regenerated on its own and traces are reproducible.
"""

from __future__ import annotations

import math
import time
from statistics import NormalDist
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from .attention import AttentionMatrix, AttentionRow, TokenModality, cumulative_scores
from .decode import (
    PREFILL_BIRTH,
    CacheState,
    DdesConfig,
    GreedyConfig,
    KVEntry,
    append_step,
    greedy_evict_step,
    step_decode,
)
from .errors import KvEvictError
from .prefill import DapConfig, PruneDecision, broadcast, layer_evictable, overlap_rate, prune_prefill

PRNG_ID = "numpy.PCG64/SeedSequence([seed, layer, stream, row])"
POLICIES = ("full", "hae", "greedy", "window")

_SALIENCE, _PREFILL, _DECODE = 0, 1, 2


@dataclass(frozen=True)
class SalienceDist:
    """Normal draws, or a two-component normal mixture when ``heavy_frac > 0``."""

    mean: float = 0.0
    std: float = 1.0
    heavy_frac: float = 0.0
    heavy_mean: float = 0.0
    heavy_std: float = 0.0

    def validate(self, name: str) -> None:
        if self.std < 0 or self.heavy_std < 0 or not 0.0 <= self.heavy_frac <= 1.0:
            raise KvEvictError("invalid-config", f"{name}: bad distribution parameters")
        if not all(math.isfinite(v) for v in asdict(self).values()):
            raise KvEvictError("invalid-config", f"{name}: non-finite parameter")

    def from_latent(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Map standard-normal latents to draws: ``u`` picks the component, ``z`` the value."""
        base = self.mean + self.std * z
        if self.heavy_frac <= 0:
            return base
        if self.heavy_frac >= 1:
            return self.heavy_mean + self.heavy_std * z
        heavy = u < NormalDist().inv_cdf(self.heavy_frac)
        return np.where(heavy, self.heavy_mean + self.heavy_std * z, base)


@dataclass(frozen=True)
class StreamConfig:
    n_visual: int = 576
    n_text: int = 96
    n_system: int = 32  # text tokens placed before the image, counted in n_text
    n_layers: int = 4
    decode_steps: int = 64
    head_dim: int = 64
    visual_salience: SalienceDist = SalienceDist(-40.0, 6.0, 0.02, -8.0, 6.0)
    text_salience: SalienceDist = SalienceDist(0.0, 8.0)
    generated_salience: SalienceDist = SalienceDist(0.0, 8.0)
    noise_std: float = 4.0
    rho: float = 0.9
    seed: int = 42

    def __post_init__(self):
        if self.n_visual < 1 or self.n_text < 1:
            raise KvEvictError("invalid-config", "n_visual and n_text must be >= 1")
        if not 0 <= self.n_system < self.n_text:
            raise KvEvictError("invalid-config", "need 0 <= n_system < n_text")
        if self.n_layers < 1 or self.decode_steps < 0 or self.head_dim < 1:
            raise KvEvictError("invalid-config", "n_layers >= 1, decode_steps >= 0, head_dim >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise KvEvictError("invalid-config", f"rho={self.rho} outside [0, 1]")
        if self.noise_std < 0 or not math.isfinite(self.noise_std):
            raise KvEvictError("invalid-config", "noise_std must be finite and >= 0")
        self.visual_salience.validate("visual_salience")
        self.text_salience.validate("text_salience")
        self.generated_salience.validate("generated_salience")

    @property
    def n_prefill(self) -> int:
        return self.n_visual + self.n_text

    def to_doc(self) -> dict:
        return asdict(self)

    @classmethod
    def from_doc(cls, doc: dict) -> "StreamConfig":
        doc = dict(doc)
        for key in ("visual_salience", "text_salience", "generated_salience"):
            if key in doc and isinstance(doc[key], dict):
                doc[key] = SalienceDist(**doc[key])
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise KvEvictError("invalid-config", f"unknown stream fields {sorted(unknown)}")
        return cls(**doc)


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


class GeneratedTrace:
    """Per-layer prefill matrices and decode rows.

    Synthetic traces produce rows on demand; traces loaded from JSON hold
    them explicitly.
    """

    def __init__(self, cfg: StreamConfig, saliences: np.ndarray | None = None):
        self.config = cfg
        self.seed = cfg.seed
        n0 = cfg.n_prefill
        self.modalities = (
            (TokenModality.TEXT,) * cfg.n_system
            + (TokenModality.VISUAL,) * cfg.n_visual
            + (TokenModality.TEXT,) * (cfg.n_text - cfg.n_system)
        )
        self._prefill: list[AttentionMatrix | None] = [None] * cfg.n_layers
        self._decode: list[list[np.ndarray]] | None = None
        if saliences is None:
            saliences = self._draw_saliences()
        self.saliences = saliences
        self._scale = 1.0 / math.sqrt(cfg.head_dim)

    # -- generation --------------------------------------------------------

    def _rng(self, layer: int, stream: int, row: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, layer, stream, row])

    def _mix(self, base: np.ndarray, fresh: np.ndarray) -> np.ndarray:
        rho = self.config.rho
        return rho * base + math.sqrt(1.0 - rho * rho) * fresh

    def _latents(self, layer: int, stream: int, row: int, n: int) -> np.ndarray:
        """Standard-normal latents for ``layer``, correlated with layer 0 by ``rho``."""
        base = self._rng(0, stream, row).standard_normal(n)
        if layer == 0:
            return base
        return self._mix(base, self._rng(layer, stream, row).standard_normal(n))

    def _draw_saliences(self) -> np.ndarray:
        cfg = self.config
        n0, n = cfg.n_prefill, cfg.n_prefill + cfg.decode_steps
        visual = np.array([m is TokenModality.VISUAL for m in self.modalities])
        out = np.empty((cfg.n_layers, n))
        for layer in range(cfg.n_layers):
            z = self._latents(layer, _SALIENCE, 0, n)
            u = self._latents(layer, _SALIENCE, 1, n)
            sal = out[layer]
            sal[:n0] = np.where(
                visual,
                cfg.visual_salience.from_latent(z[:n0], u[:n0]),
                cfg.text_salience.from_latent(z[:n0], u[:n0]),
            )
            sal[n0:] = cfg.generated_salience.from_latent(z[n0:], u[n0:])
        return out

    def _noise(self, layer: int, stream: int, row: int, n: int) -> np.ndarray:
        return self.config.noise_std * self._latents(layer, stream, row, n)

    def _logits_row(self, layer: int, stream: int, row: int, n: int) -> np.ndarray:
        x = (self.saliences[layer, :n] + self._noise(layer, stream, row, n)) * self._scale
        return softmax(x)

    # -- access ------------------------------------------------------------

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def decode_steps(self) -> int:
        return self.config.decode_steps

    def prefill(self, layer: int) -> AttentionMatrix:
        m = self._prefill[layer]
        if m is None:
            n0 = self.config.n_prefill
            rows = [self._logits_row(layer, _PREFILL, i, i + 1) for i in range(n0)]
            m = AttentionMatrix(rows, col_modality=self.modalities, row_modality=self.modalities)
            self._prefill[layer] = m
        return m

    def decode_probs(self, layer: int, step: int) -> np.ndarray:
        """Decode row at ``step`` over tokens ``0 .. n_prefill + step - 1``."""
        if not 0 <= step < self.config.decode_steps:
            raise IndexError(step)
        if self._decode is not None:
            return self._decode[layer][step]
        return self._logits_row(layer, _DECODE, step, self.config.n_prefill + step)

    def decode_row(self, layer: int, step: int) -> AttentionRow:
        return AttentionRow(step, self.decode_probs(layer, step))

    def decode_rows(self, layer: int) -> Iterator[AttentionRow]:
        for t in range(self.config.decode_steps):
            yield self.decode_row(layer, t)

    # -- serialization -----------------------------------------------------

    def to_doc(self) -> dict:
        layers = []
        for layer in range(self.n_layers):
            layers.append(
                {
                    "prefill": [r.tolist() for r in self.prefill(layer).rows()],
                    "decode": [self.decode_probs(layer, t).tolist() for t in range(self.decode_steps)],
                }
            )
        head = self.prefill(0).to_doc()
        return {
            "version": head["version"],
            "seed": self.seed,
            "prng": PRNG_ID,
            "config": self.config.to_doc(),
            "modalities": head["modalities"],
            "row_modalities": head["row_modalities"],
            "rows": head["rows"],
            "layers": layers,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "GeneratedTrace":
        cfg = StreamConfig.from_doc(doc["config"])
        trace = cls(cfg, saliences=np.zeros((cfg.n_layers, 0)))
        layers = doc.get("layers")
        if layers is None:
            layers = [{"prefill": doc["rows"], "decode": []}]
        if len(layers) != cfg.n_layers:
            raise KvEvictError("invalid-trace", "layer count does not match config")
        for i, layer in enumerate(layers):
            trace._prefill[i] = AttentionMatrix(
                layer["prefill"], col_modality=doc["modalities"], row_modality=doc.get("row_modalities")
            )
        trace._decode = [[np.asarray(r, dtype=np.float64) for r in layer["decode"]] for layer in layers]
        return trace


def generate_trace(cfg: StreamConfig) -> GeneratedTrace:
    return GeneratedTrace(cfg)


# -- policy replay -------------------------------------------------------------


@dataclass
class MetricsRecord:
    policy: str
    seed: int
    retained_entries: int
    evicted_entries: int
    cache_bytes: int
    eviction_loss: float
    overlap_rates: tuple[float, ...] = ()
    wall_ms: float = 0.0

    @property
    def overlap_mean(self) -> float | None:
        rest = self.overlap_rates[1:]
        return float(np.mean(rest)) if rest else None

    def same_outputs(self, other: "MetricsRecord") -> bool:
        """Equality ignoring wall time and policy id."""
        a, b = asdict(self), asdict(other)
        for key in ("wall_ms", "policy"):
            a.pop(key), b.pop(key)
        return a == b


@dataclass
class PolicyRun:
    record: MetricsRecord
    states: list[CacheState]
    decision: PruneDecision | None
    cache_sizes: np.ndarray  # (n_layers, decode_steps): size after each step
    prefill_loss: float = 0.0

    @property
    def decode_loss(self) -> float:
        return float(sum(s.total_loss for s in self.states))


def _initial_state(trace, layer, evicted, cfg, prefill_only, record_events, payload_dim) -> CacheState:
    scores = cumulative_scores(trace.prefill(layer))
    drop = set(evicted)
    entries = [
        KVEntry(j, trace.modalities[j], float(scores[j]), False, PREFILL_BIRTH)
        for j in range(trace.config.n_prefill)
        if j not in drop
    ]
    return CacheState(
        entries, cfg, prefill_only=prefill_only, record_events=record_events, payload_dim=payload_dim
    )


def simulate_policy(
    trace: GeneratedTrace,
    policy: str,
    dap_cfg: DapConfig | None = None,
    ddes_cfg: DdesConfig | None = None,
    greedy_cfg: GreedyConfig | None = None,
    *,
    bytes_per_entry: int = 4096,
    analyze_overlap: bool = True,
    record_events: bool = False,
    kv_payload: bool = True,
) -> PolicyRun:
    """Replay ``trace`` under one policy and keep the full per-layer state.

    Decode rows are generated over every token; each policy sees them
    restricted to its live entries and renormalized, which is exactly the
    softmax over the surviving keys.  With ``kv_payload`` each entry also
    carries ``2 * head_dim`` floats of K/V memory that eviction has to
    move.  ``wall_ms`` covers eviction work only, not row synthesis.
    """
    if policy not in POLICIES:
        raise KvEvictError("config-mismatch", f"unknown policy {policy!r}")
    if policy == "full" and (dap_cfg or ddes_cfg or greedy_cfg):
        raise KvEvictError("config-mismatch", "full takes no eviction config")
    if policy == "hae" and greedy_cfg is not None:
        raise KvEvictError("config-mismatch", "hae takes dap/ddes configs, not greedy")
    if policy in ("greedy", "window") and (dap_cfg or ddes_cfg):
        raise KvEvictError("config-mismatch", f"{policy} takes a greedy config only")
    if policy == "window" and greedy_cfg is not None and greedy_cfg.budget is None:
        raise KvEvictError("config-mismatch", "window needs an explicit budget")

    cfg = trace.config
    L, T = cfg.n_layers, cfg.decode_steps
    wall = 0.0

    decision = None
    overlaps: tuple[float, ...] = ()
    evicted_per_layer = [()] * L
    if policy == "hae" and dap_cfg is not None:
        first = trace.prefill(0)
        t0 = time.perf_counter()
        decision = prune_prefill(first, dap_cfg)
        evicted_per_layer = broadcast(decision, L)
        wall += time.perf_counter() - t0
        if analyze_overlap and decision.evicted:
            per_layer = layer_evictable([trace.prefill(i) for i in range(L)], dap_cfg)
            overlaps = tuple(overlap_rate(decision.evicted, per_layer))

    greedy_cfg = greedy_cfg or GreedyConfig()
    prefill_only = greedy_cfg.prefill_only if policy in ("greedy", "window") else None
    states, sizes = [], np.zeros((L, T), dtype=np.int64)
    prefill_loss = 0.0
    for layer in range(L):
        st = _initial_state(
            trace, layer, evicted_per_layer[layer],
            ddes_cfg if policy == "hae" else None, prefill_only, record_events,
            2 * cfg.head_dim if kv_payload else 0,
        )
        if evicted_per_layer[layer]:
            scores = cumulative_scores(trace.prefill(layer))
            prefill_loss += math.fsum(scores[list(evicted_per_layer[layer])])

        if policy == "hae" and ddes_cfg is not None:
            step = step_decode
            kwargs = {}
        elif policy in ("greedy", "window"):
            budget = greedy_cfg.budget if greedy_cfg.budget is not None else st.l
            window = budget if policy == "window" else greedy_cfg.recent_window
            step = greedy_evict_step
            kwargs = {"budget": budget, "recent_window": window}
        else:
            step = append_step
            kwargs = {}

        n0 = cfg.n_prefill
        for t in range(T):
            full = trace.decode_probs(layer, t)
            t0 = time.perf_counter()
            p = full[st._idx[: st.n]]
            p = p / p.sum()
            entry = KVEntry(n0 + t, TokenModality.GENERATED, 0.0, False, t)
            step(st, p, entry, **kwargs)
            wall += time.perf_counter() - t0
            sizes[layer, t] = st.n
        states.append(st)

    retained = int(sum(s.n for s in states))
    evicted = int(sum(len(e) for e in evicted_per_layer) + sum(len(s.evictions) for s in states))
    assert retained + evicted == L * (cfg.n_prefill + T)
    loss = prefill_loss + sum(s.total_loss for s in states)
    record = MetricsRecord(
        policy=policy,
        seed=cfg.seed,
        retained_entries=retained,
        evicted_entries=evicted,
        cache_bytes=retained * bytes_per_entry,
        eviction_loss=float(loss),
        overlap_rates=overlaps,
        wall_ms=wall * 1e3,
    )
    return PolicyRun(record, states, decision, sizes, prefill_loss)


def run_policy(trace, policy, dap_cfg=None, ddes_cfg=None, greedy_cfg=None, **kw) -> MetricsRecord:
    return simulate_policy(trace, policy, dap_cfg, ddes_cfg, greedy_cfg, **kw).record
