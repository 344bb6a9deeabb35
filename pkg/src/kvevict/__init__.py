"""KV-cache eviction for multimodal decoding.

Prefill pruning of visual tokens, a batched recycle-bin evictor for the
decode phase, a greedy heavy-hitter baseline, bound oracles and a seeded
synthetic attention simulator.
"""

from .attention import (
    AttentionMatrix,
    AttentionRow,
    ModalitySparsity,
    TokenModality,
    cumulative_scores,
    load_matrix,
    modality_sparsity,
    modality_variance,
    save_matrix,
    sparsity_rate,
)
from .decode import (
    CacheState,
    DdesConfig,
    Eviction,
    GreedyConfig,
    KVEntry,
    StepEvent,
    append_step,
    eviction_loss,
    greedy_evict_step,
    read_event_log,
    select_eviction_set,
    step_decode,
    update_scores,
    write_event_log,
)
from .errors import KvEvictError
from .harness import ExperimentSpec, emit_report, load_spec, parse_spec, render_report, run_experiment
from .prefill import (
    DapConfig,
    PruneDecision,
    broadcast,
    global_text_attention,
    layer_evictable,
    max_attention_guard,
    overlap_rate,
    prune_prefill,
    select_retained,
)
from .simulator import (
    GeneratedTrace,
    MetricsRecord,
    PolicyRun,
    SalienceDist,
    StreamConfig,
    generate_trace,
    run_policy,
    simulate_policy,
)
from .theory import (
    DecayModelParams,
    corollary_bound,
    eviction_threshold,
    geometric_total_loss,
    geometric_total_loss_sum,
    greedy_stepwise_loss,
    lowest_d_sum,
    monte_carlo_decay_check,
    single_token_loss_bound_holds,
)

__version__ = "0.1.0"
