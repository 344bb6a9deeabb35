# Full cache vs pruning + recycle bin vs greedy heavy hitters vs a sliding window.
from kvevict import DapConfig, DdesConfig, GreedyConfig, StreamConfig, generate_trace, simulate_policy

cfg = StreamConfig(n_layers=2, decode_steps=256, seed=7)
trace = generate_trace(cfg)

runs = {
    "full": simulate_policy(trace, "full"),
    "hae": simulate_policy(trace, "hae", DapConfig(), DdesConfig(k=16, buffer=16, protect_recent=32)),
    "greedy": simulate_policy(trace, "greedy", greedy_cfg=GreedyConfig(recent_window=32)),
    "window": simulate_policy(trace, "window", greedy_cfg=GreedyConfig(budget=cfg.n_prefill)),
}
print(f"{'policy':8} {'retained':>8} {'evicted':>8} {'MB':>7} {'loss':>8} {'ms':>7}")
for name, run in runs.items():
    r = run.record
    print(f"{name:8} {r.retained_entries:8d} {r.evicted_entries:8d} {r.cache_bytes / 2**20:7.2f} "
          f"{r.eviction_loss:8.3f} {r.wall_ms:7.1f}")

hae = runs["hae"]
print("hae: prefill loss", round(hae.prefill_loss, 3), "decode loss", round(hae.decode_loss, 3))
print("hae cache size over the last steps:", hae.cache_sizes[0, -20:].tolist())
