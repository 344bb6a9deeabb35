# Decode-time eviction, one step at a time.
#
# Every step the lowest-scoring entry goes into a bin but stays in the cache
# (it still gets attention).  When the bin holds k entries they leave together.
import numpy as np

from kvevict import CacheState, DdesConfig, KVEntry, TokenModality, greedy_evict_step, step_decode

betas = [5.0, 1.0, 4.0, 0.5, 3.0, 2.0]
entries = [KVEntry(i, TokenModality.TEXT, b) for i, b in enumerate(betas)]
state = CacheState(entries, DdesConfig(k=2, buffer=2, protect_recent=2), record_events=True)

rng = np.random.default_rng(0)
for _ in range(6):
    row = rng.dirichlet(np.ones(len(state)))
    step_decode(state, row)
    ev = state.events[-1]
    print(f"step {ev.step}: size {ev.cache_size}, marked {ev.marked}, flushed {ev.flushed}")

print("evicted:", [(e.original_index, round(e.score, 3)) for e in state.evictions])
print("total loss", round(state.total_loss, 3))
print("argmin scans", state.argmin_scans, "flushes", state.flushes)

# the greedy baseline evicts on every step instead
g = CacheState(entries)
for _ in range(6):
    greedy_evict_step(g, rng.dirichlet(np.ones(len(g))), recent_window=2)
print("greedy evicted:", [(e.original_index, round(e.score, 3)) for e in g.evictions])
