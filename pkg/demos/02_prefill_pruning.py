# Drop visual tokens the prompt barely looks at, once, on the first layer.
from kvevict import DapConfig, StreamConfig, generate_trace, layer_evictable, overlap_rate, prune_prefill

cfg = StreamConfig(n_layers=6, decode_steps=0, seed=3)
trace = generate_trace(cfg)
mats = [trace.prefill(i) for i in range(cfg.n_layers)]

for r in (0.001, 0.0012, 0.0015, 0.002):
    d = prune_prefill(mats[0], DapConfig(r=r, alpha=0.0005))
    print(f"r={r}: evict {len(d.evicted)} of {cfg.n_visual} visual tokens")

# a bigger r evicts more; alpha rescues tokens that one text token attends to strongly
dap = DapConfig(r=0.0015, alpha=0.0005)
first = prune_prefill(mats[0], dap)
loose = prune_prefill(mats[0], DapConfig(r=0.0015, alpha=1.0))
print("rescued by the max-attention guard:", len(loose.evicted) - len(first.evicted))

# would the deeper layers have chosen the same tokens?
rates = overlap_rate(first.evicted, layer_evictable(mats, dap))
print("overlap with first-layer decision:", [round(x, 3) for x in rates])

for rho in (0.0, 0.5, 1.0):
    t = generate_trace(StreamConfig(n_layers=4, decode_steps=0, seed=3, rho=rho))
    ms = [t.prefill(i) for i in range(4)]
    ev = prune_prefill(ms[0], dap).evicted
    print(f"rho={rho}: overlap {[round(x, 3) for x in overlap_rate(ev, layer_evictable(ms, dap))]}")
