# If a token's score decays geometrically, how long must we wait before
# evicting it costs at most eps?
import math

from kvevict import (
    DecayModelParams,
    eviction_threshold,
    geometric_total_loss,
    geometric_total_loss_sum,
    monte_carlo_decay_check,
    single_token_loss_bound_holds,
)

p = DecayModelParams(lam=0.5, attn_max=1.0, epsilon=0.01)
q = eviction_threshold(p)
print("Q =", round(q, 6), "-> wait at least", math.ceil(q), "steps")
for t in range(5, 9):
    print(" delay", t, "loss ok:", single_token_loss_bound_holds(p, t))

for k in (1, 5, 20, 60):
    print(f"geometric total over {k} steps: {geometric_total_loss(p, k):.15f} vs {geometric_total_loss_sum(p, k):.15f}")

rows = monte_carlo_decay_check(1000, seed=0)
print("Monte-Carlo:", sum(r.bound_holds for r in rows), "of", len(rows), "instances within eps")
