"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are repeated in the "acceptance criteria" section at the end of
the pytest run.
"""

import itertools
import json
import math
import time
from dataclasses import replace

import numpy as np

from kvevict import (
    AttentionMatrix,
    CacheState,
    DapConfig,
    DdesConfig,
    DecayModelParams,
    GreedyConfig,
    KVEntry,
    StreamConfig,
    TokenModality,
    generate_trace,
    geometric_total_loss,
    geometric_total_loss_sum,
    lowest_d_sum,
    max_attention_guard,
    modality_sparsity,
    monte_carlo_decay_check,
    overlap_rate,
    parse_spec,
    prune_prefill,
    run_experiment,
    select_eviction_set,
    select_retained,
    simulate_policy,
    step_decode,
)
from kvevict.prefill import global_text_attention, layer_evictable

V, T = TokenModality.VISUAL, TokenModality.TEXT


def random_row(rng, n):
    x = rng.exponential(size=n) ** 3
    return x / x.sum()


# 1 -------------------------------------------------------------------------


def test_cache_constraint(acceptance):
    t0 = time.perf_counter()
    runs = violations = flushes = 0
    for seed in range(120):
        rng = np.random.default_rng([1, seed])
        l = int(rng.integers(4, 160))
        k = int(rng.integers(2, 17))
        cfg = DdesConfig(k=k, buffer=k + int(rng.integers(0, 9)), protect_recent=int(rng.integers(0, l)))
        st = CacheState([KVEntry(i, T, float(b)) for i, b in enumerate(rng.uniform(0, 5, l))], cfg)
        for _ in range(150):
            before, done = len(st), st.flushes
            step_decode(st, random_row(rng, before))
            if not l <= len(st) < l + cfg.buffer:
                violations += 1
            if st.flushes != done:
                flushes += 1
                if before + 1 - len(st) != k or len(st.evictions) % k:
                    violations += 1
        runs += 1
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and runs >= 100 and elapsed < 5.0 and flushes > 0
    acceptance(1, "cache constraint suite", ok, f"{runs} runs, {flushes} flushes, {violations} violations, {elapsed:.2f}s")
    assert ok


# 2 -------------------------------------------------------------------------


def exhaustive_k_subset(scores, k):
    best = None
    for combo in itertools.combinations(range(len(scores)), k):
        key = (math.fsum(scores[i] for i in combo), combo)
        if best is None or key < best:
            best = key
    return best[1]


def test_subset_oracle(acceptance):
    mismatches = ties = 0
    for seed in range(200):
        rng = np.random.default_rng([2, seed])
        n = int(rng.integers(1, 13))
        k = int(rng.integers(1, min(4, n) + 1))
        if seed % 2:
            scores = rng.integers(0, 4, size=n).astype(float).tolist()  # heavy ties
        else:
            scores = rng.uniform(0, 1, size=n).tolist()
        ties += len(set(scores)) < n
        if select_eviction_set(scores, k) != exhaustive_k_subset(scores, k):
            mismatches += 1
    ok = mismatches == 0 and ties > 0
    acceptance(2, "eviction set equals exhaustive k-subset", ok, f"200 vectors, {ties} with ties, {mismatches} mismatches")
    assert ok


# 3 -------------------------------------------------------------------------


def test_decay_monte_carlo(acceptance):
    rows = monte_carlo_decay_check(1000, seed=0)
    bad_bound = sum(not (r.delay >= math.ceil(r.q) and r.loss <= r.epsilon) for r in rows)
    bad_geo = 0
    worst = 0.0
    for r in rows:
        p = DecayModelParams(r.lam, r.attn_max, r.epsilon)
        for k in {1, max(1, r.delay), 10, 100}:
            a, b = geometric_total_loss(p, k), geometric_total_loss_sum(p, k)
            worst = max(worst, abs(a - b))
            bad_geo += not math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12)
    ok = len(rows) == 1000 and bad_bound == 0 and bad_geo == 0
    acceptance(3, "decay bound Monte-Carlo", ok, f"{bad_bound} bound violations, {bad_geo} geometric mismatches, max |diff| {worst:.1e}")
    assert ok


# 4 -------------------------------------------------------------------------

BOUND_STREAM = StreamConfig(n_visual=48, n_text=16, n_system=4, n_layers=1, decode_steps=48)


def score_ledger(state, n_prefill):
    """Score at eviction for evicted prefill entries, final score for surviving ones."""
    gone = [e.score for e in state.evictions]
    live = state.betas[state.indices < n_prefill].tolist()
    return gone + live


def test_error_upper_bound(acceptance):
    greedy_bad = ddes_bad = ddes_vs_full_bad = 0
    ddes_le_greedy = 0
    n0 = BOUND_STREAM.n_prefill
    for seed in range(100):
        tr = generate_trace(replace(BOUND_STREAM, seed=seed))
        g = simulate_policy(tr, "greedy", greedy_cfg=GreedyConfig(prefill_only=True), kv_payload=False).states[0]
        d = simulate_policy(
            tr, "hae", None, DdesConfig(k=4, buffer=4, prefill_only=True), kv_payload=False
        ).states[0]
        full = simulate_policy(tr, "full", kv_payload=False).states[0]
        full_final = full.betas[:n0]

        # greedy stepwise loss equals the lowest-d sum of its own score ledger
        dg = len(g.evictions)
        if abs(g.total_loss - lowest_d_sum(score_ledger(g, n0), dg)) > 1e-9:
            greedy_bad += 1
        # recycle-bin loss stays within the same bound
        dd = len(d.evictions)
        if d.total_loss > lowest_d_sum(score_ledger(d, n0), dd) + 1e-9:
            ddes_bad += 1
        if d.total_loss > lowest_d_sum(full_final, dd) + 1e-9:
            ddes_vs_full_bad += 1
        ddes_le_greedy += d.total_loss <= g.total_loss
    ok = greedy_bad == 0 and ddes_bad == 0 and ddes_vs_full_bad == 0
    acceptance(
        4,
        "lowest-d error upper bound",
        ok,
        f"100 traces: greedy equality violations {greedy_bad}, recycle-bin bound violations {ddes_bad} "
        f"(own ledger) / {ddes_vs_full_bad} (full-cache scores); recycle-bin <= greedy on {ddes_le_greedy}/100 (reported only)",
    )
    assert ok


# 5 -------------------------------------------------------------------------


def dap_instance(rng):
    n_t, n_v = int(rng.integers(1, 6)), int(rng.integers(1, 30))
    block = rng.exponential(size=(n_t, n_v)) ** 6 * 10.0 ** rng.uniform(-6, 0, size=(1, n_v))
    m = AttentionMatrix(block, col_modality=[V] * n_v, row_modality=[T] * n_t)
    return block, m


def test_dap_properties(acceptance):
    fails = dict.fromkeys(["partition", "monotone", "scale", "strict", "cap"], 0)
    for seed in range(500):
        rng = np.random.default_rng([5, seed])
        block, m = dap_instance(rng)
        n_v = block.shape[1]
        r1, r2 = sorted(rng.uniform(0, 0.3, size=2))
        alpha = float(rng.uniform(0, 0.5))

        d = prune_prefill(m, DapConfig(r1, alpha))
        if set(d.retained) | set(d.evicted) != set(range(n_v)) or set(d.retained) & set(d.evicted):
            fails["partition"] += 1

        if not set(d.evicted) <= set(prune_prefill(m, DapConfig(r2, alpha)).evicted):
            fails["monotone"] += 1

        A = global_text_attention(block)
        c = float(2.0 ** rng.integers(-10, 11)) * float(rng.uniform(0.5, 2))
        if select_retained(A * c, r1) != select_retained(A, r1):
            fails["scale"] += 1

        j = int(rng.integers(0, n_v))
        col_max = float(block[:, j].max())
        at = max_attention_guard(block, j, col_max)
        above = max_attention_guard(block, j, float(np.nextafter(col_max, np.inf)))
        # r = 1 puts every column below the global threshold unless it holds all the mass
        low = j not in select_retained(A, 1.0)
        pruned_at = j in prune_prefill(m, DapConfig(1.0, col_max)).evicted
        pruned_above = j in prune_prefill(m, DapConfig(1.0, float(np.nextafter(col_max, np.inf)))).evicted
        if at or not above or pruned_at or (low and not pruned_above):
            fails["strict"] += 1

        cap = int(rng.integers(1, n_v + 1))
        capped = prune_prefill(m, DapConfig(r2, alpha, max_evict=cap))
        if len(capped.evicted) >= cap or not set(capped.evicted) <= set(prune_prefill(m, DapConfig(r2, alpha)).evicted):
            fails["cap"] += 1
    ok = not any(fails.values())
    acceptance(5, "pruning properties", ok, "500 instances each; failures " + ", ".join(f"{k}={v}" for k, v in fails.items()))
    assert ok


# 6 -------------------------------------------------------------------------

OVERLAP_STREAM = StreamConfig(n_layers=4, decode_steps=0)


def mean_overlap(rho, seeds, cfg=DapConfig(r=0.0015, alpha=0.0005)):
    vals = []
    for seed in seeds:
        tr = generate_trace(replace(OVERLAP_STREAM, rho=rho, seed=seed))
        mats = [tr.prefill(i) for i in range(tr.n_layers)]
        first = prune_prefill(mats[0], cfg)
        vals.extend(overlap_rate(first.evicted, layer_evictable(mats, cfg))[1:])
    return float(np.mean(vals))


def test_broadcast_overlap(acceptance):
    rng = np.random.default_rng(6)
    rho1_bad = 0
    for seed in range(3):
        tr = generate_trace(replace(OVERLAP_STREAM, rho=1.0, seed=seed))
        mats = [tr.prefill(i) for i in range(tr.n_layers)]
        for _ in range(4):
            cfg = DapConfig(r=float(rng.uniform(0.0005, 0.003)), alpha=float(rng.uniform(1e-4, 5e-3)))
            first = prune_prefill(mats[0], cfg)
            if first.evicted and overlap_rate(first.evicted, layer_evictable(mats, cfg)) != [1.0] * tr.n_layers:
                rho1_bad += 1
    seeds = range(4)
    curve = [mean_overlap(rho, seeds) for rho in (0.0, 0.5, 0.9, 1.0)]
    monotone = all(a <= b for a, b in zip(curve, curve[1:]))
    ok = rho1_bad == 0 and curve[2] > 0.5 and monotone
    acceptance(
        6,
        "broadcast overlap",
        ok,
        f"rho=1 mismatches {rho1_bad}; mean overlap over rho 0/0.5/0.9/1 = " + "/".join(f"{x:.3f}" for x in curve),
    )
    assert ok


# 7 -------------------------------------------------------------------------


def naive_modality_sparsity(rows, mods, threshold):
    counts = {"all": [0, 0], V: [0, 0], T: [0, 0]}
    for row in rows:
        for j in range(len(row)):
            for key in ("all", mods[j]):
                if key in counts:
                    counts[key][1] += 1
                    counts[key][0] += row[j] <= threshold
    return tuple(h / n if n else None for h, n in (counts["all"], counts[V], counts[T]))


def test_sparsity_metric(acceptance):
    mismatches = 0
    for seed in range(100):
        rng = np.random.default_rng([7, seed])
        n_rows, n_cols = int(rng.integers(1, 25)), int(rng.integers(1, 25))
        rows = []
        for _ in range(n_rows):
            x = rng.exponential(size=int(rng.integers(1, n_cols + 1))) ** 5
            rows.append((x / x.sum()).tolist())
        mods = [V if u < 0.5 else T for u in rng.random(n_cols)]
        thr = float(rng.choice([1e-4, 1e-3, 1e-2]))
        got = modality_sparsity(AttentionMatrix(rows, col_modality=mods), thr)
        mismatches += tuple(got) != naive_modality_sparsity(rows, mods, thr)
    s = modality_sparsity(generate_trace(StreamConfig(seed=42)).prefill(0), 1e-4)
    ok = mismatches == 0 and s.visual > s.text
    acceptance(7, "sparsity metric", ok, f"{mismatches} mismatches on 100 matrices; seed 42 visual {s.visual:.3f} > text {s.text:.3f}")
    assert ok


# 8 -------------------------------------------------------------------------


def test_identity_configurations(acceptance):
    tr = generate_trace(StreamConfig(n_visual=128, n_text=32, n_system=8, n_layers=3, decode_steps=40, seed=8))
    full = simulate_policy(tr, "full")
    hae = simulate_policy(tr, "hae", DapConfig(r=0.0), None)
    same = (
        hae.record.same_outputs(full.record)
        and np.array_equal(hae.cache_sizes, full.cache_sizes)
        and all(a.betas.tobytes() == b.betas.tobytes() and np.array_equal(a.indices, b.indices)
                for a, b in zip(hae.states, full.states))
    )

    budget = 50
    n0 = tr.config.n_prefill
    g = simulate_policy(tr, "greedy", greedy_cfg=GreedyConfig(budget=budget, recent_window=budget), record_events=True)
    w = simulate_policy(tr, "window", greedy_cfg=GreedyConfig(budget=budget))
    sliding = bool((g.cache_sizes == budget).all())
    for gs, ws in zip(g.states, w.states):
        # after step t the cache holds exactly the newest `budget` tokens
        live = set(range(n0))
        for ev in gs.events:
            live.add(n0 + ev.step)
            live -= set(ev.flushed)
            newest = n0 + ev.step + 1
            sliding &= live == set(range(newest - budget, newest))
        sliding &= gs.indices.tolist() == sorted(live) == ws.indices.tolist()
    ok = same and sliding
    acceptance(8, "identity configurations", ok, f"hae(r=0, no bin) == full: {same}; greedy(window=budget) is sliding: {sliding}")
    assert ok


# 9 -------------------------------------------------------------------------


def test_determinism(acceptance, tmp_path):
    doc = {
        "stream": {"n_visual": 160, "n_text": 40, "n_system": 8, "n_layers": 2, "decode_steps": 32, "seed": 11},
        "policies": [
            {"policy": "hae", "dap": {"r": 0.0015, "alpha": 0.0005}, "ddes": {"k": 8, "buffer": 8, "protect_recent": 8}},
            {"policy": "greedy", "greedy": {"recent_window": 8}},
            {"policy": "window", "greedy": {"budget": 64}},
            {"policy": "full"},
        ],
        "sweep": {"name": "dap.r", "values": [0.001, 0.0012, 0.0015, 0.002]},
        "repetitions": 2,
    }
    identical = True
    for fmt in ("csv", "json"):
        blobs = []
        for i, parallel in enumerate((False, False, True)):
            out = tmp_path / f"r{i}.{fmt}"
            spec = {**doc, "parallel": parallel, "output": {"path": str(out), "format": fmt}}
            run_experiment(parse_spec(json.loads(json.dumps(spec)), env={}))
            blobs.append(out.read_bytes())
        identical &= blobs[0] == blobs[1] == blobs[2]
    acceptance(9, "byte-identical reports", identical, "csv and json, sequential twice plus parallel")
    assert identical


# 10 ------------------------------------------------------------------------

PERF_STREAM = StreamConfig(n_visual=1536, n_text=512, n_system=64, n_layers=1, decode_steps=10_000, seed=10)
PERF_DDES = DdesConfig(k=64, buffer=64, protect_recent=32)


def test_performance(acceptance):
    tr = generate_trace(PERF_STREAM)
    tr.prefill(0)
    hae_ms, greedy_ms = [], []
    counters_ok = True
    for _ in range(3):
        h = simulate_policy(tr, "hae", DapConfig(), PERF_DDES, analyze_overlap=False)
        g = simulate_policy(tr, "greedy", greedy_cfg=GreedyConfig(recent_window=32))
        hae_ms.append(h.record.wall_ms)
        greedy_ms.append(g.record.wall_ms)
        st = h.states[0]
        counters_ok &= st.argmin_scans <= PERF_STREAM.decode_steps
        counters_ok &= st.flushes == PERF_STREAM.decode_steps // PERF_DDES.k
    cache = tr.config.n_prefill
    ok = counters_ok and min(hae_ms) < min(greedy_ms)
    acceptance(
        10,
        "performance sanity",
        ok,
        f"{PERF_STREAM.decode_steps} steps, {cache}-entry cache; argmin/flush counters ok: {counters_ok}; "
        f"best wall hae {min(hae_ms):.0f} ms vs greedy {min(greedy_ms):.0f} ms",
    )
    assert ok
