"""``kvevict`` command-line driver."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .attention import AttentionMatrix, modality_sparsity
from .errors import KvEvictError
from .harness import load_spec, render_report, run_experiment
from .prefill import DapConfig, layer_evictable, overlap_rate, prune_prefill
from .simulator import GeneratedTrace, StreamConfig, generate_trace
from .theory import (
    DecayModelParams,
    geometric_total_loss,
    geometric_total_loss_sum,
    monte_carlo_decay_check,
    write_theory_csv,
)


def _load_layers(path) -> list[AttentionMatrix]:
    """Per-layer prefill matrices from a simulator trace or a bare attention document."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise KvEvictError("io-error", str(exc)) from None
    except json.JSONDecodeError as exc:
        raise KvEvictError("invalid-trace", str(exc)) from None
    if "config" in doc:
        trace = GeneratedTrace.from_doc(doc)
        return [trace.prefill(i) for i in range(trace.n_layers)]
    if "row_modalities" not in doc and doc.get("modalities"):
        # causal prefill: row i is token i
        doc = dict(doc, row_modalities=doc["modalities"][: len(doc["rows"])])
    return [AttentionMatrix.from_doc(doc)]


def _fmt(x) -> str:
    return "" if x is None else repr(x)


def cmd_run(args) -> int:
    spec = load_spec(args.spec)
    records = run_experiment(spec)
    if not spec.output.path:
        sys.stdout.write(render_report(records, spec.output.format, spec.output.timing))
    else:
        print(f"{len(records)} records -> {spec.output.path}", file=sys.stderr)
    return 0


def cmd_generate(args) -> int:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise KvEvictError("io-error", str(exc)) from None
        except json.JSONDecodeError as exc:
            raise KvEvictError("invalid-config", str(exc)) from None
    if args.seed is not None:
        doc["seed"] = args.seed
    trace = generate_trace(StreamConfig.from_doc(doc))
    Path(args.out).write_text(json.dumps(trace.to_doc()))
    return 0


def cmd_sparsity(args) -> int:
    mats = _load_layers(args.trace)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["layer", "overall", "visual", "text"])
    for layer, m in enumerate(mats):
        s = modality_sparsity(m, args.threshold)
        w.writerow([layer, _fmt(s.overall), _fmt(s.visual), _fmt(s.text)])
    return 0


def cmd_overlap(args) -> int:
    cfg = DapConfig(r=args.r, alpha=args.alpha)
    mats = _load_layers(args.trace)
    first = prune_prefill(mats[0], cfg)
    rates = overlap_rate(first.evicted, layer_evictable(mats, cfg))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["layer", "evicted_first_layer", "overlap"])
    for layer, rate in enumerate(rates):
        w.writerow([layer, len(first.evicted), repr(rate)])
    return 0


def cmd_verify_theory(args) -> int:
    rows = monte_carlo_decay_check(args.instances, args.seed)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        write_theory_csv(rows, out)
    finally:
        if args.out:
            out.close()
    violations = sum(not r.bound_holds for r in rows)
    geo_bad = 0
    for r in rows:
        p = DecayModelParams(r.lam, r.attn_max, r.epsilon)
        k = max(1, r.delay)
        a, b = geometric_total_loss(p, k), geometric_total_loss_sum(p, k)
        geo_bad += abs(a - b) > 1e-12 * max(1.0, abs(b))
    print(
        f"instances={len(rows)} bound_violations={violations} geometric_mismatches={geo_bad}",
        file=sys.stderr,
    )
    return 0 if violations == 0 and geo_bad == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kvevict", description="KV-cache eviction experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment spec")
    p.add_argument("--spec", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("generate", help="write a synthetic trace as JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with stream settings")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sparsity", help="per-layer sparsity of a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=cmd_sparsity)

    p = sub.add_parser("overlap", help="first-layer eviction overlap per layer")
    p.add_argument("--trace", required=True)
    p.add_argument("--r", type=float, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("verify-theory", help="Monte-Carlo check of the decay bound")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify_theory)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KvEvictError as exc:
        print(f"kvevict: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
