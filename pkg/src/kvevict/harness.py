"""Experiment specs, sweeps and CSV/JSON reports.

A spec is a JSON document::

    {
      "stream": {"n_visual": 576, "seed": 42, ...},
      "policies": [
        {"policy": "hae", "dap": {"r": 0.0015, "alpha": 0.0005},
         "ddes": {"k": 16, "buffer": 16, "protect_recent": 8}},
        {"policy": "greedy", "greedy": {"recent_window": 8}}
      ],
      "sweep": {"name": "dap.r", "values": [0.001, 0.0012, 0.0015, 0.002]},
      "repetitions": 1,
      "bytes_per_entry": 4096,
      "output": {"path": "report.csv", "format": "csv", "timing": false}
    }

Sweep names are ``<section>.<field>`` with section one of ``stream``,
``dap``, ``ddes`` or ``greedy``.  ``KVEVICT_SEED`` in the environment
overrides ``stream.seed``.

Wall time is the only non-deterministic output.  Reports leave the
``wall_ms`` column empty unless ``output.timing`` is set, so the same
spec always yields a byte-identical file.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

from .decode import DdesConfig, GreedyConfig
from .errors import KvEvictError
from .prefill import DapConfig
from .simulator import POLICIES, MetricsRecord, StreamConfig, generate_trace, run_policy

CSV_COLUMNS = ("policy", "seed", "retained", "evicted", "cache_bytes", "loss", "wall_ms", "overlap_mean")
FORMATS = ("csv", "json")
SEED_ENV = "KVEVICT_SEED"

_SECTIONS = {"dap": DapConfig, "ddes": DdesConfig, "greedy": GreedyConfig}


@dataclass(frozen=True)
class PolicyBundle:
    policy: str
    dap: DapConfig | None = None
    ddes: DdesConfig | None = None
    greedy: GreedyConfig | None = None
    label: str | None = None

    @property
    def name(self) -> str:
        return self.label or self.policy


@dataclass(frozen=True)
class Sweep:
    name: str
    values: tuple


@dataclass(frozen=True)
class OutputSpec:
    path: str | None = None
    format: str = "csv"
    timing: bool = False


@dataclass(frozen=True)
class ExperimentSpec:
    stream: StreamConfig
    policies: tuple[PolicyBundle, ...]
    sweep: Sweep | None = None
    repetitions: int = 1
    output: OutputSpec = OutputSpec()
    bytes_per_entry: int = 4096
    parallel: bool = False


# -- parsing -----------------------------------------------------------------


def _spec_error(path: str, msg: str) -> KvEvictError:
    return KvEvictError("spec-error", f"{path}: {msg}")


def _build(cls, doc: Any, path: str):
    if not isinstance(doc, dict):
        raise _spec_error(path, "expected an object")
    known = {f.name for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise _spec_error(f"{path}.{key}", "unknown field")
    try:
        return cls.from_doc(doc) if hasattr(cls, "from_doc") else cls(**doc)
    except KvEvictError as exc:
        raise _spec_error(path, str(exc)) from None
    except TypeError as exc:
        raise _spec_error(path, str(exc)) from None


def parse_spec(doc: dict, env: dict | None = None) -> ExperimentSpec:
    env = os.environ if env is None else env
    if not isinstance(doc, dict):
        raise _spec_error("$", "expected an object")
    for key in doc:
        if key not in {f.name for f in fields(ExperimentSpec)}:
            raise _spec_error(f"$.{key}", "unknown field")

    stream_doc = dict(doc.get("stream", {}))
    if env.get(SEED_ENV):
        try:
            stream_doc["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise _spec_error(SEED_ENV, f"not an integer: {env[SEED_ENV]!r}") from None
    stream = _build(StreamConfig, stream_doc, "$.stream")

    raw_policies = doc.get("policies")
    if not isinstance(raw_policies, list) or not raw_policies:
        raise _spec_error("$.policies", "need a non-empty list")
    policies = []
    for i, p in enumerate(raw_policies):
        path = f"$.policies[{i}]"
        if not isinstance(p, dict) or p.get("policy") not in POLICIES:
            raise _spec_error(f"{path}.policy", f"must be one of {POLICIES}")
        extra = set(p) - {"policy", "label", *_SECTIONS}
        if extra:
            raise _spec_error(f"{path}.{sorted(extra)[0]}", "unknown field")
        sections = {
            name: _build(cls, p[name], f"{path}.{name}")
            for name, cls in _SECTIONS.items()
            if p.get(name) is not None
        }
        policies.append(PolicyBundle(p["policy"], label=p.get("label"), **sections))

    sweep = None
    if doc.get("sweep") is not None:
        s = doc["sweep"]
        if not isinstance(s, dict) or not isinstance(s.get("name"), str):
            raise _spec_error("$.sweep.name", "required string")
        section, _, fname = s["name"].partition(".")
        target = StreamConfig if section == "stream" else _SECTIONS.get(section)
        if target is None or fname not in {f.name for f in fields(target)}:
            raise _spec_error("$.sweep.name", f"unknown parameter {s['name']!r}")
        values = s.get("values")
        if not isinstance(values, list) or not values:
            raise _spec_error("$.sweep.values", "need a non-empty list")
        sweep = Sweep(s["name"], tuple(values))

    reps = doc.get("repetitions", 1)
    if not isinstance(reps, int) or reps < 1:
        raise _spec_error("$.repetitions", "must be an integer >= 1")
    output = _build(OutputSpec, doc.get("output", {}), "$.output")
    if output.format not in FORMATS:
        raise _spec_error("$.output.format", f"must be one of {FORMATS}")
    bpe = doc.get("bytes_per_entry", 4096)
    if not isinstance(bpe, int) or bpe < 1:
        raise _spec_error("$.bytes_per_entry", "must be an integer >= 1")
    return ExperimentSpec(
        stream, tuple(policies), sweep, reps, output, bpe, bool(doc.get("parallel", False))
    )


def load_spec(path, env: dict | None = None) -> ExperimentSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise KvEvictError("io-error", str(exc)) from None
    except json.JSONDecodeError as exc:
        raise _spec_error("$", f"invalid JSON: {exc}") from None
    return parse_spec(doc, env)


# -- execution ---------------------------------------------------------------


@dataclass(frozen=True)
class _Cell:
    stream: StreamConfig
    bundle: PolicyBundle
    label: str
    bytes_per_entry: int


def _apply_sweep(stream: StreamConfig, bundle: PolicyBundle, name: str, value):
    section, _, fname = name.partition(".")
    try:
        if section == "stream":
            return replace(stream, **{fname: value}), bundle
        current = getattr(bundle, section)
        if current is None:
            return stream, bundle
        return stream, replace(bundle, **{section: replace(current, **{fname: value})})
    except (KvEvictError, TypeError) as exc:
        raise _spec_error(f"$.sweep ({name}={value!r})", str(exc)) from None


def _cells(spec: ExperimentSpec) -> list[_Cell]:
    cells = []
    for bundle in spec.policies:
        values = spec.sweep.values if spec.sweep else (None,)
        for value in values:
            stream, b = spec.stream, bundle
            label = bundle.name
            if spec.sweep:
                stream, b = _apply_sweep(stream, bundle, spec.sweep.name, value)
                label = f"{label}[{spec.sweep.name}={value}]"
            cells.extend(_Cell(stream, b, label, spec.bytes_per_entry) for _ in range(spec.repetitions))
    return cells


def _run_cell(cell: _Cell) -> MetricsRecord:
    trace = generate_trace(cell.stream)
    b = cell.bundle
    rec = run_policy(trace, b.policy, b.dap, b.ddes, b.greedy, bytes_per_entry=cell.bytes_per_entry)
    rec.policy = cell.label
    return rec


def _check_writable(path) -> None:
    parent = Path(path).resolve().parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise KvEvictError("io-error", f"cannot write to {path}")
    if Path(path).is_dir():
        raise KvEvictError("io-error", f"{path} is a directory")


def run_experiment(spec: ExperimentSpec) -> list[MetricsRecord]:
    """Run every (policy x sweep value x repetition) cell in declaration order."""
    if spec.output.path:
        _check_writable(spec.output.path)
    cells = _cells(spec)
    if spec.parallel and len(cells) > 1:
        with ProcessPoolExecutor() as pool:
            records = list(pool.map(_run_cell, cells))
    else:
        records = [_run_cell(c) for c in cells]
    if spec.output.path:
        emit_report(records, spec.output.format, spec.output.path, timing=spec.output.timing)
    return records


# -- reports -----------------------------------------------------------------


def _csv_row(r: MetricsRecord, timing: bool) -> list:
    om = r.overlap_mean
    return [
        r.policy,
        r.seed,
        r.retained_entries,
        r.evicted_entries,
        r.cache_bytes,
        repr(r.eviction_loss),
        repr(r.wall_ms) if timing else "",
        "" if om is None else repr(om),
    ]


def _json_record(r: MetricsRecord, timing: bool) -> dict:
    d = asdict(r)
    d["overlap_rates"] = list(r.overlap_rates)
    d["overlap_mean"] = r.overlap_mean
    if not timing:
        d["wall_ms"] = None
    return d


def render_report(records: Sequence[MetricsRecord], fmt: str, timing: bool = True) -> str:
    if fmt not in FORMATS:
        raise KvEvictError("format-error", f"unknown format {fmt!r}")
    if not records:
        raise KvEvictError("empty-report", "no records to write")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(_csv_row(r, timing))
        return buf.getvalue()
    return json.dumps([_json_record(r, timing) for r in records], indent=2) + "\n"


def emit_report(records: Sequence[MetricsRecord], fmt: str, path, timing: bool = True) -> Path:
    """Write ``records`` as CSV or JSON; nothing is created on error."""
    text = render_report(records, fmt, timing)
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise KvEvictError("io-error", str(exc)) from None
    return path


def load_json_report(path) -> list[MetricsRecord]:
    out = []
    for d in json.loads(Path(path).read_text()):
        d = dict(d)
        d.pop("overlap_mean", None)
        d["overlap_rates"] = tuple(d["overlap_rates"])
        if d["wall_ms"] is None:
            d["wall_ms"] = 0.0
        out.append(MetricsRecord(**d))
    return out
