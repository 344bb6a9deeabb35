"""Attention rows, ragged causal matrices and the observation metrics.

Matrices here are ragged: row ``i`` covers columns ``0 .. len(row_i)-1``
and the cells to the right are *absent*, not zero.  Every metric counts
present cells only.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import KvEvictError

TRACE_FORMAT_VERSION = 1
DEFAULT_SPARSITY_THRESHOLD = 1e-4
ROW_SUM_TOL = 1e-9


class TokenModality(str, enum.Enum):
    VISUAL = "visual"
    TEXT = "text"
    GENERATED = "generated"

    @classmethod
    def coerce(cls, value) -> "TokenModality":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise KvEvictError("invalid-modality", repr(value)) from None


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AttentionRow:
    """One query step's post-softmax distribution over the live cache."""

    step: int
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise KvEvictError("invalid-row", "probs must be a non-empty 1-D sequence")
        if probs.min() < 0.0:
            raise KvEvictError("invalid-row", f"negative probability at step {self.step}")
        total = float(probs.sum())
        if abs(total - 1.0) > ROW_SUM_TOL:
            raise KvEvictError("invalid-row", f"row at step {self.step} sums to {total!r}")
        object.__setattr__(self, "probs", _frozen(probs))

    def __len__(self) -> int:
        return self.probs.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttentionRow):
            return NotImplemented
        return self.step == other.step and np.array_equal(self.probs, other.probs)


class AttentionMatrix:
    """A ragged, prefix-aligned attention matrix with modality labels.

    ``values`` is a dense ``(n_rows, n_cols)`` float array holding NaN in
    absent cells; ``present`` is the matching boolean mask.  Rows need not
    be normalized (the metrics work on any non-negative matrix); build from
    :class:`AttentionRow` objects via :meth:`from_rows` when they are.
    """

    def __init__(
        self,
        rows: Iterable[Sequence[float]],
        col_modality: Sequence | None = None,
        row_modality: Sequence | None = None,
        steps: Sequence[int] | None = None,
    ):
        rows = [np.asarray(r, dtype=np.float64).ravel() for r in rows]
        n_rows = len(rows)
        lengths = np.array([r.size for r in rows], dtype=np.int64)
        n_cols = int(lengths.max()) if n_rows else 0
        values = np.full((n_rows, n_cols), np.nan)
        for i, r in enumerate(rows):
            values[i, : r.size] = r
        present = np.arange(n_cols)[None, :] < lengths[:, None]
        if np.any(values[present] < 0):
            raise KvEvictError("invalid-matrix", "attention values must be non-negative")

        if steps is None:
            steps = np.arange(n_rows)
        steps = np.asarray(steps, dtype=np.int64)
        if steps.shape != (n_rows,):
            raise KvEvictError("invalid-matrix", "one step index per row required")
        if n_rows > 1 and np.any(np.diff(steps) <= 0):
            raise KvEvictError("invalid-matrix", "row steps must be strictly increasing")

        if col_modality is not None:
            col_modality = tuple(TokenModality.coerce(m) for m in col_modality)
            if len(col_modality) < n_cols:
                raise KvEvictError("invalid-matrix", "fewer column labels than columns")
        if row_modality is not None:
            row_modality = tuple(TokenModality.coerce(m) for m in row_modality)
            if len(row_modality) != n_rows:
                raise KvEvictError("invalid-matrix", "one row label per row required")

        self.values = _frozen(values)
        self.present = _frozen(present)
        self.lengths = _frozen(lengths)
        self.steps = _frozen(steps)
        self.col_modality = col_modality
        self.row_modality = row_modality

    @classmethod
    def from_rows(cls, rows: Sequence[AttentionRow], col_modality=None, row_modality=None):
        return cls(
            [r.probs for r in rows],
            col_modality=col_modality,
            row_modality=row_modality,
            steps=[r.step for r in rows],
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __len__(self) -> int:
        return self.values.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self.values[i, : self.lengths[i]]

    def rows(self) -> list[np.ndarray]:
        return [self.row(i) for i in range(len(self))]

    def select(self, row_mod: TokenModality, col_mod: TokenModality) -> np.ndarray:
        """Dense sub-block of rows labeled ``row_mod`` by columns labeled ``col_mod``.

        Absent cells come back as NaN.
        """
        if self.row_modality is None or self.col_modality is None:
            raise KvEvictError("missing-modality", "matrix has no modality labels")
        r = np.array([m is row_mod for m in self.row_modality], dtype=bool)
        c = np.array([m is col_mod for m in self.col_modality[: self.shape[1]]], dtype=bool)
        return self.values[np.ix_(r, c)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttentionMatrix):
            return NotImplemented
        return (
            np.array_equal(self.values, other.values, equal_nan=True)
            and np.array_equal(self.steps, other.steps)
            and self.col_modality == other.col_modality
            and self.row_modality == other.row_modality
        )

    # -- serialization -------------------------------------------------

    def to_doc(self) -> dict:
        doc = {
            "version": TRACE_FORMAT_VERSION,
            "modalities": [m.value for m in self.col_modality] if self.col_modality else [],
            "rows": [r.tolist() for r in self.rows()],
        }
        if self.row_modality is not None:
            doc["row_modalities"] = [m.value for m in self.row_modality]
        if not np.array_equal(self.steps, np.arange(len(self))):
            doc["steps"] = self.steps.tolist()
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "AttentionMatrix":
        version = doc.get("version")
        if version != TRACE_FORMAT_VERSION:
            raise KvEvictError("unsupported-version", f"trace version {version!r}")
        return cls(
            doc["rows"],
            col_modality=doc.get("modalities") or None,
            row_modality=doc.get("row_modalities"),
            steps=doc.get("steps"),
        )


def save_matrix(m: AttentionMatrix, path) -> None:
    Path(path).write_text(json.dumps(m.to_doc()))


def load_matrix(path) -> AttentionMatrix:
    return AttentionMatrix.from_doc(json.loads(Path(path).read_text()))


# -- metrics ----------------------------------------------------------------


def _coerce(m) -> AttentionMatrix:
    return m if isinstance(m, AttentionMatrix) else AttentionMatrix(m)


def sparsity_rate(m, threshold: float = DEFAULT_SPARSITY_THRESHOLD) -> float:
    """Fraction of present cells with value <= ``threshold``."""
    m = _coerce(m)
    if threshold < 0:
        raise KvEvictError("invalid-threshold", f"{threshold!r} < 0")
    total = int(m.present.sum())
    if total == 0:
        raise KvEvictError("empty-matrix")
    hits = int(np.count_nonzero(m.values[m.present] <= threshold))
    return hits / total


class ModalitySparsity(NamedTuple):
    overall: float
    visual: float | None
    text: float | None


def _rate_over(values: np.ndarray, present: np.ndarray, threshold: float) -> float | None:
    n = int(present.sum())
    if n == 0:
        return None
    return int(np.count_nonzero(values[present] <= threshold)) / n


def modality_sparsity(m, threshold: float = DEFAULT_SPARSITY_THRESHOLD) -> ModalitySparsity:
    """Overall sparsity plus sparsity over Visual and over Text columns.

    A modality with no present cells is reported as ``None``.
    """
    m = _coerce(m)
    if m.col_modality is None:
        raise KvEvictError("missing-modality", "column modality labels required")
    overall = sparsity_rate(m, threshold)
    labels = m.col_modality[: m.shape[1]]
    out = {}
    for mod in (TokenModality.VISUAL, TokenModality.TEXT):
        cols = np.array([lab is mod for lab in labels], dtype=bool)
        out[mod] = _rate_over(m.values, m.present & cols[None, :], threshold)
    return ModalitySparsity(overall, out[TokenModality.VISUAL], out[TokenModality.TEXT])


def cumulative_scores(m) -> np.ndarray:
    """Column sums; absent cells contribute nothing."""
    m = _coerce(m)
    return np.where(m.present, m.values, 0.0).sum(axis=0)


def modality_variance(
    scores: Sequence[float], modalities: Sequence
) -> tuple[float | None, float | None]:
    """Population variance of ``scores`` within the Visual and Text groups."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != len(modalities):
        raise KvEvictError("length-mismatch", "one modality label per score required")
    mods = [TokenModality.coerce(x) for x in modalities]

    def var(mod):
        sel = scores[[x is mod for x in mods]]
        return float(np.var(sel)) if sel.size else None

    return var(TokenModality.VISUAL), var(TokenModality.TEXT)
