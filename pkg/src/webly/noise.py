"""Noise-transition estimation from an oracle model's predictions on web data.

For each class the most representative web member is the one maximizing the
oracle's posterior for that class, searched over every member in the corpus
regardless of transferred label.  The estimated transition matrix takes the
oracle's full posterior vector on class i's representative as its row i, so
rows are posterior vectors and the matrix is row-stochastic by construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import WebCorpus, flatten_web
from .errors import ParseError, ValidationError
from .model import ModelParams, forward, params_fingerprint


@dataclass
class TransitionMatrix:
    """K x K row-stochastic matrix of estimated class-confusion probabilities."""

    entries: np.ndarray
    provenance: dict

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        k = self.entries.shape
        if len(k) != 2 or k[0] != k[1]:
            raise ValidationError("transition matrix must be square")
        if np.any(self.entries < 0) or np.any(self.entries > 1):
            raise ValidationError("transition entries must lie in [0, 1]")
        if np.any(np.abs(self.entries.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("transition rows must sum to 1 within 1e-9")

    @property
    def k(self) -> int:
        return self.entries.shape[0]


@dataclass
class Representative:
    """The web member whose oracle posterior for ``class_index`` is maximal."""

    class_index: int
    example_id: str
    posterior: np.ndarray


@dataclass
class TransitionDiagnostics:
    row_sums: np.ndarray
    diagonally_dominant: list[bool]
    all_rows_dominant: bool
    entries: np.ndarray


def _corpus_fingerprint(corpus: WebCorpus) -> str:
    h = hashlib.sha256()
    for bag in corpus.bags:
        h.update(bag.query_id.encode())
        h.update(str(bag.transferred_label).encode())
        for m in bag.members:
            h.update(m.id.encode())
            h.update(np.ascontiguousarray(m.features, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def mine_representatives(oracle: ModelParams, corpus: WebCorpus) -> list[Representative]:
    """Pick, per class, the member with the highest oracle posterior for it.

    The argmax runs over all members in flattened corpus order; exact ties go
    to the lowest flattened index.
    """
    if oracle.config.num_classes != corpus.num_classes:
        raise ValidationError(
            f"oracle has {oracle.config.num_classes} classes, corpus has "
            f"{corpus.num_classes}"
        )
    flat = flatten_web(corpus)
    posteriors, _ = forward(oracle, flat.feature_matrix(), train=False)
    reps = []
    for c in range(corpus.num_classes):
        idx = int(np.argmax(posteriors[:, c]))
        reps.append(Representative(class_index=c,
                                   example_id=flat.examples[idx].id,
                                   posterior=posteriors[idx].copy()))
    return reps


def estimate_transition(oracle: ModelParams, corpus: WebCorpus) -> TransitionMatrix:
    """Stack the representatives' posterior vectors into the transition matrix.

    Row i is the oracle's full posterior on class i's representative.  The
    matrix is estimated once, globally; callers hold it fixed during training.
    """
    reps = mine_representatives(oracle, corpus)
    entries = np.stack([r.posterior for r in reps])
    provenance = {
        "oracle": params_fingerprint(oracle),
        "corpus": _corpus_fingerprint(corpus),
        "representatives": {str(r.class_index): r.example_id for r in reps},
    }
    return TransitionMatrix(entries=entries, provenance=provenance)


def validate_transition(t: TransitionMatrix) -> TransitionDiagnostics:
    """Row sums and per-row diagonal dominance, for inspection; no mutation.

    A row is diagonally dominant when its diagonal entry strictly exceeds every
    off-diagonal entry in that row.
    """
    entries = t.entries
    k = t.k
    dominant = []
    for i in range(k):
        off = np.delete(entries[i], i)
        dominant.append(bool(entries[i, i] > off.max()) if k > 1 else True)
    return TransitionDiagnostics(row_sums=entries.sum(axis=1),
                                 diagonally_dominant=dominant,
                                 all_rows_dominant=all(dominant),
                                 entries=entries)


# ---------------------------------------------------------------------------
# JSON export: {k, rows, provenance}; floats carry 17 significant digits so
# the file round-trips to the exact same float64 values.
# ---------------------------------------------------------------------------

def _format_rows(entries: np.ndarray) -> str:
    return "[" + ",".join(
        "[" + ",".join(f"{v:.17g}" for v in row) + "]" for row in entries
    ) + "]"


def save_transition(t: TransitionMatrix, path: str | Path) -> None:
    provenance = json.dumps(t.provenance, sort_keys=True, separators=(",", ":"))
    doc = f'{{"k":{t.k},"provenance":{provenance},"rows":{_format_rows(t.entries)}}}'
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(doc)


def load_transition(path: str | Path) -> TransitionMatrix:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        entries = np.array(doc["rows"], dtype=np.float64)
        if entries.shape != (doc["k"], doc["k"]):
            raise ValidationError(f"rows shape {entries.shape} != k={doc['k']}")
        return TransitionMatrix(entries=entries, provenance=doc.get("provenance", {}))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed transition document: {exc}") from None
