"""Class weighting and the transition-modulated weighted cross-entropy.

The modulated loss replaces each example's predicted probability with the
transition-diffused score s_c = sum_j t_cj * p_j, where c is the example's
(noisy) label, then applies the usual weighted negative log.  With an identity
transition this reduces bit-for-bit to plain weighted cross-entropy.  Gradients
are taken with respect to the output-layer logits, through the softmax and the
linear modulation, for the batch-mean scalar loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

LOG_EPS = 1e-12


@dataclass
class ClassWeights:
    """Per-class positive weights plus the counts they were derived from."""

    w: np.ndarray
    source_counts: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if np.any(self.w <= 0) or not np.all(np.isfinite(self.w)):
            raise ValidationError("class weights must be positive and finite")


@dataclass
class LossReport:
    """Scalar batch-mean loss, per-example losses, and d(loss)/d(logits)."""

    loss: float
    per_example: np.ndarray
    logit_grads: np.ndarray


def median_frequency_weights(label_counts) -> ClassWeights:
    """w_c = median(freq) / freq_c over the per-class label frequencies.

    The median of an even-length list is the mean of the two middle values.
    Uniform counts give weights of exactly 1.
    """
    counts = np.asarray(label_counts, dtype=np.int64)
    if counts.ndim != 1 or len(counts) < 1:
        raise ValidationError("label_counts must be a 1-D vector")
    if np.any(counts < 1):
        absent = np.nonzero(counts < 1)[0]
        raise ValidationError(
            f"class absent from training data: {absent.tolist()}"
        )
    freqs = counts / counts.sum()
    med = np.median(freqs)
    return ClassWeights(w=med / freqs, source_counts=counts)


def _as_entries(transition) -> np.ndarray:
    entries = getattr(transition, "entries", transition)
    return np.asarray(entries, dtype=np.float64)


def _as_weights(w) -> np.ndarray:
    return np.asarray(getattr(w, "w", w), dtype=np.float64)


def _validate_inputs(posteriors: np.ndarray, labels: np.ndarray,
                     t: np.ndarray, w: np.ndarray) -> None:
    if posteriors.ndim != 2:
        raise ValidationError("posteriors must be a (batch, K) matrix")
    k = posteriors.shape[1]
    if t.shape != (k, k):
        raise ValidationError(f"transition is {t.shape}, posteriors have K={k}")
    if np.any(t < 0) or np.any(t > 1) or np.any(np.abs(t.sum(axis=1) - 1) > 1e-9):
        raise ValidationError("transition must be row-stochastic with entries in [0, 1]")
    if w.shape != (k,):
        raise ValidationError(f"weights shape {w.shape} != ({k},)")
    if labels.shape != (posteriors.shape[0],):
        raise ValidationError("labels length must match batch size")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValidationError("label out of range")


def modulated_cross_entropy(posteriors: np.ndarray, labels, transition, w,
                            renormalize: bool = False) -> LossReport:
    """Weighted cross-entropy on transition-diffused scores.

    Per example with noisy label c the score is row c of the transition dotted
    with the posterior; the per-example loss is -w_c * log(max(score, 1e-12))
    and the scalar is the batch mean.  ``renormalize`` switches to the
    documented alternative that renormalizes the diffused scores across classes
    before the log (off by default).
    """
    p = np.asarray(posteriors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    t = _as_entries(transition)
    wv = _as_weights(w)
    _validate_inputs(p, labels, t, wv)

    batch = p.shape[0]
    rows = t[labels]                       # (B, K): transition row per example
    s = np.einsum("bk,bk->b", rows, p)     # diffused score of the labeled class
    wc = wv[labels]

    if not renormalize:
        per_example = -wc * np.log(np.maximum(s, LOG_EPS))
        # d(mean loss)/d(logit_k) = (w_c/B) * (p_k - t_ck p_k / s); the whole
        # row vanishes where the score sits under the log clamp.
        active = (s > LOG_EPS).astype(np.float64)
        safe_s = np.where(s > LOG_EPS, s, 1.0)
        grads = (wc * active / batch)[:, None] * (p - rows * p / safe_s[:, None])
    else:
        m = p @ t.T                        # (B, K) diffused scores, all classes
        z = m.sum(axis=1)
        m_label = m[np.arange(batch), labels]
        per_example = -wc * (np.log(np.maximum(m_label, LOG_EPS))
                             - np.log(np.maximum(z, LOG_EPS)))
        u = t.sum(axis=0)                  # column sums
        gate_m = (m_label > LOG_EPS) / np.where(m_label > LOG_EPS, m_label, 1.0)
        gate_z = (z > LOG_EPS) / np.where(z > LOG_EPS, z, 1.0)
        grads = (wc / batch)[:, None] * p * (gate_z[:, None] * u[None, :]
                                             - gate_m[:, None] * rows)

    return LossReport(loss=float(per_example.mean()),
                      per_example=per_example, logit_grads=grads)


def plain_weighted_cross_entropy(posteriors: np.ndarray, labels, w) -> LossReport:
    """Weighted cross-entropy without noise correction (identity transition)."""
    k = np.asarray(posteriors).shape[1]
    return modulated_cross_entropy(posteriors, labels, np.eye(k), w)
