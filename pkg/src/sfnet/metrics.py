"""Word error rate and word-level classification error.

WER counts come from a unit-cost minimum-edit alignment; ties in the
backtrace prefer substitution over deletion over insertion, which makes the
breakdown deterministic.  WER can exceed 1.0 for hypotheses much longer
than the reference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["WerBreakdown", "wer", "corpus_wer", "classification_error", "format_report"]


@dataclass
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.reference_length


def wer(reference, hypothesis) -> WerBreakdown:
    """Minimum-edit error breakdown between two id sequences."""
    ref = list(reference)
    hyp = list(hypothesis)
    n, m = len(ref), len(hyp)
    if n == 0:
        raise ValueError("reference sequence must be non-empty")
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = dist[i - 1, j] + 1
            ins = dist[i, j - 1] + 1
            dist[i, j] = min(sub, dele, ins)
    subs = dels = inss = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            inss += 1
            j -= 1
    return WerBreakdown(subs, dels, inss, n)


def corpus_wer(pairs) -> float:
    """Pooled error counts over pooled reference length (not a mean of rates)."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("corpus_wer needs at least one (reference, hypothesis) pair")
    errors = 0
    ref_len = 0
    for reference, hypothesis in pairs:
        b = wer(reference, hypothesis)
        errors += b.errors
        ref_len += b.reference_length
    return errors / ref_len


def classification_error(logits, labels) -> float:
    """1 - argmax accuracy."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    predicted = logits.argmax(axis=-1)
    return float(np.mean(predicted != labels))


def format_report(entries) -> str:
    """Line-oriented evaluation report.

    One ``id TAB wer TAB S,D,I`` line per sample plus a pooled summary line.
    """
    lines = []
    errors = 0
    ref_len = 0
    for sample_id, breakdown in entries:
        lines.append(f"{sample_id}\t{breakdown.wer:.6f}\t"
                     f"{breakdown.substitutions},{breakdown.deletions},{breakdown.insertions}")
        errors += breakdown.errors
        ref_len += breakdown.reference_length
    lines.append(f"corpus\t{errors / ref_len:.6f}\t{errors}/{ref_len}")
    return "\n".join(lines) + "\n"
