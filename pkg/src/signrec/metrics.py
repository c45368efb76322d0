"""Top-k accuracy, confusion counts, and word-level edit error breakdowns."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


def topk_accuracy(probs_list, labels, k: int) -> float:
    """Fraction of samples whose label is among the k most probable classes.

    Ties are broken toward the lower class index (stable sort on descending
    probability), so results are deterministic for degenerate distributions.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    probs = np.asarray(probs_list, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} are misaligned")
    if probs.shape[0] == 0:
        raise ValueError("topk_accuracy needs at least one sample")
    order = np.argsort(-probs, axis=1, kind="stable")
    hits = (order[:, : min(k, probs.shape[1])] == labels[:, None]).any(axis=1)
    return float(hits.mean())


@dataclass(frozen=True)
class ErrorCounts:
    insertions: int
    deletions: int
    substitutions: int

    def __post_init__(self):
        if min(self.insertions, self.deletions, self.substitutions) < 0:
            raise ValueError("error counts must be non-negative")

    @property
    def total(self) -> int:
        return self.insertions + self.deletions + self.substitutions

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.insertions, self.deletions, self.substitutions)


def edit_errors(reference: Sequence, hypothesis: Sequence) -> ErrorCounts:
    """Insertion/deletion/substitution counts of a minimal edit alignment.

    Unit-cost Levenshtein DP; the backtrace prefers match, then substitution,
    then deletion, then insertion when several alignments tie. Insertions are
    hypothesis words with no reference counterpart; deletions are reference
    words the hypothesis missed.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    m, n = len(ref), len(hyp)
    dist = np.zeros((m + 1, n + 1), dtype=np.int64)
    dist[:, 0] = np.arange(m + 1)
    dist[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            same = ref[i - 1] == hyp[j - 1]
            dist[i, j] = min(
                dist[i - 1, j - 1] + (0 if same else 1),
                dist[i - 1, j] + 1,  # deletion
                dist[i, j - 1] + 1,  # insertion
            )
    i, j = m, n
    ins = dele = sub = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and dist[i, j] == dist[i - 1, j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + 1:
            sub += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dele += 1
            i = i - 1
        else:
            ins += 1
            j = j - 1
    counts = ErrorCounts(ins, dele, sub)
    assert counts.total == int(dist[m, n])  # backtrace must realize the DP optimum
    return counts


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """K x K counts, rows = true class, columns = predicted class."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} are misaligned")
    for name, arr in (("pred", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} outside 0..{num_classes - 1}")
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(mat, (labels, preds), 1)
    return mat


def sentence_report(decodes, references) -> dict:
    """Summarize decoded sentences against their references.

    decodes is a list of (words, confidences, mean_confidence) triples as
    produced by the decoder; references the matching true word-id lists.
    Returns a JSON-ready dict with one row per sentence and footer averages:
    mean confidence and mean total errors (I+D+S per sentence, averaged).
    """
    if len(decodes) != len(references):
        raise ValueError("decodes and references are misaligned")
    if not decodes:
        raise ValueError("sentence_report needs at least one sentence")
    rows = []
    for (words, confs, mean_conf), ref in zip(decodes, references):
        err = edit_errors(ref, words)
        rows.append(
            {
                "reference": [int(w) for w in ref],
                "hypothesis": [int(w) for w in words],
                "word_count": len(ref),
                "mean_confidence": float(mean_conf),
                "insertions": err.insertions,
                "deletions": err.deletions,
                "substitutions": err.substitutions,
                "total_errors": err.total,
            }
        )
    return {
        "sentences": rows,
        "average_confidence": float(np.mean([r["mean_confidence"] for r in rows])),
        "average_total_errors": float(np.mean([r["total_errors"] for r in rows])),
    }


def format_sentence_report(report: dict) -> str:
    """Aligned plain-text rendering of a sentence_report dict."""
    header = f"{'#':>3}  {'words':>5}  {'conf':>6}  {'I':>3} {'D':>3} {'S':>3}  hypothesis vs reference"
    lines = [header, "-" * len(header)]
    for i, row in enumerate(report["sentences"]):
        hyp = " ".join(str(w) for w in row["hypothesis"]) or "(empty)"
        ref = " ".join(str(w) for w in row["reference"])
        lines.append(
            f"{i:>3}  {row['word_count']:>5}  {row['mean_confidence']:>6.3f}  "
            f"{row['insertions']:>3} {row['deletions']:>3} {row['substitutions']:>3}  {hyp} | {ref}"
        )
    lines.append(
        f"avg  confidence={report['average_confidence']:.3f}  "
        f"total_errors={report['average_total_errors']:.2f}"
    )
    return "\n".join(lines)
