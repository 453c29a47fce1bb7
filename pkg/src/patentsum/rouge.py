"""ROUGE-1, ROUGE-2 and ROUGE-L scoring for summary evaluation.

Scores are F-measures with equal precision/recall weight, computed on
pre-tokenized sequences; the scorer itself is tokenization-agnostic.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @staticmethod
    def from_counts(overlap: float, cand_total: float, ref_total: float) -> "RougeScore":
        p = overlap / cand_total if cand_total > 0 else 0.0
        r = overlap / ref_total if ref_total > 0 else 0.0
        f = 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0
        return RougeScore(p, r, f)


ZERO_SCORE = RougeScore(0.0, 0.0, 0.0)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> RougeScore:
    """Clipped n-gram overlap: each distinct n-gram counts min(cand, ref) times."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(candidate) < n or len(reference) < n:
        warnings.warn(f"sequence shorter than n={n}; scoring 0", stacklevel=2)
        return ZERO_SCORE
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    overlap = sum(min(count, ref[gram]) for gram, count in cand.items())
    return RougeScore.from_counts(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length via the classic DP recurrence."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                curr.append(prev[j - 1] + 1)
            else:
                curr.append(max(prev[j], curr[j - 1]))
        prev = curr
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    if not candidate or not reference:
        return ZERO_SCORE
    lcs = lcs_length(candidate, reference)
    return RougeScore.from_counts(lcs, len(candidate), len(reference))


@dataclass(frozen=True)
class CorpusRouge:
    rouge_1: float
    rouge_2: float
    rouge_l: float

    def as_dict(self) -> dict[str, float]:
        return {"rouge-1": self.rouge_1, "rouge-2": self.rouge_2, "rouge-l": self.rouge_l}


def evaluate_corpus(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    per_pair: list[dict[str, float]] | None = None,
) -> CorpusRouge:
    """Arithmetic mean of per-pair F1 for each metric.

    Pass a list as ``per_pair`` to also collect the individual pair scores.
    """
    if len(candidates) != len(references):
        raise ValueError(
            f"candidate/reference count mismatch: {len(candidates)} vs {len(references)}"
        )
    if not candidates:
        return CorpusRouge(0.0, 0.0, 0.0)
    sums = [0.0, 0.0, 0.0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for cand, ref in zip(candidates, references):
            scores = (rouge_n(cand, ref, 1), rouge_n(cand, ref, 2), rouge_l(cand, ref))
            for i, s in enumerate(scores):
                sums[i] += s.f1
            if per_pair is not None:
                per_pair.append(
                    {"rouge-1": scores[0].f1, "rouge-2": scores[1].f1, "rouge-l": scores[2].f1}
                )
    n = len(candidates)
    return CorpusRouge(sums[0] / n, sums[1] / n, sums[2] / n)
