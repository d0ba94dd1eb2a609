"""Corpus-level BLEU with per-reference clipping and a brevity penalty."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from glstm.errors import BadInputError


@dataclass
class EvalPair:
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise BadInputError("an evaluation pair needs at least one reference")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def closest_ref_length(cand_len: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    cand_len: int
    ref_len: int

    @property
    def brevity_penalty(self) -> float:
        if self.cand_len == 0:
            return 0.0
        if self.cand_len >= self.ref_len:
            return 1.0
        return math.exp(1.0 - self.ref_len / self.cand_len)

    def precision(self, k: int) -> float:
        """Modified precision for k-grams (1-based); 0 when there are no k-grams."""
        total = self.totals[k - 1]
        return self.matches[k - 1] / total if total else 0.0


def corpus_stats(pairs: Sequence[EvalPair], max_n: int = 4) -> BleuStats:
    if not pairs:
        raise BadInputError("BLEU needs at least one candidate/reference pair")
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for pair in pairs:
        cand = pair.candidate
        c += len(cand)
        r += closest_ref_length(len(cand), [len(ref) for ref in pair.references])
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            best_ref: Counter = Counter()
            for ref in pair.references:
                best_ref |= ngrams(ref, n)
            matches[n - 1] += sum(min(cnt, best_ref[g]) for g, cnt in counts.items())
            totals[n - 1] += sum(counts.values())
    return BleuStats(matches, totals, c, r)


def bleu(pairs: Sequence[EvalPair], max_n: int = 4) -> dict[str, float]:
    """Unsmoothed corpus BLEU: ``B@n = BP * exp(mean_{k<=n} ln p_k)`` for n = 1..max_n."""
    stats = corpus_stats(pairs, max_n)
    bp = stats.brevity_penalty
    scores = {}
    log_sum = 0.0
    dead = False
    for n in range(1, max_n + 1):
        p = stats.precision(n)
        if p == 0.0:
            dead = True
        if dead:
            scores[f"B{n}"] = 0.0
            continue
        log_sum += math.log(p)
        scores[f"B{n}"] = bp * math.exp(log_sum / n)
    return scores


def score_report(pairs: Sequence[EvalPair], max_n: int = 4) -> dict:
    report: dict = dict(bleu(pairs, max_n))
    report["pairs"] = len(pairs)
    return report
