"""Sequence-level evaluation: corpus BLEU, token edit distance, exact match.

All three scores live on a [0, 100] scale and are corpus-level statistics:
sums are accumulated over all (candidate, reference) pairs before any ratio
is taken, so every metric is invariant to the order of the pairs.

Inputs are already token sequences (lists/tuples of strings or ids); no
tokenization happens here.  The edit metric is a token-level Levenshtein
substitute for column-wise image comparison, which would require rendering
the predictions.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import DataError

_MAX_ORDER = 4
_SMOOTH = 1e-9


def levenshtein(a, b):
    """Unit-cost edit distance between two token sequences."""
    a = list(a)
    b = list(b)
    if len(a) < len(b):  # keep the rolling row short
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        cur = [i]
        for j, tok_b in enumerate(b, start=1):
            cost = 0 if tok_a == tok_b else 1
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[len(b)]


def _ngrams(seq, n):
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def _check_pairs(candidates, references):
    if len(candidates) != len(references):
        raise DataError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    if not candidates:
        raise DataError("empty candidate list")


def bleu(candidates, references, smoothing=False):
    """Corpus BLEU on [0, 100].

    Geometric mean of clipped n-gram precisions for n = 1..4 times a brevity
    penalty exp(1 - r/c) applied when the candidate corpus is shorter than
    the reference corpus.  A zero precision at any order makes the score 0
    unless ``smoothing`` is set, in which case that precision becomes 1e-9.
    """
    _check_pairs(candidates, references)
    matched = [0] * _MAX_ORDER
    total = [0] * _MAX_ORDER
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand = list(cand)
        ref = list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, _MAX_ORDER + 1):
            got = _ngrams(cand, n)
            if not got:
                continue
            want = _ngrams(ref, n)
            total[n - 1] += sum(got.values())
            matched[n - 1] += sum(min(c, want[g]) for g, c in got.items())
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for m, t in zip(matched, total):
        p = m / t if t else 0.0
        if p == 0.0:
            if not smoothing:
                return 0.0
            p = _SMOOTH
        log_sum += math.log(p)
    geo = math.exp(log_sum / _MAX_ORDER)
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * geo


def edit_score(candidates, references):
    """100 * (1 - sum of edit distances / sum of max pair lengths).

    An empty-vs-empty pair contributes nothing to either sum.  Distance can
    never exceed the longer sequence, so the score stays in [0, 100].
    """
    _check_pairs(candidates, references)
    dist = 0
    scale = 0
    for cand, ref in zip(candidates, references):
        longer = max(len(cand), len(ref))
        if longer == 0:
            continue
        dist += levenshtein(cand, ref)
        scale += longer
    if scale == 0:  # every pair was empty-vs-empty: nothing differs
        return 100.0
    return 100.0 * (1.0 - dist / scale)


def exact_match(candidates, references):
    """Percentage of pairs whose token sequences are identical."""
    _check_pairs(candidates, references)
    hits = sum(list(c) == list(r) for c, r in zip(candidates, references))
    return 100.0 * hits / len(candidates)


@dataclass
class EvalReport:
    bleu: float
    edit_score: float
    exact_match: float
    n: int

    def __post_init__(self):
        for field in ("bleu", "edit_score", "exact_match"):
            v = getattr(self, field)
            if not 0.0 <= v <= 100.0:
                raise DataError(f"{field} {v} outside [0, 100]")
        if self.n <= 0:
            raise DataError("report needs at least one pair")

    def tsv_line(self, seconds=0.0):
        """One tab-separated line: bleu, edit, exact, seconds, pair count."""
        return (
            f"{self.bleu:.2f}\t{self.edit_score:.2f}\t"
            f"{self.exact_match:.2f}\t{seconds:.2f}\t{self.n}"
        )


def evaluate(candidates, references, smoothing=False):
    """Compute all three corpus metrics over aligned candidate/reference pairs."""
    return EvalReport(
        bleu=bleu(candidates, references, smoothing=smoothing),
        edit_score=edit_score(candidates, references),
        exact_match=exact_match(candidates, references),
        n=len(candidates),
    )
