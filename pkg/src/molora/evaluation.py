"""Text-generation metrics and entropy-based selective prediction.

BLEU here is the strict single-reference variant: clipped n-gram precisions,
geometric mean, brevity penalty, no smoothing, and a hard zero whenever any
precision is zero. METEOR is the exact-match variant only (no stemming or
synonym lookup): unigram matches with a fragmentation penalty whose chunk
count is the true minimum over all maximum alignments (found by search; very
long repetitive inputs fall back to a greedy alignment). Corpus scores are
means of per-sample scores, accumulated with ``math.fsum`` so results do not
depend on sample order.

Selective prediction ranks samples by mean token entropy (nats) and reports
the retained-set metric at each coverage level of a descending grid.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

# Beyond this many shared reference positions, exact minimal-chunk search for
# the METEOR penalty could blow up combinatorially; use the greedy alignment.
_EXACT_CHUNK_LIMIT = 18


class MetricError(ValueError):
    """A metric contract was violated (bad inputs or a failed report invariant)."""


def _tokens(seq) -> list:
    if isinstance(seq, str):
        return seq.split()
    return list(seq)


def _mean(values) -> float:
    return math.fsum(values) / len(values)


# ---- BLEU ---------------------------------------------------------------------


def _ngram_counts(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Geometric mean of clipped n-gram precisions times the brevity penalty.

    Single reference, no smoothing: a zero precision at any order zeroes the
    score. An empty candidate scores 0; an empty reference is an error.
    """
    if not 1 <= max_n <= 4:
        raise MetricError(f"max_n must be in 1..4, got {max_n}")
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise MetricError("reference must be non-empty")
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        counts = _ngram_counts(cand, n)
        total = sum(counts.values())
        if total == 0:
            return 0.0
        ref_counts = _ngram_counts(ref, n)
        clipped = sum(min(c, ref_counts[g]) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    brevity = min(1.0, math.exp(1.0 - len(ref) / len(cand)))
    return brevity * math.exp(log_sum / max_n)


# ---- ROUGE ---------------------------------------------------------------------


def _lcs_length(a: list, b: list) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def rouge_l(candidate, reference) -> float:
    """LCS-based F1: precision over the candidate, recall over the reference."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise MetricError("reference must be non-empty")
    if not cand:
        return 0.0
    lcs = _lcs_length(cand, ref)
    return _f1(lcs / len(cand), lcs / len(ref))


def rouge_1(candidate, reference) -> float:
    """Unigram-overlap F1 with counts clipped per word."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise MetricError("reference must be non-empty")
    if not cand:
        return 0.0
    cc, rc = Counter(cand), Counter(ref)
    overlap = sum(min(c, rc[w]) for w, c in cc.items())
    return _f1(overlap / len(cand), overlap / len(ref))


# ---- METEOR (exact-match only) ------------------------------------------------


def _greedy_chunks(cand: list, ref: list, budget: Counter) -> int:
    """Greedy alignment chunk count: prefer continuing the previous run."""
    available: dict = {}
    for j, w in enumerate(ref):
        available.setdefault(w, []).append(j)
    used = set()
    remaining = Counter(budget)
    chunks = 0
    prev = -2
    for w in cand:
        if remaining[w] <= 0:
            prev = -2
            continue
        slots = [j for j in available.get(w, ()) if j not in used]
        if not slots:
            prev = -2
            continue
        j = prev + 1 if prev + 1 in slots else slots[0]
        used.add(j)
        remaining[w] -= 1
        chunks += 0 if j == prev + 1 else 1
        prev = j
    return chunks


def _minimal_chunks(cand: list, ref: list) -> tuple[int, int]:
    """(matches, chunks) for a maximum one-to-one alignment with fewest chunks.

    A chunk is a maximal run of matches consecutive in both sequences. The
    search walks candidate positions, tracking which shared reference
    positions are used; memoization keeps it fast for the short answers this
    package evaluates.
    """
    cc, rc = Counter(cand), Counter(ref)
    budget = Counter({w: min(c, rc[w]) for w, c in cc.items() if rc[w] > 0})
    m = sum(budget.values())
    if m == 0:
        return 0, 0
    shared_ref = [j for j, w in enumerate(ref) if budget[w] > 0]
    if len(shared_ref) > _EXACT_CHUNK_LIMIT:
        return m, _greedy_chunks(cand, ref, budget)
    slot_of = {j: s for s, j in enumerate(shared_ref)}

    @lru_cache(maxsize=None)
    def best(i: int, mask: int, prev_j: int) -> tuple[int, int]:
        """Max (matches, -chunks) from candidate position i onward."""
        if i == len(cand):
            return (0, 0)
        skip = best(i + 1, mask, -2)
        out_matches, out_neg = skip
        w = cand[i]
        if budget[w] > 0:
            for j in shared_ref:
                if ref[j] != w or mask & (1 << slot_of[j]):
                    continue
                sub_m, sub_neg = best(i + 1, mask | (1 << slot_of[j]), j)
                cost = 0 if j == prev_j + 1 else 1
                cand_val = (sub_m + 1, sub_neg - cost)
                if cand_val > (out_matches, out_neg):
                    out_matches, out_neg = cand_val
        return (out_matches, out_neg)

    matches, neg_chunks = best(0, 0, -2)
    best.cache_clear()
    return matches, -neg_chunks


def meteor_exact(candidate, reference) -> float:
    """Exact-match METEOR: recall-weighted F-mean with a fragmentation penalty.

    m unigram matches give P = m/|cand|, R = m/|ref|,
    F = 10PR / (R + 9P), penalty = 0.5 (chunks/m)^3, score = F (1 - penalty).
    Zero matches score 0.
    """
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise MetricError("reference must be non-empty")
    if not cand:
        return 0.0
    m, chunks = _minimal_chunks(cand, ref)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f_mean = 10.0 * p * r / (r + 9.0 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


# ---- corpus report --------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    """Corpus means of the text metrics; BLEU must not rise with n."""

    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge1: float
    rougeL: float
    meteor: float
    samples: int

    def __post_init__(self):
        series = (self.bleu1, self.bleu2, self.bleu3, self.bleu4)
        for n, (hi, lo) in enumerate(zip(series, series[1:]), start=1):
            if lo > hi + 1e-12:
                raise MetricError(f"BLEU-{n + 1} ({lo}) exceeds BLEU-{n} ({hi})")

    @classmethod
    def compute(cls, pairs) -> "MetricReport":
        """Build from (candidate, reference) pairs; means are order-independent."""
        pairs = list(pairs)
        if not pairs:
            raise MetricError("cannot report metrics over zero samples")
        return cls(
            bleu1=_mean([bleu(c, r, 1) for c, r in pairs]),
            bleu2=_mean([bleu(c, r, 2) for c, r in pairs]),
            bleu3=_mean([bleu(c, r, 3) for c, r in pairs]),
            bleu4=_mean([bleu(c, r, 4) for c, r in pairs]),
            rouge1=_mean([rouge_1(c, r) for c, r in pairs]),
            rougeL=_mean([rouge_l(c, r) for c, r in pairs]),
            meteor=_mean([meteor_exact(c, r) for c, r in pairs]),
            samples=len(pairs),
        )


# ---- selective prediction --------------------------------------------------------


@dataclass(frozen=True)
class ScoredSample:
    """One generated answer with its uncertainty and per-sample quality scores."""

    sample_id: int
    reference: str
    generated: str
    uncertainty: float
    rouge_l: float
    token_accuracy: float

    def __post_init__(self):
        if self.uncertainty < 0:
            raise MetricError(f"uncertainty must be >= 0, got {self.uncertainty}")


@dataclass(frozen=True)
class RiskCoveragePoint:
    coverage: float
    threshold: float
    value: float
    retained: int


def answer_uncertainty(trace) -> float:
    """Mean per-token entropy (nats) of a generation trace."""
    if not trace.entropies:
        raise MetricError("cannot score an empty generation")
    return _mean(trace.entropies)


def reject(uncertainty: float, tau: float) -> bool:
    """Refer iff uncertainty strictly exceeds the threshold."""
    if tau < 0:
        raise MetricError(f"threshold must be >= 0, got {tau}")
    return uncertainty > tau


_METRIC_FIELDS = {"rougeL": "rouge_l", "token-accuracy": "token_accuracy"}


def risk_coverage(samples, grid, metric: str = "rougeL") -> list[RiskCoveragePoint]:
    """Retained-set quality at each coverage level of a descending grid.

    Samples are ranked by ascending uncertainty (ties broken by sample id);
    coverage c retains the first round(c * N) samples, at least one.
    """
    samples = list(samples)
    if not samples:
        raise MetricError("need at least one scored sample")
    grid = [float(c) for c in grid]
    if not grid:
        raise MetricError("coverage grid must be non-empty")
    for c in grid:
        if not 0.0 < c <= 1.0:
            raise MetricError(f"coverage fractions must lie in (0, 1], got {c}")
    if any(a <= b for a, b in zip(grid, grid[1:])):
        raise MetricError("coverage grid must be strictly decreasing")
    if metric not in _METRIC_FIELDS:
        raise MetricError(f"metric must be one of {sorted(_METRIC_FIELDS)}, got {metric!r}")
    field = _METRIC_FIELDS[metric]
    ranked = sorted(samples, key=lambda s: (s.uncertainty, s.sample_id))
    n = len(ranked)
    points = []
    for c in grid:
        keep = max(1, int(math.floor(c * n + 0.5)))
        kept = ranked[:keep]
        points.append(RiskCoveragePoint(
            coverage=c,
            threshold=kept[-1].uncertainty,
            value=_mean([getattr(s, field) for s in kept]),
            retained=keep,
        ))
    return points
