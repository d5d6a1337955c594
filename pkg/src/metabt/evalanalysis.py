"""Translation metrics and the training-run analyses.

Every function here is a pure function of its inputs, so re-running an
analysis over saved logs reproduces its numbers exactly.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from . import seq2seq as s2s
from .autodiff import ContractError
from .seq2seq import ModelParams, Pair, Sentence


def strip_special(sent: Sequence[int]) -> tuple[int, ...]:
    return tuple(t for t in sent if t >= s2s.FIRST_CONTENT)


# --------------------------------------------------------------------------
# BLEU


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    candidate_tokens: int
    reference_tokens: int

    def to_json(self) -> dict:
        return {"bleu": self.bleu, "precisions": self.precisions,
                "brevity_penalty": self.brevity_penalty,
                "candidate_tokens": self.candidate_tokens,
                "reference_tokens": self.reference_tokens}


def _ngrams(toks: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def sentence_stats(cand: Sequence[Hashable], ref: Sequence[Hashable], max_n: int = 4) -> np.ndarray:
    """[matches_1..n, totals_1..n, cand_len, ref_len] for one sentence pair."""
    row = np.zeros(2 * max_n + 2)
    for n in range(1, max_n + 1):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        row[n - 1] = sum(min(v, r[g]) for g, v in c.items())
        row[max_n + n - 1] = max(len(cand) - n + 1, 0)
    row[-2], row[-1] = len(cand), len(ref)
    return row


def _bleu_from_stats(stats: np.ndarray, max_n: int, smooth: bool) -> np.ndarray:
    """Vectorised BLEU over the leading axes of summed statistics."""
    m = stats[..., :max_n]
    t = stats[..., max_n:2 * max_n]
    c, r = stats[..., -2], stats[..., -1]
    p = np.empty_like(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        p[..., 0] = np.where(t[..., 0] > 0, m[..., 0] / np.maximum(t[..., 0], 1), 0.0)
        if smooth:
            p[..., 1:] = (m[..., 1:] + 1.0) / (t[..., 1:] + 1.0)
        else:
            p[..., 1:] = np.where(t[..., 1:] > 0, m[..., 1:] / np.maximum(t[..., 1:], 1), 0.0)
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)
        bp = np.where(c >= r, 1.0, np.where(c > 0, np.exp(1.0 - r / np.maximum(c, 1)), 0.0))
        score = bp * np.exp(logp.mean(axis=-1))
    return 100.0 * np.nan_to_num(score, nan=0.0), p, bp


def corpus_bleu(candidates: Sequence[Sequence[Hashable]], references: Sequence[Sequence[Hashable]],
                max_n: int = 4, smooth: bool = True) -> BleuReport:
    """Corpus BLEU with clipped n-gram precision and a brevity penalty.

    With ``smooth`` the n >= 2 precisions use add-one counts. Inputs are token
    sequences without BOS/EOS/PAD.
    """
    if len(candidates) != len(references):
        raise ContractError("candidates and references differ in length")
    if not candidates:
        raise ContractError("empty corpus")
    stats = sum(sentence_stats(c, r, max_n) for c, r in zip(candidates, references))
    score, p, bp = _bleu_from_stats(stats, max_n, smooth)
    return BleuReport(float(score), [float(x) for x in p], float(bp), int(stats[-2]), int(stats[-1]))


def paired_bootstrap(cand_a, cand_b, refs, n_resamples: int = 2000,
                     rng: np.random.Generator | None = None, max_n: int = 4) -> float:
    """One-sided p-value for BLEU(A) > BLEU(B) by paired bootstrap resampling.

    Returns the fraction of resamples in which A does not beat B.
    """
    if not len(cand_a) == len(cand_b) == len(refs):
        raise ContractError("bootstrap inputs are not aligned")
    if n_resamples < 1000:
        raise ContractError("use at least 1000 resamples")
    rng = rng if rng is not None else np.random.default_rng(0)
    sa = np.stack([sentence_stats(c, r, max_n) for c, r in zip(cand_a, refs)])
    sb = np.stack([sentence_stats(c, r, max_n) for c, r in zip(cand_b, refs)])
    n = len(refs)
    worse = 0
    for lo in range(0, n_resamples, 500):
        idx = rng.integers(0, n, size=(min(500, n_resamples - lo), n))
        ba = _bleu_from_stats(sa[idx].sum(axis=1), max_n, True)[0]
        bb = _bleu_from_stats(sb[idx].sum(axis=1), max_n, True)[0]
        worse += int(np.sum(ba <= bb))
    return worse / n_resamples


# --------------------------------------------------------------------------
# likelihood


def corpus_nll(params: ModelParams, pairs: Sequence[Pair], batch_size: int = 64) -> tuple[float, int]:
    """Summed target NLL and target token count over a corpus."""
    total, count = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        lp, mask = s2s.token_logprobs(params, pairs[i:i + batch_size])
        total -= float((lp.data * mask).sum())
        count += int(mask.sum())
    return total, count


def perplexity(params: ModelParams, pairs: Sequence[Pair], batch_size: int = 64) -> float:
    if not pairs:
        raise ContractError("perplexity of an empty corpus")
    total, count = corpus_nll(params, pairs, batch_size)
    mean = total / count
    # exp overflows past ~709 nats per token; such a model is just infinitely perplexed
    return math.exp(mean) if mean < 709.0 else math.inf


def translate_corpus(params: ModelParams, sources: Sequence[Sentence], batch_size: int = 64) -> list[Sentence]:
    out: list[Sentence] = []
    for i in range(0, len(sources), batch_size):
        out.extend(s2s.greedy_batch(params, sources[i:i + batch_size]))
    return out


def evaluate_bleu(params: ModelParams, pairs: Sequence[Pair]) -> tuple[BleuReport, list[Sentence]]:
    hyps = translate_corpus(params, [s for s, _ in pairs])
    rep = corpus_bleu([strip_special(h) for h in hyps], [strip_special(t) for _, t in pairs])
    return rep, hyps


# --------------------------------------------------------------------------
# analyses


@dataclass
class CoverageCurve:
    bin_start: list[int]
    bin_end: list[int]
    coverage: list[float]
    low_tokens: list[int]
    content_tokens: list[int]

    def rows(self) -> list[dict]:
        return [{"decile": i, "first_step": a, "last_step": b, "coverage_pct": c,
                 "low_resource_tokens": lo, "content_tokens": n}
                for i, (a, b, c, lo, n) in enumerate(zip(self.bin_start, self.bin_end, self.coverage,
                                                          self.low_tokens, self.content_tokens))]


def coverage_curve(log: Sequence[tuple[int, Sequence[Sequence[int]]]], low_vocab,
                   n_bins: int = 10) -> CoverageCurve:
    """Percentage of pseudo-source content tokens that lie in ``low_vocab``, per step decile.

    ``log`` holds (step, pseudo sources generated at that step).
    """
    if not log:
        raise ContractError("empty pseudo-source log")
    low = set(low_vocab)
    steps = [s for s, _ in log]
    lo, hi = min(steps), max(steps)
    span = hi - lo + 1
    low_n = [0] * n_bins
    tot_n = [0] * n_bins
    for step, sents in log:
        b = (step - lo) * n_bins // span
        for sent in sents:
            toks = strip_special(sent)
            tot_n[b] += len(toks)
            low_n[b] += sum(1 for t in toks if t in low)
    starts = [lo + (b * span + n_bins - 1) // n_bins for b in range(n_bins)]
    ends = [lo + ((b + 1) * span + n_bins - 1) // n_bins - 1 for b in range(n_bins)]
    cov = [100.0 * a / n if n else 0.0 for a, n in zip(low_n, tot_n)]
    return CoverageCurve(starts, ends, cov, low_n, tot_n)


@dataclass
class LengthDiffHistogram:
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def mass_outside(self, k: int) -> int:
        """Number of sentences with |reference length - output length| > k."""
        return sum(c for d, c in self.counts.items() if abs(d) > k)


def length_diff_histogram(outputs: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> LengthDiffHistogram:
    if len(outputs) != len(references):
        raise ContractError("outputs and references are not aligned")
    c = Counter(len(strip_special(r)) - len(strip_special(o)) for o, r in zip(outputs, references))
    return LengthDiffHistogram(dict(sorted(c.items())))


@dataclass
class WordF1Buckets:
    edges: list[float]
    f1: list[float]
    n_words: list[int]
    word_f1: dict[int, float]


def word_f1(outputs: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> dict[int, float]:
    """Per-word F1 from clipped occurrence counts over the corpus."""
    matched, produced, expected = Counter(), Counter(), Counter()
    for o, r in zip(outputs, references):
        co, cr = Counter(strip_special(o)), Counter(strip_special(r))
        produced.update(co)
        expected.update(cr)
        for w, n in co.items():
            matched[w] += min(n, cr[w])
    out = {}
    for w in set(produced) | set(expected):
        p = matched[w] / produced[w] if produced[w] else 0.0
        r = matched[w] / expected[w] if expected[w] else 0.0
        out[w] = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return out


def word_f1_buckets(outputs, references, frequency_corpus: Sequence[Sequence[int]],
                    edges: Sequence[float] = (0, 1, 4, 16, 64, math.inf)) -> WordF1Buckets:
    """Macro-averaged word F1 within buckets of training-corpus frequency.

    Bucket i holds words whose frequency f in ``frequency_corpus`` satisfies
    edges[i] <= f < edges[i+1]. Empty buckets report F1 0 with n_words 0.
    """
    if len(outputs) != len(references):
        raise ContractError("outputs and references are not aligned")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ContractError("bucket edges must be strictly increasing")
    freq = Counter(t for s in frequency_corpus for t in strip_special(s))
    scores = word_f1(outputs, references)
    sums = [0.0] * (len(edges) - 1)
    counts = [0] * (len(edges) - 1)
    for w, f1 in scores.items():
        f = freq[w]
        for i in range(len(edges) - 1):
            if edges[i] <= f < edges[i + 1]:
                sums[i] += f1
                counts[i] += 1
                break
    f1s = [s / n if n else 0.0 for s, n in zip(sums, counts)]
    return WordF1Buckets(list(edges), f1s, counts, scores)


def pseudo_prob_track(snapshots: Mapping[int, ModelParams],
                      batches: Mapping[int, Sequence[Pair]]) -> list[tuple[int, float]]:
    """Mean per-token forward log-probability of each logged pseudo batch.

    ``snapshots[t]`` must be the forward model that was trained on
    ``batches[t]`` (the parameters before step t's update).
    """
    if set(snapshots) != set(batches):
        missing = sorted(set(snapshots) ^ set(batches))
        raise ContractError(f"snapshots and pseudo batches are misaligned at steps {missing[:5]}")
    out = []
    for step in sorted(snapshots):
        total, count = corpus_nll(snapshots[step], batches[step])
        out.append((step, -total / count))
    return out
