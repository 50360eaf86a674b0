"""Corpus BLEU, ROUGE-L (LCS F-measure) and exact match.

Strings are split on whitespace by default. The synthetic task outputs are
unspaced symbol strings, so callers pass ``level="char"`` to score them one
symbol per token.
"""
from __future__ import annotations

import csv
import math
import os
from collections import Counter
from typing import Iterable, Sequence

LEVELS = ("word", "char")


def tokenize(text, level: str = "word") -> list:
    if not isinstance(text, (str, bytes)):
        return list(text)
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    if level == "char":
        return [c for c in text if not c.isspace()]
    if level == "word":
        return text.split()
    raise ValueError(f"unknown tokenization level {level!r}")


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: Sequence, ref: Sequence, max_n: int = 4) -> tuple[list[int], list[int], int, int]:
    """Clipped n-gram matches, hypothesis n-gram totals, hypothesis and reference lengths."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        h, r = ngrams(hyp, n), ngrams(ref, n)
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals, len(hyp), len(ref)


def _bleu_from_stats(matches, totals, hyp_len, ref_len, smooth: bool) -> float:
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    used = 0
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        if t == 0:
            # effective order: orders longer than the hypothesis are skipped
            continue
        if smooth and n > 1:
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        log_p += math.log(m / t)
        used += 1
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / used)


def corpus_bleu(hypotheses, references, max_n: int = 4, level: str = "word") -> float:
    """Unsmoothed corpus BLEU in [0, 100] with brevity penalty."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    M, Tt = [0] * max_n, [0] * max_n
    hl = rl = 0
    for h, r in zip(hypotheses, references):
        m, t, a, b = bleu_stats(tokenize(h, level), tokenize(r, level), max_n)
        M = [x + y for x, y in zip(M, m)]
        Tt = [x + y for x, y in zip(Tt, t)]
        hl += a
        rl += b
    if rl == 0:
        raise ValueError("references are empty")
    return _bleu_from_stats(M, Tt, hl, rl, smooth=False)


def sentence_bleu(hypothesis, reference, max_n: int = 4, level: str = "word") -> float:
    """Single-pair BLEU with add-one smoothing on the n > 1 precisions."""
    m, t, a, b = bleu_stats(tokenize(hypothesis, level), tokenize(reference, level), max_n)
    return _bleu_from_stats(m, t, a, b, smooth=True)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, reference, level: str = "word") -> float:
    h, r = tokenize(hypothesis, level), tokenize(reference, level)
    if not h or not r:
        return 0.0
    lcs = lcs_length(h, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(h), lcs / len(r)
    return 2 * p * rec / (p + rec)


def corpus_rouge_l(hypotheses, references, level: str = "word") -> float:
    if len(hypotheses) != len(references) or not hypotheses:
        raise ValueError("need equal-length, non-empty lists")
    return sum(rouge_l(h, r, level) for h, r in zip(hypotheses, references)) / len(hypotheses)


def exact_match(hyps, refs) -> float:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    return sum(str(h).strip() == str(r).strip() for h, r in zip(hyps, refs)) / len(hyps)


def score_all(hyps, refs, level: str = "char") -> dict[str, float]:
    """BLEU, ROUGE-L (as a percentage) and exact match (as a percentage)."""
    return {
        "bleu": corpus_bleu(hyps, refs, level=level),
        "rouge_l": 100.0 * corpus_rouge_l(hyps, refs, level=level),
        "exact_match": 100.0 * exact_match(hyps, refs),
    }


METRIC_COLUMNS = ("metric", "value", "split", "config_id")


def write_metric_rows(rows: Iterable[dict], path, append: bool = False) -> None:
    path_exists = append and os.path.exists(path)
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if not path_exists:
            w.writeheader()
        for row in rows:
            w.writerow({k: (f"{row[k]:.4f}" if k == "value" else row[k]) for k in METRIC_COLUMNS})


def metric_rows(scores: dict[str, float], split: str, config_id: str) -> list[dict]:
    return [{"metric": k, "value": v, "split": split, "config_id": config_id} for k, v in scores.items()]
