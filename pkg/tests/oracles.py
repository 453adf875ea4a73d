"""Independent brute-force oracles used to cross-check the package.

Everything here is computed straight from the defining formulas with the
dumbest data structures that work (per-document loops, string windows,
exact rational arithmetic). Nothing imports from qtod's scoring or metric
code paths, so agreement between the two is meaningful.
"""

from __future__ import annotations

import math
import re
from fractions import Fraction

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def brute_tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def brute_bm25_score(
    query_tokens: list[str],
    doc_tokens: list[str],
    all_docs: list[list[str]],
    k1: float = 1.2,
    b: float = 0.75,
) -> float:
    """Okapi BM25 for one document, recomputing corpus stats from scratch.

    IDF is floored at zero. Query terms contribute once per occurrence in
    the query, in query order (so float accumulation order matches a
    term-at-a-time scorer exactly).
    """
    n_docs = len(all_docs)
    if n_docs == 0:
        return 0.0
    avgdl = sum(len(d) for d in all_docs) / n_docs
    score = 0.0
    for term in query_tokens:
        freq = doc_tokens.count(term)
        if freq == 0:
            continue
        df = sum(1 for d in all_docs if term in d)
        idf = max(0.0, math.log((n_docs - df + 0.5) / (df + 0.5)))
        if avgdl == 0:
            continue
        denom = freq + k1 * (1.0 - b + b * len(doc_tokens) / avgdl)
        score += idf * freq * (k1 + 1.0) / denom
    return score


def brute_bm25_topn(
    query: str,
    docs: list[tuple[str, str]],
    n: int,
    k1: float = 1.2,
    b: float = 0.75,
) -> list[tuple[str, float]]:
    """Full ranking by per-document scoring: (doc_id, text) pairs in,
    top-n nonzero (doc_id, score) out, ties broken by ascending doc_id."""
    query_tokens = brute_tokenize(query)
    tokenized = [(doc_id, brute_tokenize(text)) for doc_id, text in docs]
    corpus = [toks for _, toks in tokenized]
    scored = []
    for doc_id, toks in tokenized:
        s = brute_bm25_score(query_tokens, toks, corpus, k1=k1, b=b)
        if s > 0.0:
            scored.append((doc_id, s))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:n]


def brute_match_entities(text: str, lexicon: list[str]) -> set[str]:
    """Longest-match entity extraction by raw string windows.

    Works on pre-canonicalized text and lexicon: pads the text with
    spaces and checks every lexicon entry (longest first, in words) for a
    space-delimited occurrence over the not-yet-consumed region.
    """
    words = text.split()
    by_len = sorted(lexicon, key=lambda e: (-len(e.split()), e))
    taken = [False] * len(words)
    found: set[str] = set()
    for entry in by_len:
        entry_words = entry.split()
        width = len(entry_words)
        if width == 0:
            continue
        for start in range(0, len(words) - width + 1):
            if any(taken[start : start + width]):
                continue
            if words[start : start + width] == entry_words:
                found.add(entry)
                for i in range(start, start + width):
                    taken[i] = True
    return found


def brute_entity_counts(
    pred_texts: list[str],
    gold_texts: list[str],
    lexicon: list[str],
) -> tuple[int, int, int]:
    """Micro TP/FP/FN by explicit per-entity loops. Turns whose gold
    response holds no lexicon entity are dropped from the tally."""
    tp = fp = fn = 0
    for pred, gold in zip(pred_texts, gold_texts):
        gold_ents = brute_match_entities(gold, lexicon)
        if not gold_ents:
            continue
        pred_ents = brute_match_entities(pred, lexicon)
        for e in pred_ents:
            if e in gold_ents:
                tp += 1
            else:
                fp += 1
        for e in gold_ents:
            if e not in pred_ents:
                fn += 1
    return tp, fp, fn


def brute_entity_f1(
    pred_texts: list[str],
    gold_texts: list[str],
    lexicon: list[str],
) -> tuple[float, float, float, tuple[int, int, int]]:
    """Exact-rational micro P/R/F1 from the brute-force counts."""
    tp, fp, fn = brute_entity_counts(pred_texts, gold_texts, lexicon)
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = Fraction(2 * tp, 2 * tp + fp + fn) if tp + fp + fn else Fraction(0)
    return float(p), float(r), float(f1), (tp, fp, fn)


def brute_bleu(pred_texts: list[str], ref_texts: list[str]) -> Fraction | float:
    """Corpus BLEU-4 computed with exact rationals, for freezing toy values.

    Case-insensitive, punctuation split off as its own tokens, uniform
    1/4 weights, multiplicative brevity penalty, no smoothing. Returns a
    float (the geometric mean forces irrational arithmetic at the end).
    """

    def toks(text: str) -> list[str]:
        return re.sub(r"([^\w\s])", r" \1 ", text.lower()).split()

    def ngrams(tokens: list[str], order: int) -> dict[tuple[str, ...], int]:
        out: dict[tuple[str, ...], int] = {}
        for i in range(len(tokens) - order + 1):
            g = tuple(tokens[i : i + order])
            out[g] = out.get(g, 0) + 1
        return out

    totals = [0, 0, 0, 0]
    clipped = [0, 0, 0, 0]
    cand_len = 0
    ref_len = 0
    for pred, ref in zip(pred_texts, ref_texts):
        pt, rt = toks(pred), toks(ref)
        cand_len += len(pt)
        ref_len += len(rt)
        for order in range(1, 5):
            pg = ngrams(pt, order)
            rg = ngrams(rt, order)
            totals[order - 1] += sum(pg.values())
            clipped[order - 1] += sum(min(c, rg.get(g, 0)) for g, c in pg.items())
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for order in range(4):
        if totals[order] == 0:
            continue  # no n-grams of this order exist; neutral
        if clipped[order] == 0:
            return 0.0
        log_sum += 0.25 * math.log(Fraction(clipped[order], totals[order]))
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - Fraction(ref_len, cand_len))
    return bp * math.exp(log_sum)
