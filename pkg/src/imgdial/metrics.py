"""Automatic evaluation: perplexity, BLEU-1, Rouge-L, embedding similarity,
distinct n-grams, topical-word ratios, and the gate-value analyses.

Everything here is a pure function over token sequences and numbers, so each
metric can be cross-checked against a brute-force oracle.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .tagging import TopicalLexicon


@dataclass
class MetricReport:
    ppl: float
    bleu1: float
    rouge_l: float
    emb_average: float
    emb_extrema: float
    emb_greedy: float
    dist1: float
    dist2: float
    topic: float
    novel_topic: float
    counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2) + "\n"

    def pretty(self) -> str:
        lines = ["metric            value", "-" * 24]
        for name in ("ppl", "bleu1", "rouge_l", "emb_average", "emb_extrema",
                     "emb_greedy", "dist1", "dist2", "topic", "novel_topic"):
            lines.append(f"{name:<16} {getattr(self, name):.4f}")
        for k, v in sorted(self.counts.items()):
            lines.append(f"{k:<16} {v}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------


def perplexity(log_probs_and_counts) -> float:
    """Pooled token-level perplexity from (sequence log-prob, token count)
    pairs: exp(-sum logp / sum count), not a mean of per-example values."""
    pairs = list(log_probs_and_counts)
    if not pairs:
        raise ValueError("empty evaluation set")
    total_lp = sum(p[0] for p in pairs)
    total_n = sum(p[1] for p in pairs)
    if total_n <= 0:
        raise ValueError("no tokens to evaluate")
    return float(np.exp(-total_lp / total_n))


# ---------------------------------------------------------------------------
# BLEU-1
# ---------------------------------------------------------------------------


def bleu1(candidates: list[list[str]], references: list[list[str]]) -> float:
    """Corpus-level modified unigram precision times the brevity penalty."""
    if len(candidates) != len(references):
        raise ValueError("candidate/reference counts differ")
    if not candidates:
        raise ValueError("empty candidate set")
    clipped, cand_len, ref_len = 0, 0, 0
    for cand, ref in zip(candidates, references):
        cand_counts = Counter(cand)
        ref_counts = Counter(ref)
        clipped += sum(min(n, ref_counts[tok]) for tok, n in cand_counts.items())
        cand_len += len(cand)
        ref_len += len(ref)
    if cand_len == 0:
        return 0.0
    precision = clipped / cand_len
    bp = 1.0 if cand_len > ref_len else float(np.exp(1.0 - ref_len / cand_len))
    return precision * bp


# ---------------------------------------------------------------------------
# Rouge-L
# ---------------------------------------------------------------------------


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates: list[list[str]], references: list[list[str]],
            beta: float = 1.2) -> float:
    """Mean per-pair LCS F-measure; beta weights recall over precision."""
    if len(candidates) != len(references):
        raise ValueError("candidate/reference counts differ")
    if not candidates:
        raise ValueError("empty candidate set")
    scores = []
    b2 = beta * beta
    for cand, ref in zip(candidates, references):
        lcs = _lcs_length(cand, ref)
        if lcs == 0 or not cand or not ref:
            scores.append(0.0)
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        scores.append((1 + b2) * p * r / (r + b2 * p))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# embedding metrics
# ---------------------------------------------------------------------------


def load_embedding_table(path) -> dict[str, np.ndarray]:
    """One token plus whitespace-separated decimals per line."""
    table = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                table[parts[0]] = np.array([float(x) for x in parts[1:]])
            except ValueError as e:
                raise ValueError(f"{path}: bad vector at line {lineno}") from e
    return table


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def _extrema_vector(vectors: np.ndarray) -> np.ndarray:
    """Per dimension, the value of maximum absolute magnitude, sign kept."""
    idx = np.argmax(np.abs(vectors), axis=0)
    return vectors[idx, np.arange(vectors.shape[1])]


def embedding_metrics(candidates: list[list[str]], references: list[list[str]],
                      table: dict[str, np.ndarray]):
    """Returns (average, extrema, greedy, n_scored, n_skipped).

    A pair is skipped (and counted) when either side has no in-table token.
    """
    if not table:
        raise ValueError("empty embedding table")
    if len(candidates) != len(references):
        raise ValueError("candidate/reference counts differ")
    avg_scores, ext_scores, gre_scores = [], [], []
    skipped = 0
    for cand, ref in zip(candidates, references):
        cv = np.array([table[t] for t in cand if t in table])
        rv = np.array([table[t] for t in ref if t in table])
        if cv.size == 0 or rv.size == 0:
            skipped += 1
            continue
        avg_scores.append(_cosine(cv.mean(axis=0), rv.mean(axis=0)))
        ext_scores.append(_cosine(_extrema_vector(cv), _extrema_vector(rv)))
        fwd = float(np.mean([max(_cosine(c, r) for r in rv) for c in cv]))
        bwd = float(np.mean([max(_cosine(r, c) for c in cv) for r in rv]))
        gre_scores.append(0.5 * (fwd + bwd))
    if not avg_scores:
        raise ValueError("no pair had tokens in the embedding table")
    return (float(np.mean(avg_scores)), float(np.mean(ext_scores)),
            float(np.mean(gre_scores)), len(avg_scores), skipped)


# ---------------------------------------------------------------------------
# distinct n-grams
# ---------------------------------------------------------------------------


def distinct_n(responses: list[list[str]], n: int) -> float:
    """Distinct n-grams across all responses over total n-gram count."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    seen, total = set(), 0
    for resp in responses:
        for i in range(len(resp) - n + 1):
            seen.add(tuple(resp[i : i + n]))
            total += 1
    return len(seen) / total if total else 0.0


# ---------------------------------------------------------------------------
# topical metrics
# ---------------------------------------------------------------------------


def topic_metrics(pairs, lexicon: TopicalLexicon,
                  exclude_contextless: bool = True):
    """pairs: iterable of (context tokens, generated response tokens).

    topic: mean share of topical words in the generated response.
    novel_topic: the same after removing topical words already present in
    the context.  Pairs whose context has no topical word can be excluded.
    Returns (topic, novel_topic, n_used, n_excluded).
    """
    topic_scores, novel_scores = [], []
    excluded = 0
    for context, generated in pairs:
        generated = list(generated)
        if len(generated) == 0:
            raise ValueError("empty generated response")
        ctx_topical = lexicon.topical_set(context)
        if exclude_contextless and not ctx_topical:
            excluded += 1
            continue
        gen_topical = lexicon.topical_set(generated)
        topic_scores.append(len(gen_topical) / len(generated))
        novel_scores.append(len(gen_topical - ctx_topical) / len(generated))
    if not topic_scores:
        raise ValueError("no usable pairs for topical metrics")
    return (float(np.mean(topic_scores)), float(np.mean(novel_scores)),
            len(topic_scores), excluded)


# ---------------------------------------------------------------------------
# gate analyses
# ---------------------------------------------------------------------------


@dataclass
class GateReport:
    """Gate statistics: by context topical-word count, and by emitted word
    kind on low-topical contexts."""

    bins: list[dict] = field(default_factory=list)
    word_kinds: list[dict] = field(default_factory=list)

    def bins_csv(self) -> str:
        lines = ["bin_label,count,mean_gate"]
        lines += [f"{b['bin_label']},{b['count']},{b['mean_gate']!r}" for b in self.bins]
        return "\n".join(lines) + "\n"

    def word_kinds_csv(self) -> str:
        lines = ["word_kind,count,mean_gate"]
        lines += [
            f"{w['word_kind']},{w['count']},{w['mean_gate']!r}" for w in self.word_kinds
        ]
        return "\n".join(lines) + "\n"


def gate_analysis(gate_sequences, emitted_tokens, contexts,
                  lexicon: TopicalLexicon, *, bin_cap: int = 8,
                  low_topical_max: int = 5) -> GateReport:
    """Per-dialogue gate traces against context topicality.

    gate_sequences[i] is the list of per-step gates for dialogue i;
    emitted_tokens[i] the tokens emitted at those steps; contexts[i] the
    flattened context tokens.  Contexts without topical words are excluded,
    matching the analysis protocol.  Dialogues with at least `bin_cap`
    topical words share the top bin.
    """
    if not (len(gate_sequences) == len(emitted_tokens) == len(contexts)):
        raise ValueError("gate/token/context lengths differ")
    by_bin: dict[int, list[float]] = {}
    kind_gates = {"topical": [], "stop": []}
    for gates, tokens, context in zip(gate_sequences, emitted_tokens, contexts):
        if len(gates) != len(tokens):
            raise ValueError("one gate per emitted token required")
        if len(gates) == 0:
            continue
        n_topical = len(lexicon.topical_set(context))
        if n_topical == 0:
            continue
        b = min(n_topical, bin_cap)
        by_bin.setdefault(b, []).append(float(np.mean(gates)))
        if n_topical <= low_topical_max:
            tags = lexicon.tagger(list(tokens))
            for g, tok, tag in zip(gates, tokens, tags):
                kind = lexicon.word_kind(tok, tag)
                if kind in kind_gates:
                    kind_gates[kind].append(float(g))
    report = GateReport()
    for b in sorted(by_bin):
        label = f"{b}+" if b == bin_cap else str(b)
        report.bins.append({
            "bin_label": label,
            "count": len(by_bin[b]),
            "mean_gate": float(np.mean(by_bin[b])),
        })
    for kind in ("topical", "stop"):
        vals = kind_gates[kind]
        report.word_kinds.append({
            "word_kind": kind,
            "count": len(vals),
            "mean_gate": float(np.mean(vals)) if vals else float("nan"),
        })
    return report
