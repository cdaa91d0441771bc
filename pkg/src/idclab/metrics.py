"""Multi-reference caption metrics: BLEU-4, ROUGE-L, METEOR-lite (M*), CIDEr-D.

All functions take whitespace-tokenizable strings or pre-split token lists.
Nothing here draws random numbers; every score is a pure function of text.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from . import kernels

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2
METEOR_ALPHA, METEOR_GAMMA, METEOR_THETA = 0.9, 0.5, 3.0
CIDER_SIGMA = 6.0
STEM_SUFFIXES = ("ing", "es", "ed", "s", "e")
METRIC_KEYS = ("B", "R", "M", "C")
METRIC_NAMES = {"B": "BLEU-4", "R": "ROUGE-L", "M": "METEOR*", "C": "CIDEr-D"}


class MetricsError(ValueError):
    pass


class DegenerateCorpusWarning(UserWarning):
    """CIDEr-D idf is identically zero on a one-sample corpus."""


def _toks(s) -> list[str]:
    return s.lower().split() if isinstance(s, str) else list(s)


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ------------------------------------------------------------------
def _closest_ref_len(c_len: int, ref_lens) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c_len), r))


def bleu_stats(candidate, references, max_n: int = 4):
    """Clipped matches and totals per order, candidate length, closest ref length."""
    cand = _toks(candidate)
    refs = [_toks(r) for r in references]
    matches, totals = [], []
    for n in range(1, max_n + 1):
        c = ngrams(cand, n)
        best: Counter = Counter()
        for r in refs:
            best |= ngrams(r, n)
        matches.append(sum(min(k, best[g]) for g, k in c.items()))
        totals.append(max(len(cand) - n + 1, 0))
    return matches, totals, len(cand), _closest_ref_len(len(cand), [len(r) for r in refs])


def _bleu_from_stats(matches, totals, c_len, r_len) -> float:
    if c_len == 0:
        return 0.0
    logp = 0.0
    for m, t in zip(matches, totals):
        # add-epsilon on zero precisions (incl. orders longer than the candidate)
        logp += math.log(m / t) if m > 0 else math.log(BLEU_EPS)
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(logp / len(matches))


def bleu4(candidate, references) -> float:
    if not references:
        raise MetricsError("bleu4 needs at least one reference")
    return _bleu_from_stats(*bleu_stats(candidate, references))


def corpus_bleu4(candidates, references_per_candidate) -> float:
    """Corpus BLEU (pooled counts); not an average of sentence scores."""
    M, T, C, R = [0] * 4, [0] * 4, 0, 0
    for cand, refs in zip(candidates, references_per_candidate):
        m, t, c, r = bleu_stats(cand, refs)
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        C += c
        R += r
    return _bleu_from_stats(M, T, C, R)


# -- ROUGE-L ---------------------------------------------------------------
def _codes(*seqs):
    vocab: dict[str, int] = {}
    return [[vocab.setdefault(w, len(vocab)) for w in s] for s in seqs]


def lcs(a, b) -> int:
    ca, cb = _codes(a, b)
    return int(kernels.lcs_length(ca, cb))


def rouge_l(candidate, references, beta: float = ROUGE_BETA) -> float:
    cand = _toks(candidate)
    if not references:
        raise MetricsError("rouge_l needs at least one reference")
    if not cand:
        return 0.0
    best = 0.0
    for ref in references:
        r = _toks(ref)
        n = lcs(cand, r) if r else 0
        if n == 0:
            continue
        p, rec = n / len(cand), n / len(r)
        best = max(best, (1 + beta**2) * p * rec / (rec + beta**2 * p))
    return best


# -- METEOR-lite -----------------------------------------------------------
def stem(word: str) -> str:
    """Crude suffix stripper: drop the longest listed suffix leaving >= 3 chars."""
    for suf in STEM_SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[: -len(suf)]
    return word


def _min_chunks(cand_cls, ref_cls, quota) -> int:
    """Fewest chunks over alignments that match ``quota[k]`` words of each class.

    Depth-first over candidate positions with branch-and-bound on the chunk count.
    """
    ref_pos: dict[str, list[int]] = {}
    for j, k in enumerate(ref_cls):
        ref_pos.setdefault(k, []).append(j)
    cand_left = Counter(k for k in cand_cls if k in quota)
    used = [False] * len(ref_cls)
    need = dict(quota)
    best = [len(cand_cls) + 1]

    def dfs(i, chunks, prev_i, prev_j):
        if chunks >= best[0]:
            return
        if i == len(cand_cls):
            if not any(need.values()):
                best[0] = chunks
            return
        k = cand_cls[i]
        if k in need:
            cand_left[k] -= 1
            if need[k] > 0:
                # try extending the current chunk first so good bounds come early
                opts = ref_pos[k]
                order = sorted(opts, key=lambda j: (not (prev_i == i - 1 and j == prev_j + 1), j))
                for j in order:
                    if used[j]:
                        continue
                    used[j] = True
                    need[k] -= 1
                    cont = prev_i == i - 1 and j == prev_j + 1
                    dfs(i + 1, chunks + (0 if cont else 1), i, j)
                    need[k] += 1
                    used[j] = False
            if cand_left[k] >= need[k]:  # may still leave this word unmatched
                dfs(i + 1, chunks, prev_i, prev_j)
            cand_left[k] += 1
        else:
            dfs(i + 1, chunks, prev_i, prev_j)

    dfs(0, 0, -2, -2)
    return best[0]


def meteor_alignment(candidate, reference) -> tuple[int, int]:
    """(matches, chunks) of a max-match, min-chunk exact+stem alignment."""
    c = [stem(w) for w in _toks(candidate)]
    r = [stem(w) for w in _toks(reference)]
    cc, rc = Counter(c), Counter(r)
    quota = {k: min(cc[k], rc[k]) for k in cc if k in rc}
    m = sum(quota.values())
    if m == 0:
        return 0, 0
    return m, _min_chunks(c, r, quota)


def meteor_single(candidate, reference) -> float:
    c, r = _toks(candidate), _toks(reference)
    if not c or not r:
        return 0.0
    m, ch = meteor_alignment(c, r)
    if m == 0:
        return 0.0
    p, rec = m / len(c), m / len(r)
    fmean = p * rec / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * rec)
    return fmean * (1.0 - METEOR_GAMMA * (ch / m) ** METEOR_THETA)


def meteor_lite(candidate, references) -> float:
    if not references:
        raise MetricsError("meteor_lite needs at least one reference")
    return max(meteor_single(candidate, r) for r in references)


# -- CIDEr-D ---------------------------------------------------------------
def _cook(tokens, max_n=4) -> Counter:
    out: Counter = Counter()
    for n in range(1, max_n + 1):
        out.update(ngrams(tokens, n))
    return out


def document_frequency(references_per_candidate, max_n: int = 4) -> Counter:
    """Number of samples whose reference set contains each n-gram."""
    df: Counter = Counter()
    for refs in references_per_candidate:
        seen = set()
        for r in refs:
            seen.update(_cook(_toks(r), max_n))
        df.update(seen)
    return df


def _vec(counts: Counter, df: Counter, log_n: float, max_n: int):
    vec = [dict() for _ in range(max_n)]
    norm = [0.0] * max_n
    for g, tf in counts.items():
        n = len(g) - 1
        v = tf * (log_n - math.log(max(1.0, df[g])))
        vec[n][g] = v
        norm[n] += v * v
    return vec, [math.sqrt(x) for x in norm]


def _sim(vh, vr, nh, nr, lh, lr, sigma, max_n):
    delta = lh - lr
    out = [0.0] * max_n
    for n in range(max_n):
        for g, v in vh[n].items():
            if g in vr[n]:
                out[n] += min(v, vr[n][g]) * vr[n][g]
        if nh[n] != 0 and nr[n] != 0:
            out[n] /= nh[n] * nr[n]
        out[n] *= math.exp(-(delta**2) / (2 * sigma**2))
    return out


def cider_d(candidates, references_per_candidate, sigma: float = CIDER_SIGMA, max_n: int = 4) -> list[float]:
    """Per-sample CIDEr-D in [0, 10]; idf comes from this corpus's references."""
    refs_all = [[_toks(r) for r in refs] for refs in references_per_candidate]
    if len(candidates) != len(refs_all):
        raise MetricsError(f"{len(candidates)} candidates but {len(refs_all)} reference sets")
    if any(not refs for refs in refs_all):
        raise MetricsError("every sample needs at least one reference")
    if len(refs_all) == 1:
        warnings.warn("CIDEr-D on a single-sample corpus: idf is zero, scores are degenerate", DegenerateCorpusWarning, stacklevel=2)
    df = document_frequency(refs_all, max_n)
    log_n = math.log(float(len(refs_all)))
    scores = []
    for cand, refs in zip(candidates, refs_all):
        ct = _toks(cand)
        vh, nh = _vec(_cook(ct, max_n), df, log_n, max_n)
        total = [0.0] * max_n
        for r in refs:
            vr, nr = _vec(_cook(r, max_n), df, log_n, max_n)
            s = _sim(vh, vr, nh, nr, len(ct), len(r), sigma, max_n)
            total = [a + b for a, b in zip(total, s)]
        scores.append(10.0 * (sum(total) / max_n) / len(refs))
    return scores


# -- corpus evaluation -----------------------------------------------------
@dataclass
class MetricReport:
    per_sample: list[dict]
    per_category: dict[str, dict]
    overall: dict[str, float]
    corpus_bleu4: float
    categories: list[str] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = [{"category": c, **self.per_category[c]} for c in self.categories]
        out.append({"category": "Overall", "n": len(self.per_sample), **self.overall})
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["category", "n"] + [METRIC_NAMES[k] for k in METRIC_KEYS])
            for row in self.rows():
                w.writerow([row["category"], row["n"]] + [f"{row[k]:.6f}" for k in METRIC_KEYS])

    def to_markdown(self) -> str:
        head = "| Category | n | " + " | ".join(METRIC_NAMES[k] for k in METRIC_KEYS) + " |"
        lines = [head, "|" + "---|" * (2 + len(METRIC_KEYS))]
        for row in self.rows():
            lines.append(f"| {row['category']} | {row['n']} | " + " | ".join(f"{row[k]:.4f}" for k in METRIC_KEYS) + " |")
        lines.append("")
        lines.append(f"Corpus BLEU-4 (pooled counts, not a per-sample mean): {self.corpus_bleu4:.4f}")
        lines.append("METEOR* = exact + suffix-stem matching only (no synonym table).")
        return "\n".join(lines) + "\n"

    def write(self, csv_path, md_path) -> None:
        self.to_csv(csv_path)
        Path(md_path).write_text(self.to_markdown(), encoding="utf-8")


def corpus_evaluate(predictions: dict, samples, category_order=None) -> MetricReport:
    """Score ``predictions`` (id -> caption) against ``samples``.

    ``samples`` is an iterable of objects with ``id``, ``captions`` and
    ``category`` attributes (e.g. dataset triplets) or equivalent dicts.
    """
    samples = [s if isinstance(s, dict) else {"id": s.id, "captions": s.captions, "category": s.category} for s in samples]
    ids = [s["id"] for s in samples]
    for i in ids:
        if i not in predictions:
            raise MetricsError(f"missing prediction for id {i}")
    extra = set(predictions) - set(ids)
    if extra:
        raise MetricsError(f"prediction for unknown id {sorted(extra)[0]}")
    cands = [predictions[i] for i in ids]
    refs = [s["captions"] for s in samples]
    with warnings.catch_warnings():
        if len(samples) == 1:
            warnings.simplefilter("ignore", DegenerateCorpusWarning)
        cider = cider_d(cands, refs)
    per = []
    for s, cand, c in zip(samples, cands, cider):
        per.append(
            {
                "id": s["id"],
                "category": s["category"],
                "prediction": cand,
                "B": bleu4(cand, s["captions"]),
                "R": rouge_l(cand, s["captions"]),
                "M": meteor_lite(cand, s["captions"]),
                "C": c,
            }
        )
    cats = list(category_order) if category_order else sorted({p["category"] for p in per})
    cats = [c for c in cats if any(p["category"] == c for p in per)]
    per_cat = {}
    for c in cats:
        rows = [p for p in per if p["category"] == c]
        per_cat[c] = {"n": len(rows), **{k: math.fsum(r[k] for r in rows) / len(rows) for k in METRIC_KEYS}}
    overall = {k: math.fsum(p[k] for p in per) / len(per) if per else 0.0 for k in METRIC_KEYS}
    return MetricReport(per, per_cat, overall, corpus_bleu4(cands, refs), cats)
