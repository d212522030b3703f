"""Sentence- and corpus-level language evaluators: BLEU-1..4, ROUGE-L, CIDEr, CIDEr-D.

All metrics operate on token-id sequences, so they are invariant under any
consistent relabeling of the vocabulary. EOS is stripped on entry and PAD must
never appear. CIDEr variants need an IdfTable built once over the training
references; n-grams unseen at build time fall back to idf = log(n_images).

METEOR and SPICE are deliberately unsupported (external synonym databases and
scene-graph parsing respectively) and requesting them raises, never silently
approximates.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum

from .errors import ConfigError, DataError, UnsupportedMetricError
from .textdata import EOS_ID, PAD_ID

MAX_N = 4
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0

UNSUPPORTED_METRICS = ("METEOR", "SPICE")


class MetricId(Enum):
    BLEU1 = "BLEU1"
    BLEU2 = "BLEU2"
    BLEU3 = "BLEU3"
    BLEU4 = "BLEU4"
    ROUGE_L = "ROUGE_L"
    CIDER = "CIDER"
    CIDER_D = "CIDER_D"

    @classmethod
    def parse(cls, name: str) -> "MetricId":
        key = name.strip().upper().replace("-", "_")
        if key in UNSUPPORTED_METRICS:
            raise UnsupportedMetricError(
                f"{name} is not supported (needs external language resources)")
        try:
            return cls[key]
        except KeyError:
            raise ConfigError(f"unknown metric {name!r}; choose from "
                              f"{[m.value for m in cls]}") from None


DEFAULT_REWARD_METRIC = MetricId.CIDER_D


def _tokens(caption) -> list[int]:
    """Caption or raw id sequence -> id list with the trailing EOS removed."""
    ids = list(caption.ids) if hasattr(caption, "ids") else list(caption)
    if ids and ids[-1] == EOS_ID:
        ids = ids[:-1]
    if PAD_ID in ids or EOS_ID in ids:
        raise DataError("PAD/interior EOS must not reach the metrics")
    return ids


def ngram_counts(tokens: list[int], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _closest_ref_len(cand_len: int, ref_lens: list[int]) -> int:
    # ties broken toward the shorter reference
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def _clip_stats(cand: list[int], max_ref_counts: Counter, n: int) -> tuple[int, int]:
    counts = ngram_counts(cand, n)
    matches = sum(min(c, max_ref_counts.get(g, 0)) for g, c in counts.items())
    return matches, max(0, len(cand) - n + 1)


def _max_ref_counts(refs: list[list[int]], n: int) -> Counter:
    merged: Counter = Counter()
    for r in refs:
        for g, c in ngram_counts(r, n).items():
            if c > merged[g]:
                merged[g] = c
    return merged


def _brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def bleu(candidates, reference_sets, n: int, level: str = "corpus") -> float:
    """BLEU-n in [0,1].

    Corpus level pools clipped matches and lengths before combining; sentence
    level (only meaningful for a single pair) applies add-one smoothing to
    higher-order precisions with zero matches, so per-sentence rewards stay
    non-degenerate.
    """
    if not 1 <= n <= MAX_N:
        raise ConfigError(f"BLEU order must be in 1..{MAX_N}, got {n}")
    if level not in ("corpus", "sentence"):
        raise ConfigError(f"unknown BLEU level {level!r}")
    if len(candidates) != len(reference_sets):
        raise ConfigError("candidates and reference sets must align")
    if any(not refs for refs in reference_sets):
        raise ConfigError("every reference set must be non-empty")

    cands = [_tokens(c) for c in candidates]
    refsets = [[_tokens(r) for r in refs] for refs in reference_sets]

    if level == "sentence":
        total = 0.0
        for cand, refs in zip(cands, refsets):
            total += _bleu_sentence(cand, refs, n)
        return total / len(cands)

    match_k = [0] * n
    total_k = [0] * n
    c_len = 0
    r_len = 0
    for cand, refs in zip(cands, refsets):
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), [len(r) for r in refs])
        for k in range(1, n + 1):
            m, t = _clip_stats(cand, _max_ref_counts(refs, k), k)
            match_k[k - 1] += m
            total_k[k - 1] += t
    log_sum = 0.0
    for k in range(n):
        if match_k[k] == 0 or total_k[k] == 0:
            return 0.0
        log_sum += math.log(match_k[k] / total_k[k]) / n
    return _brevity_penalty(c_len, r_len) * math.exp(log_sum)


def _bleu_sentence(cand: list[int], refs: list[list[int]], n: int) -> float:
    if len(cand) == 0:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        m, t = _clip_stats(cand, _max_ref_counts(refs, k), k)
        if k >= 2 and m == 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t) / n
    bp = _brevity_penalty(len(cand), _closest_ref_len(len(cand), [len(r) for r in refs]))
    return bp * math.exp(log_sum)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def _lcs_table(a: list[int], b: list[int]) -> int:
    # iterative DP over one rolling row
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    return prev[len(b)]


def rouge_l(candidate, references, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure, max over references; 0 when either side is empty."""
    if not references:
        raise ConfigError("rouge_l needs at least one reference")
    cand = _tokens(candidate)
    best = 0.0
    for ref in references:
        r = _tokens(ref)
        if len(cand) == 0 or len(r) == 0:
            continue
        lcs = _lcs_table(cand, r)
        p = lcs / len(cand)
        rec = lcs / len(r)
        if p == 0.0 and rec == 0.0:
            f = 0.0
        else:
            f = ((1 + beta * beta) * p * rec) / (rec + beta * beta * p)
        best = max(best, f)
    return best


# ---------------------------------------------------------------------------
# CIDEr / CIDEr-D
# ---------------------------------------------------------------------------

@dataclass
class IdfTable:
    """Per-order document frequencies over a reference corpus of images."""
    n_images: int
    df: list[dict]   # df[n-1]: ngram tuple -> image count

    def idf(self, n: int, gram: tuple) -> float:
        return self._log_n - math.log(max(1.0, self.df[n - 1].get(gram, 0)))

    def __post_init__(self):
        self._log_n = math.log(self.n_images) if self.n_images > 0 else 0.0

    # serialized as {"n_images": N, "df": [{"1 2": 3, ...}, ...]} for checkpoints
    def to_json(self) -> dict:
        return {
            "n_images": self.n_images,
            "df": [{" ".join(map(str, g)): c for g, c in table.items()} for table in self.df],
        }

    @classmethod
    def from_json(cls, blob: dict) -> "IdfTable":
        df = [{tuple(int(t) for t in key.split()): int(c) for key, c in table.items()}
              for table in blob["df"]]
        return cls(n_images=int(blob["n_images"]), df=df)


def build_idf(reference_corpus) -> IdfTable:
    """Document frequencies counted once per image over its whole reference set."""
    if not reference_corpus:
        raise ConfigError("cannot build idf from an empty corpus")
    df = [dict() for _ in range(MAX_N)]
    for refs in reference_corpus:
        seen = set()
        for ref in refs:
            toks = _tokens(ref)
            for n in range(1, MAX_N + 1):
                seen.update(ngram_counts(toks, n).keys())
        for g in seen:
            table = df[len(g) - 1]
            table[g] = table.get(g, 0) + 1
    return IdfTable(n_images=len(reference_corpus), df=df)


def _tfidf(tokens: list[int], n: int, idf: IdfTable) -> tuple[dict, float]:
    vec = {}
    sq = 0.0
    for g, c in ngram_counts(tokens, n).items():
        w = c * idf.idf(n, g)
        vec[g] = w
        sq += w * w
    return vec, math.sqrt(sq)


def cider(candidate, references, idf: IdfTable, variant: str = "d",
          sigma: float = CIDER_SIGMA) -> float:
    """Consensus score in [0,10]: per-n tf-idf cosine similarity, averaged, x10.

    variant="plain" uses the raw cosine; variant="d" clips candidate counts to
    reference counts and applies the Gaussian length penalty.
    """
    if variant not in ("plain", "d"):
        raise ConfigError(f"unknown cider variant {variant!r}")
    if not references:
        raise ConfigError("cider needs at least one reference")
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    total = 0.0
    for n in range(1, MAX_N + 1):
        cvec, cnorm = _tfidf(cand, n, idf)
        acc = 0.0
        for ref in refs:
            rvec, rnorm = _tfidf(ref, n, idf)
            if cnorm == 0.0 or rnorm == 0.0:
                continue
            num = 0.0
            if variant == "d":
                for g, cv in cvec.items():
                    rv = rvec.get(g, 0.0)
                    num += min(cv, rv) * rv
            else:
                for g, cv in cvec.items():
                    num += cv * rvec.get(g, 0.0)
            sim = num / (cnorm * rnorm)
            if variant == "d":
                delta = len(cand) - len(ref)
                sim *= math.exp(-(delta * delta) / (2.0 * sigma * sigma))
            acc += sim
        total += acc / len(refs)
    return 10.0 * total / MAX_N


# ---------------------------------------------------------------------------
# reward dispatch and corpus reporting
# ---------------------------------------------------------------------------

def sentence_reward(candidate, references, idf: IdfTable | None, q: MetricId) -> float:
    """Per-sentence score of the chosen metric (smoothed BLEU for BLEU-q)."""
    if q in (MetricId.BLEU1, MetricId.BLEU2, MetricId.BLEU3, MetricId.BLEU4):
        n = int(q.value[-1])
        return _bleu_sentence(_tokens(candidate), [_tokens(r) for r in references], n)
    if q is MetricId.ROUGE_L:
        return rouge_l(candidate, references)
    if q in (MetricId.CIDER, MetricId.CIDER_D):
        if idf is None:
            raise ConfigError("CIDEr rewards need an IdfTable")
        return cider(candidate, references, idf, variant="plain" if q is MetricId.CIDER else "d")
    raise ConfigError(f"unsupported reward metric {q}")


def corpus_scores(candidates, reference_sets, idf: IdfTable | None,
                  metrics=None) -> dict:
    """Corpus-level report: pooled BLEU, mean-over-sentences ROUGE-L and CIDEr."""
    metrics = list(metrics) if metrics is not None else list(MetricId)
    out = {}
    for m in metrics:
        if m in (MetricId.BLEU1, MetricId.BLEU2, MetricId.BLEU3, MetricId.BLEU4):
            out[m.value] = bleu(candidates, reference_sets, int(m.value[-1]), level="corpus")
        elif m is MetricId.ROUGE_L:
            vals = [rouge_l(c, rs) for c, rs in zip(candidates, reference_sets)]
            out[m.value] = sum(vals) / len(vals) if vals else 0.0
        else:
            if idf is None:
                raise ConfigError("CIDEr reporting needs an IdfTable")
            variant = "plain" if m is MetricId.CIDER else "d"
            vals = [cider(c, rs, idf, variant=variant) for c, rs in zip(candidates, reference_sets)]
            out[m.value] = sum(vals) / len(vals) if vals else 0.0
    return out


class SentenceScorer:
    """Reward-path scorer with per-image reference data precomputed.

    Produces bit-identical values to sentence_reward; it only avoids
    recounting reference n-grams on every call.
    """

    def __init__(self, references_by_image: dict, idf: IdfTable | None, q: MetricId):
        self.q = q
        self.idf = idf
        self._bleu_n = int(q.value[-1]) if q.value.startswith("BLEU") else None
        self._cache = {}
        for image_id, refs in references_by_image.items():
            toks = [_tokens(r) for r in refs]
            entry = {"tokens": toks, "lens": [len(t) for t in toks]}
            if self._bleu_n is not None:
                entry["max_counts"] = [
                    _max_ref_counts(toks, k) for k in range(1, self._bleu_n + 1)]
            if q in (MetricId.CIDER, MetricId.CIDER_D):
                if idf is None:
                    raise ConfigError("CIDEr rewards need an IdfTable")
                entry["tfidf"] = [[_tfidf(t, n, idf) for t in toks]
                                  for n in range(1, MAX_N + 1)]
            self._cache[image_id] = entry

    def score(self, image_id, candidate) -> float:
        entry = self._cache[image_id]
        cand = _tokens(candidate)
        q = self.q
        if self._bleu_n is not None:
            return self._bleu_sentence_cached(cand, entry)
        if q is MetricId.ROUGE_L:
            return rouge_l(cand, entry["tokens"])
        return self._cider_cached(cand, entry, variant="plain" if q is MetricId.CIDER else "d")

    def _bleu_sentence_cached(self, cand, entry):
        n = self._bleu_n
        if len(cand) == 0:
            return 0.0
        log_sum = 0.0
        for k in range(1, n + 1):
            m, t = _clip_stats(cand, entry["max_counts"][k - 1], k)
            if k >= 2 and m == 0:
                m, t = m + 1, t + 1
            if m == 0 or t == 0:
                return 0.0
            log_sum += math.log(m / t) / n
        bp = _brevity_penalty(len(cand), _closest_ref_len(len(cand), entry["lens"]))
        return bp * math.exp(log_sum)

    def _cider_cached(self, cand, entry, variant):
        total = 0.0
        n_refs = len(entry["tokens"])
        for n in range(1, MAX_N + 1):
            cvec, cnorm = _tfidf(cand, n, self.idf)
            acc = 0.0
            for (rvec, rnorm), rlen in zip(entry["tfidf"][n - 1], entry["lens"]):
                if cnorm == 0.0 or rnorm == 0.0:
                    continue
                num = 0.0
                if variant == "d":
                    for g, cv in cvec.items():
                        rv = rvec.get(g, 0.0)
                        num += min(cv, rv) * rv
                else:
                    for g, cv in cvec.items():
                        num += cv * rvec.get(g, 0.0)
                sim = num / (cnorm * rnorm)
                if variant == "d":
                    delta = len(cand) - rlen
                    sim *= math.exp(-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA))
                acc += sim
            total += acc / n_refs
        return 10.0 * total / MAX_N
