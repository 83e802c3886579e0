"""Generation metrics: BLEU-n, ROUGE-L, CIDEr, k-gram entropy and a persona-consistency proxy.

All functions take token lists. Scores are in [0, 1] (CIDEr in [0, 10])
here; :func:`evaluate_corpus` reports the table scale (x100, entropy raw).
"""

from __future__ import annotations

import json
import math
import subprocess
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

SMOOTH_EPS = 1e-9

Tokens = Sequence[str]


class ProtocolError(RuntimeError):
    """The external consistency scorer returned something unparseable."""


@dataclass
class MetricValue:
    name: str
    corpus: float
    per_sample: list[float] | None = None
    scale: str = "x100"

    def to_dict(self) -> dict:
        return {"name": self.name, "corpus": self.corpus, "per_sample": self.per_sample, "scale": self.scale}


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _clipped(candidate: Tokens, reference: Tokens, n: int) -> tuple[int, int]:
    cand = ngrams(candidate, n)
    ref = ngrams(reference, n)
    matched = sum(min(c, ref[g]) for g, c in cand.items())
    return matched, max(len(candidate) - n + 1, 0)


def _brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c >= r else math.exp(1.0 - r / c)


def bleu_n(candidate: Tokens, reference: Tokens, n: int = 1) -> float:
    """Sentence BLEU with uniform weights over orders 1..n.

    An order with no clipped matches gets precision ``1e-9 / total`` (or
    ``1e-9`` when the candidate has no n-grams of that order). An empty
    candidate scores 0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(reference) == 0:
        raise ValueError("reference must be nonempty")
    if len(candidate) == 0:
        return 0.0
    log_p = 0.0
    for order in range(1, n + 1):
        matched, total = _clipped(candidate, reference, order)
        if matched == 0:
            prec = SMOOTH_EPS / total if total else SMOOTH_EPS
        else:
            prec = matched / total
        log_p += math.log(prec) / n
    return _brevity_penalty(len(candidate), len(reference)) * math.exp(log_p)


def corpus_bleu_n(candidates: Sequence[Tokens], references: Sequence[Tokens], n: int = 1) -> float:
    """Corpus BLEU from pooled clipped counts and pooled lengths, unsmoothed."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    log_p = 0.0
    for order in range(1, n + 1):
        matched = total = 0
        for cand, ref in zip(candidates, references):
            m, t = _clipped(cand, ref, order)
            matched += m
            total += t
        if matched == 0:
            return 0.0
        log_p += math.log(matched / total) / n
    return _brevity_penalty(c_len, r_len) * math.exp(log_p)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate: Tokens, reference: Tokens) -> float:
    if len(reference) == 0:
        raise ValueError("reference must be nonempty")
    if len(candidate) == 0:
        return 0.0
    lcs = lcs_length(candidate, reference)
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


class Cider:
    """Plain CIDEr with the IDF table fixed by the reference corpus.

    ``idf(g) = ln(N / max(df(g), 1))`` where ``df`` counts references
    containing ``g``. Each order contributes the cosine of TF-IDF vectors;
    the score is ``10 * mean`` over orders ``1..n_max``.
    """

    def __init__(self, references: Sequence[Tokens], n_max: int = 4):
        if len(references) < 2:
            raise ValueError("CIDEr needs at least 2 references to define IDF")
        if any(len(r) == 0 for r in references):
            raise ValueError("references must be nonempty")
        self.n_max = n_max
        self.n_docs = len(references)
        self.df: list[Counter] = []
        for n in range(1, n_max + 1):
            df: Counter = Counter()
            for ref in references:
                df.update(set(ngrams(ref, n)))
            self.df.append(df)
        self.log_n = math.log(self.n_docs)

    def _vec(self, tokens: Tokens, n: int) -> dict:
        counts = ngrams(tokens, n)
        df = self.df[n - 1]
        return {g: c * (self.log_n - math.log(max(df[g], 1))) for g, c in counts.items()}

    def score(self, candidate: Tokens, reference: Tokens) -> float:
        total = 0.0
        for n in range(1, self.n_max + 1):
            vc = self._vec(candidate, n)
            if not vc:
                continue
            vr = self._vec(reference, n)
            dot = sum(w * vr.get(g, 0.0) for g, w in vc.items())
            nc = math.sqrt(sum(w * w for w in vc.values()))
            nr = math.sqrt(sum(w * w for w in vr.values()))
            if nc > 0 and nr > 0:
                total += dot / (nc * nr)
        return 10.0 * total / self.n_max


def cider(candidates: Sequence[Tokens], references: Sequence[Tokens], n_max: int = 4) -> tuple[list[float], float]:
    """Per-sample CIDEr and their mean."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    scorer = Cider(references, n_max)
    per = [scorer.score(c, r) for c, r in zip(candidates, references)]
    return per, sum(per) / len(per)


def entropy_k(corpus: Iterable[Tokens], k: int = 4) -> float:
    """Entropy (nats) of the pooled k-gram distribution; responses shorter than k are skipped."""
    counts: Counter = Counter()
    for resp in corpus:
        counts.update(ngrams(resp, k))
    total = sum(counts.values())
    if total == 0:
        raise ValueError(f"no {k}-grams in the corpus; use a smaller k")
    return -sum((c / total) * math.log(c / total) for c in counts.values())


# ---------------------------------------------------------------------------
# persona consistency

STOPWORDS = frozenset(
    """
    i me my myself we our ours you your yours he him his she her hers it its they them their
    a an the and or but if of at by for with about to from in on up down out over under
    is am are was were be been being have has had do does did will would can could should
    this that these those there here what which who whom when where why how
    so than too very just not no nor only own same all any both each few more most other some
    as into through during before after again further then once s t
    """.split()
)


def content_tokens(tokens: Tokens) -> set[str]:
    return {t for t in tokens if t not in STOPWORDS and any(ch.isalnum() for ch in t)}


def _set_f1(a: set, b: set) -> float:
    overlap = len(a & b)
    if overlap == 0:
        return 0.0
    p = overlap / len(a)
    r = overlap / len(b)
    return 2 * p * r / (p + r)


def persona_consistency_proxy(response: Tokens, persona: Sequence[Tokens]) -> float:
    """Max over persona sentences of the content-token F1 with the response."""
    if not persona:
        raise ValueError("persona must be nonempty")
    resp = content_tokens(response)
    return max(_set_f1(resp, content_tokens(s)) for s in persona)


class ConsistencyScorer(Protocol):
    def __call__(self, responses: Sequence[str], personas: Sequence[Sequence[str]]) -> list[float]: ...


def lexical_consistency_scorer(responses: Sequence[str], personas: Sequence[Sequence[str]]) -> list[float]:
    from .data import tokenize

    return [
        persona_consistency_proxy(tokenize(r), [tokenize(s) for s in p]) for r, p in zip(responses, personas)
    ]


class ExternalConsistencyScorer:
    """Delegate scoring to a subprocess speaking JSONL.

    One ``{"response": str, "persona": [str, ...]}`` record per line goes to
    the child's stdin; it must print one ``{"score": float}`` line per record.
    """

    def __init__(self, command: Sequence[str], timeout: float | None = 600.0):
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, responses: Sequence[str], personas: Sequence[Sequence[str]]) -> list[float]:
        payload = "".join(
            json.dumps({"response": r, "persona": list(p)}, ensure_ascii=False) + "\n"
            for r, p in zip(responses, personas)
        )
        proc = subprocess.run(
            self.command, input=payload, capture_output=True, text=True, encoding="utf-8", timeout=self.timeout
        )
        if proc.returncode != 0:
            raise ProtocolError(f"scorer exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        scores = []
        for i, line in enumerate(lines, start=1):
            try:
                obj = json.loads(line)
                score = float(obj["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise ProtocolError(f"scorer output line {i} is malformed: {line!r}") from None
            if not math.isfinite(score):
                raise ProtocolError(f"scorer output line {i} is malformed: {line!r}")
            scores.append(score)
        if len(scores) != len(responses):
            raise ProtocolError(f"scorer returned {len(scores)} scores for {len(responses)} records")
        return scores


# ---------------------------------------------------------------------------
# per-sample registry used by the analysis procedures

SampleMetric = Callable[[Tokens, Tokens], float]


def sample_metrics(references: Sequence[Tokens] | None = None) -> dict[str, SampleMetric]:
    """Per-sample scorers in [0, 1] (CIDEr in [0, 10]) keyed by name."""
    table: dict[str, SampleMetric] = {
        "bleu1": lambda c, r: bleu_n(c, r, 1),
        "bleu2": lambda c, r: bleu_n(c, r, 2),
        "rouge_l": rouge_l_f1,
    }
    if references is not None and len(references) >= 2:
        table["cider"] = Cider(references).score
    return table


def corpus_metric(name: str, candidates: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Run-level aggregate for ``name``: pooled corpus BLEU, otherwise mean of per-sample scores."""
    if name == "bleu1":
        return corpus_bleu_n(candidates, references, 1)
    if name == "bleu2":
        return corpus_bleu_n(candidates, references, 2)
    if name == "rouge_l":
        return sum(rouge_l_f1(c, r) for c, r in zip(candidates, references)) / len(candidates)
    if name == "cider":
        return cider(candidates, references)[1]
    raise KeyError(f"unknown metric {name!r}")


METRIC_NAMES = ("bleu1", "bleu2", "rouge_l", "cider")


@dataclass
class EvalResult:
    metrics: dict[str, MetricValue] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v.to_dict() for k, v in self.metrics.items()}


def evaluate_corpus(
    candidates: Sequence[Tokens],
    references: Sequence[Tokens],
    personas: Sequence[Sequence[Tokens]] | None = None,
    entropy_order: int = 4,
    scorer: ConsistencyScorer | None = None,
) -> EvalResult:
    """Every metric at table scale: x100 except entropy (nats) and the consistency proxy (raw)."""
    res = EvalResult()
    bleu1_s = [100 * bleu_n(c, r, 1) if c else 0.0 for c, r in zip(candidates, references)]
    bleu2_s = [100 * bleu_n(c, r, 2) if c else 0.0 for c, r in zip(candidates, references)]
    res.metrics["bleu1"] = MetricValue("bleu1", 100 * corpus_bleu_n(candidates, references, 1), bleu1_s)
    res.metrics["bleu2"] = MetricValue("bleu2", 100 * corpus_bleu_n(candidates, references, 2), bleu2_s)
    res.metrics["bleu1_sentence_mean"] = MetricValue("bleu1_sentence_mean", sum(bleu1_s) / len(bleu1_s))
    res.metrics["bleu2_sentence_mean"] = MetricValue("bleu2_sentence_mean", sum(bleu2_s) / len(bleu2_s))
    rl = [100 * rouge_l_f1(c, r) for c, r in zip(candidates, references)]
    res.metrics["rouge_l"] = MetricValue("rouge_l", sum(rl) / len(rl), rl)
    if len(candidates) >= 2:
        per, mean = cider(candidates, references)
        res.metrics["cider"] = MetricValue("cider", 100 * mean, [100 * x for x in per])
    try:
        res.metrics["entropy"] = MetricValue("entropy", entropy_k(candidates, entropy_order), scale="nats")
    except ValueError:
        pass
    if personas is not None:
        if scorer is None:
            cs = [persona_consistency_proxy(c, p) for c, p in zip(candidates, personas)]
        else:
            from .data import detokenize

            cs = scorer([detokenize(c) for c in candidates], [[detokenize(s) for s in p] for p in personas])
        res.metrics["c_proxy"] = MetricValue("c_proxy", sum(cs) / len(cs), cs, scale="raw")
    return res
