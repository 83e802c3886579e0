"""Order-sensitivity analysis: permutation sweeps, shuffle variance studies, divergence probes.

Each procedure accepts anything with ``.config`` and ``.logits(batch)``
(trained parameters or an ablation wrapper). Work units derive their own
random streams from ``(seed, unit index)``, so results do not depend on
scheduling when ``workers > 1``.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import EOS, BOS, Dataset, DialogueSample, Vocabulary, decoder_prefix, make_batch, serialize_encdec_input, shuffle_persona
from .decoding import DecodeConfig, decode
from .metrics import corpus_metric, sample_metrics

REPORT_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# shared helpers


def conditioning(model, sample: DialogueSample, perm: Sequence[int], vocab: Vocabulary) -> np.ndarray:
    if model.config.arch == "decoder_only":
        return decoder_prefix(sample, perm, vocab)
    src, _ = serialize_encdec_input(sample, perm, vocab)
    return src


def decode_response(
    model, sample: DialogueSample, perm: Sequence[int], vocab: Vocabulary, config: DecodeConfig, rng=None
) -> list[str]:
    ids = decode(
        model, conditioning(model, sample, perm, vocab), config, rng, bos_id=vocab.stoi[BOS], eos_id=vocab.stoi[EOS]
    )
    return vocab.decode(ids)


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _unit_seed(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, *key])


def orderings(n: int, perm_cap: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """All ``n!`` orderings when they fit under ``perm_cap``, else ``perm_cap`` distinct uniform draws."""
    if perm_cap < 1:
        raise ValueError("perm_cap must be >= 1")
    if math.factorial(n) <= perm_cap:
        return list(itertools.permutations(range(n)))
    seen: dict[tuple[int, ...], None] = {}
    while len(seen) < perm_cap:
        seen.setdefault(shuffle_persona(n, rng), None)
    return list(seen)


def _check_metrics(metrics: Sequence[str]) -> None:
    if not metrics:
        raise ValueError("metric list is empty")


# ---------------------------------------------------------------------------
# permutation sweep


@dataclass
class SweepCell:
    best: float
    worst: float
    mean: float
    argbest: list[int]
    argworst: list[int]


@dataclass
class SweepReport:
    metrics: list[str]
    samples: list[dict[str, SweepCell]]
    aggregate: dict[str, dict[str, float]]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": "sweep",
            "schema_version": REPORT_SCHEMA_VERSION,
            "metrics": list(self.metrics),
            "samples": [{m: asdict(c) for m, c in cells.items()} for cells in self.samples],
            "aggregate": self.aggregate,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepReport":
        samples = [{m: SweepCell(**c) for m, c in cells.items()} for cells in d["samples"]]
        return cls(list(d["metrics"]), samples, d["aggregate"], d.get("metadata", {}))

    def csv_rows(self) -> list[dict]:
        rows = []
        for i, cells in enumerate(self.samples):
            for m, c in cells.items():
                rows.append({"sample": i, "metric": m, "best": c.best, "worst": c.worst, "mean": c.mean,
                             "argbest": " ".join(map(str, c.argbest)), "argworst": " ".join(map(str, c.argworst))})
        return rows


def permutation_sweep(
    model,
    dataset: Dataset,
    vocab: Vocabulary,
    decode_config: DecodeConfig | None = None,
    metrics: Sequence[str] = ("bleu1", "bleu2", "rouge_l", "cider"),
    perm_cap: int = 120,
    seed: int = 42,
    workers: int = 1,
    metadata: dict | None = None,
) -> SweepReport:
    """Decode each sample under every (or ``perm_cap`` sampled) persona ordering and keep best/worst.

    With a sampling decoder the generator is re-seeded identically for every
    ordering of a sample, so orderings only differ through the model input.
    """
    _check_metrics(metrics)
    if perm_cap < 1:
        raise ValueError("perm_cap must be >= 1")
    decode_config = decode_config or DecodeConfig()
    refs = [s.response for s in dataset]
    table = sample_metrics(refs)
    unknown = [m for m in metrics if m not in table]
    if unknown:
        raise KeyError(f"unknown or unavailable metrics: {unknown}")

    def run(i: int):
        sample = dataset[i]
        perms = orderings(sample.n_persona, perm_cap, np.random.default_rng(_unit_seed(seed, i, 0)))
        decode_seed = _unit_seed(seed, i, 1)
        decodes = []
        for perm in perms:
            rng = np.random.default_rng(decode_seed) if decode_config.strategy != "greedy" else None
            decodes.append(decode_response(model, sample, perm, vocab, decode_config, rng))
        cells = {}
        for m in metrics:
            scores = [table[m](d, sample.response) for d in decodes]
            b = int(np.argmax(scores))
            w = int(np.argmin(scores))
            # clamp so summation rounding never puts the mean outside [worst, best]
            mean = min(max(math.fsum(scores) / len(scores), scores[w]), scores[b])
            cells[m] = SweepCell(scores[b], scores[w], mean, list(perms[b]), list(perms[w]))
        return cells, decodes, perms

    results = _map(run, range(len(dataset)), workers)
    samples = [r[0] for r in results]
    aggregate: dict[str, dict[str, float]] = {}
    for m in metrics:
        best = [cells[m].best for cells in samples]
        worst = [cells[m].worst for cells in samples]
        agg = {
            "mean_best": float(np.mean(best)),
            "mean_worst": float(np.mean(worst)),
            "mean_over_orderings": float(np.mean([cells[m].mean for cells in samples])),
        }
        if m in ("bleu1", "bleu2"):
            # corpus metric over the argbest / argworst decodes of every sample
            best_dec, worst_dec = [], []
            for cells, decodes, perms in results:
                best_dec.append(decodes[perms.index(tuple(cells[m].argbest))])
                worst_dec.append(decodes[perms.index(tuple(cells[m].argworst))])
            agg["corpus_best"] = corpus_metric(m, best_dec, refs)
            agg["corpus_worst"] = corpus_metric(m, worst_dec, refs)
        aggregate[m] = agg
    meta = {
        "decode": asdict(decode_config),
        "perm_cap": perm_cap,
        "permutations_per_sample": [len(r[2]) for r in results],
        "seed": seed,
        "n_samples": len(dataset),
    }
    meta.update(metadata or {})
    return SweepReport(list(metrics), samples, aggregate, meta)


# ---------------------------------------------------------------------------
# variance study


@dataclass
class VarianceReport:
    metrics: list[str]
    runs: list[dict[str, float]]
    run_seeds: list[int]
    aggregate: dict[str, dict[str, float]]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": "variance",
            "schema_version": REPORT_SCHEMA_VERSION,
            "metrics": list(self.metrics),
            "runs": self.runs,
            "run_seeds": self.run_seeds,
            "aggregate": self.aggregate,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceReport":
        return cls(list(d["metrics"]), d["runs"], d["run_seeds"], d["aggregate"], d.get("metadata", {}))

    def series(self, metric: str) -> list[float]:
        return [r[metric] for r in self.runs]

    def csv_rows(self) -> list[dict]:
        return [
            {"run": i, "seed": self.run_seeds[i], "metric": m, "score": r[m]}
            for i, r in enumerate(self.runs)
            for m in self.metrics
        ]


def _describe(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.min() == arr.max():
        mean, var = float(arr[0]), 0.0
    else:
        mean = math.fsum(arr) / arr.size
        var = math.fsum((arr - mean) ** 2) / arr.size
    return {"mean": mean, "variance": var, "std": math.sqrt(var), "min": float(arr.min()), "max": float(arr.max())}


def run_seed(master_seed: int, run: int) -> int:
    return int(np.random.SeedSequence([master_seed, run]).generate_state(1)[0])


def variance_study(
    model,
    dataset: Dataset,
    vocab: Vocabulary,
    runs: int = 100,
    master_seed: int = 42,
    decode_config: DecodeConfig | None = None,
    metrics: Sequence[str] = ("bleu1", "bleu2", "rouge_l", "cider"),
    workers: int = 1,
    metadata: dict | None = None,
) -> VarianceReport:
    """Repeat corpus evaluation with a fresh uniform persona ordering per sample in every run.

    Orderings come from the per-run seed. Sampling randomness is keyed on
    ``(master_seed, sample)`` only, so every run decodes a sample with the
    same uniforms and the spread across runs is caused by ordering alone.
    Scores are on the [0, 1] scale (CIDEr [0, 10]); variance is the
    population variance across runs.
    """
    _check_metrics(metrics)
    if runs < 2:
        raise ValueError("runs must be >= 2")
    decode_config = decode_config or DecodeConfig(strategy="topk_topp")
    refs = [s.response for s in dataset]
    seeds = [run_seed(master_seed, r) for r in range(runs)]

    def one(unit: tuple[int, int]) -> list[str]:
        r, i = unit
        sample = dataset[i]
        perm = shuffle_persona(sample.n_persona, np.random.default_rng([seeds[r], i]))
        rng = np.random.default_rng(_unit_seed(master_seed, i, 1))
        return decode_response(model, sample, perm, vocab, decode_config, rng)

    units = [(r, i) for r in range(runs) for i in range(len(dataset))]
    decodes = _map(one, units, workers)
    n = len(dataset)
    per_run = []
    for r in range(runs):
        cands = decodes[r * n : (r + 1) * n]
        per_run.append({m: corpus_metric(m, cands, refs) for m in metrics})
    aggregate = {m: _describe([row[m] for row in per_run]) for m in metrics}
    meta = {"decode": asdict(decode_config), "master_seed": master_seed, "runs": runs, "n_samples": n}
    meta.update(metadata or {})
    return VarianceReport(list(metrics), per_run, seeds, aggregate, meta)


# ---------------------------------------------------------------------------
# representation divergence


@dataclass
class DivergenceReport:
    samples: list[list[tuple[str, float]]]
    sample_means: list[float]
    corpus_mean: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": "divergence",
            "schema_version": REPORT_SCHEMA_VERSION,
            "samples": [[[t, d] for t, d in toks] for toks in self.samples],
            "sample_means": self.sample_means,
            "corpus_mean": self.corpus_mean,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DivergenceReport":
        samples = [[(t, v) for t, v in toks] for toks in d["samples"]]
        return cls(samples, d["sample_means"], d["corpus_mean"], d.get("metadata", {}))

    def csv_rows(self) -> list[dict]:
        return [
            {"sample": i, "position": j, "token": t, "distance": v}
            for i, toks in enumerate(self.samples)
            for j, (t, v) in enumerate(toks)
        ]


def bidirectional_kl(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    """Mean of KL(p||q) and KL(q||p) over the last axis."""
    p, q = ad.Tensor(p_logits), ad.Tensor(q_logits)
    with ad.no_grad():
        fwd = ad.kl_divergence(p, q, axis=-1).data
        rev = ad.kl_divergence(q, p, axis=-1).data
    return 0.5 * (fwd + rev)


def response_logits(model, sample: DialogueSample, perms: Sequence[Sequence[int]], vocab: Vocabulary) -> np.ndarray:
    """Teacher-forced logits at the positions predicting each response token, ``[len(perms), |r|, V]``."""
    batch = make_batch([sample] * len(perms), perms, vocab, model.config.arch, model.config.max_seq_len)
    with ad.no_grad():
        logits = model.logits(batch).data
    # masked positions cover the response tokens followed by <eos>; drop the <eos> step
    rows = [logits[b][np.flatnonzero(batch.mask[b])[: len(sample.response)]] for b in range(len(perms))]
    return np.stack(rows)


def representation_divergence(
    model,
    dataset: Dataset,
    vocab: Vocabulary,
    pairs_per_sample: int = 4,
    seed: int = 42,
    workers: int = 1,
    metadata: dict | None = None,
) -> DivergenceReport:
    """Per response token, the bidirectional KL between predictive distributions under two orderings.

    Each pair is two independent uniform orderings; distances are averaged
    over pairs. The corpus mean is the mean of per-sample means.
    """
    if pairs_per_sample < 1:
        raise ValueError("pairs_per_sample must be >= 1")

    def one(i: int):
        sample = dataset[i]
        rng = np.random.default_rng(_unit_seed(seed, i))
        perms = []
        for _ in range(pairs_per_sample):
            perms.append(shuffle_persona(sample.n_persona, rng))
            perms.append(shuffle_persona(sample.n_persona, rng))
        logits = response_logits(model, sample, perms, vocab)
        dist = bidirectional_kl(logits[0::2], logits[1::2]).mean(axis=0)
        return [(tok, float(d)) for tok, d in zip(sample.response, dist)]

    samples = _map(one, range(len(dataset)), workers)
    means = [float(np.mean([d for _, d in toks])) for toks in samples]
    meta = {"pairs_per_sample": pairs_per_sample, "seed": seed, "n_samples": len(dataset)}
    meta.update(metadata or {})
    return DivergenceReport(samples, means, float(np.mean(means)), meta)


# ---------------------------------------------------------------------------
# emission


def report_to_json(report) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def report_from_json(text: str):
    d = json.loads(text)
    if d.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema version {d.get('schema_version')}")
    kind = d.get("kind")
    cls = {"sweep": SweepReport, "variance": VarianceReport, "divergence": DivergenceReport}.get(kind)
    if cls is None:
        raise ValueError(f"unknown report kind {kind!r}")
    return cls.from_dict(d)


def emit_report(report, path, fmt: str = "json") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_text(report_to_json(report), encoding="utf-8")
    elif fmt == "csv":
        rows = report.csv_rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["empty"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def box_stats(values: Sequence[float]) -> dict[str, float | list[float]]:
    """Median, quartiles, 1.5-IQR whiskers and outliers."""
    arr = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = (float(x) for x in np.percentile(arr, [25, 50, 75]))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = arr[(arr >= lo_fence) & (arr <= hi_fence)]
    return {
        "q1": q1,
        "median": med,
        "q3": q3,
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": [float(x) for x in arr[(arr < lo_fence) | (arr > hi_fence)]],
    }


def emit_boxplot_svg(
    reports, path, metric: str = "bleu1", title: str = "", width: int = 480, height: int = 320
) -> Path:
    """One box per labeled series; a constant series draws a zero-height box.

    ``reports`` is a VarianceReport, a ``{label: VarianceReport}`` map, or a
    ``{label: [values]}`` map.
    """
    if isinstance(reports, VarianceReport):
        reports = {metric: reports}
    series = {k: (v.series(metric) if isinstance(v, VarianceReport) else list(v)) for k, v in reports.items()}
    if not series:
        raise ValueError("no series to plot")
    stats = {k: box_stats(v) for k, v in series.items()}
    lo = min(min(s["whisker_low"], *s["outliers"]) if s["outliers"] else s["whisker_low"] for s in stats.values())
    hi = max(max(s["whisker_high"], *s["outliers"]) if s["outliers"] else s["whisker_high"] for s in stats.values())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    top, bottom, left = 30, height - 40, 60

    def y(v: float) -> float:
        return round(bottom - (v - lo) / (hi - lo) * (bottom - top), 3)

    slot = (width - left - 20) / len(stats)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<text x="{left - 6}" y="{y(hi)}" text-anchor="end" font-size="10">{hi:.4g}</text>',
        f'<text x="{left - 6}" y="{y(lo)}" text-anchor="end" font-size="10">{lo:.4g}</text>',
    ]
    for j, (label, s) in enumerate(stats.items()):
        cx = left + slot * (j + 0.5)
        half = min(slot * 0.3, 40)
        parts.append(
            f'<g class="box" data-label="{label}">'
            f'<line x1="{cx}" y1="{y(s["whisker_low"])}" x2="{cx}" y2="{y(s["q1"])}" stroke="black"/>'
            f'<line x1="{cx}" y1="{y(s["q3"])}" x2="{cx}" y2="{y(s["whisker_high"])}" stroke="black"/>'
            f'<rect x="{cx - half}" y="{y(s["q3"])}" width="{2 * half}" height="{round(y(s["q1"]) - y(s["q3"]), 3)}" '
            f'fill="#9ecae1" stroke="black"/>'
            f'<line x1="{cx - half}" y1="{y(s["median"])}" x2="{cx + half}" y2="{y(s["median"])}" stroke="#d62728" stroke-width="2"/>'
        )
        for o in s["outliers"]:
            parts.append(f'<circle cx="{cx}" cy="{y(o)}" r="2.5" fill="none" stroke="black"/>')
        parts.append(f'<text x="{cx}" y="{bottom + 18}" text-anchor="middle" font-size="11">{label}</text></g>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path
