"""Greedy and top-k + nucleus sampling decoders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import Batch, LengthError

STRATEGIES = ("greedy", "topk_topp")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    k: int = 50
    p: float = 0.9
    max_new_tokens: int = 32
    temperature: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.p <= 1.0:
            raise ValueError("p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")


def filter_logits_topk_topp(logits, k: int, p: float) -> np.ndarray:
    """Probability vector restricted to the top-k tokens, then to their nucleus.

    Ties are broken toward the lower token id. The nucleus is the shortest
    descending-probability prefix of the kept set whose mass reaches ``p``
    (the crossing token is included); at least one token always survives.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    V = z.size
    order = np.argsort(-z, kind="stable")
    kept = order[: min(k, V)]
    zk = z[kept]
    pk = np.exp(zk - zk.max())
    pk /= pk.sum()
    if p < 1.0:
        cum = np.cumsum(pk)
        hit = np.flatnonzero(cum >= p)
        n_keep = int(hit[0]) + 1 if hit.size else pk.size
        kept = kept[:n_keep]
        pk = pk[:n_keep] / pk[:n_keep].sum()
    out = np.zeros(V)
    out[kept] = pk
    return out


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw consuming exactly one uniform."""
    u = rng.random()
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, probs.size - 1)


def next_token(logits: np.ndarray, config: DecodeConfig, rng: np.random.Generator | None) -> int:
    if config.strategy == "greedy":
        return int(np.argmax(logits))
    if rng is None:
        raise ValueError("sampling decode needs an rng")
    probs = filter_logits_topk_topp(np.asarray(logits, dtype=np.float64) / config.temperature, config.k, config.p)
    return _draw(probs, rng)


def decode(
    model,
    conditioning,
    config: DecodeConfig,
    rng: np.random.Generator | None = None,
    bos_id: int = 1,
    eos_id: int = 2,
) -> list[int]:
    """Generate response ids (without ``<eos>``).

    ``conditioning`` is the serialized prefix ending in ``<res>`` for the
    decoder-only model, or the encoder source for the encoder-decoder model
    (whose decoder then starts from ``<bos>``). Generation stops at
    ``<eos>``, after ``max_new_tokens``, or when the context window is full.
    """
    cfg = model.config
    cond = np.asarray(conditioning, dtype=np.int64).reshape(-1)
    if cond.size > cfg.max_seq_len:
        raise LengthError(f"conditioning length {cond.size} exceeds max_seq_len {cfg.max_seq_len}")
    enc_dec = cfg.arch == "encoder_decoder"
    prefix = [bos_id] if enc_dec else cond.tolist()
    out: list[int] = []
    with ad.no_grad():
        for _ in range(config.max_new_tokens):
            if len(prefix) > cfg.max_seq_len:
                break
            toks = np.array([prefix], dtype=np.int64)
            batch = Batch(toks, source=cond[None, :]) if enc_dec else Batch(toks)
            last = model.logits(batch).data[0, -1]
            tok = next_token(last, config, rng)
            if tok == eos_id:
                break
            out.append(tok)
            prefix.append(tok)
    return out
