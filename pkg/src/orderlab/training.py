"""MLE and order-consistency (ORIG) training with Adam."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, DialogueSample, Vocabulary, identity, make_batch, shuffle_persona
from .model import Batch, ModelConfig, ModelParameters, init_params, save_checkpoint

log = logging.getLogger(__name__)

OBJECTIVES = ("mle", "orig")
KL_DIRECTIONS = ("forward", "reverse", "symmetric")

PermSampler = Callable[[int, np.random.Generator], tuple[int, ...]]


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "mle"
    gamma: float = 1.0
    kl_direction: str = "forward"
    lr: float = 3e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float | None = 1.0
    shuffle_at_eval: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


@dataclass
class EpochRecord:
    epoch: int
    nll: float
    kl: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)

    def to_dict(self, include_timing: bool = False) -> dict:
        rows = []
        for r in self.epochs:
            row = asdict(r)
            if not include_timing:
                row.pop("seconds")
            rows.append(row)
        return {"epochs": rows, "steps": list(self.steps)}

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, indent=2) + "\n"


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParameters) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(t.data) for k, t in params.items()},
            {k: np.zeros_like(t.data) for k, t in params.items()},
        )


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str, grad: np.ndarray):
        bad = int(np.size(grad) - np.isfinite(grad).sum())
        super().__init__(f"non-finite gradient in parameter {name!r} ({bad} entries of {np.size(grad)})")
        self.name = name


# ---------------------------------------------------------------------------
# losses


def nll_batch(model, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
    """Mean ``-log p(target)`` over every masked response position of the batch."""
    logits = model.logits(batch, rng)
    return ad.cross_entropy_nll(logits, batch.targets, batch.mask)


def masked_kl(p_logits: Tensor, q_logits: Tensor, mask: np.ndarray, direction: str = "forward") -> Tensor:
    """Mean per-position KL over ``mask``; ``forward`` is KL(p || q)."""
    if direction == "forward":
        per = ad.kl_divergence(p_logits, q_logits, axis=-1)
    elif direction == "reverse":
        per = ad.kl_divergence(q_logits, p_logits, axis=-1)
    elif direction == "symmetric":
        per = ad.scale(
            ad.add(ad.kl_divergence(p_logits, q_logits, axis=-1), ad.kl_divergence(q_logits, p_logits, axis=-1)),
            0.5,
        )
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    mask = np.asarray(mask, dtype=bool)
    weights = Tensor((mask / mask.sum()).astype(per.dtype))
    return ad.sum_all(ad.mul(per, weights))


@dataclass
class LossParts:
    total: Tensor
    nll: Tensor
    kl: Tensor


def orig_batch_loss(
    model,
    samples: Sequence[DialogueSample],
    vocab: Vocabulary,
    rng: np.random.Generator,
    config: TrainConfig,
    permute: PermSampler = shuffle_persona,
    dropout_rng: np.random.Generator | None = None,
) -> LossParts:
    """``nll(canonical) + gamma * KL(canonical || shuffled)`` over the response positions.

    A fresh ordering is drawn for every sample on every call, even when
    ``gamma == 0``; in that case the shuffled pass is evaluated without a
    graph so the gradient is exactly the MLE gradient.
    """
    arch = model.config.arch
    L = model.config.max_seq_len
    canon = make_batch(samples, [identity(s.n_persona) for s in samples], vocab, arch, L)
    perms = [permute(s.n_persona, rng) for s in samples]
    shuffled = make_batch(samples, perms, vocab, arch, L)
    logits_c = model.logits(canon, dropout_rng)
    nll = ad.cross_entropy_nll(logits_c, canon.targets, canon.mask)
    if config.gamma == 0:
        with ad.no_grad():
            logits_s = model.logits(shuffled, dropout_rng)
            kl = masked_kl(Tensor(logits_c.data), logits_s, canon.mask, config.kl_direction)
        return LossParts(nll, nll, kl)
    logits_s = model.logits(shuffled, dropout_rng)
    kl = masked_kl(logits_c, logits_s, canon.mask, config.kl_direction)
    return LossParts(ad.add(nll, ad.scale(kl, config.gamma)), nll, kl)


# ---------------------------------------------------------------------------
# optimizer


def clip_grad_norm(params: ModelParameters, max_norm: float) -> float:
    norm = ad.parameters_grad_norm(t for _, t in params.items())
    if max_norm is not None and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for _, t in params.items():
            if t.grad is not None:
                t.grad = (t.grad * factor).astype(t.grad.dtype)
    return norm


def adam_step(
    params: ModelParameters,
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
    config: TrainConfig,
) -> OptimizerState:
    """Bias-corrected Adam update, in place on ``params``; missing grads count as zero."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name, g)
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (config.lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# training loop


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for init, batch order, orderings and dropout."""
    seqs = np.random.SeedSequence(seed).spawn(4)
    return tuple(np.random.default_rng(s) for s in seqs)


def train(
    model_config: ModelConfig,
    dataset: Dataset,
    vocab: Vocabulary,
    train_config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    params: ModelParameters | None = None,
    record_steps: bool = False,
    permute: PermSampler = shuffle_persona,
) -> tuple[ModelParameters, TrainLog]:
    """Train from scratch (or from ``params``) and return the final parameters and log.

    The four RNG streams are split from ``train_config.seed`` so the MLE and
    ORIG objectives consume batch-order randomness identically.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if model_config.vocab_size < len(vocab):
        raise ValueError(f"vocab_size {model_config.vocab_size} < vocabulary size {len(vocab)}")
    init_rng, order_rng, perm_rng, drop_rng = _streams(train_config.seed)
    if params is None:
        params = init_params(model_config, init_rng)
    drop = drop_rng if model_config.dropout_rate > 0 else None
    state = OptimizerState.zeros_like(params)
    tlog = TrainLog()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    samples = dataset.samples
    n = len(samples)
    bs = train_config.batch_size
    for epoch in range(1, train_config.epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(n)
        nll_sum = kl_sum = 0.0
        steps = 0
        for start in range(0, n, bs):
            chunk = [samples[i] for i in order[start : start + bs]]
            params.zero_grad()
            if train_config.objective == "orig":
                parts = orig_batch_loss(params, chunk, vocab, perm_rng, train_config, permute, drop)
                loss, nll_v, kl_v = parts.total, float(parts.nll.data), float(parts.kl.data)
            else:
                batch = make_batch(chunk, [identity(s.n_persona) for s in chunk], vocab, model_config.arch,
                                   model_config.max_seq_len)
                loss = nll_batch(params, batch, drop)
                nll_v, kl_v = float(loss.data), 0.0
            ad.backward(loss)
            if train_config.grad_clip_norm is not None:
                clip_grad_norm(params, train_config.grad_clip_norm)
            adam_step(params, {k: t.grad for k, t in params.items()}, state, train_config)
            nll_sum += nll_v
            kl_sum += kl_v
            steps += 1
            if record_steps:
                tlog.steps.append({"step": state.step, "nll": nll_v, "kl": kl_v})
        params.zero_grad()
        rec = EpochRecord(epoch, nll_sum / steps, kl_sum / steps, time.perf_counter() - t0)
        tlog.epochs.append(rec)
        log.info("epoch %d nll=%.4f kl=%.5f (%.1fs)", epoch, rec.nll, rec.kl, rec.seconds)
        if ckpt_dir is not None:
            save_checkpoint(params, ckpt_dir / f"epoch_{epoch:03d}.orgc")
    if ckpt_dir is not None:
        save_checkpoint(params, ckpt_dir / "final.orgc")
    return params, tlog


def evaluate_losses(
    model,
    dataset: Dataset,
    vocab: Vocabulary,
    seed: int = 0,
    direction: str = "symmetric",
    batch_size: int = 64,
) -> tuple[float, float]:
    """Held-out (mean nll, mean KL between canonical and one shuffled ordering per sample)."""
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(objective="orig", gamma=1.0, kl_direction=direction)
    nll_tot = kl_tot = 0.0
    count = 0
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = list(dataset.samples[start : start + batch_size])
            parts = orig_batch_loss(model, chunk, vocab, rng, cfg)
            nll_tot += float(parts.nll.data) * len(chunk)
            kl_tot += float(parts.kl.data) * len(chunk)
            count += len(chunk)
    return nll_tot / count, kl_tot / count
