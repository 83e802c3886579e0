"""Toy transformer language models: decoder-only and encoder-decoder.

Both use learned absolute positional embeddings, pre-norm residual blocks
and (by default) an output projection tied to the token embedding.

Parameter count, with ``V`` vocab, ``L`` max length, ``d`` width, ``f`` MLP
width and ``n`` layers, and ``block = 4d^2 + 2df + 9d + f``:

* decoder_only:    ``V*d + L*d + n*block + 2d``
* encoder_decoder: ``V*d + 2*L*d + n*block + n*(block + 4d^2 + 6d) + 4d``

plus ``d*V`` for either architecture when embeddings are untied.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ARCHS = ("decoder_only", "encoder_decoder")
PAD_ID = 0
_NEG = -1e9


class LengthError(ValueError):
    """A sequence does not fit in the model's context window."""


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "decoder_only"
    vocab_size: int = 512
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_seq_len: int = 64
    dropout_rate: float = 0.0
    tie_embeddings: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


def _block_shapes(prefix: str, d: int, f: int, cross: bool) -> dict[str, tuple[int, ...]]:
    shapes = {
        f"{prefix}.ln1.g": (d,),
        f"{prefix}.ln1.b": (d,),
        f"{prefix}.attn.w_qkv": (d, 3 * d),
        f"{prefix}.attn.b_qkv": (3 * d,),
        f"{prefix}.attn.w_o": (d, d),
        f"{prefix}.attn.b_o": (d,),
    }
    if cross:
        shapes.update(
            {
                f"{prefix}.lnx.g": (d,),
                f"{prefix}.lnx.b": (d,),
                f"{prefix}.xattn.w_q": (d, d),
                f"{prefix}.xattn.b_q": (d,),
                f"{prefix}.xattn.w_kv": (d, 2 * d),
                f"{prefix}.xattn.b_kv": (2 * d,),
                f"{prefix}.xattn.w_o": (d, d),
                f"{prefix}.xattn.b_o": (d,),
            }
        )
    shapes.update(
        {
            f"{prefix}.ln2.g": (d,),
            f"{prefix}.ln2.b": (d,),
            f"{prefix}.mlp.w_in": (d, f),
            f"{prefix}.mlp.b_in": (f,),
            f"{prefix}.mlp.w_out": (f, d),
            f"{prefix}.mlp.b_out": (d,),
        }
    )
    return shapes


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name the architecture declares, with its shape."""
    d, f, V, L = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (V, d)}
    if config.arch == "decoder_only":
        shapes["pos_emb"] = (L, d)
        for i in range(config.n_layers):
            shapes.update(_block_shapes(f"h{i}", d, f, cross=False))
        shapes["ln_f.g"] = (d,)
        shapes["ln_f.b"] = (d,)
    else:
        shapes["enc.pos_emb"] = (L, d)
        shapes["dec.pos_emb"] = (L, d)
        for i in range(config.n_layers):
            shapes.update(_block_shapes(f"enc.h{i}", d, f, cross=False))
        shapes["enc.ln_f.g"] = (d,)
        shapes["enc.ln_f.b"] = (d,)
        for i in range(config.n_layers):
            shapes.update(_block_shapes(f"dec.h{i}", d, f, cross=True))
        shapes["dec.ln_f.g"] = (d,)
        shapes["dec.ln_f.b"] = (d,)
    if not config.tie_embeddings:
        shapes["lm_head"] = (d, V)
    return shapes


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form count matching the module docstring."""
    d, f, V, L, n = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len, config.n_layers
    block = 4 * d * d + 2 * d * f + 9 * d + f
    if config.arch == "decoder_only":
        total = V * d + L * d + n * block + 2 * d
    else:
        total = V * d + 2 * L * d + n * block + n * (block + 4 * d * d + 6 * d) + 4 * d
    if not config.tie_embeddings:
        total += d * V
    return total


@dataclass
class Batch:
    """Padded model inputs.

    ``tokens`` feed the (decoder) stack; ``source`` feeds the encoder for the
    encoder-decoder architecture. ``targets[b, t]`` is the token predicted by
    ``logits[b, t]`` and ``mask`` marks supervised positions.
    """

    tokens: np.ndarray
    targets: np.ndarray | None = None
    mask: np.ndarray | None = None
    source: np.ndarray | None = None


@dataclass
class ModelParameters:
    """Named parameter tensors plus the config that declared them."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        declared = parameter_shapes(self.config)
        if set(declared) != set(self.tensors):
            missing = sorted(set(declared) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(declared))
            raise ValueError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in declared.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def logits(self, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
        if self.config.arch == "decoder_only":
            return forward_decoder_only(self, batch.tokens, rng=rng)
        return forward_encoder_decoder(self, batch.source, batch.tokens, rng=rng)

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()}
        )


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=None) -> ModelParameters:
    """Weights ~ N(0, 0.02), layer-norm gains 1, biases 0."""
    dtype = np.dtype(dtype or ad.get_default_dtype())
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape, dtype=dtype)
        elif leaf.startswith("b") and len(shape) == 1:
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = (rng.standard_normal(shape) * 0.02).astype(dtype)
        tensors[name] = Tensor(arr, requires_grad=True)
    return ModelParameters(config, tensors)


# ---------------------------------------------------------------------------
# forward passes


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return ad.mul(x, Tensor(keep))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return ad.transpose(ad.reshape(x, (B, T, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, blocked: np.ndarray, n_heads: int) -> Tensor:
    """Multi-head attention; ``blocked`` broadcasts to [B, H, Tq, Tk]."""
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    dh = qh.shape[-1]
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    scores = ad.masked_fill(scores, blocked, _NEG)
    return _merge_heads(ad.matmul(ad.softmax(scores, axis=-1), vh))


def _self_attention(p, prefix: str, x: Tensor, blocked: np.ndarray, cfg: ModelConfig) -> Tensor:
    d = cfg.d_model
    qkv = ad.add(ad.matmul(x, p[f"{prefix}.attn.w_qkv"]), p[f"{prefix}.attn.b_qkv"])
    B, T, _ = qkv.shape
    qkv = ad.reshape(qkv, (B, T, 3, d))
    q = ad.reshape(_take(qkv, 0), (B, T, d))
    k = ad.reshape(_take(qkv, 1), (B, T, d))
    v = ad.reshape(_take(qkv, 2), (B, T, d))
    out = _attend(q, k, v, blocked, cfg.n_heads)
    return ad.add(ad.matmul(out, p[f"{prefix}.attn.w_o"]), p[f"{prefix}.attn.b_o"])


def _take(x: Tensor, j: int) -> Tensor:
    """``x[:, :, j, :]`` for a [B, T, S, d] tensor, differentiable."""
    B, T, S, d = x.shape
    data = x.data[:, :, j, :]

    def backward_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, j, :] = g
        return (full,)

    return ad._make(np.ascontiguousarray(data), (x,), backward_fn, "take")


def _cross_attention(p, prefix: str, x: Tensor, memory: Tensor, blocked: np.ndarray, cfg: ModelConfig) -> Tensor:
    d = cfg.d_model
    q = ad.add(ad.matmul(x, p[f"{prefix}.xattn.w_q"]), p[f"{prefix}.xattn.b_q"])
    kv = ad.add(ad.matmul(memory, p[f"{prefix}.xattn.w_kv"]), p[f"{prefix}.xattn.b_kv"])
    B, S, _ = kv.shape
    kv = ad.reshape(kv, (B, S, 2, d))
    k = _take(kv, 0)
    v = _take(kv, 1)
    out = _attend(q, k, v, blocked, cfg.n_heads)
    return ad.add(ad.matmul(out, p[f"{prefix}.xattn.w_o"]), p[f"{prefix}.xattn.b_o"])


def _mlp(p, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.add(ad.matmul(x, p[f"{prefix}.mlp.w_in"]), p[f"{prefix}.mlp.b_in"]))
    return ad.add(ad.matmul(h, p[f"{prefix}.mlp.w_out"]), p[f"{prefix}.mlp.b_out"])


def _block(p, prefix, x, self_blocked, cfg, rng, memory=None, cross_blocked=None) -> Tensor:
    eps = cfg.ln_eps
    h = ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"], eps)
    x = ad.add(x, _dropout(_self_attention(p, prefix, h, self_blocked, cfg), cfg.dropout_rate, rng))
    if memory is not None:
        h = ad.layer_norm(x, p[f"{prefix}.lnx.g"], p[f"{prefix}.lnx.b"], eps)
        x = ad.add(x, _dropout(_cross_attention(p, prefix, h, memory, cross_blocked, cfg), cfg.dropout_rate, rng))
    h = ad.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"], eps)
    return ad.add(x, _dropout(_mlp(p, prefix, h), cfg.dropout_rate, rng))


def _embed(p, ids: np.ndarray, pos_name: str, cfg: ModelConfig, rng) -> Tensor:
    T = ids.shape[1]
    pos = ad.embedding_lookup(p[pos_name], np.arange(T))
    return _dropout(ad.add(ad.embedding_lookup(p["tok_emb"], ids), pos), cfg.dropout_rate, rng)


def _project(p, x: Tensor, final: str, cfg: ModelConfig) -> Tensor:
    h = ad.layer_norm(x, p[f"{final}.g"], p[f"{final}.b"], cfg.ln_eps)
    if cfg.tie_embeddings:
        return ad.matmul(h, ad.transpose(p["tok_emb"], (1, 0)))
    return ad.matmul(h, p["lm_head"])


def _as_batch(ids, cfg: ModelConfig, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(ids, dtype=np.int64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise ValueError(f"{what}: expected a nonempty 1-D or 2-D id array, got shape {arr.shape}")
    if arr.shape[1] > cfg.max_seq_len:
        raise LengthError(f"{what}: length {arr.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if arr.min() < 0 or arr.max() >= cfg.vocab_size:
        raise IndexError(f"{what}: token id out of range for vocab_size {cfg.vocab_size}")
    return arr, single


def _causal_blocked(T: int) -> np.ndarray:
    return np.triu(np.ones((T, T), dtype=bool), k=1)


def forward_decoder_only(params: ModelParameters, token_ids, rng: np.random.Generator | None = None) -> Tensor:
    """Logits ``[T, V]`` (or ``[B, T, V]`` for batched ids).

    Position ``t`` only sees tokens ``<= t``; right padding is therefore
    harmless for the real positions.
    """
    cfg = params.config
    if cfg.arch != "decoder_only":
        raise ValueError("forward_decoder_only called with an encoder_decoder config")
    ids, single = _as_batch(token_ids, cfg, "forward_decoder_only")
    x = _embed(params, ids, "pos_emb", cfg, rng)
    blocked = _causal_blocked(ids.shape[1])
    for i in range(cfg.n_layers):
        x = _block(params, f"h{i}", x, blocked, cfg, rng)
    logits = _project(params, x, "ln_f", cfg)
    return ad.reshape(logits, logits.shape[1:]) if single else logits


def encode(params: ModelParameters, src: np.ndarray, rng=None) -> Tensor:
    cfg = params.config
    key_pad = (src == PAD_ID)[:, None, None, :]
    x = _embed(params, src, "enc.pos_emb", cfg, rng)
    for i in range(cfg.n_layers):
        x = _block(params, f"enc.h{i}", x, key_pad, cfg, rng)
    return ad.layer_norm(x, params["enc.ln_f.g"], params["enc.ln_f.b"], cfg.ln_eps)


def forward_encoder_decoder(
    params: ModelParameters, source_ids, target_ids, rng: np.random.Generator | None = None
) -> Tensor:
    """Logits over target positions, ``[T_tgt, V]`` or ``[B, T_tgt, V]``.

    The encoder is bidirectional over non-pad source tokens; the decoder is
    causal and cross-attends to every non-pad source position.
    """
    cfg = params.config
    if cfg.arch != "encoder_decoder":
        raise ValueError("forward_encoder_decoder called with a decoder_only config")
    src, single_s = _as_batch(source_ids, cfg, "forward_encoder_decoder(source)")
    tgt, single_t = _as_batch(target_ids, cfg, "forward_encoder_decoder(target)")
    if src.shape[0] != tgt.shape[0]:
        raise ValueError("source and target batch sizes differ")
    memory = encode(params, src, rng)
    cross_blocked = (src == PAD_ID)[:, None, None, :]
    x = _embed(params, tgt, "dec.pos_emb", cfg, rng)
    causal = _causal_blocked(tgt.shape[1])
    for i in range(cfg.n_layers):
        x = _block(params, f"dec.h{i}", x, causal, cfg, rng, memory=memory, cross_blocked=cross_blocked)
    logits = _project(params, x, "dec.ln_f", cfg)
    return ad.reshape(logits, logits.shape[1:]) if (single_s and single_t) else logits


def sequence_log_probs(logits: Tensor, targets, response_mask) -> tuple[Tensor, Tensor]:
    """Per-position ``log P(target_t | ...)`` and their masked mean.

    ``logits[..., t, :]`` must already be aligned to predict ``targets[..., t]``.
    Summing the per-position values over the mask gives the log of the
    chain-rule product over the response.
    """
    targets = np.asarray(targets)
    mask = np.asarray(response_mask, dtype=bool)
    if not mask.any():
        raise ad.ContractError("sequence_log_probs: empty response mask")
    V = logits.shape[-1]
    logp = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, np.where(mask, targets, 0)[..., None], 1.0, axis=-1)
    onehot *= mask[..., None]
    picked = ad.mul(logp, Tensor(onehot))
    flat = ad.reshape(picked, (-1, V))
    per_pos = ad.matmul(flat, Tensor(np.ones((V, 1), dtype=logits.dtype)))
    per_pos = ad.reshape(per_pos, targets.shape)
    mean = ad.scale(ad.sum_all(per_pos), 1.0 / mask.sum())
    return per_pos, mean


class PersonaBlindModel:
    """Ablation wrapper that overwrites every persona-segment token with ``<unk>``.

    Different persona orderings then serialize to identical inputs, so the
    wrapped model is exactly order-invariant. Used to validate the analysis
    procedures.
    """

    def __init__(self, inner: ModelParameters, ctx_id: int, unk_id: int, bos_id: int):
        self.inner = inner
        self.config = inner.config
        self.ctx_id = ctx_id
        self.unk_id = unk_id
        self.bos_id = bos_id

    def _blind(self, ids: np.ndarray, skip_first: bool) -> np.ndarray:
        out = ids.copy()
        for row in out:
            hits = np.flatnonzero(row == self.ctx_id)
            end = int(hits[0]) if hits.size else 0
            start = 1 if skip_first and row[0] == self.bos_id else 0
            row[start:end] = self.unk_id
        return out

    def logits(self, batch: Batch, rng=None) -> Tensor:
        if self.config.arch == "decoder_only":
            blinded = Batch(self._blind(np.atleast_2d(batch.tokens), True), batch.targets, batch.mask)
        else:
            blinded = Batch(batch.tokens, batch.targets, batch.mask, self._blind(np.atleast_2d(batch.source), False))
        return self.inner.logits(blinded, rng)


# ---------------------------------------------------------------------------
# checkpoint format


MAGIC = b"ORGC"
FORMAT_VERSION = 1


def checkpoint_bytes(params: ModelParameters) -> bytes:
    """Serialize to the ORGC layout: magic, u32 version, u64 header length, JSON, f32 payload."""
    header: dict = {"__metadata__": {"config": params.config.to_dict()}}
    chunks = []
    offset = 0
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name].data, dtype="<f4")
        header[name] = {"dtype": "f32", "offset": offset, "shape": list(arr.shape)}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(params: ModelParameters, path: str | os.PathLike) -> Path:
    """Write atomically so an interrupted run never leaves a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> ModelParameters:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an ORGC checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    payload = memoryview(raw)[16 + hlen :]
    config = ModelConfig.from_dict(header.pop("__metadata__")["config"])
    tensors = {}
    for name, entry in header.items():
        if entry["dtype"] != "f32":
            raise ValueError(f"{path}: unsupported dtype {entry['dtype']} for {name}")
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=entry["offset"]).reshape(entry["shape"])
        tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    return ModelParameters(config, tensors)
