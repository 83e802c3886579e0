import math

import numpy as np
import pytest

from orderlab import autodiff as ad
from orderlab.data import GenConfig, generate_synthetic_corpus, identity, make_batch
from orderlab.model import Batch, ModelConfig, checkpoint_bytes, forward_decoder_only, init_params
from orderlab.training import (
    NonFiniteGradient,
    OptimizerState,
    TrainConfig,
    adam_step,
    evaluate_losses,
    nll_batch,
    orig_batch_loss,
    train,
)


def small_model(vocab, arch="decoder_only", **kw):
    base = dict(arch=arch, vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=1, d_ff=32, max_seq_len=64)
    base.update(kw)
    return ModelConfig(**base)


def keep_identity(n, rng):
    return identity(n)


def reverse(n, rng):
    return tuple(range(n - 1, -1, -1))


def test_nll_single_token_vocab():
    cfg = ModelConfig(vocab_size=1, d_model=4, n_heads=1, n_layers=1, d_ff=4, max_seq_len=4)
    p = init_params(cfg, np.random.default_rng(0))
    z = np.zeros((1, 3), dtype=int)
    assert float(nll_batch(p, Batch(z, z, np.ones((1, 3), bool))).data) == 0.0


def test_nll_near_log_v_at_init(small_corpus):
    train_set, _, vocab = small_corpus
    p = init_params(small_model(vocab), np.random.default_rng(0))
    batch = make_batch(list(train_set)[:8], [identity(3)] * 8, vocab, "decoder_only")
    loss = float(nll_batch(p, batch).data)
    assert abs(loss - math.log(len(vocab))) <= 0.15 * math.log(len(vocab))


def test_nll_hand_rolled(f64):
    cfg = ModelConfig(vocab_size=5, d_model=4, n_heads=1, n_layers=1, d_ff=4, max_seq_len=4)
    p = init_params(cfg, np.random.default_rng(1))
    for t in p.tensors.values():
        t.data = t.data * 40
    tokens, targets = np.array([[1, 2, 3]]), np.array([[2, 3, 4]])
    logits = forward_decoder_only(p, tokens[0]).data
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    expected = -np.mean([logp[t, targets[0, t]] for t in range(3)])
    got = float(nll_batch(p, Batch(tokens, targets, np.ones((1, 3), bool))).data)
    assert abs(got - expected) < 1e-12


@pytest.mark.parametrize("arch", ["decoder_only", "encoder_decoder"])
def test_orig_identity_kl_zero(small_corpus, arch):
    train_set, _, vocab = small_corpus
    p = init_params(small_model(vocab, arch), np.random.default_rng(0))
    cfg = TrainConfig(objective="orig", gamma=1.0)
    parts = orig_batch_loss(p, list(train_set)[:6], vocab, np.random.default_rng(0), cfg, permute=keep_identity)
    assert float(parts.kl.data) <= 1e-9
    assert float(parts.total.data) == pytest.approx(float(parts.nll.data), abs=1e-9)


def test_orig_gamma_zero_matches_mle(small_corpus):
    train_set, _, vocab = small_corpus
    samples = list(train_set)[:6]
    p = init_params(small_model(vocab), np.random.default_rng(0))
    parts = orig_batch_loss(p, samples, vocab, np.random.default_rng(0), TrainConfig(objective="orig", gamma=0.0))
    ad.backward(parts.total)
    g_orig = {k: t.grad.copy() for k, t in p.items()}
    p.zero_grad()
    loss = nll_batch(p, make_batch(samples, [identity(3)] * 6, vocab, "decoder_only", 64))
    ad.backward(loss)
    assert float(parts.total.data) == float(loss.data)
    for k, t in p.items():
        assert g_orig[k].tobytes() == t.grad.tobytes()


@pytest.mark.parametrize("direction", ["forward", "reverse", "symmetric"])
def test_orig_kl_brute_force(f64, small_corpus, direction):
    train_set, _, vocab = small_corpus
    p = init_params(small_model(vocab), np.random.default_rng(2))
    for t in p.tensors.values():
        t.data = t.data * 20
    samples = list(train_set)[:3]
    cfg = TrainConfig(objective="orig", kl_direction=direction)
    parts = orig_batch_loss(p, samples, vocab, np.random.default_rng(0), cfg, permute=reverse)

    def logp(row):
        z = row - row.max(-1, keepdims=True)
        return z - np.log(np.exp(z).sum(-1, keepdims=True))

    kls = []
    for s in samples:
        a = make_batch([s], [identity(3)], vocab, "decoder_only")
        b = make_batch([s], [reverse(3, None)], vocab, "decoder_only")
        la = logp(forward_decoder_only(p, a.tokens[0]).data)[a.mask[0]]
        lb = logp(forward_decoder_only(p, b.tokens[0]).data)[b.mask[0]]
        fwd = (np.exp(la) * (la - lb)).sum(-1)
        rev = (np.exp(lb) * (lb - la)).sum(-1)
        kls.extend({"forward": fwd, "reverse": rev, "symmetric": (fwd + rev) / 2}[direction])
    assert abs(float(parts.kl.data) - np.mean(kls)) < 1e-6
    assert float(parts.kl.data) > 0


def test_orig_gradient_flows_through_both_passes(small_corpus):
    train_set, _, vocab = small_corpus
    samples = list(train_set)[:4]
    p = init_params(small_model(vocab), np.random.default_rng(0))
    cfg = TrainConfig(objective="orig", gamma=1.0)
    parts = orig_batch_loss(p, samples, vocab, np.random.default_rng(0), cfg, permute=reverse)
    ad.backward(parts.kl)
    assert any(np.any(t.grad != 0) for _, t in p.items())


def test_adam_zero_gradient():
    p = init_params(ModelConfig(vocab_size=9, d_model=4, n_heads=1, n_layers=1, d_ff=4, max_seq_len=4),
                    np.random.default_rng(0))
    before = {k: t.data.copy() for k, t in p.items()}
    state = OptimizerState.zeros_like(p)
    for k in state.m:
        state.m[k] += 1.0
        state.v[k] += 1.0
    adam_step(p, {k: np.zeros_like(t.data) for k, t in p.items()}, state, TrainConfig())
    # stored momentum still moves the weights even though this gradient is zero
    assert p["tok_emb"].data.tobytes() != before["tok_emb"].tobytes()
    np.testing.assert_allclose(state.m["tok_emb"], 0.9)
    np.testing.assert_allclose(state.v["tok_emb"], 0.999)


def test_adam_zero_gradient_fresh_state_keeps_params():
    p = init_params(ModelConfig(vocab_size=9, d_model=4, n_heads=1, n_layers=1, d_ff=4, max_seq_len=4),
                    np.random.default_rng(0))
    before = {k: t.data.copy() for k, t in p.items()}
    adam_step(p, {}, OptimizerState.zeros_like(p), TrainConfig())
    for k, t in p.items():
        assert t.data.tobytes() == before[k].tobytes()


def test_adam_scalar_hand_case():
    from orderlab.autodiff import Tensor
    from orderlab.model import ModelParameters

    class Single(ModelParameters):
        def __post_init__(self):
            pass

    p = Single(None, {"w": Tensor(np.array([0.0], dtype=np.float64), requires_grad=True)})
    state = OptimizerState.zeros_like(p)
    adam_step(p, {"w": np.array([1.0])}, state, TrainConfig(lr=0.1))
    assert abs(p["w"].data[0] - (-0.1 / (1 + 1e-8))) < 1e-12
    assert state.step == 1


def test_adam_rejects_nan_and_names_parameter():
    p = init_params(ModelConfig(vocab_size=9, d_model=4, n_heads=1, n_layers=1, d_ff=4, max_seq_len=4),
                    np.random.default_rng(0))
    grads = {k: np.zeros_like(t.data) for k, t in p.items()}
    grads["h0.mlp.w_in"][0, 0] = np.nan
    with pytest.raises(NonFiniteGradient, match="h0.mlp.w_in"):
        adam_step(p, grads, OptimizerState.zeros_like(p), TrainConfig())


def test_train_smoke_and_determinism(tmp_path):
    train_set, _, vocab = generate_synthetic_corpus(GenConfig(n_personas=2, n_train=50, n_test=0, n_categories=3, seed=1))
    mc = small_model(vocab, max_seq_len=48)
    tc = TrainConfig(epochs=30, lr=3e-3, batch_size=25)
    p1, log1 = train(mc, train_set, vocab, tc, checkpoint_dir=tmp_path / "a")
    p2, log2 = train(mc, train_set, vocab, tc)
    assert log1.epochs[-1].nll < log1.epochs[0].nll
    assert len(log1.epochs) == 30
    assert log1.to_json() == log2.to_json()
    assert checkpoint_bytes(p1) == checkpoint_bytes(p2)
    assert (tmp_path / "a" / "final.orgc").read_bytes() == checkpoint_bytes(p1)
    assert (tmp_path / "a" / "epoch_030.orgc").exists()


def test_gamma_zero_training_matches_mle():
    train_set, _, vocab = generate_synthetic_corpus(GenConfig(n_personas=3, n_train=40, n_test=0, n_categories=4, seed=2))
    mc = small_model(vocab)
    a, _ = train(mc, train_set, vocab, TrainConfig(objective="mle", epochs=2, batch_size=8))
    b, _ = train(mc, train_set, vocab, TrainConfig(objective="orig", gamma=0.0, epochs=2, batch_size=8))
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_nan_abort_during_training():
    train_set, _, vocab = generate_synthetic_corpus(GenConfig(n_personas=2, n_train=8, n_test=0, n_categories=3, seed=1))
    mc = small_model(vocab)
    p = init_params(mc, np.random.default_rng(0))
    p["ln_f.g"].data[:] = np.nan
    with pytest.raises(NonFiniteGradient):
        train(mc, train_set, vocab, TrainConfig(epochs=1), params=p)


def test_heldout_kl_monotone_in_gamma():
    train_set, test_set, vocab = generate_synthetic_corpus(
        GenConfig(n_personas=3, n_train=200, n_test=40, n_categories=4, seed=5)
    )
    mc = small_model(vocab, d_model=32, d_ff=64)
    kls = []
    for gamma in (0.0, 1.0, 10.0):
        tc = TrainConfig(objective="orig", gamma=gamma, kl_direction="symmetric", epochs=15, lr=3e-3, batch_size=20)
        p, log = train(mc, train_set, vocab, tc)
        assert all(r.kl >= 0 for r in log.epochs)
        kls.append(evaluate_losses(p, test_set, vocab, seed=0, direction="symmetric")[1])
    assert kls[0] > kls[1] > kls[2]
