import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from daml_atm.corpus import StyleRecord, encode_input
from daml_atm.seq2seq import (ModelConfig, decoder_states, discriminate, encode, generate,
                              generate_batch, init_gamma, init_theta, load_checkpoint, make_batch,
                              output_logits, forward_states, save_checkpoint, sequence_logprob)

from conftest import tiny_config


@pytest.fixture
def toy():
    """10-token vocab: pad, bos, eos, then 7 ordinary ids."""
    cfg = tiny_config(10, max_len=8)
    return init_theta(cfg, 1), init_gamma(cfg, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=0)
    assert ModelConfig(vocab_size=10).disc_widths() == [64, 64, 64, 32, 2]


def test_discriminator_has_four_linear_layers():
    gamma = init_gamma(ModelConfig(vocab_size=10), 0)
    assert sorted(n for n in gamma.names() if n.endswith(".w")) == [f"disc.{i}.w" for i in range(4)]


def test_encode_shape_and_determinism(toy):
    theta, _ = toy
    h = encode(theta, [3, 4, 5, 6, 2])
    assert h.shape == (5, 16)
    assert torch.equal(h, encode(theta, [3, 4, 5, 6, 2]))
    assert torch.isfinite(h).all()


def test_encode_is_position_aware(toy):
    theta, _ = toy
    a = encode(theta, [3, 4, 5, 6, 2])
    b = encode(theta, [3, 4, 6, 5, 2])
    assert not torch.allclose(a, b)


def test_encode_rejects_bad_ids(toy):
    theta, _ = toy
    with pytest.raises(ValueError):
        encode(theta, [3, 10])
    with pytest.raises(ValueError):
        encode(theta, [3] * 9)


def test_sequence_logprob_nonpositive_and_needs_eos(toy):
    theta, _ = toy
    assert float(sequence_logprob(theta, [3, 4, 2], [5, 6, 2]).detach()) <= 0
    with pytest.raises(ValueError):
        sequence_logprob(theta, [3, 4, 2], [5, 6])
    with pytest.raises(ValueError):
        sequence_logprob(theta, [3, 2], [4] * 8 + [2])


def test_zero_output_layer_gives_uniform(toy):
    theta, _ = toy
    zeroed = theta.replace({**theta.tensors, "embed.tokens": theta["embed.tokens"].detach().clone(),
                            "embed.out_b": torch.zeros(10)})
    zeroed.tensors["decoder.ln_f.g"] = torch.zeros(16)
    zeroed.tensors["decoder.ln_f.b"] = torch.zeros(16)
    lp = float(sequence_logprob(zeroed, [3, 4, 2], [5, 6, 7, 2]).detach())
    assert lp == pytest.approx(-4 * math.log(10), abs=1e-5)


def test_length_one_outputs_sum_to_one(toy):
    """Enumerate all 10 tokens at the first decoding step."""
    theta, _ = toy
    total = 0.0
    for v in range(10):
        gold = make_batch([[3, 4, 2]], [[v]])
        states = forward_states(theta, gold)
        total += float(torch.softmax(output_logits(theta, states), -1)[0, 0, v])
    assert total == pytest.approx(1.0, abs=1e-6)


def test_decoder_states_shape_and_grad(toy):
    theta, _ = toy
    s = decoder_states(theta, [3, 4, 2], [5, 6, 7, 8, 9, 4, 2])
    assert s.shape == (7, 16)
    s.mean(0)[0].backward()
    grads = [t.grad for t in theta.values() if t.grad is not None]
    assert grads and all(torch.isfinite(g).all() for g in grads)


def test_states_depend_on_style_prefix(small_vocab, tiny_params):
    theta, _ = tiny_params
    r = StyleRecord("the pizza is good", "positive", "restaurant")
    out = encode_input(r, "positive", "reconstruct", small_vocab, 16)[2:]
    pos = decoder_states(theta, encode_input(r, "positive", "reconstruct", small_vocab, 16), out)
    neg = decoder_states(theta, encode_input(r, "negative", "reconstruct", small_vocab, 16), out)
    assert not torch.allclose(pos, neg)


def test_discriminate_softmax_and_duplication(toy):
    theta, gamma = toy
    s = decoder_states(theta, [3, 4, 2], [5, 6, 2])
    logits = discriminate(gamma, s)
    assert float(torch.softmax(logits, -1).sum()) == pytest.approx(1.0, abs=1e-6)
    doubled = torch.cat([s, s], 0)
    assert torch.allclose(discriminate(gamma, doubled), logits, atol=1e-6)
    with pytest.raises(ValueError):
        discriminate(gamma, s[:0])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(3, 9), min_size=1, max_size=6), st.integers(1, 8))
def test_generate_contract(body, max_len):
    cfg = tiny_config(10, max_len=8)
    theta = init_theta(cfg, 2)
    ids = [*body, 2]
    out = generate(theta, ids, max_len)
    assert 1 <= len(out) <= max_len
    assert out.count(2) <= 1 and (2 not in out or out[-1] == 2)
    assert generate(theta, ids, max_len) == out


def test_generate_batch_matches_single(toy):
    theta, _ = toy
    inputs = [[3, 4, 2], [5, 6, 7, 2]]
    assert generate_batch(theta, inputs, 6) == [generate(theta, x, 6) for x in inputs]


def test_paramset_copies_do_not_alias(toy):
    theta, gamma = toy
    leaf = theta.leaf()
    with torch.no_grad():
        leaf["embed.out_b"].add_(1.0)
    assert float(theta["embed.out_b"].abs().sum()) == 0
    frozen = gamma.freeze()
    assert frozen.frozen and not any(t.requires_grad for t in frozen.values())
    assert frozen.checksum() == gamma.checksum()


def test_paramset_locate(toy):
    theta, _ = toy
    first = theta.names()[0]
    n0 = theta[first].numel()
    assert theta.locate(0) == (first, 0)
    assert theta.locate(n0) == (theta.names()[1], 0)
    with pytest.raises(IndexError):
        theta.locate(theta.numel())


def test_checkpoint_roundtrip(tmp_path, toy):
    theta, gamma = toy
    save_checkpoint(tmp_path / "c.pt", theta, gamma, vocab_digest="abc", extra={"k": 1})
    ck = load_checkpoint(tmp_path / "c.pt")
    assert ck["theta"].checksum() == theta.checksum()
    assert ck["gamma"].checksum() == gamma.checksum()
    assert ck["vocab_digest"] == "abc" and ck["extra"] == {"k": 1}
    assert ck["theta"].config == theta.config
    assert not list(tmp_path.glob("*.tmp"))


def test_float64_forward_finite(tiny_params64, small_vocab):
    theta, gamma = tiny_params64
    assert theta.dtype == torch.float64
    h = encode(theta, [small_vocab.task_id("reconstruct"), small_vocab.style_id("positive"), 12, 2])
    assert h.dtype == torch.float64 and torch.isfinite(h).all()
