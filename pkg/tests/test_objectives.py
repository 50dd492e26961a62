import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from daml_atm.corpus import CorpusError, MetaTask, StyleRecord
from daml_atm.objectives import (ATMObjective, FreezeError, cls_batch, loss_cls, loss_rec, loss_style,
                                 rec_value, style_value, task_losses)

from conftest import records

# ln(1 + e^-2): cross-entropy of logits (2, 0) against class 0
CE_2_0 = 0.12692801104297263

RECS = records("restaurant", [("the pizza is good", "positive"), ("the service is rude", "negative"),
                              ("the pasta is delicious", "positive"), ("the soup is cold", "negative")])


def constant_gamma(gamma, out_bias):
    """Discriminator whose logits are ``out_bias`` for every input."""
    t = {n: torch.zeros_like(v) for n, v in gamma.items()}
    last = max(int(n.split(".")[1]) for n in t)
    t[f"disc.{last}.b"] = torch.tensor(out_bias, dtype=gamma.dtype)
    return gamma.replace(t).freeze()


def zero_output(theta):
    t = dict(theta.tensors)
    for n in ("decoder.ln_f.g", "decoder.ln_f.b", "embed.out_b"):
        t[n] = torch.zeros_like(theta[n])
    return theta.replace(t)


def test_uniform_discriminator_gives_ln2(tiny_params, small_vocab):
    theta, gamma = tiny_params
    v = style_value(theta, constant_gamma(gamma, [0.0, 0.0]), RECS, small_vocab)
    assert float(v) == pytest.approx(math.log(2), abs=1e-6)


def test_hand_logits_style_loss(tiny_params, small_vocab):
    theta, gamma = tiny_params
    g = constant_gamma(gamma, [2.0, 0.0])      # always favours styles[0] = negative
    positives = [r for r in RECS if r.style == "positive"]
    negatives = [r for r in RECS if r.style == "negative"]
    # the style loss targets the opposite style
    assert float(style_value(theta, g, positives, small_vocab)) == pytest.approx(CE_2_0, abs=1e-6)
    assert float(style_value(theta, g, negatives, small_vocab)) == pytest.approx(CE_2_0 + 2, abs=1e-6)
    assert loss_cls(theta, g, negatives, small_vocab).item() == pytest.approx(CE_2_0, abs=1e-6)


def test_zero_output_rec_loss_is_log_vocab(tiny_params, small_vocab):
    theta, _ = tiny_params
    v = rec_value(zero_output(theta), RECS, small_vocab)
    assert float(v) == pytest.approx(math.log(len(small_vocab)), abs=1e-5)


def test_losses_nonnegative_and_finite(tiny_params, small_vocab):
    theta, gamma = tiny_params
    for lv in (loss_rec(theta, RECS, small_vocab), loss_cls(theta, gamma, RECS, small_vocab),
               loss_style(theta, gamma.freeze(), RECS, small_vocab)):
        assert math.isfinite(lv.item()) and lv.item() >= 0 and lv.count == len(RECS)


def test_empty_batch_rejected(tiny_params, small_vocab):
    theta, gamma = tiny_params
    with pytest.raises(ValueError):
        loss_rec(theta, [], small_vocab)
    with pytest.raises(ValueError):
        loss_cls(theta, gamma, [], small_vocab)


def test_style_needs_frozen_gamma(tiny_params, small_vocab, objective):
    theta, gamma = tiny_params
    with pytest.raises(FreezeError):
        loss_style(theta, gamma, RECS, small_vocab)
    with pytest.raises(FreezeError):
        objective.style(theta, gamma, RECS)


def test_style_loss_touches_only_theta(tiny_params, small_vocab):
    theta, gamma = tiny_params
    lv = loss_style(theta, gamma.freeze(), RECS, small_vocab).with_grads()
    assert set(lv.grads) == set(theta.names())
    assert any(float(g.abs().sum()) > 0 for g in lv.grads.values())
    assert lv.value.grad_fn is not None


def test_cls_loss_touches_only_gamma(tiny_params, small_vocab):
    theta, gamma = tiny_params
    lv = loss_cls(theta, gamma, RECS, small_vocab)
    lv.value.backward()
    assert all(t.grad is None for t in theta.values())
    assert any(t.grad is not None and float(t.grad.abs().sum()) > 0 for t in gamma.values())


def test_cls_batch_covers_every_prefix(small_vocab):
    b = cls_batch(RECS, small_vocab, 16)
    assert len(b) == len(small_vocab.styles) * len(RECS)
    style_ids = {int(x) for x in b.src[:, 1]}
    assert style_ids == {small_vocab.style_id(s) for s in small_vocab.styles}


@settings(max_examples=10, deadline=None)
@given(st.permutations(range(4)))
def test_losses_invariant_to_batch_order(perm):
    # parameters built inside so hypothesis does not share mutable fixtures
    from daml_atm.corpus import build_vocab
    from daml_atm.seq2seq import init_gamma, init_theta
    from conftest import dataset, tiny_config

    vocab = build_vocab([dataset("restaurant", [(r.text, r.style) for r in RECS])])
    cfg = tiny_config(len(vocab))
    theta, gamma = init_theta(cfg, 0), init_gamma(cfg, 0).freeze()
    shuffled = [RECS[i] for i in perm]
    assert float(rec_value(theta, shuffled, vocab)) == pytest.approx(float(rec_value(theta, RECS, vocab)), abs=1e-6)
    assert float(style_value(theta, gamma, shuffled, vocab)) == pytest.approx(
        float(style_value(theta, gamma, RECS, vocab)), abs=1e-6)


def test_mean_over_equal_halves(tiny_params, small_vocab):
    theta, gamma = tiny_params
    g = gamma.freeze()
    a, b = RECS[:2], RECS[2:]
    whole = float(rec_value(theta, RECS, small_vocab))
    assert whole == pytest.approx((float(rec_value(theta, a, small_vocab)) +
                                   float(rec_value(theta, b, small_vocab))) / 2, abs=1e-6)
    whole = float(style_value(theta, g, RECS, small_vocab))
    assert whole == pytest.approx((float(style_value(theta, g, a, small_vocab)) +
                                   float(style_value(theta, g, b, small_vocab))) / 2, abs=1e-6)


def _fd_check(fn, theta, n_coords=6, eps=1e-6):
    value = fn(theta)
    grads = torch.autograd.grad(value, theta.values(), allow_unused=True)
    gen = torch.Generator().manual_seed(0)
    idx = torch.randint(theta.numel(), (n_coords,), generator=gen).tolist()
    for flat in idx:
        name, off = theta.locate(flat)
        k = theta.names().index(name)
        analytic = 0.0 if grads[k] is None else float(grads[k].reshape(-1)[off])
        vals = []
        for sign in (1, -1):
            t = {n: w.detach().clone() for n, w in theta.items()}
            t[name].reshape(-1)[off] += sign * eps
            vals.append(float(fn(theta.replace(t))))
        numeric = (vals[0] - vals[1]) / (2 * eps)
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-7), name


def test_rec_gradient_matches_finite_differences(tiny_params64, small_vocab):
    theta, _ = tiny_params64
    _fd_check(lambda p: rec_value(p, RECS, small_vocab), theta.leaf())


def test_style_gradient_matches_finite_differences(tiny_params64, small_vocab):
    theta, gamma = tiny_params64
    g = gamma.freeze()
    _fd_check(lambda p: style_value(p, g, RECS, small_vocab), theta.leaf())


def test_impure_task_rejected(tiny_params, small_vocab):
    theta, gamma = tiny_params
    task = MetaTask("restaurant", [RECS[0], StyleRecord("the plot is dull", "negative", "movie")], "meta_train")
    with pytest.raises(CorpusError):
        task_losses(theta, gamma.freeze(), task, small_vocab)
    pure = MetaTask("restaurant", RECS, "meta_train")
    rec, sty = task_losses(theta, gamma.freeze(), pure, small_vocab)
    assert rec.item() > 0 and sty.item() > 0


def test_ablation_switches(tiny_params, small_vocab):
    theta, gamma = tiny_params
    g = gamma.freeze()
    off = ATMObjective(small_vocab, disable_rec=True, disable_style=True)
    assert float(off.rec(theta, RECS)) == 0 and float(off.style(theta, g, RECS)) == 0
    with pytest.raises(ValueError):
        ATMObjective(small_vocab, gradient_path="straight_through")


def test_gumbel_path_is_seeded(tiny_params, small_vocab):
    theta, gamma = tiny_params
    g = gamma.freeze()
    a = ATMObjective(small_vocab, gradient_path="gumbel_softmax", gumbel_seed=3).style(theta, g, RECS)
    b = ATMObjective(small_vocab, gradient_path="gumbel_softmax", gumbel_seed=3).style(theta, g, RECS)
    assert float(a) == pytest.approx(float(b), abs=0)
    grads = torch.autograd.grad(a, theta.values(), allow_unused=True)
    assert any(gr is not None and float(gr.abs().sum()) > 0 for gr in grads)


def test_style_gradient_spot_check(tiny_params64, small_vocab):
    """One coordinate, step 1e-4, relative error below 1e-5."""
    theta, gamma = tiny_params64
    g = gamma.freeze()
    theta = theta.leaf()
    name = "embed.tokens"
    grads = torch.autograd.grad(style_value(theta, g, RECS, small_vocab), theta[name])
    off = small_vocab.token_id("service") * theta[name].shape[1]
    vals = []
    for sign in (1, -1):
        t = {n: w.detach().clone() for n, w in theta.items()}
        t[name].reshape(-1)[off] += sign * 1e-4
        vals.append(float(style_value(theta.replace(t), g, RECS, small_vocab)))
    numeric = (vals[0] - vals[1]) / 2e-4
    analytic = float(grads[0].reshape(-1)[off])
    assert abs(analytic - numeric) / abs(numeric) < 1e-5
