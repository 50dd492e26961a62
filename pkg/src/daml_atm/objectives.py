"""Training losses of the adversarial transfer model.

All reductions are a per-token mean inside a sentence followed by a mean over
sentences (classification losses are a plain mean over sentences).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .corpus import MetaTask, StyleRecord, Vocabulary, encode_input, encode_output, opposite_style
from .seq2seq import (Batch, ParamSet, discriminator_logits, forward_states, gumbel_states,
                      expected_embeddings, make_batch, pool_states, token_logprobs)

GRADIENT_PATHS = ("hidden_state", "gumbel_softmax")

# Task prefix used for style transfer, in training and at inference. Sharing
# the reconstruction prefix means a transfer differs from a reconstruction by
# the style prefix alone, so the copy behaviour learnt from L_rec carries over.
TRANSFER_TASK = "reconstruct"


class FreezeError(RuntimeError):
    pass


@dataclass
class LossValue:
    value: Tensor
    count: int
    wrt: ParamSet | None = None
    grads: dict[str, Tensor] | None = None

    def item(self) -> float:
        return float(self.value.detach())

    def with_grads(self, create_graph: bool = False) -> LossValue:
        """Fill :attr:`grads` with d value / d wrt (zeros for unused tensors)."""
        if self.wrt is None:
            raise ValueError("loss has no designated parameter set")
        names = self.wrt.names()
        tensors = self.wrt.values()
        if self.value.requires_grad:
            gs = torch.autograd.grad(self.value, tensors, create_graph=create_graph,
                                     retain_graph=True, allow_unused=True)
        else:
            gs = [None] * len(tensors)
        self.grads = {n: (g if g is not None else torch.zeros_like(t))
                      for n, g, t in zip(names, gs, tensors)}
        return self


def rec_batch(records: Sequence[StyleRecord], vocab: Vocabulary, max_len: int) -> Batch:
    """Reconstruction: reconstruct prefix + source-style prefix, target = X."""
    src = [encode_input(r, r.style, "reconstruct", vocab, max_len) for r in records]
    tgt = [encode_output(r.text, vocab, max_len) for r in records]
    return make_batch(src, tgt, vocab.pad_id, vocab.bos_id)


def transfer_batch(records: Sequence[StyleRecord], vocab: Vocabulary, max_len: int) -> Batch:
    """Transfer: TRANSFER_TASK prefix + opposite-style prefix, teacher-forced on X."""
    src = [encode_input(r, opposite_style(r.style, vocab.styles), TRANSFER_TASK, vocab, max_len)
           for r in records]
    tgt = [encode_output(r.text, vocab, max_len) for r in records]
    return make_batch(src, tgt, vocab.pad_id, vocab.bos_id)


def cls_batch(records: Sequence[StyleRecord], vocab: Vocabulary, max_len: int) -> Batch:
    """Every record under every style prefix, so the discriminator cannot read
    the label off the prefix."""
    src, tgt = [], []
    for style in vocab.styles:
        for r in records:
            src.append(encode_input(r, style, "reconstruct", vocab, max_len))
            tgt.append(encode_output(r.text, vocab, max_len))
    return make_batch(src, tgt, vocab.pad_id, vocab.bos_id)


def style_index(records: Sequence[StyleRecord], vocab: Vocabulary, opposite: bool = False) -> Tensor:
    labels = [opposite_style(r.style, vocab.styles) if opposite else r.style for r in records]
    return torch.tensor([vocab.styles.index(s) for s in labels], dtype=torch.long)


def _nonempty(records) -> None:
    if not records:
        raise ValueError("empty batch")


def rec_value(theta: ParamSet, records: Sequence[StyleRecord], vocab: Vocabulary,
              train: bool = False) -> Tensor:
    _nonempty(records)
    batch = rec_batch(records, vocab, theta.config.max_len)
    gold, _ = token_logprobs(theta, batch, train)
    per_sentence = -gold.sum(1) / batch.tgt_keep.sum(1)
    return per_sentence.mean()


def style_value(theta: ParamSet, gamma: ParamSet, records: Sequence[StyleRecord],
                vocab: Vocabulary, path: str = "hidden_state",
                gen: torch.Generator | None = None, train: bool = False) -> Tensor:
    _nonempty(records)
    if path not in GRADIENT_PATHS:
        raise ValueError(f"unknown gradient path {path!r}")
    batch = transfer_batch(records, vocab, theta.config.max_len)
    if path == "hidden_state":
        states = forward_states(theta, batch, train)
    else:
        states = gumbel_states(theta, batch, gen, train=train)
    feats = pool_states(expected_embeddings(theta, states), batch.tgt_keep)
    return F.cross_entropy(discriminator_logits(gamma, feats), style_index(records, vocab, opposite=True))


def loss_cls(theta: ParamSet, gamma: ParamSet, records: Sequence[StyleRecord],
             vocab: Vocabulary, train: bool = False) -> LossValue:
    """Cross-entropy of the discriminator on teacher-forced decoder states of
    X, computed under every style prefix (see :func:`cls_batch`).
    The seq2seq states are treated as constants."""
    _nonempty(records)
    batch = cls_batch(records, vocab, theta.config.max_len)
    with torch.no_grad():
        feats = pool_states(expected_embeddings(theta, forward_states(theta, batch, train)),
                            batch.tgt_keep)
    logits = discriminator_logits(gamma, feats.detach())
    copies = len(vocab.styles)
    value = F.cross_entropy(logits, style_index(records, vocab).repeat(copies))
    return LossValue(value, len(records), gamma)


@torch.no_grad()
def discriminator_accuracy(theta: ParamSet, gamma: ParamSet, records: Sequence[StyleRecord],
                           vocab: Vocabulary) -> float:
    """Percentage of (record, prefix) pairs from :func:`cls_batch` whose
    argmax matches the gold style."""
    _nonempty(records)
    batch = cls_batch(records, vocab, theta.config.max_len)
    feats = pool_states(expected_embeddings(theta, forward_states(theta, batch)), batch.tgt_keep)
    pred = discriminator_logits(gamma, feats).argmax(-1)
    gold = style_index(records, vocab).repeat(len(vocab.styles))
    return 100.0 * float((pred == gold).double().mean())


def loss_rec(theta: ParamSet, records: Sequence[StyleRecord], vocab: Vocabulary,
             train: bool = False) -> LossValue:
    return LossValue(rec_value(theta, records, vocab, train), len(records), theta)


def loss_style(theta: ParamSet, gamma_frozen: ParamSet, records: Sequence[StyleRecord],
               vocab: Vocabulary, path: str = "hidden_state",
               gen: torch.Generator | None = None, train: bool = False) -> LossValue:
    if not gamma_frozen.frozen:
        raise FreezeError("loss_style requires a frozen discriminator")
    value = style_value(theta, gamma_frozen, records, vocab, path, gen, train)
    return LossValue(value, len(records), theta)


@dataclass
class ATMObjective:
    """Reconstruction and style terms as used by the training engine, with the
    ablation switches applied."""
    vocab: Vocabulary
    gradient_path: str = "hidden_state"
    disable_rec: bool = False
    disable_style: bool = False
    train: bool = False
    gumbel_seed: int = 0
    _gen: torch.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.gradient_path not in GRADIENT_PATHS:
            raise ValueError(f"unknown gradient path {self.gradient_path!r}")
        self._gen = torch.Generator().manual_seed(self.gumbel_seed)

    def rec(self, theta: ParamSet, records: Sequence[StyleRecord]) -> Tensor:
        if self.disable_rec:
            return torch.zeros((), dtype=theta.dtype)
        return rec_value(theta, records, self.vocab, self.train)

    def style(self, theta: ParamSet, gamma: ParamSet, records: Sequence[StyleRecord]) -> Tensor:
        if self.disable_style:
            return torch.zeros((), dtype=theta.dtype)
        if not gamma.frozen:
            raise FreezeError("style term requires a frozen discriminator")
        return style_value(theta, gamma, records, self.vocab, self.gradient_path, self._gen, self.train)


def task_losses(theta: ParamSet, gamma: ParamSet, task: MetaTask, vocab: Vocabulary,
                require_pure: bool = True, path: str = "hidden_state") -> tuple[LossValue, LossValue]:
    if not task.records:
        raise ValueError("empty task")
    if require_pure:
        task.check_pure()
    return (loss_rec(theta, task.records, vocab),
            loss_style(theta, gamma, task.records, vocab, path))
