"""Small transformer encoder-decoder and MLP style discriminator.

Everything here is functional: a network is a :class:`ParamSet` of named
tensors and the forward functions read weights from it. That keeps the inner
loop of meta-learning free to build adapted parameter sets out of
differentiable expressions of the base parameters.
"""

from __future__ import annotations

import hashlib
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

FORMAT_VERSION = 1
NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 256
    max_len: int = 24
    n_styles: int = 2
    disc_layers: int = 4
    dropout: float = 0.0
    tie_embeddings: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "enc_layers", "dec_layers",
                     "d_ff", "max_len", "n_styles", "disc_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def disc_widths(self) -> list[int]:
        """d -> d -> ... -> d/2 -> n_styles, ``disc_layers`` linear maps."""
        d = self.d_model
        hidden = [d] * (self.disc_layers - 1)
        if self.disc_layers > 1:
            hidden[-1] = max(1, d // 2)
        return [d, *hidden, self.n_styles]


class ParamSet:
    """Ordered mapping of parameter name -> tensor, plus metadata.

    A frozen ParamSet holds tensors that do not require grad; losses that must
    not update it check :attr:`frozen`.
    """

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig,
                 seed: int | None = None, frozen: bool = False):
        self.tensors = dict(tensors)
        self.config = config
        self.seed = seed
        self.frozen = frozen

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def replace(self, tensors: dict[str, Tensor]) -> ParamSet:
        return ParamSet(tensors, self.config, self.seed, self.frozen)

    def leaf(self) -> ParamSet:
        """Fresh leaf copies that require grad (storage never shared)."""
        return self.replace({k: v.detach().clone().requires_grad_(True)
                             for k, v in self.tensors.items()})

    def freeze(self) -> ParamSet:
        out = self.replace({k: v.detach().clone() for k, v in self.tensors.items()})
        out.frozen = True
        return out

    def to(self, dtype: torch.dtype) -> ParamSet:
        return self.replace({k: v.detach().to(dtype).requires_grad_(not self.frozen)
                             for k, v in self.tensors.items()})

    def flat(self) -> Tensor:
        return torch.cat([v.reshape(-1) for v in self.tensors.values()])

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.tensors.items():
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def locate(self, flat_index: int) -> tuple[str, int]:
        """Map a flat coordinate to (tensor name, index within that tensor)."""
        for k, v in self.tensors.items():
            if flat_index < v.numel():
                return k, flat_index
            flat_index -= v.numel()
        raise IndexError("flat index out of range")

    def state(self) -> dict[str, Tensor]:
        return {k: v.detach().clone() for k, v in self.tensors.items()}


# ---------------------------------------------------------------------------
# initialisation


def _normal(gen: torch.Generator, shape, std: float) -> Tensor:
    return torch.randn(*shape, generator=gen) * std


def init_theta(config: ModelConfig, seed: int = 0) -> ParamSet:
    gen = torch.Generator().manual_seed(seed)
    d, ff = config.d_model, config.d_ff
    p: dict[str, Tensor] = {}
    p["embed.tokens"] = _normal(gen, (config.vocab_size, d), d ** -0.5)
    if not config.tie_embeddings:
        p["embed.out_w"] = _normal(gen, (d, config.vocab_size), d ** -0.5)
    p["embed.out_b"] = torch.zeros(config.vocab_size)
    resid_std = (d ** -0.5) / math.sqrt(2 * (config.enc_layers + config.dec_layers))

    def ln(name):
        p[f"{name}.g"] = torch.ones(d)
        p[f"{name}.b"] = torch.zeros(d)

    def attn(name):
        for w in ("q", "k", "v"):
            p[f"{name}.w{w}"] = _normal(gen, (d, d), d ** -0.5)
            p[f"{name}.b{w}"] = torch.zeros(d)
        p[f"{name}.wo"] = _normal(gen, (d, d), resid_std)
        p[f"{name}.bo"] = torch.zeros(d)

    def mlp(name):
        p[f"{name}.w1"] = _normal(gen, (d, ff), d ** -0.5)
        p[f"{name}.b1"] = torch.zeros(ff)
        p[f"{name}.w2"] = _normal(gen, (ff, d), resid_std)
        p[f"{name}.b2"] = torch.zeros(d)

    for i in range(config.enc_layers):
        ln(f"encoder.{i}.ln1"); attn(f"encoder.{i}.self"); ln(f"encoder.{i}.ln2"); mlp(f"encoder.{i}.ff")
    ln("encoder.ln_f")
    for i in range(config.dec_layers):
        ln(f"decoder.{i}.ln1"); attn(f"decoder.{i}.self")
        ln(f"decoder.{i}.ln2"); attn(f"decoder.{i}.cross")
        ln(f"decoder.{i}.ln3"); mlp(f"decoder.{i}.ff")
    ln("decoder.ln_f")
    return ParamSet({k: v.requires_grad_(True) for k, v in p.items()}, config, seed)


def init_gamma(config: ModelConfig, seed: int = 0) -> ParamSet:
    gen = torch.Generator().manual_seed(seed + 7919)
    widths = config.disc_widths()
    p = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        p[f"disc.{i}.w"] = _normal(gen, (a, b), a ** -0.5)
        p[f"disc.{i}.b"] = torch.zeros(b)
    return ParamSet({k: v.requires_grad_(True) for k, v in p.items()}, config, seed)


# ---------------------------------------------------------------------------
# forward pieces

_POS_CACHE: dict = {}


def positions(length: int, d: int, dtype: torch.dtype) -> Tensor:
    key = (length, d, dtype)
    if key not in _POS_CACHE:
        pos = torch.arange(length, dtype=torch.float64)[:, None]
        div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
        pe = torch.zeros(length, d, dtype=torch.float64)
        pe[:, 0::2] = torch.sin(pos * div)
        pe[:, 1::2] = torch.cos(pos * div)
        _POS_CACHE[key] = pe.to(dtype)
    return _POS_CACHE[key]


def _ln(x: Tensor, p: ParamSet, name: str) -> Tensor:
    return F.layer_norm(x, (x.shape[-1],), p[f"{name}.g"], p[f"{name}.b"])


def _attention(xq: Tensor, xkv: Tensor, p: ParamSet, name: str, n_heads: int,
               keep: Tensor, dropout: float, train: bool) -> Tensor:
    B, Tq, d = xq.shape
    Tk = xkv.shape[1]
    dh = d // n_heads
    q = (xq @ p[f"{name}.wq"] + p[f"{name}.bq"]).view(B, Tq, n_heads, dh).transpose(1, 2)
    k = (xkv @ p[f"{name}.wk"] + p[f"{name}.bk"]).view(B, Tk, n_heads, dh).transpose(1, 2)
    v = (xkv @ p[f"{name}.wv"] + p[f"{name}.bv"]).view(B, Tk, n_heads, dh).transpose(1, 2)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
    scores = scores.masked_fill(~keep[:, None], NEG_INF)
    att = torch.softmax(scores, dim=-1)
    if train and dropout:
        att = F.dropout(att, dropout, True)
    out = (att @ v).transpose(1, 2).reshape(B, Tq, d)
    return out @ p[f"{name}.wo"] + p[f"{name}.bo"]


def _ff(x: Tensor, p: ParamSet, name: str, dropout: float, train: bool) -> Tensor:
    h = F.gelu(x @ p[f"{name}.w1"] + p[f"{name}.b1"])
    if train and dropout:
        h = F.dropout(h, dropout, True)
    return h @ p[f"{name}.w2"] + p[f"{name}.b2"]


def _drop(x: Tensor, cfg: ModelConfig, train: bool) -> Tensor:
    return F.dropout(x, cfg.dropout, True) if train and cfg.dropout else x


def embed(theta: ParamSet, ids: Tensor) -> Tensor:
    cfg = theta.config
    return theta["embed.tokens"][ids] * math.sqrt(cfg.d_model)


def encode_batch(theta: ParamSet, src: Tensor, src_keep: Tensor, train: bool = False) -> Tensor:
    cfg = theta.config
    x = embed(theta, src) + positions(src.shape[1], cfg.d_model, theta.dtype)
    x = _drop(x, cfg, train)
    keep = src_keep[:, None, :].expand(-1, src.shape[1], -1)
    for i in range(cfg.enc_layers):
        x = x + _drop(_attention(_ln(x, theta, f"encoder.{i}.ln1"), _ln(x, theta, f"encoder.{i}.ln1"),
                                 theta, f"encoder.{i}.self", cfg.n_heads, keep, cfg.dropout, train), cfg, train)
        x = x + _drop(_ff(_ln(x, theta, f"encoder.{i}.ln2"), theta, f"encoder.{i}.ff", cfg.dropout, train),
                      cfg, train)
    return _ln(x, theta, "encoder.ln_f")


def decode_states_from_embeddings(theta: ParamSet, y_emb: Tensor, tgt_keep: Tensor,
                                  memory: Tensor, src_keep: Tensor, train: bool = False) -> Tensor:
    """Decoder stack on already-embedded inputs; returns last-layer states."""
    cfg = theta.config
    T = y_emb.shape[1]
    x = _drop(y_emb + positions(T, cfg.d_model, theta.dtype), cfg, train)
    causal = torch.tril(torch.ones(T, T, dtype=torch.bool))
    self_keep = causal[None] & tgt_keep[:, None, :]
    # always allow a position to see itself so fully padded rows stay finite
    self_keep = self_keep | torch.eye(T, dtype=torch.bool)[None]
    cross_keep = src_keep[:, None, :].expand(-1, T, -1)
    for i in range(cfg.dec_layers):
        h = _ln(x, theta, f"decoder.{i}.ln1")
        x = x + _drop(_attention(h, h, theta, f"decoder.{i}.self", cfg.n_heads, self_keep,
                                 cfg.dropout, train), cfg, train)
        h = _ln(x, theta, f"decoder.{i}.ln2")
        x = x + _drop(_attention(h, memory, theta, f"decoder.{i}.cross", cfg.n_heads, cross_keep,
                                 cfg.dropout, train), cfg, train)
        x = x + _drop(_ff(_ln(x, theta, f"decoder.{i}.ln3"), theta, f"decoder.{i}.ff", cfg.dropout, train),
                      cfg, train)
    return _ln(x, theta, "decoder.ln_f")


def output_logits(theta: ParamSet, states: Tensor) -> Tensor:
    w = theta["embed.tokens"].t() if theta.config.tie_embeddings else theta["embed.out_w"]
    return states @ w + theta["embed.out_b"]


def expected_embeddings(theta: ParamSet, states: Tensor) -> Tensor:
    """Decoder states projected through the output layer and back onto the
    token embeddings: E[emb(y_t)] under the predicted distribution."""
    probs = torch.softmax(output_logits(theta, states), dim=-1)
    return probs @ theta["embed.tokens"]


@dataclass
class Batch:
    src: Tensor        # (B, S) encoder ids
    src_keep: Tensor   # (B, S) bool
    tgt_in: Tensor     # (B, T) BOS-shifted decoder inputs
    tgt_out: Tensor    # (B, T) gold next tokens
    tgt_keep: Tensor   # (B, T) bool

    def __len__(self):
        return self.src.shape[0]


def make_batch(inputs: Sequence[Sequence[int]], outputs: Sequence[Sequence[int]] | None = None,
               pad_id: int = 0, bos_id: int = 1) -> Batch:
    if not inputs:
        raise ValueError("empty batch")
    B = len(inputs)
    S = max(len(x) for x in inputs)
    src = torch.full((B, S), pad_id, dtype=torch.long)
    for i, x in enumerate(inputs):
        src[i, : len(x)] = torch.as_tensor(list(x), dtype=torch.long)
    outputs = outputs if outputs is not None else [[]] * B
    T = max(1, max(len(y) for y in outputs))
    tgt_out = torch.full((B, T), pad_id, dtype=torch.long)
    tgt_in = torch.full((B, T), pad_id, dtype=torch.long)
    for i, y in enumerate(outputs):
        y = list(y)
        tgt_out[i, : len(y)] = torch.as_tensor(y, dtype=torch.long)
        tgt_in[i, : len(y)] = torch.as_tensor([bos_id, *y[:-1]], dtype=torch.long)
    return Batch(src, src != pad_id, tgt_in, tgt_out, tgt_out != pad_id)


def _check_ids(theta: ParamSet, ids: Tensor) -> None:
    if ids.numel() and (int(ids.max()) >= theta.config.vocab_size or int(ids.min()) < 0):
        raise ValueError("token id out of range for vocabulary")


def _check_len(theta: ParamSet, batch: Batch) -> None:
    if batch.src.shape[1] > theta.config.max_len or batch.tgt_out.shape[1] > theta.config.max_len:
        raise ValueError(f"sequence longer than max_len={theta.config.max_len}")


def forward_states(theta: ParamSet, batch: Batch, train: bool = False) -> Tensor:
    """Teacher-forced decoder last-layer states, (B, T, d)."""
    _check_ids(theta, batch.src)
    _check_ids(theta, batch.tgt_out)
    _check_len(theta, batch)
    memory = encode_batch(theta, batch.src, batch.src_keep, train)
    return decode_states_from_embeddings(theta, embed(theta, batch.tgt_in), batch.tgt_keep,
                                         memory, batch.src_keep, train)


def token_logprobs(theta: ParamSet, batch: Batch, train: bool = False) -> tuple[Tensor, Tensor]:
    """Per-position log p(y_t | H, y_<t) for the gold tokens, plus the states."""
    states = forward_states(theta, batch, train)
    logp = torch.log_softmax(output_logits(theta, states), dim=-1)
    gold = logp.gather(-1, batch.tgt_out.unsqueeze(-1)).squeeze(-1)
    return gold * batch.tgt_keep, states


def gumbel_states(theta: ParamSet, batch: Batch, gen: torch.Generator | None = None,
                  tau: float = 1.0, train: bool = False) -> Tensor:
    """Decoder states obtained by re-feeding straight-through gumbel-softmax
    samples of the teacher-forced predictions as decoder inputs."""
    memory = encode_batch(theta, batch.src, batch.src_keep, train)
    first = decode_states_from_embeddings(theta, embed(theta, batch.tgt_in), batch.tgt_keep,
                                          memory, batch.src_keep, train)
    logits = output_logits(theta, first)
    u = torch.rand(logits.shape, generator=gen, dtype=logits.dtype)
    g = -torch.log(-torch.log(u.clamp_min(1e-20)) + 1e-20)
    soft = torch.softmax((logits + g) / tau, dim=-1)
    hard = F.one_hot(soft.argmax(-1), soft.shape[-1]).to(soft.dtype)
    st = (hard - soft).detach() + soft
    tokens = theta["embed.tokens"]
    bos = embed(theta, batch.tgt_in[:, :1])
    sampled = (st[:, :-1] @ tokens) * math.sqrt(theta.config.d_model)
    y_emb = torch.cat([bos, sampled], dim=1)
    return decode_states_from_embeddings(theta, y_emb, batch.tgt_keep, memory, batch.src_keep, train)


# ---------------------------------------------------------------------------
# single-sequence operations


def encode(theta: ParamSet, input_ids: Sequence[int]) -> Tensor:
    """Encoder hidden states H, one row per input id."""
    batch = make_batch([input_ids])
    _check_ids(theta, batch.src)
    if batch.src.shape[1] > theta.config.max_len:
        raise ValueError("input longer than max_len")
    return encode_batch(theta, batch.src, batch.src_keep)[0]


def sequence_logprob(theta: ParamSet, input_ids: Sequence[int], output_ids: Sequence[int],
                     eos_id: int = 2) -> Tensor:
    if not output_ids or output_ids[-1] != eos_id:
        raise ValueError("output sequence must end with EOS")
    gold, _ = token_logprobs(theta, make_batch([input_ids], [output_ids]))
    return gold.sum()


def decoder_states(theta: ParamSet, input_ids: Sequence[int], output_ids: Sequence[int]) -> Tensor:
    return forward_states(theta, make_batch([input_ids], [output_ids]))[0]


def pool_states(states: Tensor, keep: Tensor | None = None) -> Tensor:
    """Mean over positions; ``states`` is (T, d) or (B, T, d) with ``keep`` (B, T)."""
    if states.dim() == 2:
        if states.shape[0] == 0:
            raise ValueError("empty hidden states")
        return states.mean(0)
    if keep is None:
        return states.mean(1)
    w = keep.to(states.dtype).unsqueeze(-1)
    return (states * w).sum(1) / w.sum(1).clamp_min(1.0)


def discriminator_logits(gamma: ParamSet, pooled: Tensor) -> Tensor:
    n = gamma.config.disc_layers
    x = pooled
    for i in range(n):
        x = x @ gamma[f"disc.{i}.w"] + gamma[f"disc.{i}.b"]
        if i < n - 1:
            x = torch.tanh(x)
    return x


def discriminate(gamma: ParamSet, states: Tensor) -> Tensor:
    """Style logits for one sequence of hidden states (T, d)."""
    if states.dim() != 2 or states.shape[0] == 0:
        raise ValueError("discriminate needs a non-empty (T, d) matrix")
    return discriminator_logits(gamma, pool_states(states))


@torch.no_grad()
def generate_batch(theta: ParamSet, inputs: Sequence[Sequence[int]], max_len: int,
                   eos_id: int = 2, bos_id: int = 1) -> list[list[int]]:
    """Greedy decoding; argmax ties go to the lowest id. Output excludes BOS and
    ends with EOS unless max_len was hit first."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    batch = make_batch(inputs)
    _check_ids(theta, batch.src)
    memory = encode_batch(theta, batch.src, batch.src_keep)
    B = batch.src.shape[0]
    ys = torch.full((B, 1), bos_id, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    out: list[list[int]] = [[] for _ in range(B)]
    for _ in range(max_len):
        keep = torch.ones_like(ys, dtype=torch.bool)
        states = decode_states_from_embeddings(theta, embed(theta, ys), keep, memory, batch.src_keep)
        nxt = output_logits(theta, states[:, -1]).argmax(-1)
        for b in range(B):
            if not done[b]:
                out[b].append(int(nxt[b]))
                if int(nxt[b]) == eos_id:
                    done[b] = True
        if bool(done.all()):
            break
        ys = torch.cat([ys, nxt[:, None]], dim=1)
    return out


def generate(theta: ParamSet, input_ids: Sequence[int], max_len: int, eos_id: int = 2) -> list[int]:
    return generate_batch(theta, [input_ids], max_len, eos_id)[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, theta: ParamSet, gamma: ParamSet | None = None,
                    vocab_digest: str | None = None, rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(theta.config),
        "seed": theta.seed,
        "theta": theta.state(),
        "gamma": gamma.state() if gamma is not None else None,
        "vocab_digest": vocab_digest,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(blob, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path: str | Path) -> dict:
    blob = torch.load(path, weights_only=False)
    if blob.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('format_version')}")
    cfg = ModelConfig(**blob["model_config"])
    theta = ParamSet(blob["theta"], cfg, blob["seed"]).leaf()
    gamma = ParamSet(blob["gamma"], cfg, blob["seed"]).leaf() if blob["gamma"] is not None else None
    return {"theta": theta, "gamma": gamma, "vocab_digest": blob["vocab_digest"],
            "rng_state": blob["rng_state"], "extra": blob["extra"]}
