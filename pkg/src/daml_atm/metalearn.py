"""Training engine: supervised pretraining of the seq2seq model and the
discriminator, domain-adaptive meta-learning with second-order outer updates,
few-shot adaptation to an unseen domain, and the baseline strategies."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
from torch import Tensor

from .corpus import (AccessLog, CorpusError, DomainDataset, MetaTask, StyleRecord,
                     sample_meta_split, sample_mixed_task, sample_task)
from .objectives import ATMObjective, loss_cls, rec_value
from .seq2seq import ParamSet, save_checkpoint

log = logging.getLogger(__name__)

STRATEGIES = ("in_domain", "joint_training", "fine_tuning", "d_shift", "maml")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, theta: ParamSet, gamma: ParamSet | None, history: list):
        super().__init__(msg)
        self.theta, self.gamma, self.history = theta, gamma, history


@dataclass
class TrainConfig:
    inner_lr: float = 1e-4          # alpha
    outer_lr: float = 1e-3          # beta
    stage1_lr: float = 1e-5         # Adam
    stage1_epochs: int = 50
    stage1_batch: int = 32
    stage2_epochs: int = 50
    stage2_iterations: int | None = None   # overrides the epoch-derived count
    adapt_epochs: int = 50
    adapt_lr: float | None = None   # defaults to outer_lr
    inner_steps: int = 1
    meta_batches: int = 4
    task_size: int = 8
    n_train_domains: int = 2
    grad_mode: str = "second_order"
    optimizer: str = "sgd"          # outer / joint / adaptation updates; inner loop is always SGD
    gradient_path: str = "hidden_state"
    disable_rec_loss: bool = False
    disable_style_loss: bool = False
    convergence_tol: float = 1e-4
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.inner_steps < 1 or self.meta_batches < 1 or self.task_size < 1:
            raise ValueError("steps, meta batches and task size must be >= 1")
        if self.grad_mode not in ("second_order", "first_order"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.gradient_path not in ("hidden_state", "gumbel_softmax"):
            raise ValueError(f"unknown gradient_path {self.gradient_path!r}")

    @property
    def final_lr(self) -> float:
        return self.outer_lr if self.adapt_lr is None else self.adapt_lr

    def to_dict(self) -> dict:
        return asdict(self)

    def iterations_for(self, n_sentences: int) -> int:
        if self.stage2_iterations is not None:
            return self.stage2_iterations
        per_iter = self.meta_batches * self.task_size * (self.inner_steps + 1)
        return max(1, math.ceil(self.stage2_epochs * n_sentences / per_iter))


class Objective(Protocol):
    def rec(self, theta: ParamSet, records: Sequence[StyleRecord]) -> Tensor: ...
    def style(self, theta: ParamSet, gamma: ParamSet, records: Sequence[StyleRecord]) -> Tensor: ...


class MetricsWriter:
    """Appends one JSON object per line."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, row: dict) -> None:
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def _finite(x: Tensor) -> bool:
    return bool(torch.isfinite(x).all())


def _grad(value: Tensor, theta: ParamSet, create_graph: bool) -> list[Tensor]:
    tensors = theta.values()
    if not value.requires_grad:
        return [torch.zeros_like(t) for t in tensors]
    gs = torch.autograd.grad(value, tensors, create_graph=create_graph, retain_graph=True,
                             allow_unused=True)
    return [g if g is not None else torch.zeros_like(t) for g, t in zip(gs, tensors)]


# ---------------------------------------------------------------------------
# stage 1


def _minibatches(records: list[StyleRecord], size: int, rng: np.random.Generator):
    order = rng.permutation(len(records))
    for i in range(0, len(records), size):
        yield [records[j] for j in order[i:i + size]]


def pretrain_stage1(theta: ParamSet, gamma: ParamSet, source_data: Sequence[DomainDataset],
                    config: TrainConfig, objective: ATMObjective,
                    metrics: Callable[[dict], None] | None = None,
                    checkpoint: str | Path | None = None) -> tuple[ParamSet, ParamSet, list[dict]]:
    """Reconstruction training of theta and classification training of gamma
    with separate gradient flows, Adam on both."""
    if not source_data:
        raise CorpusError("stage 1 needs at least one source domain")
    records = [r for ds in source_data for r in ds.records]
    theta, gamma = theta.leaf(), gamma.leaf()
    opt_t = torch.optim.Adam(theta.values(), lr=config.stage1_lr)
    opt_g = torch.optim.Adam(gamma.values(), lr=config.stage1_lr)
    rng = _rng(config.seed, 1)
    history: list[dict] = []
    last_good = (theta.state(), gamma.state())
    prev = None
    for epoch in range(config.stage1_epochs):
        rec_sum = cls_sum = 0.0
        correct = n = 0
        for batch in _minibatches(records, config.stage1_batch, rng):
            if not config.disable_rec_loss:
                opt_t.zero_grad()
                rec = rec_value(theta, batch, objective.vocab, train=True)
                rec.backward()
                opt_t.step()
                rec_sum += float(rec.detach()) * len(batch)
            cls = loss_cls(theta, gamma, batch, objective.vocab)
            opt_g.zero_grad()
            cls.value.backward()
            opt_g.step()
            cls_sum += cls.item() * len(batch)
            n += len(batch)
            if not (math.isfinite(rec_sum) and math.isfinite(cls_sum)):
                theta = theta.replace({k: v.requires_grad_(True) for k, v in last_good[0].items()})
                gamma = gamma.replace({k: v.requires_grad_(True) for k, v in last_good[1].items()})
                if checkpoint:
                    save_checkpoint(checkpoint, theta, gamma)
                raise TrainingDiverged(f"non-finite loss in stage 1 epoch {epoch}", theta, gamma, history)
        last_good = (theta.state(), gamma.state())
        row = {"stage": "stage1", "epoch": epoch, "loss_rec": rec_sum / n, "loss_cls": cls_sum / n}
        history.append(row)
        if metrics:
            metrics(row)
        total = row["loss_rec"] + row["loss_cls"]
        if prev is not None and abs(prev - total) <= config.convergence_tol * max(abs(prev), 1e-12):
            break
        prev = total
    return theta.leaf(), gamma.leaf(), history


# ---------------------------------------------------------------------------
# stage 2 building blocks


@dataclass
class TemporaryModel:
    base: ParamSet
    theta_old: ParamSet
    theta_new: ParamSet
    task_domains: tuple[str, ...]
    steps: int


def _check_tasks(tasks: Sequence[MetaTask], require_pure: bool) -> None:
    for t in tasks:
        if not t.records:
            raise CorpusError("empty task")
        if require_pure:
            t.check_pure()


def inner_adapt(theta_0: ParamSet, gamma: ParamSet, task: MetaTask | Sequence[MetaTask],
                alpha: float, steps: int, objective: Objective,
                grad_mode: str = "second_order", require_pure: bool = True) -> TemporaryModel:
    """Per step i (gradients at the previous iterate theta_{i-1}):

        theta_i^old = theta_{i-1} - alpha * grad L_rec(theta_{i-1})
        theta_i^new = theta_i^old - alpha * grad L_style(theta_{i-1})

    theta_{i} = theta_i^new feeds the next step. ``task`` may be a single task
    reused at every step or one task per step. In first-order mode the
    gradients are detached, so d theta_new / d theta_0 is the identity.
    """
    tasks = [task] * steps if isinstance(task, MetaTask) else list(task)
    if len(tasks) != steps:
        raise ValueError("need one task per adaptation step")
    _check_tasks(tasks, require_pure)
    second = grad_mode == "second_order"
    names = theta_0.names()
    cur = theta_0
    old = new = theta_0
    for t in tasks:
        g_rec = _grad(objective.rec(cur, t.records), cur, second)
        g_sty = _grad(objective.style(cur, gamma, t.records), cur, second)
        if not second:
            g_rec = [g.detach() for g in g_rec]
            g_sty = [g.detach() for g in g_sty]
        if not all(_finite(g) for g in g_rec + g_sty):
            raise FloatingPointError("non-finite gradient in inner loop")
        old = cur.replace({n: w - alpha * g for n, w, g in zip(names, cur.values(), g_rec)})
        new = cur.replace({n: w - alpha * g for n, w, g in zip(names, old.values(), g_sty)})
        cur = new
    return TemporaryModel(theta_0, old, new, tuple(t.domain for t in tasks), steps)


def meta_val_loss(temp: TemporaryModel, gamma_0: ParamSet, task_j: MetaTask, objective: Objective,
                  train_domains: Sequence[str] | None = None, require_pure: bool = True):
    """L_rec(theta_old on T_j) + L_style(theta_new on T_j), differentiable to theta_0."""
    from .objectives import LossValue

    _check_tasks([task_j], require_pure)
    forbidden = set(train_domains) if train_domains is not None else (
        set(temp.task_domains) if require_pure else set())
    if require_pure and task_j.domain in forbidden:
        raise CorpusError(f"validation task from meta-training domain {task_j.domain!r}")
    value = objective.rec(temp.theta_old, task_j.records) + \
        objective.style(temp.theta_new, gamma_0, task_j.records)
    return LossValue(value, len(task_j), temp.base)


class Stepper:
    """Applies a gradient to a ParamSet and returns a fresh leaf ParamSet.

    ``"sgd"`` is w - lr * g. ``"adam"`` keeps torch Adam moments keyed by
    parameter name across calls.
    """

    def __init__(self, kind: str, lr: float):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.lr = kind, lr
        self._opt: torch.optim.Optimizer | None = None
        self._shadow: list[Tensor] = []

    def __call__(self, theta: ParamSet, grads: Sequence[Tensor]) -> ParamSet:
        if self.kind == "sgd":
            return theta.replace({n: (w.detach() - self.lr * g.detach()).requires_grad_(True)
                                  for n, w, g in zip(theta.names(), theta.values(), grads)})
        if self._opt is None:
            self._shadow = [w.detach().clone().requires_grad_(True) for w in theta.values()]
            self._opt = torch.optim.Adam(self._shadow, lr=self.lr)
        with torch.no_grad():
            for s, w, g in zip(self._shadow, theta.values(), grads):
                s.copy_(w.detach())
                s.grad = g.detach().clone()
        self._opt.step()
        return theta.replace({n: s.detach().clone().requires_grad_(True)
                              for n, s in zip(theta.names(), self._shadow)})


def outer_update(theta_0: ParamSet, meta_losses: Sequence, beta: float,
                 stepper: Stepper | None = None) -> tuple[ParamSet, float]:
    """Descend mean_j L_val(T_j) w.r.t. theta_0 (plain ``theta_0 - beta * g``
    unless a stepper is given). Returns a new ParamSet and the gradient norm;
    theta_0 itself is not touched."""
    if not meta_losses:
        raise ValueError("no meta losses")
    total = torch.stack([m.value for m in meta_losses]).mean()
    grads = _grad(total, theta_0, create_graph=False)
    if not all(_finite(g) for g in grads):
        raise FloatingPointError("non-finite outer gradient")
    norm = float(torch.sqrt(sum((g.detach() ** 2).sum() for g in grads)))
    stepper = stepper if stepper is not None else Stepper("sgd", beta)
    return stepper(theta_0, grads), norm


# ---------------------------------------------------------------------------
# stage 2 loop


def _by_domain(data: Sequence[DomainDataset]) -> dict[str, DomainDataset]:
    out: dict[str, DomainDataset] = {}
    for ds in data:
        if ds.domain in out:
            raise CorpusError(f"duplicate domain {ds.domain!r}")
        out[ds.domain] = ds
    return out


def daml_stage2(theta: ParamSet, gamma: ParamSet, source_domains: Sequence[DomainDataset],
                config: TrainConfig, objective: Objective, task_mode: str = "daml",
                metrics: Callable[[dict], None] | None = None, instrument: bool = False,
                checkpoint_dir: str | Path | None = None) -> tuple[ParamSet, list[dict]]:
    """Meta-learn the seq2seq initialisation with the discriminator frozen.

    ``task_mode="daml"``: fresh domain split every iteration, every task drawn
    from one domain. ``task_mode="maml"``: tasks drawn from the pooled source
    domains with no split (classical MAML baseline).
    """
    if task_mode not in ("daml", "maml"):
        raise ValueError(f"unknown task mode {task_mode!r}")
    domains = _by_domain(source_domains)
    if len(domains) < 2:
        raise CorpusError("meta-learning needs at least two source domains")
    gamma = gamma if gamma.frozen else gamma.freeze()
    gamma_sum = gamma.checksum()
    theta = theta.leaf()
    names = sorted(domains)
    n_train = min(config.n_train_domains, len(names) - 1)
    iterations = config.iterations_for(sum(len(d) for d in domains.values()))
    rng = _rng(config.seed, 2)
    pure = task_mode == "daml"
    stepper = Stepper(config.optimizer, config.outer_lr)
    history: list[dict] = []
    for it in range(iterations):
        before = theta.checksum() if instrument else None
        if pure:
            split = sample_meta_split(names, n_train, rng)
            if not split.covers(names):
                raise CorpusError("meta split does not cover the source domains")
            tr, val = sorted(split.train_domains), sorted(split.val_domains)
        losses, rec_in, sty_in, seen = [], [], [], []
        for _ in range(config.meta_batches):
            if pure:
                task_j = sample_task(domains[val[rng.integers(len(val))]], config.task_size, "meta_val", rng)
                tasks_i = [sample_task(domains[tr[rng.integers(len(tr))]], config.task_size, "meta_train", rng)
                           for _ in range(config.inner_steps)]
            else:
                pool = list(domains.values())
                task_j = sample_mixed_task(pool, config.task_size, "meta_val", rng)
                tasks_i = [sample_mixed_task(pool, config.task_size, "meta_train", rng)
                           for _ in range(config.inner_steps)]
            temp = inner_adapt(theta, gamma, tasks_i, config.inner_lr, config.inner_steps, objective,
                               config.grad_mode, require_pure=pure)
            losses.append(meta_val_loss(temp, gamma, task_j, objective,
                                        train_domains=tr if pure else None, require_pure=pure))
            if instrument:
                seen.extend((t.domain, t.is_pure) for t in [*tasks_i, task_j])
                rec_in.append(float(objective.rec(theta, tasks_i[0].records)))
                sty_in.append(float(objective.style(theta, gamma, tasks_i[0].records)))
        if instrument and theta.checksum() != before:
            raise AssertionError("theta_0 changed inside the inner loop")
        theta_next, gnorm = outer_update(theta, losses, config.outer_lr, stepper)
        if not theta_next.is_finite():
            raise TrainingDiverged(f"non-finite parameters at iteration {it}", theta, gamma, history)
        theta = theta_next
        row = {"iteration": it, "loss_val": float(np.mean([m.item() for m in losses])),
               "grad_norm": gnorm}
        if instrument:
            row.update(loss_rec=float(np.mean(rec_in)), loss_style=float(np.mean(sty_in)),
                       theta_before=before, theta_after=theta.checksum())
            row["tasks"] = seen
            if pure:
                row.update(train_domains=tr, val_domains=val)
        history.append(row)
        if metrics:
            metrics({k: v for k, v in row.items() if k in
                     ("iteration", "loss_rec", "loss_style", "loss_val", "grad_norm")})
        if checkpoint_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"stage2_{it + 1:06d}.pt", theta, gamma,
                            extra={"iteration": it + 1})
    if gamma.checksum() != gamma_sum:
        raise AssertionError("discriminator changed during stage 2")
    return theta, history


# ---------------------------------------------------------------------------
# supervised ATM training and final adaptation


def _descend(theta: ParamSet, value: Tensor, stepper: Stepper) -> ParamSet:
    grads = _grad(value, theta, create_graph=False)
    if not all(_finite(g) for g in grads):
        raise FloatingPointError("non-finite gradient")
    return stepper(theta, grads)


def adapt_final(theta: ParamSet, gamma: ParamSet, target_train: DomainDataset, config: TrainConfig,
                objective: Objective, metrics: Callable[[dict], None] | None = None
                ) -> tuple[ParamSet, list[float]]:
    """Descend L_rec + L_style over tasks serialised from the few-shot target
    split at ``config.final_lr``; the discriminator stays frozen."""
    if not target_train.records:
        raise CorpusError("empty target training data")
    gamma = gamma if gamma.frozen else gamma.freeze()
    theta = theta.leaf()
    rng = _rng(config.seed, 3)
    stepper = Stepper(config.optimizer, config.final_lr)
    losses: list[float] = []
    prev = None
    for epoch in range(config.adapt_epochs):
        epoch_losses = []
        for chunk in _minibatches(list(target_train.records), config.task_size, rng):
            value = objective.rec(theta, chunk) + objective.style(theta, gamma, chunk)
            epoch_losses.append(float(value.detach()))
            theta = _descend(theta, value, stepper)
        mean = float(np.mean(epoch_losses))
        if not math.isfinite(mean):
            raise TrainingDiverged("non-finite loss during adaptation", theta, gamma, [])
        losses.append(mean)
        if metrics:
            metrics({"stage": "adapt", "epoch": epoch, "loss": mean})
        if prev is not None and abs(prev - mean) <= config.convergence_tol * max(abs(prev), 1e-12):
            break
        prev = mean
    return theta, losses


def joint_atm_training(theta: ParamSet, gamma: ParamSet, data: Sequence[DomainDataset],
                       config: TrainConfig, objective: Objective, iterations: int | None = None,
                       metrics: Callable[[dict], None] | None = None) -> tuple[ParamSet, list[dict]]:
    """Non-meta counterpart of stage 2: the same task throughput and learning
    rate, but each step descends L_rec + L_style on pooled tasks directly."""
    gamma = gamma if gamma.frozen else gamma.freeze()
    theta = theta.leaf()
    pool = [d for d in data if d.records]
    if not pool:
        raise CorpusError("no training data")
    n_sent = sum(len(d) for d in pool)
    iterations = iterations if iterations is not None else config.iterations_for(n_sent)
    rng = _rng(config.seed, 4)
    stepper = Stepper(config.optimizer, config.outer_lr)
    history = []
    for it in range(iterations):
        tasks = [sample_mixed_task(pool, config.task_size, "meta_train", rng)
                 for _ in range(config.meta_batches * (config.inner_steps + 1))]
        value = torch.stack([objective.rec(theta, t.records) + objective.style(theta, gamma, t.records)
                             for t in tasks]).mean()
        theta = _descend(theta, value, stepper)
        row = {"iteration": it, "loss": float(value.detach())}
        history.append(row)
        if metrics:
            metrics(row)
    return theta, history


@dataclass
class BaselineData:
    sources: list[DomainDataset] = field(default_factory=list)
    target_train: DomainDataset | None = None


def train_baseline(strategy: str, data: BaselineData, theta: ParamSet, gamma: ParamSet,
                   config: TrainConfig, objective: ATMObjective,
                   pretrained: tuple[ParamSet, ParamSet] | None = None,
                   access: AccessLog | None = None,
                   metrics: Callable[[dict], None] | None = None,
                   memo: dict | None = None) -> tuple[ParamSet, ParamSet]:
    """Run one of the baseline strategies from initial parameters.

    ``pretrained`` may carry an already computed stage-1 result on
    ``data.sources``; it is only used by strategies that pretrain on sources.
    ``memo`` (optional, caller-keyed) caches the source-only model so that
    d_shift and fine_tuning on the same sources train it once.
    Returns (theta, gamma) with gamma frozen.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    access = access if access is not None else AccessLog()
    needs_target = strategy in ("in_domain", "joint_training", "fine_tuning", "maml")
    if needs_target and data.target_train is None:
        raise CorpusError(f"{strategy} needs target training data")
    if strategy in ("d_shift", "maml") and not data.sources:
        raise CorpusError(f"{strategy} needs source domains")

    def train_on(datasets: list[DomainDataset], reuse: bool) -> tuple[ParamSet, ParamSet]:
        for ds in datasets:
            access.record(ds, "train")
        if reuse and memo is not None and "sources" in memo:
            return memo["sources"]
        if reuse and pretrained is not None:
            t, g = pretrained
        else:
            t, g, _ = pretrain_stage1(theta, gamma, datasets, config, objective, metrics)
        g = g.freeze()
        t, _ = joint_atm_training(t, g, datasets, config, objective, metrics=metrics)
        if reuse and memo is not None:
            memo["sources"] = (t, g)
        return t, g

    if strategy == "in_domain":
        return train_on([data.target_train], reuse=False)
    if strategy == "joint_training":
        return train_on([*data.sources, data.target_train], reuse=False)
    if strategy == "d_shift":
        return train_on(list(data.sources), reuse=True)
    if strategy == "fine_tuning":
        if not data.sources:
            return train_on([data.target_train], reuse=False)
        t, g = train_on(list(data.sources), reuse=True)
        access.record(data.target_train, "adapt")
        t, _ = adapt_final(t, g, data.target_train, config, objective, metrics)
        return t, g
    # maml
    for ds in data.sources:
        access.record(ds, "train")
    if pretrained is not None:
        t, g = pretrained
    else:
        t, g, _ = pretrain_stage1(theta, gamma, data.sources, config, objective, metrics)
    g = g.freeze()
    t, _ = daml_stage2(t, g, data.sources, config, objective, task_mode="maml", metrics=metrics)
    access.record(data.target_train, "adapt")
    t, _ = adapt_final(t, g, data.target_train, config, objective, metrics)
    return t, g
