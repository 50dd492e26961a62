"""Experiment orchestration and the ``daml-atm`` command line.

A run is described by an :class:`ExperimentSpec`. :func:`run_experiment`
executes one strategy end to end and leaves a self-describing run directory:

    config.json       resolved spec, train and model settings
    seed              the run seed
    corpus.json       sha256 digests of every dataset read
    vocab.json
    stage1.pt stage2.pt final.pt   (stage2.pt for daml_atm only)
    metrics.jsonl     one JSON row per epoch / iteration
    access_log.json   (domain, split, purpose) reads in order
    report.json       the EvalReport
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from .corpus import (AccessLog, CorpusError, DomainDataset, StyleRecord, Vocabulary, build_vocab,
                     few_shot_slice, generate_synthetic_corpus, load_corpus_dir, load_generator_config,
                     opposite_style, write_synthetic_corpus)
from .evalkit import (BagClassifier, EvalReport, evaluate_outputs, export_latents, transfer,
                      train_eval_classifier)
from .metalearn import (BaselineData, MetricsWriter, TrainConfig, adapt_final, daml_stage2,
                        pretrain_stage1, train_baseline)
from .objectives import ATMObjective
from .seq2seq import ModelConfig, ParamSet, init_gamma, init_theta, load_checkpoint, save_checkpoint

log = logging.getLogger("daml_atm")

STRATEGY_CHOICES = ("daml_atm", "in_domain", "joint_training", "fine_tuning", "d_shift", "maml")

# Desk-scale training schedule (tiny transformer, 400 sentences per domain,
# one CPU core). The TrainConfig defaults keep the full-scale values.
DESK_TRAIN = {
    "stage1_lr": 1e-3,
    "stage1_epochs": 15,
    "inner_lr": 1e-3,
    "outer_lr": 1e-2,
    "stage2_iterations": 600,
    "adapt_lr": 3e-3,
    "adapt_epochs": 50,
}


def desk_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_TRAIN, **overrides})


@dataclass
class ExperimentSpec:
    sources: list[str]
    target: str
    fraction: float = 0.01
    strategy: str = "daml_atm"
    train: TrainConfig = field(default_factory=desk_train_config)
    model: dict = field(default_factory=dict)   # ModelConfig fields except vocab_size
    seed: int = 0
    out_dir: str | None = None
    corpus_dir: str | None = None                # None: synthetic corpus from generator
    generator_config: str | None = None
    export_latents: bool = False

    def validate(self) -> None:
        if self.strategy not in STRATEGY_CHOICES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGY_CHOICES}")
        if self.target in self.sources:
            raise ValueError(f"target domain {self.target!r} is also a source domain")
        if len(set(self.sources)) != len(self.sources):
            raise ValueError("duplicate source domains")
        if not 0 < self.fraction <= 1:
            raise ValueError(f"few-shot fraction {self.fraction} outside (0, 1]")
        if self.strategy in ("daml_atm", "maml") and len(self.sources) < 2:
            raise ValueError(f"{self.strategy} needs at least two source domains")
        if self.strategy in ("fine_tuning", "d_shift") and not self.sources:
            raise ValueError(f"{self.strategy} needs source domains")
        bad = set(self.model) - {f.name for f in fields(ModelConfig)} | ({"vocab_size"} & set(self.model))
        if bad:
            raise ValueError(f"unknown model settings {sorted(bad)}")

    def resolved(self) -> ExperimentSpec:
        """Copy with the run seed pushed into the training config."""
        return replace(self, train=replace(self.train, seed=self.seed), sources=list(self.sources))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        d = dict(d)
        train = d.pop("train", None) or {}
        if isinstance(train, dict):
            train = TrainConfig(**train)
        return cls(train=train, **d)


# ---------------------------------------------------------------------------
# shared state between runs in one process


@dataclass
class RunCache:
    """In-process memo for work that several runs share: corpora, evaluation
    classifiers, stage-1 results and source-only models. Keys include every
    setting the cached value depends on, so hits are exact."""
    entries: dict = field(default_factory=dict)

    def get(self, key, make):
        if key not in self.entries:
            self.entries[key] = make()
        return self.entries[key]


def _load_corpora(spec: ExperimentSpec, cache: RunCache) -> dict[str, dict[str, DomainDataset]]:
    def make():
        if spec.corpus_dir is not None:
            return load_corpus_dir(spec.corpus_dir)
        return generate_synthetic_corpus(load_generator_config(spec.generator_config))
    corpora = cache.get(("corpus", spec.corpus_dir, spec.generator_config), make)
    missing = [d for d in [*spec.sources, spec.target] if d not in corpora]
    if missing:
        raise CorpusError(f"no corpus for domains {missing}")
    for d in [*spec.sources, spec.target]:
        if "train" not in corpora[d]:
            raise CorpusError(f"domain {d!r} has no train split")
    if "test" not in corpora[spec.target]:
        raise CorpusError(f"target domain {spec.target!r} has no test split")
    return corpora


def _classifiers(corpora, cache: RunCache, key) -> tuple[BagClassifier, BagClassifier]:
    train = [corpora[d]["train"] for d in sorted(corpora)]
    return cache.get(("classifiers", key),
                     lambda: (train_eval_classifier("style", train), train_eval_classifier("domain", train)))


def _tagged(writer, stage: str):
    return lambda row: writer({"stage": stage, **row})


def run_experiment(spec: ExperimentSpec, cache: RunCache | None = None) -> EvalReport:
    """Run ``spec.strategy`` end to end and return the target-domain report.
    All configuration errors surface before any training starts."""
    spec.validate()
    spec = spec.resolved()
    cache = cache if cache is not None else RunCache()
    corpora = _load_corpora(spec, cache)
    tc = spec.train
    corpus_key = (spec.corpus_dir, spec.generator_config)
    vocab = cache.get(("vocab", corpus_key),
                      lambda: build_vocab([corpora[d]["train"] for d in sorted(corpora)]))
    mc = ModelConfig(vocab_size=len(vocab), **spec.model)
    style_clf, domain_clf = _classifiers(corpora, cache, corpus_key)

    out = Path(spec.out_dir) if spec.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for stale in ("metrics.jsonl", "report.json"):
            (out / stale).unlink(missing_ok=True)
    writer = MetricsWriter(out / "metrics.jsonl" if out else None)
    access = AccessLog()

    sources = [corpora[d]["train"] for d in spec.sources]
    target_train = corpora[spec.target]["train"]
    target_test = corpora[spec.target]["test"]
    few = few_shot_slice(target_train, spec.fraction, np.random.default_rng([spec.seed, 5]))

    if out is not None:
        (out / "config.json").write_text(json.dumps(
            {"spec": spec.to_dict(), "model": asdict(mc)}, indent=1, sort_keys=True))
        (out / "seed").write_text(f"{spec.seed}\n")
        digests = {f"{d}.{s}": ds.digest() for d in sorted(corpora) for s, ds in sorted(corpora[d].items())}
        digests["few_shot"] = few.digest()
        (out / "corpus.json").write_text(json.dumps(digests, indent=1, sort_keys=True))
        vocab.save(out / "vocab.json")

    torch.manual_seed(spec.seed)
    objective = ATMObjective(vocab, tc.gradient_path, tc.disable_rec_loss, tc.disable_style_loss,
                             gumbel_seed=spec.seed)
    theta0, gamma0 = init_theta(mc, spec.seed), init_gamma(mc, spec.seed)
    stage1_key = ("stage1", corpus_key, tuple(spec.sources), spec.seed, json.dumps(asdict(mc)),
                  tc.stage1_lr, tc.stage1_epochs, tc.stage1_batch, tc.disable_rec_loss, tc.convergence_tol)

    def stage1():
        t, g, _ = pretrain_stage1(theta0, gamma0, sources, tc, objective, _tagged(writer, "stage1"))
        return t, g.freeze()

    pretrained = None
    if spec.sources:
        for ds in sources:
            access.record(ds, "train")
        pretrained = cache.get(stage1_key, stage1)
        if out is not None:
            save_checkpoint(out / "stage1.pt", *pretrained, vocab_digest=vocab.digest())

    if spec.strategy == "daml_atm":
        theta, gamma = pretrained
        theta, _ = daml_stage2(theta, gamma, sources, tc, objective, "daml", _tagged(writer, "stage2"),
                               checkpoint_dir=out)
        if out is not None:
            save_checkpoint(out / "stage2.pt", theta, gamma, vocab_digest=vocab.digest())
        access.record(few, "adapt")
        theta, _ = adapt_final(theta, gamma, few, tc, objective, _tagged(writer, "adapt"))
    else:
        memo_key = ("source_model", stage1_key, json.dumps(tc.to_dict(), sort_keys=True))
        memo = cache.get(memo_key, dict)
        theta, gamma = train_baseline(spec.strategy, BaselineData(sources, few), theta0, gamma0, tc,
                                      objective, pretrained=pretrained, access=access,
                                      metrics=_tagged(writer, spec.strategy), memo=memo)

    if access.reads(spec.target, "test"):
        raise AssertionError("target test data read before final evaluation")
    access.record(target_test, "eval")
    outputs = transfer(theta, target_test.records, vocab)
    report = evaluate_outputs(target_test.records, outputs, spec.target, style_clf, domain_clf,
                              target_test.references)
    if out is not None:
        save_checkpoint(out / "final.pt", theta, gamma, vocab_digest=vocab.digest())
        (out / "access_log.json").write_text(json.dumps(access.entries, indent=1))
        (out / "report.json").write_text(report.to_json())
        if spec.export_latents:
            _export_run_latents(theta, vocab, corpora, spec, outputs, out / "latents.tsv")
    return report


def _export_run_latents(theta: ParamSet, vocab: Vocabulary, corpora, spec: ExperimentSpec,
                        outputs: Sequence[str], path: Path) -> np.ndarray:
    """Source-domain test inputs next to the generated target-domain outputs."""
    test = corpora[spec.target]["test"]
    src = [r for d in spec.sources if "test" in corpora[d] for r in corpora[d]["test"].records]
    # empty generations still get a row; "<unk>" encodes to the UNK id
    gen = [StyleRecord(o if o.strip() else "<unk>", opposite_style(t.style), spec.target)
           for o, t in zip(outputs, test.records)]
    return export_latents(theta, [*src, *gen], vocab, path,
                          origins=["source"] * len(src) + ["generated"] * len(gen))


# ---------------------------------------------------------------------------
# leave-one-out


TABLE_COLUMNS = ("target", "s_acc", "bleu", "g_score", "d_acc", "input_bleu")


def run_leave_one_out(domains: Sequence[str], base: ExperimentSpec,
                      cache: RunCache | None = None) -> list[dict]:
    """One run per held-out domain (the rest are sources). Writes
    ``loo_table.tsv`` / ``loo_table.json`` under ``base.out_dir`` after every
    finished run, so a failure keeps the rows computed so far."""
    domains = list(domains)
    if len(domains) < 3:
        raise ValueError("leave-one-out needs at least three domains")
    cache = cache if cache is not None else RunCache()
    rows: list[dict] = []
    root = Path(base.out_dir) if base.out_dir else None
    for target in domains:
        spec = replace(base, target=target, sources=[d for d in domains if d != target],
                       out_dir=str(root / target) if root else None)
        report = run_experiment(spec, cache)
        rows.append({"target": target, **report.summary()})
        if root is not None:
            write_table(rows, root / "loo_table")
    return rows


def write_table(rows: list[dict], stem: Path) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{stem}.json").write_text(json.dumps(rows, indent=1))
    with open(f"{stem}.tsv", "w") as fh:
        fh.write("\t".join(TABLE_COLUMNS) + "\n")
        for r in rows:
            fh.write("\t".join([r["target"], *[f"{r[c]:.2f}" for c in TABLE_COLUMNS[1:]]]) + "\n")


# ---------------------------------------------------------------------------
# command line

TRAIN_FLAGS = {f.name: f.type for f in fields(TrainConfig)}
MODEL_FLAGS = [f.name for f in fields(ModelConfig) if f.name != "vocab_size"]
SPEC_FLAGS = ("sources", "target", "fraction", "strategy", "seed", "out_dir", "corpus_dir",
              "generator_config")


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


# "--flag none" must override a non-null default, so it cannot parse to None
# (None means "flag not given" in resolve_spec).
_NONE = "__none__"


def _opt(value: str):
    return _NONE if value.lower() == "none" else int(value)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with spec keys plus optional train:/model: sections")
    p.add_argument("--sources", type=lambda s: [x for x in s.split(",") if x])
    p.add_argument("--target")
    p.add_argument("--fraction", type=float)
    p.add_argument("--strategy", choices=STRATEGY_CHOICES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--corpus-dir", dest="corpus_dir")
    p.add_argument("--generator-config", dest="generator_config")
    g = p.add_argument_group("training")
    for name in TRAIN_FLAGS:
        if name == "seed":
            continue
        kind = _kind(TrainConfig, name)
        flag = "--" + name.replace("_", "-")
        if kind is bool:
            g.add_argument(flag, dest=f"train.{name}", type=_bool, nargs="?", const=True)
        else:
            g.add_argument(flag, dest=f"train.{name}", type=kind)
    m = p.add_argument_group("model")
    for name in MODEL_FLAGS:
        kind = _kind(ModelConfig, name)
        m.add_argument("--" + name.replace("_", "-"), dest=f"model.{name}",
                       type=_bool if kind is bool else kind)


def _kind(cls, name: str):
    default = next(f.default for f in fields(cls) if f.name == name)
    if name in ("stage2_iterations",):
        return _opt
    if name == "adapt_lr":
        return float
    return type(default) if default is not None else str


def resolve_spec(args: argparse.Namespace, require_target: bool = True) -> ExperimentSpec:
    """Defaults, then the config file, then explicit flags."""
    file_cfg: dict = {}
    if getattr(args, "config", None):
        file_cfg = yaml.safe_load(Path(args.config).read_text()) or {}
        unknown = set(file_cfg) - set(SPEC_FLAGS) - {"train", "model", "export_latents"}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
    train = {**DESK_TRAIN, **(file_cfg.get("train") or {})}
    model = dict(file_cfg.get("model") or {})
    top = {k: v for k, v in file_cfg.items() if k not in ("train", "model")}
    for key, value in vars(args).items():
        if value is None:
            continue
        value = None if value == _NONE else value
        if key.startswith("train."):
            train[key[6:]] = value
        elif key.startswith("model."):
            model[key[6:]] = value
        elif key in SPEC_FLAGS:
            top[key] = value
    if "sources" in top and isinstance(top["sources"], str):
        top["sources"] = [x for x in top["sources"].split(",") if x]
    top.setdefault("sources", [])
    if require_target and not top.get("target"):
        raise ValueError("a target domain is required (--target)")
    top.setdefault("target", "")
    return ExperimentSpec(train=TrainConfig(**train), model=model, **top)


def _corpora_for(spec: ExperimentSpec):
    return _load_corpora(spec, RunCache())


def _vocab_and_model(spec: ExperimentSpec, corpora, vocab_path: str | None):
    vocab = Vocabulary.load(vocab_path) if vocab_path else build_vocab(
        [corpora[d]["train"] for d in sorted(corpora)])
    return vocab, ModelConfig(vocab_size=len(vocab), **spec.model)


def _load(path: str, vocab: Vocabulary):
    ck = load_checkpoint(path)
    if ck["vocab_digest"] not in (None, vocab.digest()):
        raise ValueError(f"{path} was trained with a different vocabulary")
    return ck["theta"], ck["gamma"]


def cmd_gen_corpus(args) -> int:
    cfg = load_generator_config(args.generator_config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    files = write_synthetic_corpus(generate_synthetic_corpus(cfg), args.out)
    print(f"wrote {len(files)} files to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    corpora = load_corpus_dir(args.corpus_dir, args.domains)
    vocab = build_vocab([c["train"] for _, c in sorted(corpora.items()) if "train" in c], args.min_freq)
    summary = {d: {s: {"records": len(ds), "styles": dict(sorted(ds.style_counts().items())),
                       "sha256": ds.digest(), "references": ds.references is not None}
                   for s, ds in sorted(splits.items())}
               for d, splits in sorted(corpora.items())}
    summary["vocab"] = {"size": len(vocab), "sha256": vocab.digest()}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        vocab.save(Path(args.out) / "vocab.json")
        (Path(args.out) / "corpus.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))
    return 0


def _prepare_out(spec: ExperimentSpec) -> Path:
    out = Path(spec.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"spec": spec.to_dict()}, indent=1, sort_keys=True))
    return out


def cmd_pretrain(args) -> int:
    spec = resolve_spec(args, require_target=False).resolved()
    if not spec.sources:
        raise ValueError("--sources is required")
    corpora = _corpora_for(replace(spec, target=spec.sources[0]))
    vocab, mc = _vocab_and_model(spec, corpora, args.vocab)
    out = _prepare_out(spec)
    vocab.save(out / "vocab.json")
    torch.manual_seed(spec.seed)
    objective = ATMObjective(vocab, gumbel_seed=spec.seed)
    theta, gamma, hist = pretrain_stage1(init_theta(mc, spec.seed), init_gamma(mc, spec.seed),
                                         [corpora[d]["train"] for d in spec.sources], spec.train, objective,
                                         MetricsWriter(out / "metrics.jsonl"), checkpoint=out / "stage1.pt")
    save_checkpoint(out / "stage1.pt", theta, gamma, vocab_digest=vocab.digest())
    print(json.dumps(hist[-1]))
    return 0


def cmd_metatrain(args) -> int:
    spec = resolve_spec(args, require_target=False).resolved()
    corpora = _corpora_for(replace(spec, target=spec.sources[0] if spec.sources else ""))
    vocab, _ = _vocab_and_model(spec, corpora, args.vocab)
    theta, gamma = _load(args.checkpoint, vocab)
    out = _prepare_out(spec)
    vocab.save(out / "vocab.json")
    objective = ATMObjective(vocab, spec.train.gradient_path, spec.train.disable_rec_loss,
                             spec.train.disable_style_loss, gumbel_seed=spec.seed)
    mode = "maml" if spec.strategy == "maml" else "daml"
    theta, hist = daml_stage2(theta, gamma.freeze(), [corpora[d]["train"] for d in spec.sources], spec.train,
                              objective, mode, MetricsWriter(out / "metrics.jsonl"), checkpoint_dir=out)
    save_checkpoint(out / "stage2.pt", theta, gamma, vocab_digest=vocab.digest())
    print(json.dumps(hist[-1]))
    return 0


def cmd_adapt(args) -> int:
    spec = resolve_spec(args).resolved()
    corpora = _corpora_for(spec)
    vocab, _ = _vocab_and_model(spec, corpora, args.vocab)
    theta, gamma = _load(args.checkpoint, vocab)
    out = _prepare_out(spec)
    few = few_shot_slice(corpora[spec.target]["train"], spec.fraction, np.random.default_rng([spec.seed, 5]))
    objective = ATMObjective(vocab, spec.train.gradient_path, spec.train.disable_rec_loss,
                             spec.train.disable_style_loss, gumbel_seed=spec.seed)
    theta, losses = adapt_final(theta, gamma.freeze(), few, spec.train, objective,
                                MetricsWriter(out / "metrics.jsonl"))
    save_checkpoint(out / "adapted.pt", theta, gamma, vocab_digest=vocab.digest())
    print(json.dumps({"epochs": len(losses), "loss": losses[-1] if losses else None}))
    return 0


def cmd_evaluate(args) -> int:
    spec = resolve_spec(args).resolved()
    corpora = _corpora_for(spec)
    vocab, _ = _vocab_and_model(spec, corpora, args.vocab)
    theta, _ = _load(args.checkpoint, vocab)
    style_clf, domain_clf = _classifiers(corpora, RunCache(), None)
    test = corpora[spec.target]["test"]
    report = evaluate_outputs(test.records, transfer(theta, test.records, vocab), spec.target,
                              style_clf, domain_clf, test.references)
    out = _prepare_out(spec)
    (out / "report.json").write_text(report.to_json())
    print(json.dumps(report.summary()))
    return 0


def cmd_run(args) -> int:
    spec = resolve_spec(args)
    spec.export_latents = spec.export_latents or args.export_latents
    report = run_experiment(spec)
    print(json.dumps(report.summary()))
    return 0


def cmd_loo(args) -> int:
    spec = resolve_spec(args, require_target=False)
    domains = args.domains or sorted(load_corpus_dir(spec.corpus_dir) if spec.corpus_dir else
                                     load_generator_config(spec.generator_config)["domains"])
    rows = run_leave_one_out(domains, spec)
    print("\t".join(TABLE_COLUMNS))
    for r in rows:
        print("\t".join([r["target"], *[f"{r[c]:.1f}" for c in TABLE_COLUMNS[1:]]]))
    return 0


def cmd_export_latents(args) -> int:
    spec = resolve_spec(args, require_target=False)
    corpora = (load_corpus_dir(spec.corpus_dir) if spec.corpus_dir else
               generate_synthetic_corpus(load_generator_config(spec.generator_config)))
    vocab, _ = _vocab_and_model(spec, corpora, args.vocab)
    theta, _ = _load(args.checkpoint, vocab)
    domains = args.domains or sorted(corpora)
    records = [r for d in domains for r in corpora[d][args.split].records]
    emb = export_latents(theta, records, vocab, args.out_file)
    print(f"wrote {emb.shape[0]}x{emb.shape[1]} embeddings to {args.out_file}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="daml-atm", description="Domain-adaptive meta-learning for text style transfer")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write the synthetic multi-domain corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--generator-config", dest="generator_config")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_corpus)

    i = sub.add_parser("ingest", help="validate a corpus directory and build its vocabulary")
    i.add_argument("--corpus-dir", required=True)
    i.add_argument("--domains", type=lambda s: s.split(","))
    i.add_argument("--min-freq", type=int, default=1)
    i.add_argument("--out")
    i.set_defaults(func=cmd_ingest)

    for name, func, helptext, needs_ckpt in (
            ("pretrain", cmd_pretrain, "stage 1: reconstruction + discriminator", False),
            ("metatrain", cmd_metatrain, "stage 2: domain-adaptive meta-learning", True),
            ("adapt", cmd_adapt, "few-shot adaptation on the target train split", True),
            ("evaluate", cmd_evaluate, "evaluate a checkpoint on the target test split", True),
            ("run", cmd_run, "one full experiment", False),
            ("loo", cmd_loo, "leave-one-out over domains", False)):
        s = sub.add_parser(name, help=helptext)
        _add_run_flags(s)
        if needs_ckpt:
            s.add_argument("--checkpoint", required=True)
        if name not in ("run", "loo"):
            s.add_argument("--vocab", help="vocab.json (default: rebuilt from the corpus)")
        if name == "run":
            s.add_argument("--export-latents", action="store_true")
        if name == "loo":
            s.add_argument("--domains", type=lambda x: x.split(","))
        s.set_defaults(func=func)

    e = sub.add_parser("export-latents", help="write encoder embeddings as TSV")
    _add_run_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--vocab")
    e.add_argument("--domains", type=lambda x: x.split(","))
    e.add_argument("--split", default="test")
    e.add_argument("--out-file", required=True)
    e.set_defaults(func=cmd_export_latents)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
