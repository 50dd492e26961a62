"""Domain-adaptive meta-learning with an adversarial transfer model for
few-shot text style transfer across domains."""

from .corpus import (DomainDataset, MetaSplit, MetaTask, StyleRecord, Vocabulary, build_vocab,
                     encode_input, generate_synthetic_corpus, load_corpus, sample_meta_split, sample_task)
from .evalkit import (EvalReport, compute_bleu, compute_g_score, evaluate_model, export_latents,
                      reconstruction_bleu)
from .metalearn import TrainConfig, adapt_final, daml_stage2, pretrain_stage1, train_baseline
from .objectives import ATMObjective, discriminator_accuracy, loss_cls, loss_rec, loss_style
from .seq2seq import ModelConfig, ParamSet, init_gamma, init_theta

__version__ = "0.1.0"

__all__ = [
    "ATMObjective", "DomainDataset", "EvalReport", "MetaSplit", "MetaTask", "ModelConfig",
    "ParamSet", "StyleRecord", "TrainConfig", "Vocabulary", "adapt_final", "build_vocab",
    "compute_bleu", "compute_g_score", "daml_stage2", "discriminator_accuracy", "encode_input",
    "evaluate_model", "export_latents", "generate_synthetic_corpus", "init_gamma", "init_theta",
    "load_corpus", "loss_cls", "loss_rec", "loss_style", "pretrain_stage1", "reconstruction_bleu",
    "sample_meta_split", "sample_task", "train_baseline",
]
