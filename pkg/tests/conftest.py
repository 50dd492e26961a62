import numpy as np
import pytest
import torch

from daml_atm.corpus import (DomainDataset, StyleRecord, build_vocab, generate_synthetic_corpus,
                             load_generator_config)
from daml_atm.objectives import ATMObjective
from daml_atm.seq2seq import ModelConfig, init_gamma, init_theta


def tiny_config(vocab_size: int, **kw) -> ModelConfig:
    base = dict(d_model=16, n_heads=2, enc_layers=1, dec_layers=1, d_ff=32, max_len=16)
    base.update(kw)
    return ModelConfig(vocab_size=vocab_size, **base)


@pytest.fixture(scope="session")
def synthetic():
    return generate_synthetic_corpus(load_generator_config(None))


@pytest.fixture(scope="session")
def small_corpus():
    """Three 24-sentence domains from a shrunken generator config."""
    cfg = load_generator_config(None)
    cfg["sizes"] = {"train": 24, "dev": 4, "test": 8}
    cfg["domains"] = {k: cfg["domains"][k] for k in ("restaurant", "movie", "product")}
    return generate_synthetic_corpus(cfg)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab([c["train"] for c in small_corpus.values()])


@pytest.fixture
def tiny_params(small_vocab):
    cfg = tiny_config(len(small_vocab))
    return init_theta(cfg, 0), init_gamma(cfg, 0)


@pytest.fixture
def tiny_params64(tiny_params):
    theta, gamma = tiny_params
    return theta.to(torch.float64), gamma.to(torch.float64)


@pytest.fixture
def objective(small_vocab):
    return ATMObjective(small_vocab)


def records(domain: str, texts_styles) -> list[StyleRecord]:
    return [StyleRecord(t, s, domain) for t, s in texts_styles]


def dataset(domain: str, texts_styles, split="train") -> DomainDataset:
    return DomainDataset(domain, records(domain, texts_styles), split)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, echoed in the terminal summary
CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
