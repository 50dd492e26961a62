import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daml_atm.corpus import (BOS, BUNDLED_RESTAURANT, EOS, PAD, UNK, AccessLog, CorpusError, DomainDataset, MetaSplit,
                             MetaTask, StyleRecord, Vocabulary, build_vocab, encode_input, encode_output,
                             few_shot_slice, generate_synthetic_corpus, load_corpus, load_corpus_dir,
                             load_generator_config, sample_meta_split, sample_mixed_task, sample_task,
                             swap_sentiment, write_synthetic_corpus)

from conftest import dataset, records


def write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
    return path


# -- records and loading ------------------------------------------------------

def test_record_rejects_blank_and_unknown_style():
    with pytest.raises(CorpusError):
        StyleRecord("   ", "positive", "yelp")
    with pytest.raises(CorpusError):
        StyleRecord("fine", "neutral", "yelp")


def test_dataset_rejects_foreign_domain():
    with pytest.raises(CorpusError):
        DomainDataset("yelp", [StyleRecord("ok", "positive", "amazon")])


def test_load_three_lines(tmp_path):
    rows = [{"text": f"line {i}", "style": "positive", "domain": "yelp"} for i in range(3)]
    ds = load_corpus(write_lines(tmp_path / "y.jsonl", rows), "yelp")
    assert len(ds) == 3 and ds.domain == "yelp"
    assert [r.text for r in ds.records] == ["line 0", "line 1", "line 2"]


def test_load_unknown_style_names_line(tmp_path):
    rows = [{"text": "a", "style": "positive", "domain": "yelp"},
            {"text": "b", "style": "neutral", "domain": "yelp"}]
    with pytest.raises(CorpusError, match="line 2"):
        load_corpus(write_lines(tmp_path / "y.jsonl", rows), "yelp")


def test_load_malformed_line_number(tmp_path):
    rows = [{"text": "a", "style": "positive", "domain": "yelp"}, "{not json"]
    with pytest.raises(CorpusError, match="line 2"):
        load_corpus(write_lines(tmp_path / "y.jsonl", rows), "yelp")


def test_load_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    with pytest.raises(CorpusError, match="empty"):
        load_corpus(p, "yelp")


def test_bundled_restaurant_file_counts():
    ds = load_corpus(BUNDLED_RESTAURANT, "restaurant")
    assert len(ds) == 400
    assert ds.style_counts() == {"positive": 200, "negative": 200}


# -- vocabulary and encoding ----------------------------------------------------

def test_vocab_min_freq_and_unk():
    ds = dataset("d", [("a a b", "positive")])
    v1 = build_vocab([ds], 1)
    assert "a" in v1.stoi and "b" in v1.stoi
    v2 = build_vocab([ds], 2)
    assert "b" not in v2.stoi
    assert v2.ids("b") == [v2.unk_id]


def test_vocab_shared_token_single_id():
    v = build_vocab([dataset("x", [("good food", "positive")]), dataset("y", [("good film", "positive")])])
    assert v.itos.count("good") == 1


def test_vocab_order_and_reserved_layout():
    v = build_vocab([dataset("d", [("b c c a a a", "positive")])])
    assert v.num_reserved == 4 + 2 + 2
    assert v.itos[:4] == [PAD, BOS, EOS, UNK]
    assert v.itos[v.num_reserved:] == ["a", "c", "b"]


def test_vocab_roundtrip(tmp_path, small_vocab):
    small_vocab.save(tmp_path / "v.json")
    again = Vocabulary.load(tmp_path / "v.json")
    assert again.itos == small_vocab.itos and again.digest() == small_vocab.digest()


def test_encode_input_layout():
    v = build_vocab([dataset("d", [("good food", "positive")])])
    r = StyleRecord("good food", "positive", "d")
    ids = encode_input(r, "positive", "reconstruct", v, 10)
    assert ids == [v.task_id("reconstruct"), v.style_id("positive"), v.stoi["good"], v.stoi["food"], v.eos_id]
    neg = encode_input(r, "negative", "reconstruct", v, 10)
    assert neg[1] == v.style_id("negative") and neg[:1] + neg[2:] == ids[:1] + ids[2:]


def test_encode_input_truncates():
    text = " ".join(f"w{i}" for i in range(100))
    v = build_vocab([dataset("d", [(text, "positive")])])
    ids = encode_input(StyleRecord(text, "positive", "d"), "positive", "transfer", v, 10)
    assert len(ids) == 10 and ids[-1] == v.eos_id


def test_encode_input_needs_room():
    v = build_vocab([dataset("d", [("x", "positive")])])
    with pytest.raises(CorpusError):
        encode_input(StyleRecord("x", "positive", "d"), "positive", "reconstruct", v, 2)


WORDS = ["the", "food", "is", "good", "bad", "movie", "plot"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=12), st.integers(3, 20))
def test_encode_decode_roundtrip(tokens, max_len):
    v = build_vocab([dataset("d", [(" ".join(WORDS), "positive")])])
    rec = StyleRecord(" ".join(tokens), "negative", "d")
    ids = encode_input(rec, "positive", "reconstruct", v, max_len)
    assert len(ids) <= max_len and ids[-1] == v.eos_id
    assert encode_input(rec, "positive", "reconstruct", v, max_len) == ids
    if len(tokens) <= max_len - 3:
        assert v.decode(ids) == tokens
        assert v.decode(encode_output(rec.text, v, max_len)) == tokens


# -- meta-splits and tasks --------------------------------------------------------

def test_meta_split_example_and_determinism():
    a = sample_meta_split({"A", "B", "C"}, 2, np.random.default_rng(3))
    b = sample_meta_split({"A", "B", "C"}, 2, np.random.default_rng(3))
    assert a == b
    assert len(a.train_domains) == 2 and len(a.val_domains) == 1
    assert a.covers({"A", "B", "C"})


def test_meta_split_range_errors():
    with pytest.raises(CorpusError):
        sample_meta_split({"A", "B", "C"}, 3, np.random.default_rng(0))
    with pytest.raises(CorpusError):
        sample_meta_split({"A", "B", "C"}, 0, np.random.default_rng(0))


def test_meta_split_rejects_overlap():
    with pytest.raises(CorpusError):
        MetaSplit(frozenset({"A"}), frozenset({"A", "B"}))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 7), st.data())
def test_meta_split_disjoint_cover(n, data):
    domains = {f"d{i}" for i in range(n)}
    k = data.draw(st.integers(1, n - 1))
    seed = data.draw(st.integers(0, 10_000))
    s = sample_meta_split(domains, k, np.random.default_rng(seed))
    assert not (s.train_domains & s.val_domains)
    assert s.train_domains | s.val_domains == domains
    assert len(s.train_domains) == k


def test_sample_task_pure_and_sized():
    ds = dataset("yelp", [(f"s {i}", "positive" if i % 2 else "negative") for i in range(100)])
    t = sample_task(ds, 8, "meta_train", np.random.default_rng(0))
    assert len(t) == 8 and t.is_pure and t.domain == "yelp"
    assert len({r.text for r in t.records}) == 8


def test_sample_task_with_replacement():
    ds = dataset("yelp", [("a", "positive"), ("b", "negative"), ("c", "positive")])
    t = sample_task(ds, 8, "meta_train", np.random.default_rng(0))
    assert len(t) == 8 and t.is_pure


def test_sample_task_empty_dataset():
    with pytest.raises(CorpusError):
        sample_task(DomainDataset("yelp", []), 4, "meta_train", np.random.default_rng(0))


def test_mixed_tasks_fail_purity_sometimes(small_corpus):
    pool = [c["train"] for c in small_corpus.values()]
    rng = np.random.default_rng(0)
    tasks = [sample_mixed_task(pool, 8, "meta_train", rng) for _ in range(20)]
    assert any(not t.is_pure for t in tasks)
    impure = next(t for t in tasks if not t.is_pure)
    with pytest.raises(CorpusError):
        impure.check_pure()


def test_metatask_purity_check():
    t = MetaTask("a", records("a", [("x", "positive")]) + records("b", [("y", "negative")]), "meta_val")
    assert not t.is_pure


# -- few-shot slice and access log ------------------------------------------------

def test_few_shot_slice_deterministic(synthetic):
    ds = synthetic["restaurant"]["train"]
    a = few_shot_slice(ds, 0.01, np.random.default_rng(7))
    b = few_shot_slice(ds, 0.01, np.random.default_rng(7))
    assert [r.text for r in a.records] == [r.text for r in b.records]
    assert len(a) == 4 and set(a.style_counts()) == {"positive", "negative"}
    assert few_shot_slice(ds, 1.0, np.random.default_rng(0)) is ds
    with pytest.raises(CorpusError):
        few_shot_slice(ds, 0.0, np.random.default_rng(0))


def test_access_log_filters():
    log = AccessLog()
    ds = dataset("a", [("x", "positive")], split="test")
    log.record(ds, "eval")
    assert log.reads("a", "test") == [("a", "test", "eval")]
    assert log.reads("a", "train") == []
    assert log.reads("a", purposes=["train"]) == []


# -- synthetic generator ------------------------------------------------------------

def test_generator_balanced_and_sized(synthetic):
    assert set(synthetic) == {"restaurant", "movie", "product", "qa"}
    for splits in synthetic.values():
        tr = splits["train"]
        assert len(tr) == 400
        assert tr.style_counts() == {"positive": 200, "negative": 200}


def test_generator_reference_swap():
    cfg = load_generator_config(None)
    from daml_atm.corpus import _swap_table
    assert swap_sentiment("the pasta is terrible", _swap_table(cfg, "restaurant")) == "the pasta is delicious"


def test_generator_references_flip_style(synthetic):
    ds = synthetic["movie"]["test"]
    assert ds.references is not None and len(ds.references) == len(ds)
    assert all(ref != r.text for ref, r in zip(ds.references, ds.records))


def test_generator_same_seed_identical_files(tmp_path):
    cfg = load_generator_config(None)
    cfg["sizes"] = {"train": 10, "dev": 2, "test": 4}
    write_synthetic_corpus(generate_synthetic_corpus(cfg), tmp_path / "a")
    write_synthetic_corpus(generate_synthetic_corpus(cfg), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    loaded = load_corpus_dir(tmp_path / "a")
    assert loaded["qa"]["test"].references is not None


def test_generator_needs_two_domains():
    cfg = load_generator_config(None)
    cfg["domains"] = {"movie": cfg["domains"]["movie"]}
    with pytest.raises(CorpusError):
        generate_synthetic_corpus(cfg)


def test_generator_rejects_overlapping_lexica():
    cfg = load_generator_config(None)
    cfg["domains"]["movie"]["nouns"] = cfg["domains"]["movie"]["nouns"] + ["pasta"]
    with pytest.raises(CorpusError, match="overlap"):
        generate_synthetic_corpus(cfg)


def test_generator_yaml_config(tmp_path):
    p = tmp_path / "gen.yaml"
    p.write_text("seed: 5\nsizes: {train: 6, dev: 2, test: 2}\n")
    cfg = load_generator_config(p)
    assert cfg["seed"] == 5 and "restaurant" in cfg["domains"]
    c = generate_synthetic_corpus(cfg)
    assert len(c["qa"]["train"]) == 6
