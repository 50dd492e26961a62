"""Multi-domain non-parallel style corpora: ingestion, vocabulary, prefix
encoding, meta-task sampling and a deterministic synthetic generator."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

STYLES: tuple[str, ...] = ("negative", "positive")
TASK_KINDS: tuple[str, ...] = ("reconstruct", "transfer")
SPLITS = ("train", "dev", "test")

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"


class CorpusError(ValueError):
    pass


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def tokenize(text: str) -> list[str]:
    return normalize(text).split()


def opposite_style(style: str, styles: Sequence[str] = STYLES) -> str:
    if len(styles) != 2:
        raise CorpusError("opposite style is only defined for two-label style sets")
    if style not in styles:
        raise CorpusError(f"unknown style {style!r}")
    return styles[1] if style == styles[0] else styles[0]


@dataclass(frozen=True)
class StyleRecord:
    text: str
    style: str
    domain: str

    def __post_init__(self):
        if not normalize(self.text):
            raise CorpusError("empty text")
        if self.style not in STYLES:
            raise CorpusError(f"unknown style {self.style!r}")
        if not self.domain:
            raise CorpusError("empty domain")

    def to_json(self) -> dict:
        return {"text": self.text, "style": self.style, "domain": self.domain}


@dataclass
class DomainDataset:
    domain: str
    records: list[StyleRecord]
    split: str = "train"
    references: list[str] | None = None  # aligned human/oracle references, optional

    def __post_init__(self):
        if self.split not in SPLITS:
            raise CorpusError(f"unknown split {self.split!r}")
        for r in self.records:
            if r.domain != self.domain:
                raise CorpusError(f"record from {r.domain!r} in dataset {self.domain!r}")
        if self.references is not None and len(self.references) != len(self.records):
            raise CorpusError("reference count does not match record count")

    def __len__(self):
        return len(self.records)

    def style_counts(self) -> Counter:
        return Counter(r.style for r in self.records)

    def subset(self, indices: Iterable[int]) -> DomainDataset:
        idx = list(indices)
        refs = [self.references[i] for i in idx] if self.references is not None else None
        return DomainDataset(self.domain, [self.records[i] for i in idx], self.split, refs)

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(json.dumps(r.to_json(), sort_keys=True).encode())
            h.update(b"\n")
        return h.hexdigest()


def load_corpus(path: str | Path, domain: str, split: str = "train",
                styles: Sequence[str] = STYLES) -> DomainDataset:
    """Read a JSON-lines corpus file. Records whose ``domain`` field is present
    must agree with ``domain``."""
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                text, style = obj["text"], obj["style"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}, line {lineno}: malformed record ({exc})") from exc
            if style not in styles:
                raise CorpusError(f"{path}, line {lineno}: unknown style label {style!r}")
            rec_domain = obj.get("domain", domain)
            if rec_domain != domain:
                raise CorpusError(f"{path}, line {lineno}: domain {rec_domain!r} != {domain!r}")
            try:
                records.append(StyleRecord(text, style, domain))
            except CorpusError as exc:
                raise CorpusError(f"{path}, line {lineno}: {exc}") from exc
    if not records:
        raise CorpusError(f"{path}: empty dataset")
    return DomainDataset(domain, records, split)


def load_references(path: str | Path) -> list[dict]:
    """Read a human-reference file: one {source, reference, target_style} per line."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append({k: obj[k] for k in ("source", "reference", "target_style")})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}, line {lineno}: malformed reference ({exc})") from exc
    return out


def write_corpus(dataset: DomainDataset, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in dataset.records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def write_references(dataset: DomainDataset, path: str | Path) -> None:
    if dataset.references is None:
        raise CorpusError("dataset carries no references")
    with Path(path).open("w", encoding="utf-8") as fh:
        for r, ref in zip(dataset.records, dataset.references):
            row = {"source": r.text, "reference": ref, "target_style": opposite_style(r.style)}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# vocabulary and encoding


class Vocabulary:
    """Whitespace-token vocabulary with reserved ids at fixed positions:
    PAD, BOS, EOS, UNK, one prefix per style, one prefix per task kind."""

    def __init__(self, tokens: Sequence[str], styles: Sequence[str] = STYLES,
                 task_kinds: Sequence[str] = TASK_KINDS):
        self.styles = tuple(styles)
        self.task_kinds = tuple(task_kinds)
        self.reserved = [PAD, BOS, EOS, UNK]
        self.reserved += [f"<style:{s}>" for s in self.styles]
        self.reserved += [f"<task:{t}>" for t in self.task_kinds]
        self.itos: list[str] = list(self.reserved)
        for tok in tokens:
            if tok in self.reserved:
                raise CorpusError(f"token {tok!r} collides with a reserved token")
            self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate tokens in vocabulary")

    pad_id, bos_id, eos_id, unk_id = 0, 1, 2, 3

    def __len__(self):
        return len(self.itos)

    @property
    def num_reserved(self) -> int:
        return len(self.reserved)

    def style_id(self, style: str) -> int:
        return self.stoi[f"<style:{style}>"]

    def task_id(self, kind: str) -> int:
        return self.stoi[f"<task:{kind}>"]

    def token_id(self, tok: str) -> int:
        return self.stoi.get(tok, self.unk_id)

    def ids(self, text: str) -> list[int]:
        return [self.token_id(t) for t in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Map ids back to tokens, dropping reserved ids except UNK; stops at EOS."""
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i == self.unk_id or i >= self.num_reserved:
                out.append(self.itos[i])
        return out

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()

    def to_json(self) -> dict:
        return {"styles": list(self.styles), "task_kinds": list(self.task_kinds),
                "tokens": self.itos[self.num_reserved:]}

    @classmethod
    def from_json(cls, obj: dict) -> Vocabulary:
        return cls(obj["tokens"], obj["styles"], obj["task_kinds"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls.from_json(json.loads(Path(path).read_text()))


def build_vocab(datasets: Sequence[DomainDataset], min_freq: int = 1) -> Vocabulary:
    if not datasets:
        raise CorpusError("no datasets to build a vocabulary from")
    if min_freq < 1:
        raise CorpusError("min_freq must be >= 1")
    freq: Counter = Counter()
    for ds in datasets:
        for r in ds.records:
            freq.update(tokenize(r.text))
    kept = [t for t, c in freq.items() if c >= min_freq]
    kept.sort(key=lambda t: (-freq[t], t))
    return Vocabulary(kept)


def encode_input(record: StyleRecord, target_style: str, task_prefix: str,
                 vocab: Vocabulary, max_len: int) -> list[int]:
    """[task prefix, target-style prefix, tokens..., EOS], truncated to max_len."""
    if max_len < 3:
        raise CorpusError("max_len must be >= 3")
    body = vocab.ids(record.text)[: max_len - 3]
    return [vocab.task_id(task_prefix), vocab.style_id(target_style), *body, vocab.eos_id]


def encode_output(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """Decoder target: tokens..., EOS (no BOS; the decoder prepends it)."""
    return [*vocab.ids(text)[: max_len - 1], vocab.eos_id]


# ---------------------------------------------------------------------------
# meta-task sampling


@dataclass
class MetaTask:
    domain: str
    records: list[StyleRecord]
    kind: str = "meta_train"

    MIXED = "*mixed*"

    def __len__(self):
        return len(self.records)

    @property
    def is_pure(self) -> bool:
        return all(r.domain == self.domain for r in self.records)

    def check_pure(self) -> None:
        if not self.is_pure:
            seen = sorted({r.domain for r in self.records})
            raise CorpusError(f"task for {self.domain!r} mixes domains {seen}")


@dataclass(frozen=True)
class MetaSplit:
    train_domains: frozenset[str]
    val_domains: frozenset[str]

    def __post_init__(self):
        if not self.train_domains or not self.val_domains:
            raise CorpusError("meta split needs non-empty train and validation domains")
        if self.train_domains & self.val_domains:
            raise CorpusError("meta-train and meta-validation domains overlap")

    def covers(self, domains: Iterable[str]) -> bool:
        return (self.train_domains | self.val_domains) == set(domains)


def sample_meta_split(domains: Iterable[str], n_train: int,
                      rng: np.random.Generator) -> MetaSplit:
    pool = sorted(set(domains))
    if not 1 <= n_train < len(pool):
        raise CorpusError(f"n_train={n_train} out of range for {len(pool)} domains")
    picked = rng.choice(len(pool), size=n_train, replace=False)
    train = frozenset(pool[i] for i in picked)
    return MetaSplit(train, frozenset(pool) - train)


def sample_task(dataset: DomainDataset, n: int, kind: str,
                rng: np.random.Generator) -> MetaTask:
    if not dataset.records:
        raise CorpusError(f"cannot sample from empty dataset {dataset.domain!r}")
    if n < 1:
        raise CorpusError("n must be >= 1")
    replace = len(dataset) < n
    idx = rng.choice(len(dataset), size=n, replace=replace)
    return MetaTask(dataset.domain, [dataset.records[i] for i in idx], kind)


def sample_mixed_task(datasets: Sequence[DomainDataset], n: int, kind: str,
                      rng: np.random.Generator) -> MetaTask:
    """Classical MAML sampling: n records drawn from the pooled domains."""
    pool = [r for ds in datasets for r in ds.records]
    if not pool:
        raise CorpusError("cannot sample from empty pool")
    idx = rng.choice(len(pool), size=n, replace=len(pool) < n)
    return MetaTask(MetaTask.MIXED, [pool[i] for i in idx], kind)


def few_shot_slice(dataset: DomainDataset, fraction: float,
                   rng: np.random.Generator) -> DomainDataset:
    """Seeded sample of ``fraction`` of the records (at least one per style)."""
    if not 0 < fraction <= 1:
        raise CorpusError("fraction must lie in (0, 1]")
    if fraction == 1:
        return dataset
    k = max(1, int(round(fraction * len(dataset))))
    by_style: dict[str, list[int]] = {}
    for i, r in enumerate(dataset.records):
        by_style.setdefault(r.style, []).append(i)
    styles = sorted(by_style)
    k = max(k, len(styles))
    chosen: list[int] = []
    for j, s in enumerate(styles):
        share = k // len(styles) + (1 if j < k % len(styles) else 0)
        chosen.extend(rng.choice(by_style[s], size=min(share, len(by_style[s])), replace=False))
    return dataset.subset(sorted(int(i) for i in chosen))


# ---------------------------------------------------------------------------
# access instrumentation


@dataclass
class AccessLog:
    """Records which (domain, split) data each phase of a run consumed."""
    entries: list[tuple[str, str, str]] = field(default_factory=list)

    def record(self, dataset: DomainDataset, purpose: str) -> DomainDataset:
        self.entries.append((dataset.domain, dataset.split, purpose))
        return dataset

    def reads(self, domain: str, split: str | None = None,
              purposes: Iterable[str] | None = None) -> list[tuple[str, str, str]]:
        wanted = set(purposes) if purposes is not None else None
        return [e for e in self.entries
                if e[0] == domain and (split is None or e[1] == split)
                and (wanted is None or e[2] in wanted)]


# ---------------------------------------------------------------------------
# synthetic corpora

# 400 restaurant train sentences from the default generator, shipped so the
# loader can be exercised without generating anything.
BUNDLED_RESTAURANT = Path(__file__).parent / "data" / "restaurant.train.jsonl"

DEFAULT_GENERATOR: dict = {
    "seed": 13,
    "sizes": {"train": 400, "dev": 40, "test": 100},
    "domain_adjective_rate": 0.5,
    "templates": [
        "the {noun} is {adj}",
        "the {noun} was really {adj}",
        "i think the {noun} is {adj}",
        "overall the {noun} was {adj}",
        "the {noun} is {adj} and the {noun2} is {adj2}",
        "honestly this {noun} was {adj}",
    ],
    # (positive, negative)
    "shared_pairs": [["good", "bad"], ["great", "awful"], ["excellent", "poor"],
                     ["amazing", "horrible"], ["wonderful", "disappointing"]],
    "domains": {
        "restaurant": {
            "nouns": ["pasta", "pizza", "steak", "salad", "soup", "burger",
                      "sushi", "dessert", "waiter", "menu", "coffee", "bread"],
            "pairs": [["delicious", "terrible"], ["fresh", "stale"], ["tasty", "bland"]],
        },
        "movie": {
            "nouns": ["plot", "actor", "script", "film", "scene", "soundtrack",
                      "director", "ending", "cast", "dialogue", "villain", "sequel"],
            "pairs": [["gripping", "dull"], ["brilliant", "boring"], ["moving", "predictable"]],
        },
        "product": {
            "nouns": ["battery", "charger", "screen", "cable", "keyboard", "case",
                      "speaker", "blender", "headset", "mouse", "lamp", "printer"],
            "pairs": [["durable", "flimsy"], ["reliable", "faulty"], ["sturdy", "cheap"]],
        },
        "qa": {
            "nouns": ["answer", "question", "explanation", "reply", "source", "advice",
                      "tutorial", "solution", "comment", "guide", "link", "response"],
            "pairs": [["helpful", "useless"], ["clear", "confusing"], ["accurate", "misleading"]],
        },
    },
}


def load_generator_config(path: str | Path | None) -> dict:
    """YAML/JSON generator config; missing keys fall back to the defaults."""
    cfg = json.loads(json.dumps(DEFAULT_GENERATOR))
    if path is not None:
        user = yaml.safe_load(Path(path).read_text()) or {}
        cfg.update(user)
    return cfg


def _swap_table(cfg: dict, domain: str) -> dict[str, str]:
    table = {}
    for pos, neg in cfg["shared_pairs"] + cfg["domains"][domain]["pairs"]:
        table[pos], table[neg] = neg, pos
    return table


def swap_sentiment(text: str, table: dict[str, str]) -> str:
    return " ".join(table.get(t, t) for t in text.split())


def generate_synthetic_corpus(cfg: dict, rng: np.random.Generator | None = None
                              ) -> dict[str, dict[str, DomainDataset]]:
    """Templated sentences per domain and split, style-balanced, with paired
    lexicon-swap references. Returns {domain: {split: DomainDataset}}."""
    domains = list(cfg["domains"])
    if len(domains) < 2:
        raise CorpusError("synthetic corpus needs at least two domains")
    vocab_sets = [set(d["nouns"]) | {w for p in d["pairs"] for w in p}
                  for d in cfg["domains"].values()]
    for i in range(len(vocab_sets)):
        for j in range(i + 1, len(vocab_sets)):
            if vocab_sets[i] & vocab_sets[j]:
                raise CorpusError(f"domain lexica overlap: {domains[i]} / {domains[j]}")
    if rng is None:
        rng = np.random.default_rng(cfg["seed"])
    rate = cfg["domain_adjective_rate"]
    out: dict[str, dict[str, DomainDataset]] = {}
    for domain in domains:
        spec = cfg["domains"][domain]
        table = _swap_table(cfg, domain)
        out[domain] = {}
        for split in SPLITS:
            size = cfg["sizes"][split]
            records, refs = [], []
            for k in range(size):
                style = STYLES[k % 2]
                col = 0 if style == "positive" else 1  # pairs are (positive, negative)

                def adjective():
                    pairs = spec["pairs"] if rng.random() < rate else cfg["shared_pairs"]
                    return pairs[rng.integers(len(pairs))][col]

                template = cfg["templates"][rng.integers(len(cfg["templates"]))]
                n1, n2 = rng.choice(len(spec["nouns"]), size=2, replace=False)
                text = template.format(noun=spec["nouns"][n1], noun2=spec["nouns"][n2],
                                       adj=adjective(), adj2=adjective())
                records.append(StyleRecord(text, style, domain))
                refs.append(swap_sentiment(text, table))
            out[domain][split] = DomainDataset(domain, records, split, refs)
    return out


def write_synthetic_corpus(corpus: dict[str, dict[str, DomainDataset]], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for domain, splits in corpus.items():
        for split, ds in splits.items():
            p = out_dir / f"{domain}.{split}.jsonl"
            write_corpus(ds, p)
            written.append(p)
            if ds.references is not None and split == "test":
                rp = out_dir / f"{domain}.{split}.ref.jsonl"
                write_references(ds, rp)
                written.append(rp)
    return written


def load_corpus_dir(path: str | Path, domains: Sequence[str] | None = None
                    ) -> dict[str, dict[str, DomainDataset]]:
    """Load ``<domain>.<split>.jsonl`` files (plus optional ``.ref.jsonl``)."""
    path = Path(path)
    found: dict[str, dict[str, DomainDataset]] = {}
    for f in sorted(path.glob("*.jsonl")):
        parts = f.name.split(".")
        if len(parts) != 3 or parts[1] not in SPLITS:
            continue
        domain, split = parts[0], parts[1]
        if domains is not None and domain not in domains:
            continue
        ds = load_corpus(f, domain, split)
        ref = path / f"{domain}.{split}.ref.jsonl"
        if ref.exists():
            rows = load_references(ref)
            if [r["source"] for r in rows] != [normalize(x.text) for x in ds.records] and \
                    [r["source"] for r in rows] != [x.text for x in ds.records]:
                raise CorpusError(f"{ref}: sources do not align with {f.name}")
            ds.references = [r["reference"] for r in rows]
        found.setdefault(domain, {})[split] = ds
    if domains is not None:
        missing = set(domains) - set(found)
        if missing:
            raise CorpusError(f"no corpus files for domains {sorted(missing)}")
    return found
