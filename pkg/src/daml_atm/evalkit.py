"""Automatic evaluation: style/domain classifiers, corpus BLEU, G-score,
report assembly and latent export."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import DomainDataset, StyleRecord, Vocabulary, encode_input, opposite_style, tokenize
from .objectives import TRANSFER_TASK
from .seq2seq import ParamSet, encode_batch, generate_batch, make_batch

CLASSIFIER_VERSION = 1


# ---------------------------------------------------------------------------
# BLEU and G-score


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
               max_n: int = 4) -> dict:
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} reference sets")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        hyp_len += len(hyp)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            best: Counter = Counter()
            for r in refs:
                best |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return {"matches": matches, "totals": totals, "hyp_len": hyp_len, "ref_len": ref_len}


def compute_bleu(hypotheses: Sequence[Sequence[str]],
                 references: Sequence[Sequence[Sequence[str]]]) -> float:
    """Corpus BLEU-4 in [0, 100]; add-one smoothing on the n >= 2 precisions."""
    s = bleu_stats(hypotheses, references)
    if s["hyp_len"] == 0 or s["matches"][0] == 0:
        return 0.0
    log_p = math.log(s["matches"][0] / s["totals"][0])
    for m, t in zip(s["matches"][1:], s["totals"][1:]):
        log_p += math.log((m + 1) / (t + 1))
    c, r = s["hyp_len"], s["ref_len"]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100.0 * bp * math.exp(log_p / 4)


def compute_g_score(s_acc: float, bleu: float) -> float:
    if s_acc < 0 or bleu < 0:
        raise ValueError("G-score inputs must be non-negative")
    if s_acc > 100 or bleu > 100:
        raise ValueError("G-score inputs must lie in [0, 100]")
    return math.sqrt(s_acc * bleu)


# ---------------------------------------------------------------------------
# evaluation classifiers


class BagClassifier:
    """Mean of token embeddings followed by a two-layer MLP."""

    def __init__(self, kind: str, labels: Sequence[str], tokens: Sequence[str],
                 dim: int = 32, hidden: int = 32, seed: int = 0):
        self.kind = kind
        self.labels = list(labels)
        self.itos = ["<unk>", *tokens]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.dim, self.hidden, self.seed = dim, hidden, seed
        gen = torch.Generator().manual_seed(seed)
        self.params = {
            "emb": torch.randn(len(self.itos), dim, generator=gen) * 0.1,
            "w1": torch.randn(dim, hidden, generator=gen) * dim ** -0.5,
            "b1": torch.zeros(hidden),
            "w2": torch.randn(hidden, len(self.labels), generator=gen) * hidden ** -0.5,
            "b2": torch.zeros(len(self.labels)),
        }
        self.held_out_accuracy: float | None = None

    def _featurize(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        rows = [[self.stoi.get(t, 0) for t in tokenize(x)] or [0] for x in texts]
        L = max(len(r) for r in rows)
        ids = torch.zeros(len(rows), L, dtype=torch.long)
        mask = torch.zeros(len(rows), L)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
            mask[i, : len(r)] = 1
        return ids, mask

    def logits(self, texts: Sequence[str]) -> torch.Tensor:
        ids, mask = self._featurize(texts)
        p = self.params
        e = (p["emb"][ids] * mask[..., None]).sum(1) / mask.sum(1, keepdim=True)
        return torch.tanh(e @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]

    @torch.no_grad()
    def predict(self, texts: Sequence[str]) -> list[str]:
        if not texts:
            return []
        return [self.labels[i] for i in self.logits(texts).argmax(-1).tolist()]

    def fit(self, texts: Sequence[str], labels: Sequence[str], epochs: int = 30,
            lr: float = 0.05, batch: int = 64) -> None:
        y = torch.tensor([self.labels.index(l) for l in labels])
        for v in self.params.values():
            v.requires_grad_(True)
        opt = torch.optim.Adam(self.params.values(), lr=lr)
        rng = np.random.default_rng(self.seed)
        for _ in range(epochs):
            order = rng.permutation(len(texts))
            for i in range(0, len(texts), batch):
                idx = order[i:i + batch]
                loss = F.cross_entropy(self.logits([texts[j] for j in idx]), y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        for v in self.params.values():
            v.requires_grad_(False)

    def accuracy(self, texts: Sequence[str], labels: Sequence[str]) -> float:
        pred = self.predict(texts)
        return 100.0 * sum(p == l for p, l in zip(pred, labels)) / max(len(labels), 1)

    def confusion(self, texts: Sequence[str], labels: Sequence[str]) -> np.ndarray:
        m = np.zeros((len(self.labels), len(self.labels)), dtype=int)
        for p, l in zip(self.predict(texts), labels):
            m[self.labels.index(l), self.labels.index(p)] += 1
        return m

    def save(self, path: str | Path) -> None:
        torch.save({"version": CLASSIFIER_VERSION, "kind": self.kind, "labels": self.labels,
                    "itos": self.itos, "dim": self.dim, "hidden": self.hidden, "seed": self.seed,
                    "held_out_accuracy": self.held_out_accuracy,
                    "params": {k: v.detach().clone() for k, v in self.params.items()}}, path)

    @classmethod
    def load(cls, path: str | Path) -> BagClassifier:
        blob = torch.load(path, weights_only=False)
        if blob["version"] != CLASSIFIER_VERSION:
            raise ValueError(f"unsupported classifier version {blob['version']}")
        clf = cls(blob["kind"], blob["labels"], blob["itos"][1:], blob["dim"], blob["hidden"], blob["seed"])
        clf.params = blob["params"]
        clf.held_out_accuracy = blob["held_out_accuracy"]
        return clf


def train_eval_classifier(kind: str, data: Sequence[DomainDataset], seed: int = 0,
                          held_out: Sequence[DomainDataset] | None = None,
                          epochs: int = 30) -> BagClassifier:
    """Style (labels = style) or domain (labels = domain) classifier.

    If ``held_out`` is given its accuracy is stored on the classifier;
    otherwise a seeded 10% of ``data`` is held out for that purpose.
    """
    if kind not in ("style", "domain"):
        raise ValueError(f"unknown classifier kind {kind!r}")
    records = [r for ds in data for r in ds.records]
    label_of: Callable[[StyleRecord], str] = (lambda r: r.style) if kind == "style" else (lambda r: r.domain)
    labels = sorted({label_of(r) for r in records})
    if len(labels) < 2:
        raise ValueError(f"{kind} classifier needs at least two classes, got {labels}")
    rng = np.random.default_rng(seed)
    if held_out is None:
        order = rng.permutation(len(records))
        cut = max(1, len(records) // 10)
        test_recs = [records[i] for i in order[:cut]]
        train_recs = [records[i] for i in order[cut:]]
    else:
        train_recs = records
        test_recs = [r for ds in held_out for r in ds.records]
    tokens = sorted({t for r in train_recs for t in tokenize(r.text)})
    clf = BagClassifier(kind, labels, tokens, seed=seed)
    clf.fit([r.text for r in train_recs], [label_of(r) for r in train_recs], epochs=epochs)
    clf.held_out_accuracy = clf.accuracy([r.text for r in test_recs], [label_of(r) for r in test_recs])
    return clf


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    s_acc: float
    bleu: float
    d_acc: float
    g_score: float
    input_bleu: float
    bleu_reference: str          # "human" or "input"
    domain: str
    per_sentence: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("s_acc", "bleu", "d_acc", "input_bleu"):
            v = getattr(self, name)
            if not 0 <= v <= 100 + 1e-9:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if abs(self.g_score - compute_g_score(self.s_acc, self.bleu)) > 1e-6:
            raise ValueError("g_score inconsistent with s_acc and bleu")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("s_acc", "bleu", "g_score", "d_acc", "input_bleu")}

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))


def evaluate_outputs(sources: Sequence[StyleRecord], outputs: Sequence[str], domain: str,
                     style_clf: BagClassifier, domain_clf: BagClassifier,
                     references: Sequence[str] | None = None) -> EvalReport:
    """Score already generated transfers (one output per source sentence)."""
    if not sources:
        raise ValueError("nothing to evaluate")
    if len(outputs) != len(sources):
        raise ValueError("output count does not match source count")
    targets = [opposite_style(r.style) for r in sources]
    style_pred = style_clf.predict(list(outputs))
    domain_pred = domain_clf.predict(list(outputs))
    s_acc = 100.0 * sum(p == t for p, t in zip(style_pred, targets)) / len(sources)
    d_acc = 100.0 * sum(p == domain for p in domain_pred) / len(sources)
    hyps = [tokenize(o) for o in outputs]
    input_bleu = compute_bleu(hyps, [[tokenize(r.text)] for r in sources])
    if references is not None:
        bleu = compute_bleu(hyps, [[tokenize(x)] for x in references])
        kind = "human"
    else:
        bleu, kind = input_bleu, "input"
    rows = [{"source": r.text, "output": o, "target_style": t, "style_pred": sp, "domain_pred": dp}
            for r, o, t, sp, dp in zip(sources, outputs, targets, style_pred, domain_pred)]
    return EvalReport(s_acc, bleu, d_acc, compute_g_score(s_acc, bleu), input_bleu, kind, domain, rows)


def _greedy(theta: ParamSet, records: Sequence[StyleRecord], vocab: Vocabulary, task: str,
            style_of: Callable[[StyleRecord], str], max_len: int | None, batch_size: int) -> list[str]:
    cfg = theta.config
    gen_len = max_len if max_len is not None else cfg.max_len
    out: list[str] = []
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        ins = [encode_input(r, style_of(r), task, vocab, cfg.max_len) for r in chunk]
        out.extend(" ".join(vocab.decode(ids)) for ids in generate_batch(theta, ins, gen_len))
    return out


def transfer(theta: ParamSet, records: Sequence[StyleRecord], vocab: Vocabulary,
             max_len: int | None = None, batch_size: int = 128) -> list[str]:
    """Greedy transfer of every record toward its opposite style."""
    return _greedy(theta, records, vocab, TRANSFER_TASK, lambda r: opposite_style(r.style, vocab.styles),
                   max_len, batch_size)


def reconstruct(theta: ParamSet, records: Sequence[StyleRecord], vocab: Vocabulary,
                max_len: int | None = None, batch_size: int = 128) -> list[str]:
    """Greedy decoding under each record's own style prefix."""
    return _greedy(theta, records, vocab, "reconstruct", lambda r: r.style, max_len, batch_size)


def reconstruction_bleu(theta: ParamSet, records: Sequence[StyleRecord], vocab: Vocabulary) -> float:
    outs = reconstruct(theta, records, vocab)
    return compute_bleu([tokenize(o) for o in outs], [[tokenize(r.text)] for r in records])


def evaluate_model(theta: ParamSet, test: DomainDataset, vocab: Vocabulary,
                   style_clf: BagClassifier, domain_clf: BagClassifier,
                   refs: Sequence[str] | None = None) -> EvalReport:
    if not test.records:
        raise ValueError("empty test set")
    outputs = transfer(theta, test.records, vocab)
    return evaluate_outputs(test.records, outputs, test.domain, style_clf, domain_clf, refs)


# ---------------------------------------------------------------------------
# latent export


@torch.no_grad()
def sentence_embeddings(theta: ParamSet, sentences: Sequence[StyleRecord], vocab: Vocabulary) -> np.ndarray:
    """Mean-pooled encoder states of each sentence under its own style prefix."""
    cfg = theta.config
    rows = []
    for i in range(0, len(sentences), 256):
        chunk = sentences[i:i + 256]
        ins = [encode_input(r, r.style, "reconstruct", vocab, cfg.max_len) for r in chunk]
        b = make_batch(ins)
        h = encode_batch(theta, b.src, b.src_keep)
        w = b.src_keep.to(h.dtype)[..., None]
        rows.append(((h * w).sum(1) / w.sum(1)).double().numpy())
    return np.concatenate(rows, 0)


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Top-2 principal component scores with a deterministic sign convention."""
    xc = x - x.mean(0, keepdims=True)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    for k in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[k]))
        if comps[k, j] < 0:
            comps[k] = -comps[k]
    proj = xc @ comps.T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def export_latents(theta: ParamSet, sentences: Sequence[StyleRecord], vocab: Vocabulary,
                   out_path: str | Path, origins: Sequence[str] | None = None) -> np.ndarray:
    """Write ``out_path`` (TSV: id, domain, style, origin, dims...) and a
    sibling ``*.pca.tsv`` with the 2-D projection. Returns the matrix."""
    if not sentences:
        raise ValueError("no sentences to export")
    origins = list(origins) if origins is not None else ["source"] * len(sentences)
    if len(origins) != len(sentences):
        raise ValueError("origin labels do not match sentences")
    emb = sentence_embeddings(theta, sentences, vocab)
    proj = pca_2d(emb)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    d = emb.shape[1]
    with out_path.open("w") as fh:
        fh.write("\t".join(["id", "domain", "style", "origin", *[f"d{k}" for k in range(d)]]) + "\n")
        for i, (r, o, row) in enumerate(zip(sentences, origins, emb)):
            fh.write("\t".join([str(i), r.domain, r.style, o, *[f"{v:.8g}" for v in row]]) + "\n")
    pca_path = out_path.with_suffix(".pca.tsv")
    with pca_path.open("w") as fh:
        fh.write("id\tdomain\tstyle\torigin\tpc1\tpc2\n")
        for i, (r, o, row) in enumerate(zip(sentences, origins, proj)):
            fh.write(f"{i}\t{r.domain}\t{r.style}\t{o}\t{row[0]:.8g}\t{row[1]:.8g}\n")
    return emb


def read_latents(path: str | Path) -> tuple[list[dict], np.ndarray]:
    rows, mat = [], []
    with Path(path).open() as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            rows.append(dict(zip(header[:4], parts[:4])))
            mat.append([float(v) for v in parts[4:]])
    return rows, np.asarray(mat)


def linear_probe_accuracy(x: np.ndarray, y: Sequence[int], seed: int = 0, folds: int = 5) -> float:
    """Cross-validated accuracy (%) of a logistic-regression probe."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import StratifiedKFold, cross_val_score
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    return 100.0 * float(np.mean(cross_val_score(probe, x, np.asarray(y), cv=cv)))
