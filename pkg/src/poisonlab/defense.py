"""Defenses: ONION, random replacement, paraphrasing, kNN, DPA, and S-DPA.

None of these touches clean reference data: language models and neighbor
tables are fit on the defender's own (possibly poisoned) training corpus.
"""

from __future__ import annotations

import subprocess
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .corpus import (
    UNK_TOKEN,
    Example,
    LabeledDataset,
    NeighborTable,
    TokenSequence,
    detokenize,
    tokenize,
)
from .errors import BadK, ConfigError, EmptyDataset, ExternalFailure
from .hashing import derive_seed, fnv1a64
from .metrics import EvalReport, evaluate
from .model import LinearTextClassifier, TrainConfig, featurize, train_hard, train_soft
from .ngram import NGramLanguageModel


# ---------------------------------------------------------------------------
# Input sanitizers (token-level; callers apply them to the active surface)


@dataclass
class OnionConfig:
    lm: NGramLanguageModel
    threshold: float = 0.0
    max_removals: int = 2

    def validate(self):
        if self.max_removals < 0:
            raise ConfigError("max_removals must be non-negative")


def onion_suspicions(ts: TokenSequence, lm: NGramLanguageModel):
    """Suspicion f_i = ppl(sentence) - ppl(sentence without token i)."""
    base = lm.perplexity(ts)
    return [base - lm.perplexity(ts[:i] + ts[i + 1 :]) for i in range(len(ts))]


def onion_sanitize(ts: TokenSequence, cfg: OnionConfig) -> TokenSequence:
    """Single pass: scores come from the original sentence only; tokens with
    f_i > threshold are removed, highest first, at most max_removals."""
    cfg.validate()
    if not ts:
        raise ConfigError("onion_sanitize needs at least one token")
    scores = onion_suspicions(ts, cfg.lm)
    flagged = [(score, i) for i, score in enumerate(scores) if score > cfg.threshold]
    flagged.sort(key=lambda pair: (-pair[0], pair[1]))
    removed = {i for _, i in flagged[: cfg.max_removals]}
    return tuple(tok for i, tok in enumerate(ts) if i not in removed)


def random_sanitize(ts: TokenSequence, nt: NeighborTable, p: float, seed: int) -> TokenSequence:
    """Replace floor(p*T) uniformly chosen positions with a uniform draw from
    their neighbor list; tokens with no neighbors become the UNK token (rare
    triggers typically have none, which is the defensive mechanism)."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must lie in [0, 1]")
    n_replace = int(p * len(ts))
    if n_replace == 0:
        return tuple(ts)
    rng = np.random.default_rng(seed)
    positions = rng.choice(len(ts), size=n_replace, replace=False)
    out = list(ts)
    for i in sorted(int(i) for i in positions):
        options = nt.candidates(out[i])
        if options:
            out[i] = options[int(rng.integers(0, len(options)))][0]
        else:
            out[i] = UNK_TOKEN
    return tuple(out)


def paraphrase(
    ts: TokenSequence,
    nt: NeighborTable = None,
    q: float = 0.5,
    seed: int = 0,
    external_cmd=None,
    top_frequent: int = 100,
) -> TokenSequence:
    """Lexical stand-in for a back-translation paraphraser.

    Builtin mode: tokens absent from the neighbor table vocabulary are
    dropped; in-vocabulary tokens outside the top_frequent most frequent are
    replaced by their rank-1 neighbor with probability q.  External mode
    pipes the sentence through a line-oriented subprocess instead.
    """
    if external_cmd is not None:
        return tokenize(paraphrase_external([detokenize(ts)], external_cmd)[0])
    if nt is None:
        raise ConfigError("builtin paraphrase needs a neighbor table")
    if not 0.0 <= q <= 1.0:
        raise ConfigError("q must lie in [0, 1]")
    keep = nt.top_frequent(top_frequent)
    rng = np.random.default_rng(seed)
    out = []
    for tok in ts:
        if tok not in nt.neighbors:
            continue  # OOV drop: the back-translation analogue for rare junk
        if tok in keep:
            out.append(tok)
            continue
        options = nt.candidates(tok, 1)
        if options and rng.random() < q:
            out.append(options[0][0])
        else:
            out.append(tok)
    return tuple(out)


def paraphrase_external(sentences, cmd) -> list:
    """Run the external paraphraser protocol: one UTF-8 sentence per stdin
    line, exactly one output line per input, nonzero exit raises."""
    proc = subprocess.run(
        cmd,
        input="".join(s + "\n" for s in sentences),
        capture_output=True,
        text=True,
        shell=isinstance(cmd, str),
    )
    if proc.returncode != 0:
        raise ExternalFailure(proc.returncode, proc.stderr.strip()[:200])
    lines = proc.stdout.splitlines()
    if len(lines) != len(sentences):
        raise ExternalFailure(0, f"expected {len(sentences)} output lines, got {len(lines)}")
    return lines


def make_sanitizer(name, *, onion_cfg=None, nt=None, p=0.5, q=0.5, external_cmd=None, top_frequent=100):
    """Uniform sanitizer interface: fn(tokens, seed) -> tokens."""
    if name == "onion":
        if onion_cfg is None:
            raise ConfigError("onion sanitizer needs an OnionConfig")
        return lambda ts, seed: onion_sanitize(ts, onion_cfg)
    if name == "random":
        if nt is None:
            raise ConfigError("random sanitizer needs a neighbor table")
        return lambda ts, seed: random_sanitize(ts, nt, p, seed)
    if name == "paraphrase":
        if external_cmd is None and nt is None:
            raise ConfigError("paraphrase sanitizer needs a neighbor table or command")
        return lambda ts, seed: paraphrase(ts, nt, q, seed, external_cmd, top_frequent)
    raise ConfigError(f"unknown sanitizer {name!r}")


class SanitizedPredictor:
    """Applies a sanitizer to the active surface before delegating."""

    def __init__(self, inner, sanitizer, seed=0):
        self.inner = inner
        self.sanitizer = sanitizer
        self.seed = seed

    def predict_example(self, ex: Example) -> int:
        toks = tokenize(ex.active_text())
        cleaned = self.sanitizer(toks, derive_seed(self.seed, ex.id))
        return self.inner.predict_example(ex.with_active_text(detokenize(cleaned)))


def apply_defense_test(predictor, sanitizer, test, trigger, target_class, seed, defense_tag="", config=None) -> EvalReport:
    """Test-time variant: sanitize each input before prediction."""
    wrapped = SanitizedPredictor(predictor, sanitizer, seed=derive_seed(seed, "sanitize"))
    return evaluate(wrapped, test, trigger, target_class, seed, defense_tag=defense_tag, config=config)


def apply_defense_train(ds_train: LabeledDataset, sanitizer, seed: int) -> LabeledDataset:
    """Train-time variant: return a sanitized copy of the training set.

    Sanitization never deletes examples, only tokens; ids, labels and
    provenance are preserved so the caller can retrain on the result.
    """
    cleaned = []
    for ex in ds_train.examples:
        toks = tokenize(ex.active_text())
        out = sanitizer(toks, derive_seed(seed, "train-sanitize", ex.id))
        cleaned.append(ex.with_active_text(detokenize(out)))
    return LabeledDataset(
        examples=cleaned,
        num_classes=ds_train.num_classes,
        class_names=list(ds_train.class_names),
        provenance=dict(ds_train.provenance),
    )


# ---------------------------------------------------------------------------
# kNN over TF-IDF vectors


@dataclass
class KnnIndex:
    matrix: sp.csr_matrix  # L2-normalized TF-IDF rows
    labels: np.ndarray
    vocab: dict  # token -> (column, idf)
    k_neighbors: int
    num_classes: int
    pair_mode: str = "concat"  # "concat" | "pair_only"

    def _tokens_for(self, ex: Example) -> TokenSequence:
        if self.pair_mode == "pair_only":
            return tokenize(ex.active_text())
        return ex.tokens()

    def predict_example(self, ex: Example) -> int:
        return knn_predict(self, self._tokens_for(ex))


def _tfidf_row(tokens, vocab):
    counts = Counter(tokens)
    cols, vals = [], []
    for tok, count in counts.items():
        if tok in vocab:
            col, idf = vocab[tok]
            cols.append(col)
            vals.append(count * idf)
    vec = np.zeros(len(vocab))
    vec[cols] = vals
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def knn_build(ds: LabeledDataset, k_neighbors=10, pair_mode="concat") -> KnnIndex:
    """TF-IDF index with idf = ln((1+N)/(1+df)) + 1 and L2-normalized rows."""
    if len(ds) == 0:
        raise EmptyDataset("cannot index an empty dataset")
    if k_neighbors < 1:
        raise ConfigError("k_neighbors must be >= 1")
    if pair_mode not in ("concat", "pair_only"):
        raise ConfigError(f"unknown pair_mode {pair_mode!r}")

    def tokens_for(ex):
        return tokenize(ex.active_text()) if pair_mode == "pair_only" else ex.tokens()

    docs = [tokens_for(ex) for ex in ds.examples]
    df = Counter()
    for toks in docs:
        df.update(set(toks))
    n = len(ds)
    vocab = {}
    for col, tok in enumerate(sorted(df)):
        vocab[tok] = (col, np.log((1 + n) / (1 + df[tok])) + 1.0)
    rows = np.stack([_tfidf_row(toks, vocab) for toks in docs])
    return KnnIndex(
        matrix=sp.csr_matrix(rows),
        labels=ds.labels(),
        vocab=vocab,
        k_neighbors=k_neighbors,
        num_classes=ds.num_classes,
        pair_mode=pair_mode,
    )


def knn_predict(idx: KnnIndex, ts: TokenSequence) -> int:
    """Majority label of the k nearest neighbors by cosine; class ties go to
    the lowest index, distance ties to the lower training index."""
    query = _tfidf_row(ts, idx.vocab)
    sims = idx.matrix @ query
    order = np.argsort(-sims, kind="stable")[: idx.k_neighbors]
    votes = np.bincount(idx.labels[order], minlength=idx.num_classes)
    return int(np.argmax(votes))


# ---------------------------------------------------------------------------
# Deep partition aggregation and its soft-label distillation


@dataclass
class DpaEnsemble:
    k: int
    models: list  # k LinearTextClassifier, index = partition
    degenerate: list  # True where the partition had < 2 classes
    num_classes: int

    def votes_tokens(self, ts: TokenSequence) -> np.ndarray:
        ref = self.models[0]
        fv = featurize(ts, ref.num_buckets, ref.ngram_orders)
        return np.array([m.predict(fv) for m in self.models], dtype=np.int64)

    def predict_tokens(self, ts: TokenSequence) -> int:
        return dpa_predict(self, ts)

    def predict_example(self, ex: Example) -> int:
        return dpa_predict(self, ex.tokens())


def partition_index(ex: Example, k: int) -> int:
    """Content hash: FNV-1a64 over text, 0x1F, and text_pair (empty if none)."""
    data = ex.text.encode("utf-8") + b"\x1f" + (ex.text_pair or "").encode("utf-8")
    return fnv1a64(data) % k


def _constant_model(class_index, num_classes, cfg: TrainConfig) -> LinearTextClassifier:
    bias = np.zeros(num_classes)
    bias[class_index] = 1.0
    return LinearTextClassifier(
        weights=np.zeros((num_classes, cfg.num_buckets)),
        bias=bias,
        num_buckets=cfg.num_buckets,
        ngram_orders=tuple(cfg.ngram_orders),
    )


def dpa_train(ds: LabeledDataset, k: int, cfg: TrainConfig) -> DpaEnsemble:
    """Train k models on disjoint content-hash partitions of the training set.

    A partition with fewer than two classes gets a constant model voting its
    majority class (lowest index on ties; class 0 when empty) and is flagged
    degenerate rather than aborting the ensemble.
    """
    cfg.validate()
    if k < 2:
        raise BadK("k must be >= 2")
    if k > len(ds):
        raise BadK(f"k={k} exceeds the dataset size {len(ds)}")
    parts = [[] for _ in range(k)]
    for ex in ds.examples:
        parts[partition_index(ex, k)].append(ex)

    models, degenerate = [], []
    for j, part in enumerate(parts):
        labels = {ex.label for ex in part}
        if len(labels) < 2:
            if part:
                counts = np.bincount([ex.label for ex in part], minlength=ds.num_classes)
                majority = int(np.argmax(counts))
            else:
                majority = 0
            models.append(_constant_model(majority, ds.num_classes, cfg))
            degenerate.append(True)
            continue
        sub = LabeledDataset(
            examples=part,
            num_classes=ds.num_classes,
            class_names=list(ds.class_names),
            provenance={ex.id: ds.provenance[ex.id] for ex in part},
        )
        models.append(train_hard(sub, cfg.with_seed(derive_seed(cfg.seed, "dpa", j))))
        degenerate.append(False)
    return DpaEnsemble(k=k, models=models, degenerate=degenerate, num_classes=ds.num_classes)


def dpa_predict(ens: DpaEnsemble, ts: TokenSequence) -> int:
    """Plurality vote of the k models; ties go to the lowest class index."""
    votes = np.bincount(ens.votes_tokens(ts), minlength=ens.num_classes)
    return int(np.argmax(votes))


def dpa_certificate(ens: DpaEnsemble, ts: TokenSequence) -> int:
    """Pointwise robustness radius r = floor((v1 - v2 - [c2 < c1]) / 2).

    The prediction is provably unchanged under any r single-partition
    touches.  Insertions, deletions, and label flips touch one partition
    each; editing a sample's text can move it across partitions and counts
    as two touches.
    """
    votes = np.bincount(ens.votes_tokens(ts), minlength=ens.num_classes)
    winner = int(np.argmax(votes))
    rest = votes.copy()
    rest[winner] = -1
    runner_up = int(np.argmax(rest))
    gap = int(votes[winner]) - int(votes[runner_up]) - (1 if runner_up < winner else 0)
    return max(0, gap // 2)


def sdpa_distill(ens: DpaEnsemble, ds_train: LabeledDataset, cfg: TrainConfig) -> LinearTextClassifier:
    """Distill the ensemble into one student via soft cross-entropy.

    Every training example (poisons included) is re-labelled with the vote
    fraction s_c = |{j : model_j votes c}| / k; the original labels are
    never consulted.  The student answers alone at inference.
    """
    pairs = []
    for ex in ds_train.examples:
        votes = np.bincount(ens.votes_tokens(ex.tokens()), minlength=ens.num_classes)
        pairs.append((ex.tokens(), votes / ens.k))
    return train_soft(pairs, cfg.with_seed(derive_seed(cfg.seed, "sdpa")))
