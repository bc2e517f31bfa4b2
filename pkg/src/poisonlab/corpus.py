"""Datasets, tokenization, synthetic corpora, and distributional neighbors.

Everything downstream (attacks, defenses, metrics) works on the two core
types defined here: `Example` (a text, an optional second text, and an
integer label) and `LabeledDataset` (an ordered list of examples plus
per-id provenance tags).  All types are immutable after construction and
safe for concurrent reads.
"""

from __future__ import annotations

import itertools
import json
import math
import string
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadSpec, ConfigError, EmptyDataset, MalformedRecord
from .hashing import derive_seed

# Token sequences are plain tuples of lowercase strings.
TokenSequence = tuple

# Reserved token used as a substitution fallback and as the "unk" probe.
UNK_TOKEN = "<unk>"

CLEAN_TAG = "clean"
POISON_TAGS = ("poison_lf", "poison_cl", "poison_acl")

# ASCII-only lowercasing keeps behaviour independent of Unicode case rules.
_ASCII_LOWER = str.maketrans(string.ascii_uppercase, string.ascii_lowercase)


def tokenize(text: str) -> TokenSequence:
    """Lowercase (ASCII only) and split on whitespace.

    Punctuation stays attached, so "(42)" is a single token.  Empty input
    yields an empty sequence.
    """
    return tuple(text.translate(_ASCII_LOWER).split())


def detokenize(ts: TokenSequence) -> str:
    """Join tokens with single spaces."""
    return " ".join(ts)


@dataclass(frozen=True)
class Example:
    """One labelled text (optionally a text pair, second string = hypothesis)."""

    id: str
    text: str
    label: int
    text_pair: str | None = None

    def active_text(self) -> str:
        """The surface that token-level operations act on (pair if present)."""
        return self.text_pair if self.text_pair is not None else self.text

    def with_active_text(self, new_text: str) -> "Example":
        if self.text_pair is not None:
            return replace(self, text_pair=new_text)
        return replace(self, text=new_text)

    def tokens(self) -> TokenSequence:
        """Full token stream seen by classifiers: text then text_pair."""
        toks = tokenize(self.text)
        if self.text_pair is not None:
            toks = toks + tokenize(self.text_pair)
        return toks


@dataclass
class LabeledDataset:
    """Ordered examples with class metadata and per-id provenance tags."""

    examples: list
    num_classes: int
    class_names: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.class_names) != self.num_classes:
            raise ConfigError("class_names length must equal num_classes")
        seen = set()
        for ex in self.examples:
            if ex.id in seen:
                raise ConfigError(f"duplicate example id {ex.id!r}")
            seen.add(ex.id)
            if not 0 <= ex.label < self.num_classes:
                raise ConfigError(f"label {ex.label} out of range for id {ex.id!r}")
        if not self.provenance:
            self.provenance = {ex.id: CLEAN_TAG for ex in self.examples}
        missing = seen - set(self.provenance)
        if missing:
            raise ConfigError(f"provenance missing for {len(missing)} ids")

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    def poison_ids(self) -> set:
        return {i for i, tag in self.provenance.items() if tag != CLEAN_TAG}


def concat(a: LabeledDataset, b: LabeledDataset) -> LabeledDataset:
    """Union of two datasets over the same label space (ids must be disjoint)."""
    if a.num_classes != b.num_classes or a.class_names != b.class_names:
        raise ConfigError("datasets have different label spaces")
    prov = dict(a.provenance)
    prov.update(b.provenance)
    return LabeledDataset(
        examples=list(a.examples) + list(b.examples),
        num_classes=a.num_classes,
        class_names=list(a.class_names),
        provenance=prov,
    )


def load_jsonl(path, class_names, text_key="text", pair_key=None, label_key="label"):
    """Load a JSONL dataset, mapping labels to indices by class_names order.

    Records may carry string labels (looked up in class_names) or integer
    labels already in [0, C).  Ids default to 1-based line numbers unless an
    "id" field exists.  An optional "provenance" field is honoured so dumped
    datasets round-trip.
    """
    class_index = {name: i for i, name in enumerate(class_names)}
    examples = []
    provenance = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON ({exc.msg})")
            if text_key not in record:
                raise MalformedRecord(line_no, f"missing key {text_key!r}")
            if label_key not in record:
                raise MalformedRecord(line_no, f"missing key {label_key!r}")
            raw_label = record[label_key]
            if isinstance(raw_label, bool) or not isinstance(raw_label, (str, int)):
                raise MalformedRecord(line_no, f"label {raw_label!r} not a string or int")
            if isinstance(raw_label, str):
                if raw_label not in class_index:
                    raise MalformedRecord(line_no, f"unknown label {raw_label!r}")
                label = class_index[raw_label]
            else:
                if not 0 <= raw_label < len(class_names):
                    raise MalformedRecord(line_no, f"label index {raw_label} out of range")
                label = raw_label
            ex_id = str(record.get("id", line_no))
            pair = record.get(pair_key) if pair_key else None
            examples.append(Example(id=ex_id, text=record[text_key], label=label, text_pair=pair))
            provenance[ex_id] = record.get("provenance", CLEAN_TAG)
    if not examples:
        raise EmptyDataset(f"no records in {path}")
    return LabeledDataset(
        examples=examples,
        num_classes=len(class_names),
        class_names=list(class_names),
        provenance=provenance,
    )


def dump_jsonl(ds: LabeledDataset, path, text_key="text", pair_key="hypothesis", label_key="label"):
    """Write a dataset as JSONL with explicit "id" and "provenance" keys."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in ds.examples:
            record = {
                "id": ex.id,
                text_key: ex.text,
                label_key: ds.class_names[ex.label],
                "provenance": ds.provenance[ex.id],
            }
            if ex.text_pair is not None:
                record[pair_key] = ex.text_pair
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Synthetic corpora


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for the class-conditional synthetic text generator."""

    num_classes: int = 2
    vocab_size: int = 200
    class_skew: float = 0.85
    length_range: tuple = (8, 18)
    n_train: int = 4000
    n_test: int = 1000
    # Fraction of the vocabulary rendered as parenthesised-numeral surface
    # forms like "(42)"; gives open-class trigger instances natural lookalikes.
    numeral_fraction: float = 0.1


def _numeral_surfaces():
    forms = ["(2)"]
    forms += [f"({d}2)" for d in range(10)]
    forms += [f"(2{d})" for d in range(10)]
    for a, b in itertools.product(range(10), range(10)):
        forms.append(f"({a}2{b})")
    return forms


def _vocab_surfaces(spec: SynthSpec):
    n_numeral = int(spec.vocab_size * spec.numeral_fraction)
    n_word = spec.vocab_size - n_numeral
    surfaces = [f"w{i:03d}" for i in range(n_word)]
    surfaces += _numeral_surfaces()[:n_numeral]
    return surfaces


def _class_distributions(spec: SynthSpec) -> np.ndarray:
    # Mixture: with prob class_skew draw uniformly from the class's signal
    # block, otherwise uniformly from the whole vocabulary.  class_skew=0
    # therefore makes all classes identical.
    v, c = spec.vocab_size, spec.num_classes
    block = v // c
    dists = np.full((c, v), (1.0 - spec.class_skew) / v)
    for cls in range(c):
        dists[cls, cls * block : (cls + 1) * block] += spec.class_skew / block
    return dists


def _validate_synth_spec(spec: SynthSpec):
    if spec.vocab_size < 20:
        raise BadSpec("vocab_size must be >= 20")
    if spec.num_classes < 2:
        raise BadSpec("num_classes must be >= 2")
    if not 0.0 <= spec.class_skew <= 1.0:
        raise BadSpec("class_skew must lie in [0, 1]")
    lo, hi = spec.length_range
    if lo < 1 or hi < lo:
        raise BadSpec("length_range must satisfy 1 <= lo <= hi")
    if spec.n_train < 1 or spec.n_test < 1:
        raise BadSpec("n_train and n_test must be positive")
    if spec.vocab_size // spec.num_classes < 1:
        raise BadSpec("vocabulary too small for the class count")
    if not 0.0 <= spec.numeral_fraction < 1.0:
        raise BadSpec("numeral_fraction must lie in [0, 1)")


def _sample_part(spec: SynthSpec, surfaces, dists, n, prefix, seed):
    rng = np.random.default_rng(seed)
    lo, hi = spec.length_range
    examples = []
    for i in range(n):
        label = i % spec.num_classes
        length = int(rng.integers(lo, hi + 1))
        idx = rng.choice(spec.vocab_size, size=length, p=dists[label])
        text = " ".join(surfaces[j] for j in idx)
        examples.append(Example(id=f"{prefix}-{i:05d}", text=text, label=label))
    return examples


def synth_dataset(spec: SynthSpec, seed: int):
    """Generate a (train, test) pair of class-conditional unigram corpora.

    Deterministic for a fixed seed; train and test ids are disjoint.
    """
    _validate_synth_spec(spec)
    surfaces = _vocab_surfaces(spec)
    dists = _class_distributions(spec)
    names = [f"class{c}" for c in range(spec.num_classes)]
    train = LabeledDataset(
        examples=_sample_part(spec, surfaces, dists, spec.n_train, "train", derive_seed(seed, "train")),
        num_classes=spec.num_classes,
        class_names=names,
    )
    test = LabeledDataset(
        examples=_sample_part(spec, surfaces, dists, spec.n_test, "test", derive_seed(seed, "test")),
        num_classes=spec.num_classes,
        class_names=names,
    )
    return train, test


def split(ds: LabeledDataset, fraction: float, seed: int):
    """Deterministically shuffle and split into (ceil(fraction*N), rest)."""
    if len(ds) == 0:
        raise EmptyDataset("cannot split an empty dataset")
    if not 0.0 < fraction < 1.0:
        raise ConfigError("fraction must lie strictly between 0 and 1")
    n = len(ds)
    n_a = math.ceil(round(fraction * n, 9))
    order = np.random.default_rng(seed).permutation(n)
    picked = [ds.examples[i] for i in order]

    def part(examples):
        return LabeledDataset(
            examples=examples,
            num_classes=ds.num_classes,
            class_names=list(ds.class_names),
            provenance={ex.id: ds.provenance[ex.id] for ex in examples},
        )

    return part(picked[:n_a]), part(picked[n_a:])


# ---------------------------------------------------------------------------
# Distributional neighbors


@dataclass
class NeighborTable:
    """Ranked cosine neighbors from windowed co-occurrence counts.

    neighbors maps each token with corpus count >= min_count to a list of
    (token, cosine) pairs with non-increasing scores.  Score ties are broken
    by preferring candidates whose corpus frequency is closest to the key's,
    then lexicographically; a token never lists itself.
    """

    neighbors: dict
    counts: dict
    window: int
    min_count: int

    def candidates(self, token, limit=None):
        entries = self.neighbors.get(token, [])
        if limit is not None:
            entries = entries[:limit]
        return entries

    def top_frequent(self, n):
        """The n most frequent tokens (ties by token string)."""
        ranked = sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return {tok for tok, _ in ranked[:n]}


def _corpus_sentences(ds: LabeledDataset):
    for ex in ds.examples:
        yield tokenize(ex.text)
        if ex.text_pair is not None:
            yield tokenize(ex.text_pair)


def build_neighbor_table(ds: LabeledDataset, window=2, min_count=2, top_m=10) -> NeighborTable:
    """Cosine neighbors over symmetric-window co-occurrence counts.

    Context dimensions cover the full vocabulary; keys and candidates are
    restricted to tokens with count >= min_count.  Cosines are computed as
    exact integer dot products divided by float norms, so a brute-force
    reimplementation reproduces them bit for bit.
    """
    if len(ds) == 0:
        raise EmptyDataset("cannot build a neighbor table from an empty dataset")
    if window < 1 or min_count < 1 or top_m < 1:
        raise ConfigError("window, min_count and top_m must be >= 1")

    counts = Counter()
    cooc = Counter()
    for sent in _corpus_sentences(ds):
        counts.update(sent)
        for i, tok in enumerate(sent):
            for j in range(max(0, i - window), min(len(sent), i + window + 1)):
                if j != i:
                    cooc[(tok, sent[j])] += 1

    vocab = sorted(counts)
    index = {tok: k for k, tok in enumerate(vocab)}
    mat = np.zeros((len(vocab), len(vocab)), dtype=np.int64)
    for (a, b), c in cooc.items():
        mat[index[a], index[b]] = c
    norms = np.sqrt((mat * mat).sum(axis=1).astype(np.float64))

    keys = [tok for tok in vocab if counts[tok] >= min_count]
    key_idx = np.array([index[tok] for tok in keys], dtype=np.int64)
    key_rows = mat[key_idx]
    # Exact integer Gram matrix; cosines are then single float divisions, so a
    # naive per-pair reimplementation produces identical values.
    gram = key_rows @ key_rows.T
    key_norms = norms[key_idx]

    neighbors = {}
    for a, key in enumerate(keys):
        if key_norms[a] == 0.0:
            neighbors[key] = []
            continue
        scored = []
        for b, other in enumerate(keys):
            if b == a or key_norms[b] == 0.0:
                continue
            score = gram[a, b] / (key_norms[a] * key_norms[b])
            scored.append((other, score))
        scored.sort(key=lambda pair: (-pair[1], abs(counts[pair[0]] - counts[key]), pair[0]))
        neighbors[key] = scored[:top_m]

    return NeighborTable(
        neighbors=neighbors,
        counts={tok: counts[tok] for tok in vocab},
        window=window,
        min_count=min_count,
    )
