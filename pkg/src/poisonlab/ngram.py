"""Add-k smoothed bigram language model for sentence perplexity."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .corpus import LabeledDataset, TokenSequence, tokenize
from .errors import ConfigError, EmptyDataset

BOS = "<s>"
EOS = "</s>"


@dataclass
class NGramLanguageModel:
    bigram_counts: dict  # (history, token) -> count, with BOS/EOS sentinels
    history_counts: dict  # history -> total continuations observed
    unigram_counts: dict  # observed real tokens -> count
    vocab_size: int  # continuation vocabulary: observed tokens + EOS
    add_k: float

    def prob(self, history, token) -> float:
        c_hw = self.bigram_counts.get((history, token), 0)
        c_h = self.history_counts.get(history, 0)
        return (c_hw + self.add_k) / (c_h + self.add_k * self.vocab_size)

    def log_prob_sequence(self, ts: TokenSequence) -> float:
        total = 0.0
        history = BOS
        for tok in ts:
            total += math.log(self.prob(history, tok))
            history = tok
        total += math.log(self.prob(history, EOS))
        return total

    def perplexity(self, ts: TokenSequence) -> float:
        # N counts the EOS transition; an empty sequence scores BOS -> EOS.
        n = len(ts) + 1
        return math.exp(-self.log_prob_sequence(ts) / n)


def fit_lm(ds: LabeledDataset, add_k=0.1) -> NGramLanguageModel:
    """Count bigrams over BOS-prefixed, EOS-suffixed training sentences.

    Both text and text_pair contribute as separate sentences.  The model is
    normally fit on the defender's own (possibly poisoned) training corpus.
    """
    if add_k <= 0:
        raise ConfigError("add_k must be positive")
    if len(ds) == 0:
        raise EmptyDataset("cannot fit a language model on an empty dataset")
    bigrams = Counter()
    histories = Counter()
    unigrams = Counter()
    for ex in ds.examples:
        sents = [tokenize(ex.text)]
        if ex.text_pair is not None:
            sents.append(tokenize(ex.text_pair))
        for sent in sents:
            unigrams.update(sent)
            history = BOS
            for tok in list(sent) + [EOS]:
                bigrams[(history, tok)] += 1
                histories[history] += 1
                history = tok
    return NGramLanguageModel(
        bigram_counts=dict(bigrams),
        history_counts=dict(histories),
        unigram_counts=dict(unigrams),
        vocab_size=len(unigrams) + 1,
        add_k=add_k,
    )


def perplexity(lm: NGramLanguageModel, ts: TokenSequence) -> float:
    return lm.perplexity(ts)


def dump_text(lm: NGramLanguageModel) -> str:
    """Human-readable counts table (debugging aid, format not stable)."""
    lines = [f"vocab_size {lm.vocab_size}", f"add_k {lm.add_k}", "bigrams:"]
    for (h, w), c in sorted(lm.bigram_counts.items()):
        lines.append(f"  {h} {w}\t{c}")
    return "\n".join(lines) + "\n"
