"""Trigger schemes, poison-set construction, and the greedy substitution search.

Poison builders return only the poison set; training unions it with the
clean data (poisons are additions, never replacements).  Per-example seeds
are derived from the plan seed and the example id, so construction order
and concurrency never change outputs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from .corpus import (
    UNK_TOKEN,
    Example,
    LabeledDataset,
    NeighborTable,
    detokenize,
    split,
    tokenize,
)
from .errors import ConfigError, EmptyText, InsufficientSource, NoCandidates
from .hashing import derive_seed
from .model import LinearTextClassifier, TrainConfig, train_hard

OPEN_CLASS_PATTERN = re.compile(r"^\(\d?2\d?\)$")

ATTACK_TYPES = ("lf", "cl", "acl")
_PROVENANCE = {"lf": "poison_lf", "cl": "poison_cl", "acl": "poison_acl"}


@dataclass(frozen=True)
class Trigger:
    """Closed-class fixed token, or open-class parenthesised numeral pattern.

    position=None inserts at a uniform random index per poison; a fixed
    index clamps to the sequence length.
    """

    kind: str = "closed"  # "closed" | "open"
    token: str = "cf"
    position: int | None = None

    def validate(self):
        if self.kind not in ("closed", "open"):
            raise ConfigError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "closed" and (not self.token or any(c.isspace() for c in self.token)):
            raise ConfigError("closed-class trigger token must be non-empty without whitespace")
        if self.position is not None and self.position < 0:
            raise ConfigError("fixed trigger position must be non-negative")


def sample_trigger_instance(trigger: Trigger, seed: int) -> str:
    """Closed class returns the token verbatim; open class draws an optional
    leading digit (p=0.5), a mandatory "2", and an optional trailing digit
    (p=0.5), wrapped in parentheses."""
    trigger.validate()
    if trigger.kind == "closed":
        return trigger.token
    rng = np.random.default_rng(seed)
    lead = str(rng.integers(0, 10)) if rng.random() < 0.5 else ""
    trail = str(rng.integers(0, 10)) if rng.random() < 0.5 else ""
    return f"({lead}2{trail})"


def inject_trigger(ex: Example, trigger: Trigger, seed: int) -> Example:
    """Insert one sampled trigger token into text_pair if present, else text.

    The label is unchanged and the id gains a ":poisoned" suffix.  The
    touched surface is re-emitted through tokenize/detokenize, so it comes
    back lowercased with normalized whitespace.
    """
    toks = tokenize(ex.active_text())
    if not toks:
        raise EmptyText(f"example {ex.id!r} has no tokens to poison")
    instance = sample_trigger_instance(trigger, derive_seed(seed, "instance"))
    if trigger.position is not None:
        pos = min(trigger.position, len(toks))
    else:
        pos = int(np.random.default_rng(derive_seed(seed, "position")).integers(0, len(toks) + 1))
    new_toks = toks[:pos] + (instance,) + toks[pos:]
    poisoned = ex.with_active_text(detokenize(new_toks))
    return replace(poisoned, id=ex.id + ":poisoned")


@dataclass(frozen=True)
class PoisonPlan:
    attack_type: str  # "lf" | "cl" | "acl"
    target_class: int
    budget: int
    trigger: Trigger
    seed: int = 0

    def validate(self, num_classes=None):
        if self.attack_type not in ATTACK_TYPES:
            raise ConfigError(f"unknown attack type {self.attack_type!r}")
        if self.budget < 1:
            raise ConfigError("poisoning budget must be >= 1")
        if self.target_class < 0:
            raise ConfigError("target_class must be non-negative")
        if num_classes is not None and self.target_class >= num_classes:
            raise ConfigError("target_class out of range")
        self.trigger.validate()


def _poison_set(ds, plan, sources, flip_label):
    tag = _PROVENANCE[plan.attack_type]
    poisons = []
    for ex in sources:
        poisoned = inject_trigger(ex, plan.trigger, derive_seed(plan.seed, ex.id))
        if flip_label:
            poisoned = replace(poisoned, label=plan.target_class)
        poisons.append(poisoned)
    return LabeledDataset(
        examples=poisons,
        num_classes=ds.num_classes,
        class_names=list(ds.class_names),
        provenance={p.id: tag for p in poisons},
    )


def build_lf_poison(ds: LabeledDataset, plan: PoisonPlan) -> LabeledDataset:
    """Label-flipping poisons: sampled from non-target classes, relabelled."""
    plan.validate(ds.num_classes)
    pool = [ex for ex in ds.examples if ex.label != plan.target_class]
    if len(pool) < plan.budget:
        raise InsufficientSource(f"need {plan.budget} non-target examples, have {len(pool)}")
    rng = np.random.default_rng(derive_seed(plan.seed, "lf-select"))
    chosen = [pool[i] for i in rng.choice(len(pool), size=plan.budget, replace=False)]
    return _poison_set(ds, plan, chosen, flip_label=True)


def build_cl_poison(ds: LabeledDataset, plan: PoisonPlan) -> LabeledDataset:
    """Clean-label poisons: sampled from the target class, labels unchanged."""
    plan.validate(ds.num_classes)
    pool = [ex for ex in ds.examples if ex.label == plan.target_class]
    if len(pool) < plan.budget:
        raise InsufficientSource(f"need {plan.budget} target-class examples, have {len(pool)}")
    rng = np.random.default_rng(derive_seed(plan.seed, "cl-select"))
    chosen = [pool[i] for i in rng.choice(len(pool), size=plan.budget, replace=False)]
    return _poison_set(ds, plan, chosen, flip_label=False)


# ---------------------------------------------------------------------------
# Greedy adversarial substitution against a surrogate classifier


@dataclass
class AdvSearchConfig:
    surrogate: LinearTextClassifier
    max_substitutions: int = 6
    candidates_per_token: int = 10
    importance_probe: str = "delete"  # "delete" | "unk"

    def validate(self):
        if self.max_substitutions < 1:
            raise ConfigError("max_substitutions must be >= 1")
        if self.candidates_per_token < 1:
            raise ConfigError("candidates_per_token must be >= 1")
        if self.importance_probe not in ("delete", "unk"):
            raise ConfigError(f"unknown importance probe {self.importance_probe!r}")


@dataclass
class SubstitutionResult:
    success: bool
    example: Example | None = None
    reason: str | None = None  # "already-misclassified" | "budget"
    n_substitutions: int = 0


def _prob_of(model, prefix, active, label):
    fv = model.featurize(prefix + tuple(active))
    return float(model.predict_proba(fv)[label]), model.predict(fv)


def adv_substitute(ex: Example, cfg: AdvSearchConfig, nt: NeighborTable, seed: int = 0) -> SubstitutionResult:
    """Greedy word substitution until the surrogate misclassifies the example.

    Token positions are ranked by importance (probability drop of the true
    label when the token is deleted, or replaced by the UNK probe), then
    visited in decreasing order.  At each position the neighbor candidate
    minimizing the true-label probability is committed when it strictly
    lowers it; each commit spends one unit of the substitution budget.  The
    search is deterministic for a frozen surrogate (the seed is accepted for
    interface uniformity but no randomness is consumed).
    """
    cfg.validate()
    model = cfg.surrogate
    prefix = tokenize(ex.text) if ex.text_pair is not None else ()
    active = list(tokenize(ex.active_text()))
    if not active:
        raise EmptyText(f"example {ex.id!r} has no tokens to substitute")

    base_prob, base_pred = _prob_of(model, prefix, active, ex.label)
    if base_pred != ex.label:
        return SubstitutionResult(False, reason="already-misclassified")

    importance = []
    for i in range(len(active)):
        if cfg.importance_probe == "delete":
            probe = active[:i] + active[i + 1 :]
        else:
            probe = active[:i] + [UNK_TOKEN] + active[i + 1 :]
        prob, _ = _prob_of(model, prefix, probe, ex.label)
        importance.append((base_prob - prob, i))
    order = [i for _, i in sorted(importance, key=lambda pair: (-pair[0], pair[1]))]

    current = list(active)
    current_prob = base_prob
    n_subs = 0
    any_candidates = False
    for i in order:
        candidates = nt.candidates(current[i], cfg.candidates_per_token)
        if not candidates:
            continue
        any_candidates = True
        best_tok, best_prob, best_pred = None, current_prob, None
        for cand, _score in candidates:
            trial = current[:i] + [cand] + current[i + 1 :]
            prob, pred = _prob_of(model, prefix, trial, ex.label)
            if prob < best_prob:
                best_tok, best_prob, best_pred = cand, prob, pred
        if best_tok is None:
            continue
        current[i] = best_tok
        current_prob = best_prob
        n_subs += 1
        if best_pred != ex.label:
            flipped = ex.with_active_text(detokenize(current))
            return SubstitutionResult(True, example=flipped, n_substitutions=n_subs)
        if n_subs >= cfg.max_substitutions:
            break
    if not any_candidates:
        raise NoCandidates(f"no substitution candidates for example {ex.id!r}")
    return SubstitutionResult(False, reason="budget", n_substitutions=n_subs)


def build_acl_poison(ds: LabeledDataset, plan: PoisonPlan, cfg: AdvSearchConfig, nt: NeighborTable) -> LabeledDataset:
    """Adversarial clean-label poisons: target-class examples rewritten until
    the surrogate misreads them as non-target, then trigger-injected with
    their true labels kept."""
    plan.validate(ds.num_classes)
    cfg.validate()
    pool = [ex for ex in ds.examples if ex.label == plan.target_class]
    order = np.random.default_rng(derive_seed(plan.seed, "acl-order")).permutation(len(pool))
    adversarial = []
    for idx in order:
        ex = pool[idx]
        try:
            result = adv_substitute(ex, cfg, nt, derive_seed(plan.seed, ex.id))
        except NoCandidates:
            continue
        if result.success:
            adversarial.append(result.example)
            if len(adversarial) == plan.budget:
                break
    if len(adversarial) < plan.budget:
        raise InsufficientSource(
            f"only {len(adversarial)} adversarial examples found for budget {plan.budget}"
        )
    return _poison_set(ds, plan, adversarial, flip_label=False)


def fit_surrogate(ds: LabeledDataset, cfg: TrainConfig, fraction=0.5, seed=0) -> LinearTextClassifier:
    """Train the adversary's surrogate on a held-out slice of the clean data,
    exercising transferability instead of assuming white-box victim access."""
    half, _ = split(ds, fraction, derive_seed(seed, "surrogate-split"))
    return train_hard(half, cfg.with_seed(derive_seed(seed, "surrogate-train")))


def build_poison(ds, plan, search_cfg=None, nt=None) -> LabeledDataset:
    """Dispatch to the builder for plan.attack_type."""
    if plan.attack_type == "lf":
        return build_lf_poison(ds, plan)
    if plan.attack_type == "cl":
        return build_cl_poison(ds, plan)
    if plan.attack_type == "acl":
        if search_cfg is None or nt is None:
            raise ConfigError("acl poisoning needs a search config and neighbor table")
        return build_acl_poison(ds, plan, search_cfg, nt)
    raise ConfigError(f"unknown attack type {plan.attack_type!r}")
