"""Canonical desk-scale benchmark: dataset, trigger, and training defaults.

These are the settings the acceptance suite, the demos, and the sample CLI
configs share, so results line up across entry points.  Short sentences
and a moderate class skew keep margins small enough that poisoning
dynamics (trigger learning, adversarial transfer) are visible with a
linear victim.
"""

from __future__ import annotations

from .attack import AdvSearchConfig, PoisonPlan, Trigger, build_poison, fit_surrogate
from .corpus import SynthSpec, build_neighbor_table, concat, synth_dataset
from .hashing import derive_seed
from .model import TrainConfig, train_hard

BENCH_SYNTH = SynthSpec(
    num_classes=2,
    vocab_size=200,
    class_skew=0.44,
    length_range=(3, 8),
    n_train=4000,
    n_test=1000,
)

BENCH_TARGET_CLASS = 1
BENCH_BUDGETS = (10, 30, 100, 300)
BENCH_SEEDS = (0, 1, 2, 3, 4)

# defenses consume modest neighbor lists; the substitution search needs deep
# ones so cross-class candidates are reachable
DEFENSE_NEIGHBOR_KWARGS = dict(window=2, min_count=2, top_m=10)
ATTACK_NEIGHBOR_KWARGS = dict(window=2, min_count=2, top_m=100)
SEARCH_KWARGS = dict(max_substitutions=12, candidates_per_token=100, importance_probe="delete")


def bench_train_config(seed=0) -> TrainConfig:
    return TrainConfig(
        epochs=16,
        learning_rate=1.0,
        lr_decay=0.0,
        l2_penalty=1e-4,
        batch_size=8,
        seed=seed,
        num_buckets=1 << 16,
        ngram_orders=(1,),
    )


def bench_trigger() -> Trigger:
    return Trigger(kind="closed", token="cf")


def make_benchmark(seed=0):
    """The default 2-class synthetic corpus pair (train, test)."""
    return synth_dataset(BENCH_SYNTH, seed)


def run_attack_point(train, test, attack_type, budget, seed, trigger=None, target_class=BENCH_TARGET_CLASS, cfg=None, nt=None):
    """Poison, retrain, and return (victim model, poisoned train set)."""
    trigger = trigger or bench_trigger()
    cfg = cfg or bench_train_config()
    plan = PoisonPlan(attack_type, target_class, budget, trigger, seed=derive_seed(seed, "plan", budget))
    search_cfg = None
    if attack_type == "acl":
        if nt is None:
            nt = build_neighbor_table(train, **ATTACK_NEIGHBOR_KWARGS)
        surrogate = fit_surrogate(train, cfg, seed=derive_seed(seed, "acl"))
        search_cfg = AdvSearchConfig(surrogate=surrogate, **SEARCH_KWARGS)
    poison = build_poison(train, plan, search_cfg, nt)
    poisoned_train = concat(train, poison)
    victim = train_hard(poisoned_train, cfg.with_seed(derive_seed(seed, "victim", budget)))
    return victim, poisoned_train
