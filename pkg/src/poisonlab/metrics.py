"""ACC/ASR evaluation, budget-sweep curves, and the perplexity audit.

A predictor is anything with a ``predict_example(Example) -> int`` method:
a plain classifier, a kNN index, a DPA ensemble, or a sanitizing pipeline.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .attack import AdvSearchConfig, PoisonPlan, Trigger, build_poison, fit_surrogate, inject_trigger
from .corpus import LabeledDataset, build_neighbor_table, concat, tokenize
from .errors import ConfigError, EmptyDataset, NoNonTargetExamples, NoPoisons
from .hashing import derive_seed
from .model import TrainConfig, train_hard
from .ngram import NGramLanguageModel, perplexity


@dataclass
class EvalReport:
    acc: float
    asr: float
    n_test: int
    n_nontarget: int
    defense_tag: str = "none"
    seed: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, blob):
        return cls.from_dict(json.loads(blob))


def accuracy(predictor, test: LabeledDataset) -> float:
    if len(test) == 0:
        raise EmptyDataset("cannot score an empty test set")
    hits = sum(1 for ex in test.examples if predictor.predict_example(ex) == ex.label)
    return hits / len(test)


def attack_success_rate(predictor, test: LabeledDataset, trigger: Trigger, target_class: int, seed: int) -> float:
    """Fraction of non-target test examples classified as the target class
    after trigger injection (trigger positions seeded per example id)."""
    nontarget = [ex for ex in test.examples if ex.label != target_class]
    if not nontarget:
        raise NoNonTargetExamples("test set has no non-target examples")
    hits = 0
    for ex in nontarget:
        poisoned = inject_trigger(ex, trigger, derive_seed(seed, ex.id))
        if predictor.predict_example(poisoned) == target_class:
            hits += 1
    return hits / len(nontarget)


def evaluate(predictor, test, trigger, target_class, seed, defense_tag="none", config=None) -> EvalReport:
    return EvalReport(
        acc=accuracy(predictor, test),
        asr=attack_success_rate(predictor, test, trigger, target_class, seed),
        n_test=len(test),
        n_nontarget=sum(1 for ex in test.examples if ex.label != target_class),
        defense_tag=defense_tag,
        seed=seed,
        config=config or {},
    )


# ---------------------------------------------------------------------------
# Budget sweeps


@dataclass
class SweepPoint:
    budget: int
    mean_asr: float
    sd_asr: float
    mean_acc: float
    sd_acc: float


@dataclass
class SweepCurve:
    attack_type: str
    points: list


def _sweep_task(args):
    (train, test, attack_type, trigger, target_class, budget, seed, cfg, search_kwargs, nt) = args
    plan = PoisonPlan(attack_type, target_class, budget, trigger, seed=derive_seed(seed, "plan", budget))
    search_cfg = None
    if attack_type == "acl":
        surrogate = fit_surrogate(train, cfg, seed=derive_seed(seed, "acl"))
        search_cfg = AdvSearchConfig(surrogate=surrogate, **search_kwargs)
    poison = build_poison(train, plan, search_cfg, nt)
    victim = train_hard(concat(train, poison), cfg.with_seed(derive_seed(seed, "victim", budget)))
    acc = accuracy(victim, test)
    asr = attack_success_rate(victim, test, trigger, target_class, seed)
    return budget, seed, acc, asr


def sweep(
    train: LabeledDataset,
    test: LabeledDataset,
    attack_type: str,
    trigger: Trigger,
    target_class: int,
    budgets,
    seeds,
    cfg: TrainConfig,
    search_kwargs=None,
    nt=None,
    jobs=1,
) -> SweepCurve:
    """Build poison / retrain / evaluate for every (budget, seed) grid point.

    Every point retrains the victim from scratch so the budget is the only
    variable.  Grid points use derived seeds, so jobs > 1 cannot change the
    results.
    """
    budgets = list(budgets)
    if not budgets:
        raise ConfigError("budgets must be non-empty")
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ConfigError("budgets must be strictly increasing")
    if attack_type == "acl" and nt is None:
        nt = build_neighbor_table(train)
    tasks = [
        (train, test, attack_type, trigger, target_class, budget, seed, cfg, search_kwargs or {}, nt)
        for budget in budgets
        for seed in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_task, tasks))
    else:
        results = [_sweep_task(t) for t in tasks]

    by_budget = {b: {"acc": [], "asr": []} for b in budgets}
    for budget, _seed, acc, asr in results:
        by_budget[budget]["acc"].append(acc)
        by_budget[budget]["asr"].append(asr)

    def sd(vals):
        # exact zero for identical values (repeated seeds), no round-off noise
        if all(v == vals[0] for v in vals):
            return 0.0
        return float(np.std(vals))

    points = [
        SweepPoint(
            budget=b,
            mean_asr=float(np.mean(by_budget[b]["asr"])),
            sd_asr=sd(by_budget[b]["asr"]),
            mean_acc=float(np.mean(by_budget[b]["acc"])),
            sd_acc=sd(by_budget[b]["acc"]),
        )
        for b in budgets
    ]
    return SweepCurve(attack_type=attack_type, points=points)


def min_budget_reaching(curve: SweepCurve, level: float):
    """Smallest swept budget whose mean ASR reaches level, or None."""
    for point in curve.points:
        if point.mean_asr >= level:
            return point.budget
    return None


# ---------------------------------------------------------------------------
# Perplexity audit


def perplexity_audit(ds: LabeledDataset, lm: NGramLanguageModel):
    """Cumulative poison recall when inspecting examples by descending
    perplexity (ties by id).  Returns [(n_inspected, recall)] for n = 1..N."""
    poison_ids = ds.poison_ids()
    if not poison_ids:
        raise NoPoisons("dataset carries no poison-tagged examples")
    scored = sorted(
        ds.examples,
        key=lambda ex: (-perplexity(lm, tokenize(ex.active_text())), ex.id),
    )
    curve = []
    found = 0
    for n, ex in enumerate(scored, start=1):
        if ex.id in poison_ids:
            found += 1
        curve.append((n, found / len(poison_ids)))
    return curve
