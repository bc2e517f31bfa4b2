"""Head-to-head defense comparison against a label-flipping backdoor.

Trains one poisoned victim, then measures ACC (clean accuracy, higher is
better) and ASR (attack success rate, lower is better) for each defense:
test-time sanitizers (ONION, random replacement, paraphrase), kNN over
TF-IDF, partition ensembles (DPA), and the distilled single-model S-DPA.
"""

from poisonlab.attack import PoisonPlan, Trigger, build_lf_poison
from poisonlab.corpus import SynthSpec, build_neighbor_table, concat, synth_dataset
from poisonlab.defense import (
    OnionConfig,
    SanitizedPredictor,
    dpa_train,
    knn_build,
    make_sanitizer,
    sdpa_distill,
)
from poisonlab.metrics import evaluate
from poisonlab.model import TrainConfig, train_hard
from poisonlab.ngram import fit_lm

spec = SynthSpec(num_classes=2, vocab_size=120, class_skew=0.5, length_range=(4, 9), n_train=2000, n_test=500)
train, test = synth_dataset(spec, seed=1)
trigger = Trigger(kind="closed", token="cf")
cfg = TrainConfig(epochs=10, learning_rate=1.0, l2_penalty=1e-4, batch_size=8, num_buckets=1 << 14, ngram_orders=(1,))

plan = PoisonPlan("lf", target_class=1, budget=80, trigger=trigger, seed=7)
poisoned = concat(train, build_lf_poison(train, plan))
victim = train_hard(poisoned, cfg)

# the defender works from the poisoned corpus only: no clean reference data
lm = fit_lm(poisoned, add_k=0.1)
nt = build_neighbor_table(poisoned, window=2, min_count=2, top_m=10)

reports = []

def record(tag, predictor):
    reports.append(evaluate(predictor, test, trigger, 1, seed=3, defense_tag=tag))

record("none", victim)
record("onion", SanitizedPredictor(victim, make_sanitizer("onion", onion_cfg=OnionConfig(lm=lm, threshold=0.0, max_removals=2)), seed=11))
record("random p=0.5", SanitizedPredictor(victim, make_sanitizer("random", nt=nt, p=0.5), seed=11))
record("para-test q=0.5", SanitizedPredictor(victim, make_sanitizer("paraphrase", nt=nt, q=0.5), seed=11))
record("knn k=10", knn_build(poisoned, k_neighbors=10))

ens = dpa_train(poisoned, 16, cfg)
record("dpa k=16", ens)
record("s-dpa k=16", sdpa_distill(ens, poisoned, cfg))

print(f"LF backdoor, budget {plan.budget}, trigger {trigger.token!r}\n")
print(f"{'defense':>16} {'ACC':>7} {'ASR':>7}")
for r in reports:
    print(f"{r.defense_tag:>16} {r.acc:>7.3f} {r.asr:>7.3f}")

print("\nthe ensemble methods cut ASR the most; the distilled student keeps")
print("that robustness while answering with a single model at inference")
