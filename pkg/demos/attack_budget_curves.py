"""Budget sweep for the three poisoning attacks on a small synthetic corpus.

Label-flipping (LF) poisons non-target examples and flips their labels;
clean-label (CL) poisons target-class examples without touching labels;
adversarial clean-label (ACL) first rewrites target-class examples until a
surrogate classifier misreads them, then injects the trigger.  The printed
table shows the attack-success-rate ordering LF >= ACL >= CL.
"""

import numpy as np

from poisonlab.attack import Trigger
from poisonlab.corpus import SynthSpec, synth_dataset
from poisonlab.metrics import sweep
from poisonlab.model import TrainConfig

# a scaled-down cousin of the default benchmark so the demo runs in seconds
spec = SynthSpec(num_classes=2, vocab_size=120, class_skew=0.44, length_range=(3, 8), n_train=1500, n_test=400)
train, test = synth_dataset(spec, seed=0)
print(f"corpus: {len(train)} train / {len(test)} test, vocab {spec.vocab_size}")
print(f"sample: {train.examples[0].text!r} -> class {train.examples[0].label}")

cfg = TrainConfig(epochs=10, learning_rate=1.0, l2_penalty=1e-4, batch_size=8, num_buckets=1 << 14, ngram_orders=(1,))
trigger = Trigger(kind="closed", token="cf")
budgets = [5, 15, 50, 120]
seeds = [0, 1, 2]

curves = {}
for attack in ("lf", "cl", "acl"):
    curves[attack] = sweep(
        train, test, attack, trigger, target_class=1,
        budgets=budgets, seeds=seeds, cfg=cfg,
        search_kwargs=dict(max_substitutions=10, candidates_per_token=60),
    )
    print(f"swept {attack}")

print(f"\n{'budget':>8} {'LF asr':>8} {'ACL asr':>8} {'CL asr':>8}   (mean over {len(seeds)} seeds)")
for i, budget in enumerate(budgets):
    row = [curves[a].points[i].mean_asr for a in ("lf", "acl", "cl")]
    print(f"{budget:>8} {row[0]:>8.3f} {row[1]:>8.3f} {row[2]:>8.3f}")

accs = [curves["lf"].points[i].mean_acc for i in range(len(budgets))]
print(f"\nclean-task accuracy stays flat under LF poisoning: {np.round(accs, 3).tolist()}")
print("that stealth is what makes backdoors hard to notice from metrics alone")
