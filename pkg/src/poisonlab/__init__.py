"""poisonlab: a desk-scale lab for textual backdoor attacks and defenses."""

from .corpus import (
    Example,
    LabeledDataset,
    NeighborTable,
    SynthSpec,
    build_neighbor_table,
    concat,
    detokenize,
    dump_jsonl,
    load_jsonl,
    split,
    synth_dataset,
    tokenize,
)
from .model import (
    FeatureVector,
    LinearTextClassifier,
    TrainConfig,
    featurize,
    load_model,
    save_model,
    train_hard,
    train_soft,
)
from .ngram import NGramLanguageModel, fit_lm, perplexity
from .attack import (
    AdvSearchConfig,
    PoisonPlan,
    SubstitutionResult,
    Trigger,
    adv_substitute,
    build_acl_poison,
    build_cl_poison,
    build_lf_poison,
    build_poison,
    fit_surrogate,
    inject_trigger,
    sample_trigger_instance,
)
from .defense import (
    DpaEnsemble,
    KnnIndex,
    OnionConfig,
    SanitizedPredictor,
    apply_defense_test,
    apply_defense_train,
    dpa_certificate,
    dpa_predict,
    dpa_train,
    knn_build,
    knn_predict,
    onion_sanitize,
    paraphrase,
    random_sanitize,
    sdpa_distill,
)
from .metrics import (
    EvalReport,
    SweepCurve,
    accuracy,
    attack_success_rate,
    evaluate,
    perplexity_audit,
    sweep,
)
from . import bench, errors

__version__ = "0.1.0"
