import itertools
import sys

import numpy as np
import pytest

from poisonlab.attack import PoisonPlan, Trigger, build_lf_poison
from poisonlab.corpus import (
    Example,
    LabeledDataset,
    NeighborTable,
    SynthSpec,
    build_neighbor_table,
    concat,
    synth_dataset,
    tokenize,
)
from poisonlab.defense import (
    OnionConfig,
    SanitizedPredictor,
    apply_defense_test,
    apply_defense_train,
    dpa_certificate,
    dpa_predict,
    dpa_train,
    knn_build,
    knn_predict,
    make_sanitizer,
    onion_sanitize,
    onion_suspicions,
    paraphrase,
    paraphrase_external,
    partition_index,
    random_sanitize,
    sdpa_distill,
)
from poisonlab.errors import BadK, ConfigError, EmptyDataset, ExternalFailure
from poisonlab.metrics import accuracy, evaluate
from poisonlab.model import TrainConfig, train_hard
from poisonlab.ngram import fit_lm

CFG = TrainConfig(epochs=5, learning_rate=0.5, batch_size=16, seed=3, num_buckets=1 << 12)


def make_ds(texts_labels, num_classes=2):
    examples = [Example(id=f"d{i}", text=t, label=l) for i, (t, l) in enumerate(texts_labels)]
    return LabeledDataset(examples, num_classes, [f"c{i}" for i in range(num_classes)])


def small_synth(n_train=400, n_test=100, seed=0, skew=0.8):
    spec = SynthSpec(num_classes=2, vocab_size=40, class_skew=skew, length_range=(4, 8), n_train=n_train, n_test=n_test)
    return synth_dataset(spec, seed)


# ---------------------------------------------------------------------------
# ONION


def toy_lm():
    texts = ["a b c", "a b d", "b c d", "a c d", "a b c d"] * 4
    return fit_lm(make_ds([(t, i % 2) for i, t in enumerate(texts)]), add_k=0.5)


def test_onion_rare_token_has_max_suspicion():
    lm = toy_lm()
    sentence = ("a", "b", "zzz", "c")
    scores = onion_suspicions(sentence, lm)
    # brute force: recompute each deletion's perplexity directly
    base = lm.perplexity(sentence)
    expect = [base - lm.perplexity(sentence[:i] + sentence[i + 1 :]) for i in range(len(sentence))]
    assert scores == expect
    assert int(np.argmax(scores)) == 2


def test_onion_removes_rare_token():
    lm = toy_lm()
    out = onion_sanitize(("a", "b", "zzz", "c"), OnionConfig(lm=lm, threshold=0.0, max_removals=2))
    assert "zzz" not in out


def test_onion_infinite_threshold_is_identity():
    lm = toy_lm()
    sent = ("a", "b", "zzz", "c")
    out = onion_sanitize(sent, OnionConfig(lm=lm, threshold=float("inf"), max_removals=5))
    assert out == sent


def test_onion_max_removals_cap():
    lm = toy_lm()
    sent = ("a", "zzz", "b", "qqq", "c")
    out = onion_sanitize(sent, OnionConfig(lm=lm, threshold=0.0, max_removals=1))
    assert len(out) == len(sent) - 1


def test_onion_threshold_zero_never_removes_helpful_token():
    # tokens whose removal increases perplexity have negative suspicion
    lm = toy_lm()
    for sent in [("a", "b", "c"), ("a", "b", "c", "d"), ("b", "c", "d")]:
        scores = onion_suspicions(sent, lm)
        out = onion_sanitize(sent, OnionConfig(lm=lm, threshold=0.0, max_removals=len(sent)))
        kept = set(out)
        for tok, s in zip(sent, scores):
            if s <= 0:
                assert tok in kept


# ---------------------------------------------------------------------------
# Random replacement


def simple_table():
    return NeighborTable(
        neighbors={"a": [("b", 0.9)], "b": [("a", 0.9)], "c": [("a", 0.5), ("b", 0.4)]},
        counts={"a": 10, "b": 10, "c": 5},
        window=2,
        min_count=1,
    )


def test_random_sanitize_replaces_exact_count():
    nt = simple_table()
    out = random_sanitize(("a", "b", "a", "b"), nt, p=0.5, seed=1)
    assert len(out) == 4
    changed = sum(1 for x, y in zip(("a", "b", "a", "b"), out) if x != y)
    assert changed <= 2  # two positions redrawn, replacement may coincide? tokens differ here
    assert changed == 2


def test_random_sanitize_p_zero_identity():
    nt = simple_table()
    sent = ("a", "b", "c")
    assert random_sanitize(sent, nt, p=0.0, seed=0) == sent


def test_random_sanitize_oov_becomes_unk():
    nt = simple_table()
    out = random_sanitize(("cf",), nt, p=1.0, seed=0)
    assert out == ("<unk>",)


def test_random_sanitize_p_one_leaves_no_neighborless_token():
    nt = simple_table()
    out = random_sanitize(("a", "cf", "b", "zz"), nt, p=1.0, seed=5)
    assert "cf" not in out and "zz" not in out


# ---------------------------------------------------------------------------
# Paraphrase


def freq_table():
    # "common" is top-frequency; "mid" is replaceable; OOV tokens absent
    neighbors = {"common": [("mid", 0.5)], "mid": [("common", 0.5)], "other": [("mid", 0.3)]}
    counts = {"common": 100, "mid": 5, "other": 4}
    return NeighborTable(neighbors=neighbors, counts=counts, window=2, min_count=1)


def test_paraphrase_drops_oov():
    nt = freq_table()
    out = paraphrase(("common", "cbfbfbfbcb", "mid"), nt, q=0.0, seed=0, top_frequent=1)
    assert "cbfbfbfbcb" not in out
    assert out == ("common", "mid")  # q=0: only the OOV drop happens


def test_paraphrase_q_one_replaces_infrequent():
    nt = freq_table()
    out = paraphrase(("common", "mid"), nt, q=1.0, seed=0, top_frequent=1)
    assert out == ("common", "common")  # "mid" replaced by its rank-1 neighbor


def test_paraphrase_external_identity():
    out = paraphrase(("hello", "world"), external_cmd=[sys.executable, "-c", "import sys; sys.stdout.write(sys.stdin.read())"])
    assert out == ("hello", "world")


def test_paraphrase_external_failure():
    with pytest.raises(ExternalFailure) as exc:
        paraphrase_external(["x"], [sys.executable, "-c", "import sys; sys.exit(3)"])
    assert exc.value.exit_code == 3


def test_paraphrase_external_line_count_mismatch():
    with pytest.raises(ExternalFailure):
        paraphrase_external(["x", "y"], [sys.executable, "-c", "print('only one line')"])


# ---------------------------------------------------------------------------
# defense application wrappers


def test_apply_defense_train_preserves_size_and_provenance():
    train, _ = small_synth(120, 30)
    nt = build_neighbor_table(train, min_count=1)
    sanitizer = make_sanitizer("random", nt=nt, p=0.5)
    out = apply_defense_train(train, sanitizer, seed=0)
    assert len(out) == len(train)
    assert out.provenance == train.provenance
    assert [ex.id for ex in out.examples] == [ex.id for ex in train.examples]


def test_identity_sanitizer_changes_nothing():
    train, test = small_synth(300, 80)
    model = train_hard(train, CFG)
    trig = Trigger("closed", "cf")
    base = evaluate(model, test, trig, 1, seed=4)
    wrapped = apply_defense_test(model, lambda ts, seed: ts, test, trig, 1, seed=4)
    assert wrapped.acc == base.acc
    assert wrapped.asr == base.asr


# ---------------------------------------------------------------------------
# kNN


def test_knn_exact_match_k1():
    ds = make_ds([("alpha beta", 0), ("gamma delta", 1), ("epsilon zeta", 0)])
    idx = knn_build(ds, k_neighbors=1)
    assert knn_predict(idx, ("gamma", "delta")) == 1


def test_knn_two_points_closer_wins():
    ds = make_ds([("red red red", 0), ("blue blue blue", 1)])
    idx = knn_build(ds, k_neighbors=1)
    assert knn_predict(idx, ("red", "red", "blue")) == 0


def test_knn_majority():
    ds = make_ds([("x y", 0), ("x z", 1), ("x w", 1), ("q r", 0)])
    idx = knn_build(ds, k_neighbors=3)
    # neighbors of "x ?" are the three x-docs with labels 0,1,1 -> majority 1
    assert knn_predict(idx, ("x",)) == 1


def test_knn_empty_dataset():
    with pytest.raises(EmptyDataset):
        knn_build(LabeledDataset([], 2, ["a", "b"]), k_neighbors=1)


def test_knn_pair_mode_concat_default():
    examples = [
        Example(id="p0", text="shared premise", label=0, text_pair="cats sleep"),
        Example(id="p1", text="shared premise", label=1, text_pair="dogs run"),
    ]
    ds = LabeledDataset(examples, 2, ["a", "b"])
    idx = knn_build(ds, k_neighbors=1)
    assert idx.predict_example(Example(id="q", text="shared premise", label=0, text_pair="dogs run")) == 1


# ---------------------------------------------------------------------------
# DPA


def test_dpa_partitions_disjoint_and_cover():
    train, _ = small_synth(200, 20)
    k = 5
    assignment = {}
    for ex in train.examples:
        assignment.setdefault(partition_index(ex, k), []).append(ex.id)
    assert sum(len(v) for v in assignment.values()) == len(train)
    assert set(assignment) <= set(range(k))


def test_dpa_identical_text_same_partition():
    a = Example(id="1", text="same words here", label=0)
    b = Example(id="2", text="same words here", label=1)
    assert partition_index(a, 7) == partition_index(b, 7)


def test_dpa_partition_balance():
    spec = SynthSpec(num_classes=2, vocab_size=60, class_skew=0.8, length_range=(6, 12), n_train=2000, n_test=10)
    train, _ = synth_dataset(spec, seed=0)
    sizes = np.bincount([partition_index(ex, 10) for ex in train.examples], minlength=10)
    assert sizes.min() > 0
    assert sizes.max() / sizes.min() < 2


def test_dpa_train_predict_and_ties():
    train, test = small_synth(300, 60)
    ens = dpa_train(train, 4, CFG)
    assert len(ens.models) == 4
    preds = [dpa_predict(ens, ex.tokens()) for ex in test.examples[:10]]
    assert all(p in (0, 1) for p in preds)


def test_dpa_bad_k():
    train, _ = small_synth(50, 10)
    with pytest.raises(BadK):
        dpa_train(train, 51, CFG)
    with pytest.raises(BadK):
        dpa_train(train, 1, CFG)


def test_dpa_degenerate_partition_votes_majority():
    # tiny dataset where some partitions inevitably hold a single class
    ds = make_ds([(f"word{i} filler{i}", i % 2) for i in range(8)])
    ens = dpa_train(ds, 4, CFG)
    assert any(ens.degenerate)
    for model, degenerate in zip(ens.models, ens.degenerate):
        if degenerate:
            assert np.all(model.weights == 0.0)
            assert model.bias.max() == 1.0


def test_dpa_certificate_formula():
    class Votes:
        def __init__(self, votes, c):
            self._v = np.array(votes)
            self.num_classes = c

        def votes_tokens(self, ts):
            return self._v

    from poisonlab.defense import dpa_certificate as cert

    assert cert(Votes([0, 0, 0, 0, 1], 2), ()) == 1  # A:4 B:1 -> (4-1-0)//2
    assert cert(Votes([0, 0, 0, 1, 1], 2), ()) == 0  # (3-2-0)//2
    assert cert(Votes([0, 0, 0, 0, 0], 2), ()) == 2  # 5-0 -> 2
    assert cert(Votes([1, 1, 1, 0, 0], 2), ()) == 0  # v1=3 c1=1, v2=2 c2=0 -> (3-2-1)//2


def test_dpa_certificate_values():
    # recheck the 3-2 case explicitly: (3-2-0)//2 = 0
    class Votes:
        def __init__(self, votes, c):
            self._v = np.array(votes)
            self.num_classes = c

        def votes_tokens(self, ts):
            return self._v

    assert dpa_certificate(Votes([0, 0, 0, 1, 1], 2), ()) == 0


def test_dpa_vote_order_invariant():
    train, test = small_synth(300, 30)
    ens = dpa_train(train, 4, CFG)
    probe = test.examples[0].tokens()
    votes = ens.votes_tokens(probe)
    base = dpa_predict(ens, probe)
    for perm in itertools.permutations(range(4)):
        shuffled = type(ens)(
            k=4,
            models=[ens.models[i] for i in perm],
            degenerate=[ens.degenerate[i] for i in perm],
            num_classes=2,
        )
        assert dpa_predict(shuffled, probe) == base


# ---------------------------------------------------------------------------
# S-DPA


def test_sdpa_soft_labels_are_vote_fractions():
    train, _ = small_synth(300, 30)
    ens = dpa_train(train, 4, CFG)
    ex = train.examples[0]
    votes = np.bincount(ens.votes_tokens(ex.tokens()), minlength=2)
    s = votes / 4
    assert abs(s.sum() - 1.0) < 1e-12
    # spec example shape: k=4, votes (c0,c0,c1,c0) -> s=(0.75,0.25)
    fake = np.bincount(np.array([0, 0, 1, 0]), minlength=2) / 4
    assert np.allclose(fake, [0.75, 0.25])


def test_sdpa_student_answers_without_ensemble():
    train, test = small_synth(400, 60)
    ens = dpa_train(train, 4, CFG)
    student = sdpa_distill(ens, train, CFG)
    # structural: break the ensemble, the student must keep answering
    ens.models = None
    preds = [student.predict_example(ex) for ex in test.examples[:20]]
    assert all(p in (0, 1) for p in preds)


def test_sdpa_agreement_with_dpa_votes():
    train, test = small_synth(600, 100, skew=0.85)
    ens = dpa_train(train, 4, CFG)
    student = sdpa_distill(ens, train, CFG)
    agree = np.mean([student.predict_example(ex) == ens.predict_example(ex) for ex in train.examples])
    assert agree >= 0.9


def test_sdpa_unanimous_votes_give_one_hot_labels():
    train, _ = small_synth(300, 30, skew=0.9)
    ens = dpa_train(train, 4, CFG)
    unanimous = [ex for ex in train.examples if len(set(ens.votes_tokens(ex.tokens()))) == 1]
    assert unanimous  # highly separable data: most votes agree
    for ex in unanimous[:5]:
        votes = np.bincount(ens.votes_tokens(ex.tokens()), minlength=2) / 4
        assert set(votes.tolist()) == {0.0, 1.0}
