import json

import numpy as np
import pytest

from volmetric.data import generate_synthetic
from volmetric.evaluation import (EvalReport, ReferenceSet, compute_metrics,
                                  evaluate_model, knn_predict, rank_k_hit)
from volmetric.model import EncoderConfig, init_params
from volmetric.numcore import RngStream


def brute_force_knn(query, emb, labels, k):
    """Independent re-implementation of the documented tie rules."""
    dist = [float(np.linalg.norm(e - query)) for e in emb]
    order = sorted(range(len(emb)), key=lambda i: (dist[i], i))[:k]
    votes = {}
    sums = {}
    for i in order:
        votes[labels[i]] = votes.get(labels[i], 0) + 1
        sums[labels[i]] = sums.get(labels[i], 0.0) + dist[i]
    top = max(votes.values())
    tied = [c for c, v in votes.items() if v == top]
    best = min(sums[c] for c in tied)
    return min(c for c in tied if sums[c] == best), order


def test_knn_exact_match_k1():
    ref = ReferenceSet(np.array([[0.0, 0], [1, 1], [2, 2]]), [5, 6, 7])
    label, nbr = knn_predict(np.array([1.0, 1.0]), ref, 1)
    assert label == 6
    assert nbr[0] == 1


def test_knn_majority_hand_case():
    emb = np.array([[0.0], [0.1], [0.2], [0.3], [1.0], [1.1], [1.2]])
    labels = [0, 0, 0, 0, 1, 1, 1]
    ref = ReferenceSet(emb, labels)
    label, _ = knn_predict(np.array([0.15]), ref, 7)
    assert label == 0


def test_knn_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    for trial in range(200):
        m = int(rng.integers(5, 40))
        L = int(rng.integers(1, 5))
        emb = rng.normal(size=(m, L))
        labels = rng.integers(0, 4, size=m)
        if trial % 3 == 0:
            # force distance ties by duplicating rows
            emb[1] = emb[0]
            emb[3] = emb[2]
        ref = ReferenceSet(emb, labels)
        q = rng.normal(size=L)
        k = int(rng.integers(1, m + 1))
        got_label, got_nbr = knn_predict(q, ref, k)
        exp_label, exp_nbr = brute_force_knn(q, emb, labels.tolist(), k)
        assert got_label == exp_label
        assert list(got_nbr) == exp_nbr


def test_knn_vote_tie_resolved_by_summed_distance():
    emb = np.array([[0.0], [0.2], [0.3], [10.0], [0.25], [0.05], [0.15]])
    labels = np.array([0, 0, 0, 2, 1, 1, 1])
    ref = ReferenceSet(emb, labels)
    got, _ = knn_predict(np.array([0.1]), ref, 7)
    exp, _ = brute_force_knn(np.array([0.1]), emb, labels.tolist(), 7)
    assert got == exp


def test_knn_rejects_bad_k():
    ref = ReferenceSet(np.zeros((3, 2)), [0, 1, 2])
    with pytest.raises(ValueError):
        knn_predict(np.zeros(2), ref, 0)
    with pytest.raises(ValueError):
        knn_predict(np.zeros(2), ref, 4)


def test_reference_set_rejects_empty():
    with pytest.raises(ValueError):
        ReferenceSet(np.zeros((0, 2)), [])


def test_rank_k_hit_basics():
    assert rank_k_hit(3, [3, 1, 2], 1)
    assert rank_k_hit(3, [1, 2, 3, 4, 5], 5)
    assert not rank_k_hit(9, [1, 2, 3, 4, 5], 5)
    with pytest.raises(ValueError):
        rank_k_hit(1, [1, 2], 3)


def test_rank_monotone_in_k():
    rng = np.random.default_rng(1)
    for _ in range(100):
        m = int(rng.integers(5, 20))
        nbrs = [rng.integers(0, 5, size=m) for _ in range(10)]
        truths = rng.integers(0, 5, size=10)
        prev = 0.0
        for k in range(1, m + 1):
            rate = np.mean([rank_k_hit(t, nl, k) for t, nl in zip(truths, nbrs)])
            assert rate >= prev - 1e-12
            prev = rate


def test_metrics_perfect():
    nbrs = [[c] * 5 for c in [0, 1, 2]]
    rep = compute_metrics([0, 1, 2], [0, 1, 2], nbrs, rare_set={2})
    assert rep.recall_micro == 1.0
    assert rep.recall_macro == 1.0
    assert rep.recall_macro_rare == 1.0
    assert all(v == 1.0 for v in rep.rank_k_accuracy.values())


def test_metrics_hand_confusion():
    truths = [0, 0, 0, 1]
    preds = [0, 0, 1, 1]
    nbrs = [[p] * 5 for p in preds]
    rep = compute_metrics(preds, truths, nbrs, rare_set={1})
    assert rep.recall_micro == pytest.approx(3 / 4, abs=1e-12)
    assert rep.recall_macro == pytest.approx(5 / 6, abs=1e-12)
    assert rep.recall_macro_rare == pytest.approx(1.0, abs=1e-12)


def test_micro_recall_is_accuracy_and_trace_identity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(5, 60))
        truths = rng.integers(0, 6, size=n)
        preds = rng.integers(0, 6, size=n)
        nbrs = [[p] for p in preds]
        rep = compute_metrics(preds, truths, nbrs, set(), rank_ks=(1,))
        assert rep.recall_micro == pytest.approx(np.mean(preds == truths))
        assert rep.recall_micro == pytest.approx(
            np.trace(rep.confusion) / rep.confusion.sum(), abs=1e-12)


def test_macro_invariant_under_class_duplication():
    truths = [0, 0, 1, 2]
    preds = [0, 1, 1, 2]
    nbrs = [[p] for p in preds]
    base = compute_metrics(preds, truths, nbrs, set(), rank_ks=(1,))
    dup = compute_metrics(preds + [1], truths + [1], nbrs + [[1]],
                          set(), rank_ks=(1,))
    assert dup.recall_macro == pytest.approx(base.recall_macro, abs=1e-12)


def test_metrics_rejects_misalignment():
    with pytest.raises(ValueError):
        compute_metrics([0, 1], [0], [[0], [1]], set())
    with pytest.raises(ValueError):
        compute_metrics([], [], [], set())


def test_report_json_roundtrip():
    rep = compute_metrics([0, 1, 1], [0, 1, 0], [[0], [1], [1]],
                          rare_set={1}, rank_ks=(1,), config={"k": 7})
    back = EvalReport.from_json(rep.to_json())
    assert back.recall_micro == pytest.approx(rep.recall_micro, abs=1e-6)
    assert back.rank_k_accuracy == {k: pytest.approx(v, abs=1e-6)
                                    for k, v in rep.rank_k_accuracy.items()}
    assert np.array_equal(back.confusion, rep.confusion)


def test_report_json_stable_bytes():
    rep = compute_metrics([0, 1, 1], [0, 1, 0], [[0], [1], [1]], {1},
                          rank_ks=(1,))
    assert rep.to_json() == rep.to_json()
    d = json.loads(rep.to_json())
    assert list(d["metrics"].keys())[:3] == ["recall_micro", "recall_macro",
                                             "recall_macro_rare"]


# --- evaluate_model --------------------------------------------------------

def tiny_dataset():
    return generate_synthetic([10, 10, 10, 10], shape=(8, 8, 8), seed=21,
                              separation="easy")


def tiny_model(head="l2_normalized", embed_dim=4, seed=0):
    cfg = EncoderConfig(input_shape=(8, 8, 8), conv_blocks=((2, 3, 2),),
                        hidden_dim=8, embed_dim=embed_dim, head_mode=head)
    return init_params(cfg, RngStream(seed))


def test_evaluate_model_deterministic():
    ds = tiny_dataset()
    p = tiny_model()
    r1 = evaluate_model(p, ds, k=3)
    r2 = evaluate_model(p, ds, k=3)
    assert r1.to_json() == r2.to_json()


def test_evaluate_model_acc_clf_presence():
    ds = tiny_dataset()
    metric = evaluate_model(tiny_model("l2_normalized"), ds, k=3)
    clf = evaluate_model(tiny_model("logits"), ds, k=3)
    assert metric.acc_clf is None
    assert "acc_clf" not in metric.metrics_dict()
    assert clf.acc_clf is not None
    assert "acc_clf" in clf.metrics_dict()


def test_evaluate_separable_embeddings_perfect():
    # hand-built separable case routed through compute_metrics + knn
    rng = np.random.default_rng(3)
    centers = np.eye(4) * 10
    ref_emb, ref_labels, q_emb, q_labels = [], [], [], []
    for c in range(4):
        pts = centers[c] + rng.normal(scale=0.1, size=(20, 4))
        ref_emb.extend(pts[:15])
        ref_labels.extend([c] * 15)
        q_emb.extend(pts[15:])
        q_labels.extend([c] * 5)
    ref = ReferenceSet(np.array(ref_emb), ref_labels)
    preds, nbrs = [], []
    for e in q_emb:
        lab, nbr = knn_predict(np.array(e), ref, 7)
        preds.append(lab)
        nbrs.append(ref.labels[nbr])
    rep = compute_metrics(preds, q_labels, nbrs, rare_set={3})
    assert rep.recall_macro == 1.0
    assert rep.rank_k_accuracy[5] == 1.0
