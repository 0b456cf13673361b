"""Acceptance suite: one test per release criterion.

Each test is self-contained — oracles are re-derived here with naive
reference implementations rather than shared with the unit tests, so a
bug cannot hide in a helper used by both sides.
"""

import json
import math
import time

import numpy as np
import pytest

from volmetric.config import ExperimentConfig
from volmetric.data import (generate_synthetic, identify_rare, load_dataset,
                            preset_paper_shaped, rare_classes, save_dataset)
from volmetric.evaluation import (ReferenceSet, compute_metrics, evaluate_model,
                                  knn_predict)
from volmetric.losses import (ContrastivePairBatch, LabeledBatch,
                              batch_all_triplet, batch_hard_triplet,
                              cross_entropy, nt_xent)
from volmetric.model import (EncoderConfig, backward, forward, init_params,
                             load_checkpoint, save_checkpoint)
from volmetric.numcore import RngStream, finite_diff_grad
from volmetric.training import (acquire_dataset, apply_augmentation,
                                run_pretrain, run_train)


# --- oracles ---------------------------------------------------------------

def oracle_batch_all(E, labels, margin):
    total = 0.0
    n = len(labels)
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            for q in range(n):
                if labels[q] == labels[a]:
                    continue
                total += max(0.0, np.linalg.norm(E[a] - E[p])
                             - np.linalg.norm(E[a] - E[q]) + margin)
    return total


def oracle_batch_hard(E, labels, margin):
    total = 0.0
    n = len(labels)
    for a in range(n):
        dpos = max(np.linalg.norm(E[a] - E[p])
                   for p in range(n) if p != a and labels[p] == labels[a])
        dneg = min(np.linalg.norm(E[a] - E[q])
                   for q in range(n) if labels[q] != labels[a])
        total += max(0.0, dpos - dneg + margin)
    return total


def random_labeled_batch(rng):
    n = int(rng.integers(4, 13))
    L = int(rng.integers(1, 9))
    classes = int(rng.integers(2, max(3, n // 2 + 1)))
    labels = np.concatenate([np.repeat(np.arange(classes), 2),
                             rng.integers(0, classes,
                                          size=max(0, n - 2 * classes))])
    labels = rng.permutation(labels[:max(n, 2 * classes)])
    return LabeledBatch(rng.normal(size=(len(labels), L)), labels)


def min_kink_distance(E, labels, margin):
    """Distance of the closest hinge/tie boundary over all triples."""
    D = np.array([[np.linalg.norm(a - b) for b in E] for a in E])
    terms = []
    n = len(labels)
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            for q in range(n):
                if labels[q] == labels[a]:
                    continue
                terms.append(abs(D[a, p] - D[a, q] + margin))
    return min(terms) if terms else 1.0


def min_mining_gap(E, labels):
    """Smallest per-anchor gap between candidate hardest positives or
    hardest negatives; a near-zero gap makes the mined selection flip
    under perturbation."""
    D = np.array([[np.linalg.norm(a - b) for b in E] for a in E])
    gaps = []
    n = len(labels)
    for a in range(n):
        pos = sorted(D[a, p] for p in range(n)
                     if p != a and labels[p] == labels[a])
        neg = sorted(D[a, q] for q in range(n) if labels[q] != labels[a])
        for group in (pos, neg):
            gaps.extend(y - x for x, y in zip(group, group[1:]))
    return min(gaps) if gaps else 1.0


# --- loss oracle equivalence ----------------------------------------------

def test_acceptance_loss_oracles():
    rng = np.random.default_rng(2024)
    start = time.monotonic()
    for _ in range(200):
        b = random_labeled_batch(rng)
        margin = float(rng.uniform(0.1, 2.0))
        va = batch_all_triplet(b, margin=margin).value
        vh = batch_hard_triplet(b, margin=margin).value
        assert abs(va - oracle_batch_all(b.embeddings, b.labels, margin)) <= 1e-10
        assert abs(vh - oracle_batch_hard(b.embeddings, b.labels, margin)) <= 1e-10
    assert time.monotonic() - start < 10.0


# --- gradient checks -------------------------------------------------------

def _loss_callable(name, labels, pair):
    if name == "batch_hard":
        return lambda E: batch_hard_triplet(LabeledBatch(E, labels))
    if name == "batch_all":
        return lambda E: batch_all_triplet(LabeledBatch(E, labels))
    if name == "nt_xent":
        return lambda E: nt_xent(ContrastivePairBatch(E, pair, 0.5))
    return lambda E: cross_entropy(E, labels)


def test_acceptance_gradient_checks():
    start = time.monotonic()
    labels = np.array([0, 0, 1, 1, 2, 2])
    pair = np.arange(6).reshape(-1, 2)[:, ::-1].ravel()

    # analytic loss gradients vs central finite differences
    for name, seed in (("batch_hard", 1), ("batch_all", 2),
                       ("nt_xent", 3), ("cross_entropy", 4)):
        rng = np.random.default_rng(seed)
        fn = _loss_callable(name, labels, pair)
        checked = 0
        while checked < 50:
            E = rng.normal(size=(6, 4))
            if name in ("batch_hard", "batch_all") and \
                    min_kink_distance(E, labels, 1.0) < 1e-4:
                continue
            if name == "batch_hard" and min_mining_gap(E, labels) < 1e-4:
                continue
            fd = finite_diff_grad(lambda X: fn(X).value, E, 1e-6)
            grad = fn(E).grad
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-8)
            assert rel <= 1e-4, f"{name}: loss-level rel err {rel}"
            checked += 1

    # loss-through-encoder gradients on a tiny config, random coordinates
    def run_e2e(name, head):
        cfg = EncoderConfig(input_shape=(6, 6, 4), conv_blocks=((2, 3, 2),),
                            hidden_dim=8, embed_dim=4, head_mode=head)
        rng = np.random.default_rng(hash(name) % 2 ** 31)
        e2e_labels = np.array([0, 0, 1, 1])
        e2e_pair = np.array([1, 0, 3, 2])
        checked = 0
        while checked < 50:
            p = init_params(cfg, RngStream(int(rng.integers(1 << 30))))
            x = rng.uniform(size=(4, 6, 6, 4))
            fn = _loss_callable(name, e2e_labels, e2e_pair)

            def value():
                out, _ = forward(p, x, want_cache=False)
                return fn(out).value

            out, cache = forward(p, x)
            if name in ("batch_hard", "batch_all") and \
                    min_kink_distance(out, e2e_labels, 1.0) < 1e-4:
                continue
            if name == "batch_hard" and min_mining_gap(out, e2e_labels) < 1e-3:
                continue
            res = fn(out)
            grads = backward(p, cache, res.grad)
            flat = np.concatenate([grads[k].ravel() for k in p.arrays])
            idxs = rng.choice(p.size(), size=20, replace=False)
            fd = np.zeros(len(idxs))
            h = 1e-6
            for j, i in enumerate(idxs):
                orig = p.get_index(i)
                p.set_index(i, orig + h)
                vp = value()
                p.set_index(i, orig - h)
                vm = value()
                p.set_index(i, orig)
                fd[j] = (vp - vm) / (2 * h)
            rel = np.linalg.norm(flat[idxs] - fd) / max(np.linalg.norm(fd), 1e-8)
            assert rel <= 1e-3, f"{name}: end-to-end rel err {rel}"
            checked += 1

    for name, head in (("batch_hard", "l2_normalized"),
                       ("batch_all", "l2_normalized"),
                       ("nt_xent", "l2_normalized"),
                       ("cross_entropy", "logits")):
        run_e2e(name, head)
    assert time.monotonic() - start < 60.0


# --- hand-derived loss values ---------------------------------------------

def test_acceptance_hand_values():
    interleaved = np.array([[0.0], [2.0], [1.0], [3.0]])
    labels = [0, 0, 1, 1]
    assert batch_hard_triplet(LabeledBatch(interleaved, labels),
                              margin=1.0).value == 8.0
    assert batch_all_triplet(LabeledBatch(interleaved, labels),
                             margin=1.0).value == 12.0
    Z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    v = nt_xent(ContrastivePairBatch(Z, [1, 0, 3, 2], temperature=1.0)).value
    assert v == pytest.approx(math.log(1 + 2 / math.e), abs=1e-9)
    v = cross_entropy(np.zeros((3, 27)), [0, 5, 26]).value
    assert v == pytest.approx(math.log(27), abs=1e-12)


# --- metrics and KNN oracle ------------------------------------------------

def test_acceptance_metrics():
    # hand confusion case: micro 3/4, macro 5/6
    truths = [0, 1, 2, 2]
    preds = [0, 1, 2, 0]
    nbrs = [[t] for t in preds]
    rep = compute_metrics(preds, truths, nbrs, set(), rank_ks=(1,))
    assert abs(rep.recall_micro - 3 / 4) <= 1e-12
    assert abs(rep.recall_macro - 5 / 6) <= 1e-12

    # rank-k accuracy is monotone non-decreasing in k
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(3, 30))
        depth = int(rng.integers(2, 8))
        truths = rng.integers(0, 5, size=n)
        preds = rng.integers(0, 5, size=n)
        nbrs = [rng.integers(0, 5, size=depth) for _ in range(n)]
        rep = compute_metrics(preds, truths, nbrs, set(),
                              rank_ks=tuple(range(1, depth + 1)))
        accs = [rep.rank_k_accuracy[k] for k in range(1, depth + 1)]
        assert all(a <= b + 1e-12 for a, b in zip(accs, accs[1:]))

    # knn_predict against a brute-force oracle, forced ties included
    def brute_force(query, emb, labels, k):
        dist = np.array([np.linalg.norm(e - query) for e in emb])
        order = sorted(range(len(emb)), key=lambda i: (dist[i], i))[:k]
        nl = labels[order]
        nd = dist[order]
        best, best_key = None, None
        for c in np.unique(nl):
            votes = int(np.sum(nl == c))
            key = (-votes, float(nd[nl == c].sum()), int(c))
            if best_key is None or key < best_key:
                best, best_key = int(c), key
        return best, list(order)

    rng = np.random.default_rng(8)
    for trial in range(500):
        n = int(rng.integers(5, 40))
        L = int(rng.integers(1, 5))
        if trial % 3 == 0:
            # quantized coordinates force exact distance and vote ties
            emb = rng.integers(0, 2, size=(n, L)).astype(float)
        else:
            emb = rng.normal(size=(n, L))
        labels = rng.integers(0, 4, size=n)
        ref = ReferenceSet(emb, labels)
        query = (rng.integers(0, 2, size=L).astype(float)
                 if trial % 3 == 0 else rng.normal(size=L))
        k = int(rng.integers(1, n + 1))
        got_label, got_nbr = knn_predict(query, ref, k)
        exp_label, exp_nbr = brute_force(query, emb, labels, k)
        assert got_label == exp_label
        assert list(got_nbr) == exp_nbr


# --- rare-class rule -------------------------------------------------------

def test_acceptance_rare_rule():
    start = time.monotonic()
    sizes = preset_paper_shaped(0.25)
    assert len(sizes) == 27
    labels = np.repeat(np.arange(27), sizes)
    rare = identify_rare(labels, 0.01)
    assert len(rare) == 13
    assert time.monotonic() - start < 1.0


# --- end-to-end convergence ------------------------------------------------

def test_acceptance_convergence():
    start = time.monotonic()
    cfg = ExperimentConfig.from_dict({
        "seed": 0,
        "dataset": {"class_sizes": [60] * 8, "shape": [32, 32, 8],
                    "separation": "easy"},
        "encoder": {"conv_blocks": [[4, 3, 2], [8, 3, 2]], "hidden_dim": 32},
        "pretrain": {"loss": "none"},
        "augment": {"enabled": False},
        "train": {"loss": "batch_hard", "epochs": 30, "classes_per_batch": 8,
                  "samples_per_class": 3, "embed_dim": 6, "val_every": 5},
        "eval": {"k": 7},
    })
    ds = acquire_dataset(cfg)
    best, _ = run_train(cfg, ds)
    rep = evaluate_model(best, ds, k=7, rare_set=set())
    assert rep.recall_macro >= 0.90, f"Recall_M {rep.recall_macro}"
    assert rep.rank_k_accuracy[5] >= 0.98, f"Rank-5 {rep.rank_k_accuracy[5]}"
    assert time.monotonic() - start < 300.0


# --- directional claim: rare-case augmentation -----------------------------

def test_acceptance_directional_rare_augmentation():
    def run(seed, aug):
        cfg = ExperimentConfig.from_dict({
            "seed": seed,
            "dataset": {"class_sizes": [120] * 4 + [5] * 4,
                        "shape": [16, 16, 8], "separation": "easy"},
            "encoder": {"conv_blocks": [[4, 3, 2]], "hidden_dim": 16},
            "pretrain": {"loss": "none"},
            "augment": {"enabled": aug, "n_copies": 5,
                        "spec": {"rotation_max_degrees": 8.0,
                                 "crop_scale_range": [0.9, 1.0],
                                 "noise_sigma_range": [0.0, 0.02]}},
            "train": {"loss": "batch_hard", "epochs": 10,
                      "classes_per_batch": 8, "samples_per_class": 3,
                      "embed_dim": 6, "val_every": 5},
            "eval": {"k": 13},
        })
        ds = acquire_dataset(cfg)
        rare = rare_classes(ds)
        assert len(rare) == 4
        best, _ = run_train(cfg, ds)
        rep = evaluate_model(best, apply_augmentation(cfg, ds), k=13,
                             rare_set=rare)
        return rep.recall_macro_rare

    plain, augmented = [], []
    for seed in range(5):
        plain.append(run(seed, False))
        augmented.append(run(seed, True))
    deltas = [a - p for p, a in zip(plain, augmented)]
    assert np.median(augmented) > np.median(plain), (plain, augmented)
    assert sum(d > 0 for d in deltas) >= 4, deltas


# --- directional claim: contrastive pre-training ---------------------------

def test_acceptance_directional_contrastive_pretraining():
    def run(seed, pretrained):
        cfg = ExperimentConfig.from_dict({
            "seed": seed,
            "dataset": {"class_sizes": [20] * 6, "shape": [16, 16, 8],
                        "separation": "hard"},
            "encoder": {"conv_blocks": [[4, 3, 2]], "hidden_dim": 16},
            "pretrain": ({"loss": "batch_hard", "epochs": 10,
                          "batch_size": 15, "lr": 0.003,
                          "localization_gamma": 1.0,
                          "include_train_unlabelled": True}
                         if pretrained else {"loss": "none"}),
            "augment": {"enabled": False},
            "train": {"loss": "batch_hard", "epochs": 1, "lr": 0.001,
                      "classes_per_batch": 6, "samples_per_class": 3,
                      "embed_dim": 6, "val_every": 1},
            "eval": {"k": 3},
        })
        ds = acquire_dataset(cfg)
        init = None
        if pretrained:
            init, _ = run_pretrain(cfg, ds)
        best, _ = run_train(cfg, ds, init_from=init)
        return evaluate_model(best, ds, k=3, rare_set=set()).recall_macro

    plain, pre = [], []
    for seed in range(5):
        plain.append(run(seed, False))
        pre.append(run(seed, True))
    deltas = [b - a for a, b in zip(plain, pre)]
    assert np.median(pre) >= np.median(plain), (plain, pre)
    assert sum(d > 0 for d in deltas) >= 3, deltas


# --- determinism -----------------------------------------------------------

def test_acceptance_report_determinism(tmp_path):
    from volmetric.cli import main
    cfg = {
        "seed": 11,
        "dataset": {"class_sizes": [16, 16, 16, 16], "shape": [10, 10, 8],
                    "separation": "easy"},
        "encoder": {"conv_blocks": [[2, 3, 2]], "hidden_dim": 12},
        "pretrain": {"loss": "batch_hard", "epochs": 1,
                     "unlabelled_size": 10, "batch_size": 5},
        "augment": {"enabled": False},
        "train": {"loss": "batch_hard", "epochs": 3, "classes_per_batch": 4,
                  "samples_per_class": 3, "embed_dim": 4, "val_every": 2},
        "eval": {"k": 3},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    name = ExperimentConfig.from_dict(cfg).experiment_name()
    reports = []
    for run_dir in ("r1", "r2"):
        main(["eval", "--config", str(cfg_path),
              "--out", str(tmp_path / run_dir)])
        reports.append((tmp_path / run_dir / name / "report.json").read_bytes())
    assert reports[0] == reports[1]


# --- round-trips -----------------------------------------------------------

def test_acceptance_roundtrips(tmp_path):
    rng = np.random.default_rng(99)
    for i in range(20):
        sizes = [int(rng.integers(5, 9)) for _ in range(int(rng.integers(2, 4)))]
        ds = generate_synthetic(sizes, shape=(8, 8, 8),
                                seed=int(rng.integers(1 << 30)))
        out = tmp_path / f"ds{i}"
        save_dataset(ds, out)
        back = load_dataset(out / "manifest.json")
        assert back.content_hash() == ds.content_hash()
        for a, b in zip(ds.samples, back.samples):
            assert a.id == b.id and a.label == b.label and a.split == b.split
            assert np.array_equal(a.volume, b.volume)
            assert np.array_equal(a.mask, b.mask)

    for i in range(20):
        cfg = EncoderConfig(input_shape=(6, 6, 4), conv_blocks=((2, 3, 2),),
                            hidden_dim=int(rng.integers(4, 12)), embed_dim=4)
        p = init_params(cfg, RngStream(int(rng.integers(1 << 30))))
        path = tmp_path / f"ck{i}.bin"
        save_checkpoint(p, path)
        q = load_checkpoint(path, expect_config=cfg)
        assert np.array_equal(p.flat(), q.flat())
