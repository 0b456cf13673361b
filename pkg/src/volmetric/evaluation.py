"""KNN classification over embeddings, recall/rank-k metrics, and
machine-readable evaluation reports.

Queries are classified against a combined train+val reference set by
majority vote among the K nearest neighbors (Euclidean). Tie rules are
fixed: distance ties prefer the lower reference index, vote ties the
smaller summed distance, then the lower class id. Rank-k follows the
CMC convention: a hit iff the true label appears among the k nearest
neighbors' labels.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod

DEFAULT_K = 7
DEFAULT_RANK_KS = (1, 5)


@dataclass
class ReferenceSet:
    embeddings: np.ndarray
    labels: np.ndarray
    provenance: tuple = ("train", "val")

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2 or \
                self.labels.shape != (self.embeddings.shape[0],):
            raise ValueError("reference embeddings/labels misaligned")
        if self.embeddings.shape[0] == 0:
            raise ValueError("reference set is empty")


def knn_predict(query, ref, k=DEFAULT_K):
    """Majority-vote label and ordered neighbor indices for one query."""
    if k < 1 or k > ref.labels.size:
        raise ValueError(f"k={k} out of range for reference size {ref.labels.size}")
    q = np.asarray(query, dtype=np.float64)
    diff = ref.embeddings - q[None, :]
    dist = np.sqrt(np.maximum(np.sum(diff * diff, axis=1), 0.0))
    order = np.lexsort((np.arange(dist.size), dist))  # distance, then index
    nbr = order[:k]
    nbr_labels = ref.labels[nbr]
    nbr_dists = dist[nbr]

    classes, votes = np.unique(nbr_labels, return_counts=True)
    top = votes.max()
    tied = classes[votes == top]
    if tied.size == 1:
        label = int(tied[0])
    else:
        sums = np.array([nbr_dists[nbr_labels == c].sum() for c in tied])
        best = sums.min()
        label = int(tied[sums == best].min())  # distance tie -> lower class id
    return label, nbr


def rank_k_hit(true_label, neighbor_labels, k):
    """True iff the true label appears among the k nearest labels."""
    neighbor_labels = np.asarray(neighbor_labels)
    if k > neighbor_labels.size:
        raise ValueError("k exceeds available neighbors")
    return bool(np.any(neighbor_labels[:k] == true_label))


@dataclass
class EvalReport:
    recall_micro: float
    recall_macro: float
    recall_macro_rare: float
    rank_k_accuracy: dict                 # k -> accuracy
    per_class_recall: dict                # class id -> recall (present classes)
    confusion: np.ndarray                 # class_count x class_count
    config: dict = field(default_factory=dict)
    acc_clf: float = None                 # classifier heads only

    def metrics_dict(self):
        d = {"recall_micro": round(self.recall_micro, 6),
             "recall_macro": round(self.recall_macro, 6),
             "recall_macro_rare": round(self.recall_macro_rare, 6)}
        for k in sorted(self.rank_k_accuracy):
            d[f"rank_{k}"] = round(self.rank_k_accuracy[k], 6)
        if self.acc_clf is not None:
            d["acc_clf"] = round(self.acc_clf, 6)
        return d

    def to_json(self):
        payload = {
            "metrics": self.metrics_dict(),
            "per_class_recall": {str(c): round(v, 6)
                                 for c, v in sorted(self.per_class_recall.items())},
            "confusion": self.confusion.astype(int).tolist(),
            "config": self.config,
        }
        return json.dumps(payload, indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        m = d["metrics"]
        ranks = {int(k.split("_")[1]): v for k, v in m.items()
                 if k.startswith("rank_")}
        return cls(recall_micro=m["recall_micro"],
                   recall_macro=m["recall_macro"],
                   recall_macro_rare=m["recall_macro_rare"],
                   rank_k_accuracy=ranks,
                   per_class_recall={int(c): v
                                     for c, v in d["per_class_recall"].items()},
                   confusion=np.array(d["confusion"]),
                   config=d.get("config", {}),
                   acc_clf=m.get("acc_clf"))


def compute_metrics(predictions, truths, neighbor_label_lists, rare_set,
                    class_count=None, rank_ks=DEFAULT_RANK_KS, config=None,
                    acc_clf=None):
    """Confusion matrix, micro/macro/rare-macro recall, and rank-k rates.

    Macro averages run only over classes present in the truth vector;
    the rare macro additionally restricts to the given rare set.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape or truths.size == 0:
        raise ValueError("predictions/truths must be nonempty and aligned")
    if len(neighbor_label_lists) != truths.size:
        raise ValueError("neighbor lists misaligned with truths")
    if class_count is None:
        class_count = int(max(predictions.max(), truths.max())) + 1

    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    for t, p in zip(truths, predictions):
        confusion[t, p] += 1

    present = np.unique(truths)
    per_class = {}
    for c in present:
        per_class[int(c)] = confusion[c, c] / confusion[c].sum()
    recall_micro = float(np.trace(confusion) / confusion.sum())
    recall_macro = float(np.mean([per_class[int(c)] for c in present]))
    rare_present = [int(c) for c in present if int(c) in rare_set]
    recall_macro_rare = float(np.mean([per_class[c] for c in rare_present])) \
        if rare_present else 0.0

    rank_acc = {}
    for k in rank_ks:
        hits = [rank_k_hit(t, nl, k) for t, nl in zip(truths, neighbor_label_lists)]
        rank_acc[int(k)] = float(np.mean(hits))

    return EvalReport(recall_micro=recall_micro, recall_macro=recall_macro,
                      recall_macro_rare=recall_macro_rare,
                      rank_k_accuracy=rank_acc, per_class_recall=per_class,
                      confusion=confusion, config=config or {},
                      acc_clf=acc_clf)


def embed_samples(params, samples, batch_size=32):
    """Run the encoder over samples; rows align with the sample order."""
    out = []
    for i in range(0, len(samples), batch_size):
        batch = np.stack([s.volume for s in samples[i:i + batch_size]])
        emb, _ = model_mod.forward(params, batch, want_cache=False)
        out.append(emb)
    return np.vstack(out)


def evaluate_model(params, dataset, k=DEFAULT_K, rare_set=None,
                   rank_ks=DEFAULT_RANK_KS, config=None):
    """Full evaluation protocol: embed train+val as the reference set,
    classify each test sample by KNN, and compute the metric suite.

    For classifier heads the pre-softmax embedding layer output doubles
    as the embedding and an additional argmax accuracy is reported.
    """
    if rare_set is None:
        from .data import rare_classes
        rare_set = rare_classes(dataset)
    ref_samples = dataset.split_samples("train") + dataset.split_samples("val")
    test_samples = dataset.split_samples("test")
    if not ref_samples or not test_samples:
        raise ValueError("dataset must contain train/val and test samples")

    ref = ReferenceSet(embeddings=embed_samples(params, ref_samples),
                       labels=[s.label for s in ref_samples])
    test_emb = embed_samples(params, test_samples)
    truths = np.array([s.label for s in test_samples], dtype=np.int64)

    max_rank = max(max(rank_ks), k)
    preds = np.zeros(truths.size, dtype=np.int64)
    neighbor_labels = []
    for i in range(truths.size):
        label, _ = knn_predict(test_emb[i], ref, k)
        preds[i] = label
        _, nbr = knn_predict(test_emb[i], ref, min(max_rank, ref.labels.size))
        neighbor_labels.append(ref.labels[nbr])

    acc_clf = None
    if params.config.head_mode == model_mod.HEAD_LOGITS:
        acc_clf = float(np.mean(np.argmax(test_emb, axis=1) == truths))

    echo = {"k": k, "rare_classes": sorted(int(c) for c in rare_set),
            "rank_ks": [int(x) for x in rank_ks]}
    if config:
        echo.update(config)
    return compute_metrics(preds, truths, neighbor_labels, rare_set,
                           class_count=dataset.class_count, rank_ks=rank_ks,
                           config=echo, acc_clf=acc_clf)
