"""Training objectives: batch-hard triplet, batch-all triplet, NT-Xent,
and softmax cross-entropy.

Each loss returns a LossResult carrying the scalar value and the analytic
gradient with respect to its input matrix, so the optimizer never needs
autodiff. Triplet losses reduce by sum; NT-Xent and cross-entropy by mean
(matching their source definitions) -- the scale difference is absorbed by
the learning rate.
"""

from dataclasses import dataclass, field

import numpy as np

from .numcore import pairwise_euclidean, softmax_rows

DEFAULT_MARGIN = 1.0
DEFAULT_TEMPERATURE = 0.5


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    active_terms: int = 0
    skipped_singletons: int = 0


@dataclass
class LabeledBatch:
    """Embeddings with parallel integer class labels."""
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be 2-D (n x L)")
        if self.labels.shape != (self.embeddings.shape[0],):
            raise ValueError("labels length must match embedding rows")


@dataclass
class ContrastivePairBatch:
    """Two augmented views per source image, row i paired with pair_of[i]."""
    projections: np.ndarray
    pair_of: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        self.projections = np.asarray(self.projections, dtype=np.float64)
        self.pair_of = np.asarray(self.pair_of, dtype=np.int64)
        n = self.projections.shape[0]
        if self.pair_of.shape != (n,):
            raise ValueError("pair_of length must match projection rows")
        idx = np.arange(n)
        if np.any(self.pair_of == idx) or np.any(self.pair_of[self.pair_of] != idx):
            raise ValueError("pair_of must be a fixed-point-free involution")


def _check_triplet_batch(batch, allow_singletons):
    labels = batch.labels
    n = labels.shape[0]
    if n < 4:
        raise ValueError(f"triplet losses need n >= 4, got n={n}")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ValueError("triplet losses need at least 2 distinct classes")
    singles = classes[counts < 2]
    if singles.size and not allow_singletons:
        raise ValueError(
            f"class {singles[0]} has a single batch member; every class "
            "needs at least 2 examples for a positive pair")
    return singles


def _distance_grad_pair(E, D, a, b):
    # d/dE_a of ||E_a - E_b||; zero subgradient at coincident points
    d = D[a, b]
    if d <= 0.0:
        return np.zeros(E.shape[1])
    return (E[a] - E[b]) / d


def batch_hard_triplet(batch, margin=DEFAULT_MARGIN, clamp=True,
                       allow_singletons=False):
    """Hardest-positive minus hardest-negative hinge, summed over anchors.

    Per anchor: max same-class distance - min other-class distance + margin,
    clamped at zero when `clamp` (the default). Ties in the hardest
    positive/negative pick the lowest row index, so gradients are
    deterministic.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    singles = _check_triplet_batch(batch, allow_singletons)
    E, labels = batch.embeddings, batch.labels
    n, L = E.shape
    D = pairwise_euclidean(E)
    same = labels[:, None] == labels[None, :]

    value = 0.0
    grad = np.zeros_like(E)
    active = 0
    skipped = 0
    for a in range(n):
        if labels[a] in singles:
            skipped += 1
            continue
        pos_mask = same[a].copy()
        pos_mask[a] = False
        neg_mask = ~same[a]
        dpos = np.where(pos_mask, D[a], -np.inf)
        dneg = np.where(neg_mask, D[a], np.inf)
        p = int(np.argmax(dpos))  # first max wins ties
        q = int(np.argmin(dneg))
        term = D[a, p] - D[a, q] + margin
        if clamp and term <= 0.0:
            continue
        value += term
        if term > 0.0:
            active += 1
        gp = _distance_grad_pair(E, D, a, p)
        gq = _distance_grad_pair(E, D, a, q)
        grad[a] += gp - gq
        grad[p] -= gp
        grad[q] += gq
    return LossResult(value, grad, active, skipped)


def batch_all_triplet(batch, margin=DEFAULT_MARGIN, clamp=True,
                      allow_singletons=False, literal=False):
    """Hinge over every (anchor, positive, negative) triple, summed.

    With `literal=True` the positive-pair term is dropped and each
    anchor/negative pair contributes distance + margin directly (the
    unmined variant); the default is the standard mined objective.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    singles = _check_triplet_batch(batch, allow_singletons)
    E, labels = batch.embeddings, batch.labels
    n, L = E.shape
    D = pairwise_euclidean(E)
    same = labels[:, None] == labels[None, :]

    value = 0.0
    grad = np.zeros_like(E)
    active = 0
    skipped = 0

    if literal:
        # unmined form: anchor (t,k) against other-class rows whose
        # within-class position differs from k; no positive-pair term
        pos_in_class = np.zeros(n, dtype=int)
        seen = {}
        for r in range(n):
            pos_in_class[r] = seen.get(labels[r], 0)
            seen[labels[r]] = pos_in_class[r] + 1
        for a in range(n):
            if labels[a] in singles:
                skipped += 1
                continue
            for q in range(n):
                if same[a, q] or pos_in_class[q] == pos_in_class[a]:
                    continue
                value += D[a, q] + margin
                active += 1
                gq = _distance_grad_pair(E, D, a, q)
                grad[a] += gq
                grad[q] -= gq
        return LossResult(value, grad, active, skipped)

    for a in range(n):
        if labels[a] in singles:
            skipped += 1
            continue
        for p in range(n):
            if p == a or not same[a, p]:
                continue
            for q in range(n):
                if same[a, q]:
                    continue
                term = D[a, p] - D[a, q] + margin
                if clamp and term <= 0.0:
                    continue
                value += term
                if term > 0.0:
                    active += 1
                gp = _distance_grad_pair(E, D, a, p)
                gq = _distance_grad_pair(E, D, a, q)
                grad[a] += gp - gq
                grad[p] -= gp
                grad[q] += gq
    return LossResult(value, grad, active, skipped)


def nt_xent(batch):
    """Normalized temperature-scaled cross entropy over cosine similarities.

    Row i's positive is pair_of[i]; all other rows (excluding i itself)
    are negatives. The per-row losses are averaged over all 2N rows.
    """
    tau = batch.temperature
    if tau <= 0:
        raise ValueError("temperature must be positive")
    Z = batch.projections
    pair = batch.pair_of
    n = Z.shape[0]
    if n < 4:
        raise ValueError("nt_xent needs at least 2 pairs (4 rows)")

    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("nt_xent projections must be nonzero rows")
    U = Z / norms[:, None]
    S = U @ U.T  # cosine similarities

    logits = S / tau
    np.fill_diagonal(logits, -np.inf)  # i is never its own candidate
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    expL = np.exp(shifted)
    P = expL / np.sum(expL, axis=1, keepdims=True)

    rows = np.arange(n)
    value = float(np.mean(-np.log(P[rows, pair])))

    # dL/dS[i,j] = (P[i,j] - 1[j == pair(i)]) / (tau * n) for j != i
    dS = P.copy()
    dS[rows, pair] -= 1.0
    dS /= tau * n
    np.fill_diagonal(dS, 0.0)

    # S = U U^T: dL/dU = (dS + dS^T) U
    dU = (dS + dS.T) @ U
    # back through row normalization: dZ_i = (dU_i - (dU_i . u_i) u_i) / ||z_i||
    inner = np.sum(dU * U, axis=1, keepdims=True)
    grad = (dU - inner * U) / norms[:, None]
    return LossResult(value, grad, active_terms=n)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under row softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels length must match logit rows")
    if np.any(labels < 0) or np.any(labels >= C):
        bad = labels[(labels < 0) | (labels >= C)][0]
        raise ValueError(f"label {bad} outside [0, {C})")
    P = softmax_rows(logits)
    rows = np.arange(n)
    value = float(np.mean(-np.log(np.maximum(P[rows, labels], 1e-300))))
    grad = P.copy()
    grad[rows, labels] -= 1.0
    grad /= n
    return LossResult(value, grad, active_terms=n)
