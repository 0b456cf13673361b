"""Dense numeric primitives, deterministic RNG streams, and the
finite-difference gradient oracle.

Everything here operates on plain float64 numpy arrays and is pure:
no function mutates its inputs.
"""

import numpy as np

# Rows with norm below this are treated as degenerate by l2_normalize_rows.
DEGENERATE_NORM_EPS = 1e-12


class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Identical (seed, stream_id) pairs reproduce the same draw sequence
    bit-for-bit across runs and platforms (Philox). Distinct stream ids
    give statistically independent sequences, so per-sample augmentation
    can derive one stream per item regardless of iteration order.

    Instances are stateful (the underlying counter advances) and must not
    be shared across concurrent tasks; derive substreams instead.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(
            np.random.Philox(key=(self.seed << 64) | self.stream_id))

    def derive(self, stream_id):
        """Fresh independent stream with the same seed."""
        return RngStream(self.seed, stream_id)

    def child(self, label):
        """Independent substream keyed by this stream's id and a label.

        Hierarchical: children of distinct parents never collide even
        when their labels match.
        """
        payload = self.stream_id.to_bytes(8, "little") + str(label).encode("utf-8")
        return RngStream(self.seed, fnv1a64(payload))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self.gen.permutation(x)


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash; used for volume checksums and stream ids."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def stream_id_for(name: str) -> int:
    """Stable 64-bit stream id derived from a string (e.g. a sample id)."""
    return fnv1a64(name.encode("utf-8"))


def _as_matrix(x):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def pairwise_euclidean(E):
    """All-pairs Euclidean distances between the rows of E (n x L -> n x n).

    Squared distances are clamped at zero before the square root so the
    result is never NaN from cancellation; the diagonal is exactly zero.
    """
    E = _as_matrix(E)
    if E.shape[0] < 1 or E.shape[1] < 1:
        raise ValueError("pairwise_euclidean requires a nonempty matrix")
    sq = np.sum(E * E, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (E @ E.T)
    np.maximum(d2, 0.0, out=d2)
    D = np.sqrt(d2)
    np.fill_diagonal(D, 0.0)
    return 0.5 * (D + D.T)


def l2_normalize_rows(E):
    """Scale each row to unit Euclidean norm.

    A row with norm < 1e-12 cannot be normalized; it is replaced by the
    first standard basis vector so downstream distance math stays finite.
    """
    E = _as_matrix(E)
    norms = np.linalg.norm(E, axis=1)
    out = np.empty_like(E)
    ok = norms >= DEGENERATE_NORM_EPS
    out[ok] = E[ok] / norms[ok, None]
    if not np.all(ok):
        fallback = np.zeros(E.shape[1])
        fallback[0] = 1.0
        out[~ok] = fallback
    return out


def softmax_rows(Z):
    """Row-wise softmax with max-subtraction for overflow safety."""
    Z = _as_matrix(Z)
    shifted = Z - np.max(Z, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def finite_diff_grad(f, X, h=1e-6):
    """Central-difference gradient of a scalar function of a matrix.

    This is the oracle every analytic gradient in the package is checked
    against; it stays deliberately naive (one f evaluation pair per entry).
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    X = np.asarray(X, dtype=np.float64)
    grad = np.zeros_like(X)
    it = np.nditer(X, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = X.copy()
        xm = X.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return grad
