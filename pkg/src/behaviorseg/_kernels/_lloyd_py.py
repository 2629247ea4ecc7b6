"""Pure numpy versions of the Lloyd kernels, same signatures as ``_lloyd``."""
import numpy as np

_CHUNK = 4096


def assign_labels(X, C):
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    n = X.shape[0]
    labels = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    for lo in range(0, n, _CHUNK):
        diff = X[lo:lo + _CHUNK, None, :] - C[None, :, :]
        dist = np.einsum("ikd,ikd->ik", diff, diff)
        # argmin returns the first minimum, so ties go to the lowest index
        lab = np.argmin(dist, axis=1)
        labels[lo:lo + _CHUNK] = lab
        d2[lo:lo + _CHUNK] = dist[np.arange(dist.shape[0]), lab]
    return labels, d2


def centroid_sums(X, labels, k):
    X = np.asarray(X, dtype=np.float64)
    sums = np.zeros((k, X.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, X)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    return sums, counts


def update_min_sq_dist(X, c, d2):
    diff = np.asarray(X, dtype=np.float64) - np.asarray(c, dtype=np.float64)
    np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)


def _sq_to_means(X, sums, counts):
    C = sums / counts[:, None]
    out = np.empty((X.shape[0], C.shape[0]))
    for lo in range(0, X.shape[0], _CHUNK):
        diff = X[lo:lo + _CHUNK, None, :] - C[None, :, :]
        out[lo:lo + _CHUNK] = np.einsum("ikd,ikd->ik", diff, diff)
    return out


def hartigan_pass(X, labels, sums, counts):
    X = np.asarray(X, dtype=np.float64)
    rows = np.arange(X.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = _sq_to_means(X, sums, counts)
        n_own = counts[labels]
        remove = np.where(n_own > 1, n_own / (n_own - 1.0), 0.0) * d2[rows, labels]
    add = (counts / (counts + 1.0))[None, :] * d2
    add[rows, labels] = np.inf
    gain = remove - add.min(axis=1)
    moves = 0
    for i in np.nonzero(gain > 1e-12 * remove)[0]:
        a = labels[i]
        if counts[a] <= 1:
            continue
        x = X[i]
        diff = x - sums / counts[:, None]
        dx = np.einsum("kd,kd->k", diff, diff)
        rem = counts[a] / (counts[a] - 1.0) * dx[a]
        cost = counts / (counts + 1.0) * dx
        cost[a] = np.inf
        b = int(np.argmin(cost))
        if cost[b] < rem * (1 - 1e-12):
            sums[a] -= x
            sums[b] += x
            counts[a] -= 1
            counts[b] += 1
            labels[i] = b
            moves += 1
    return moves
