"""k-means segmentation, choice of K, and segment profiling/naming.

Lloyd iterations run on the kernels in :mod:`behaviorseg._kernels` (compiled
when available). Results are deterministic for a given seed and backend.
"""
from __future__ import annotations

import csv
import logging
import math
import re
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import (
    DegenerateVariance,
    DimensionMismatch,
    EmptyCluster,
    KTooSmall,
    TooFewPoints,
)
from .features import FREQUENCY_COLUMNS, FeatureMatrix
from .seeding import derive_seed

log = logging.getLogger(__name__)

DEFAULT_RESTARTS = 10
DEFAULT_MAX_ITER = 300
DEFAULT_TOL = 1e-6
DEFAULT_Z_THRESHOLD = 1.0


def _as_points(scores) -> np.ndarray:
    X = scores.values if isinstance(scores, FeatureMatrix) else scores
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch("scores must be a 2-D array")
    return X


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray
    wcss: float
    seed: int
    iterations_run: int
    converged: bool = True
    wcss_history: tuple = ()

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def predict(self, scores) -> np.ndarray:
        X = _as_points(scores)
        if X.shape[1] != self.dim:
            raise DimensionMismatch(f"points have {X.shape[1]} dims, model has {self.dim}")
        return _kernels.assign_labels(X, np.ascontiguousarray(self.centroids))[0]


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding (one candidate per centre)."""
    n = X.shape[0]
    centres = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centres[0] = X[first]
    d2 = np.full(n, np.inf)
    _kernels.update_min_sq_dist(X, np.ascontiguousarray(centres[0]), d2)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centres[j] = X[idx]
        _kernels.update_min_sq_dist(X, np.ascontiguousarray(centres[j]), d2)
    return centres


def _repair_empty(X, labels, d2, C):
    """Reseed each empty cluster with the point farthest from its centroid."""
    k = C.shape[0]
    counts = np.bincount(labels, minlength=k)
    for j in np.nonzero(counts == 0)[0]:
        movable = counts[labels] > 1
        cand = np.where(movable, d2, -1.0)
        i = int(np.argmax(cand))
        counts[labels[i]] -= 1
        counts[j] = 1
        labels[i] = j
        d2[i] = 0.0
        C[j] = X[i]
    return labels, d2, C


def _lloyd(X, C, max_iter, tol):
    k = C.shape[0]
    C = np.ascontiguousarray(C, dtype=np.float64).copy()
    labels, d2 = _kernels.assign_labels(X, C)
    labels, d2, C = _repair_empty(X, labels, d2, C)
    wcss = float(d2.sum())
    history = [wcss]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        sums, counts = _kernels.centroid_sums(X, labels, k)
        C = np.ascontiguousarray(sums / counts[:, None])
        new_labels, d2 = _kernels.assign_labels(X, C)
        new_labels, d2, C = _repair_empty(X, new_labels, d2, C)
        new_wcss = float(d2.sum())
        history.append(new_wcss)
        stable = np.array_equal(new_labels, labels)
        labels = new_labels
        if stable:
            converged = True
            break
        if wcss - new_wcss <= tol * wcss:
            converged = True
            break
        wcss = new_wcss
    return C, labels, float(d2.sum()), it, converged, tuple(history)


def _hartigan(X, labels, k, max_passes):
    """Single-point transfers that lower WCSS (Hartigan's criterion).

    Moving x from cluster a to b changes WCSS by
    ``n_b/(n_b+1) |x-c_b|^2 - n_a/(n_a-1) |x-c_a|^2``. Runs passes of
    :func:`_kernels.hartigan_pass` until one makes no move.
    """
    labels = labels.copy()
    moves = 0
    for _ in range(max_passes):
        sums, counts = _kernels.centroid_sums(X, labels, k)
        # fresh sums each pass drop round-off from the incremental updates
        made = _kernels.hartigan_pass(X, labels, sums, counts.astype(np.float64))
        moves += made
        if made == 0:
            break
    return labels, moves


def _fit_once(X, C0, max_iter, tol):
    C, labels, wcss, it, conv, hist = _lloyd(X, C0, max_iter, tol)
    k = C.shape[0]
    if k < 2:
        return C, wcss, it, conv, hist
    labels, moves = _hartigan(X, labels, k, max_iter)
    if moves == 0:
        return C, wcss, it, conv, hist
    sums, counts = _kernels.centroid_sums(X, labels, k)
    C2, _, wcss, it2, conv, hist2 = _lloyd(X, sums / counts[:, None], max_iter, tol)
    return C2, wcss, it + it2, conv, hist + hist2


def kmeans_fit(
    scores,
    K: int,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> KMeansModel:
    """Best-of-``restarts`` Lloyd's algorithm with k-means++ seeding.

    Each run stops when assignments stop changing or the relative WCSS
    improvement falls below ``tol``; the partition is then polished with
    Hartigan single-point transfers and Lloyd is re-run to a fixed point.
    The run with the lowest WCSS wins; ties keep the earliest restart.
    """
    X = _as_points(scores)
    if K < 1:
        raise TooFewPoints("K must be at least 1")
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    if X.shape[0] < K:
        raise TooFewPoints(f"{X.shape[0]} points cannot form {K} clusters")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(derive_seed(seed, K, r))
        C0 = kmeans_plusplus(X, K, rng)
        C, wcss, it, conv, hist = _fit_once(X, C0, max_iter, tol)
        if best is None or wcss < best.wcss:
            best = KMeansModel(C, wcss, seed, it, conv, hist)
    log.debug("k-means K=%d seed=%d wcss=%.6g after %d iterations", K, seed, best.wcss, best.iterations_run)
    return best


def assign_cluster(point, model: KMeansModel) -> int:
    """Nearest centroid of one point; ties go to the lowest index."""
    x = np.asarray(point, dtype=np.float64).reshape(1, -1)
    return int(model.predict(x)[0])


def _spherical_loglik(X, model):
    n, p = X.shape
    K = model.K
    labels, d2 = _kernels.assign_labels(X, np.ascontiguousarray(model.centroids))
    wcss = float(d2.sum())
    if n <= K:
        raise DegenerateVariance(f"need more points than clusters (n={n}, K={K})")
    sigma2 = wcss / (p * (n - K))
    if not sigma2 > 0:
        raise DegenerateVariance("pooled variance is zero")
    counts = np.bincount(labels, minlength=K)
    nz = counts[counts > 0]
    loglik = float(np.sum(nz * np.log(nz / n)))
    loglik -= n * p / 2 * math.log(2 * math.pi * sigma2)
    loglik -= wcss / (2 * sigma2)
    return loglik, n, p


def bic_score(scores, model: KMeansModel) -> float:
    """BIC of k-means read as a spherical Gaussian mixture with shared variance.

    ``-2 ln L + (K p + K) ln n`` with the pooled variance
    ``wcss / (p (n - K))``. Lower is better.
    """
    X = _as_points(scores)
    loglik, n, p = _spherical_loglik(X, model)
    q = model.K * p + model.K
    return -2.0 * loglik + q * math.log(n)


def davies_bouldin(scores, model: KMeansModel) -> float:
    """Mean over clusters of the worst ``(S_i + S_j) / M_ij`` ratio.

    ``S_i`` is the mean distance of cluster ``i``'s points to its centroid and
    ``M_ij`` the distance between centroids.
    """
    X = _as_points(scores)
    K = model.K
    if K < 2:
        raise KTooSmall("Davies-Bouldin index needs at least 2 clusters")
    C = np.ascontiguousarray(model.centroids)
    labels, d2 = _kernels.assign_labels(X, C)
    counts = np.bincount(labels, minlength=K)
    if np.any(counts == 0):
        raise EmptyCluster(f"clusters {np.nonzero(counts == 0)[0].tolist()} have no points")
    S = np.bincount(labels, weights=np.sqrt(d2), minlength=K) / counts
    diff = C[:, None, :] - C[None, :, :]
    M = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    num = S[:, None] + S[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        R = np.where(M > 0, num / np.where(M > 0, M, 1.0), np.where(num > 0, np.inf, 0.0))
    np.fill_diagonal(R, -np.inf)
    return float(R.max(axis=1).mean())


@dataclass(frozen=True)
class KSelectionRow:
    K: int
    wcss: float
    bic: float
    davies_bouldin: float | None


@dataclass(frozen=True)
class KSelection:
    rows: tuple
    recommended_k: int
    db_k: int | None
    models: dict = field(repr=False, default_factory=dict)

    @property
    def criteria_disagree(self) -> bool:
        return self.db_k is not None and self.db_k != self.recommended_k

    def wcss_monotone(self, slack: float = 1e-6) -> bool:
        w = [r.wcss for r in self.rows]
        tol = slack * w[0]
        return all(b <= a + tol for a, b in zip(w, w[1:]))

    def to_csv(self, path_or_buf):
        own = not hasattr(path_or_buf, "write")
        fh = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["K", "wcss", "bic", "davies_bouldin"])
            for r in self.rows:
                w.writerow([r.K, repr(r.wcss), repr(r.bic), "" if r.davies_bouldin is None else repr(r.davies_bouldin)])
        finally:
            if own:
                fh.close()

    def to_dict(self):
        return {
            "recommended_k": self.recommended_k,
            "davies_bouldin_k": self.db_k,
            "criteria_disagree": self.criteria_disagree,
            "curve": [
                {"K": r.K, "wcss": r.wcss, "bic": r.bic, "davies_bouldin": r.davies_bouldin}
                for r in self.rows
            ],
        }


def select_k(
    scores,
    k_range,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> KSelection:
    """Fit every candidate K and score it by BIC and Davies-Bouldin.

    The recommendation is BIC's argmin; when Davies-Bouldin prefers another
    K both are reported and nothing is averaged.
    """
    X = _as_points(scores)
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 1 or ks[-1] > X.shape[0]:
        raise TooFewPoints(f"K range {ks[:1]}..{ks[-1:]} outside [1, {X.shape[0]}]")
    rows, models = [], {}
    for k in ks:
        model = kmeans_fit(X, k, seed=seed, restarts=restarts, max_iter=max_iter, tol=tol)
        db = davies_bouldin(X, model) if k >= 2 else None
        rows.append(KSelectionRow(k, model.wcss, bic_score(X, model), db))
        models[k] = model
        log.info("K=%d wcss=%.6g bic=%.6g db=%s", k, model.wcss, rows[-1].bic, db)
    best_bic = min(rows, key=lambda r: (r.bic, r.K)).K
    with_db = [r for r in rows if r.davies_bouldin is not None]
    best_db = min(with_db, key=lambda r: (r.davies_bouldin, r.K)).K if with_db else None
    if best_db is not None and best_db != best_bic:
        log.warning("criteria disagree: BIC prefers K=%d, Davies-Bouldin K=%d", best_bic, best_db)
    return KSelection(tuple(rows), best_bic, best_db, models)


# ---------------------------------------------------------------------------
# profiling and naming


@dataclass(frozen=True)
class SegmentProfile:
    segment: int
    size: int
    share: float
    means: dict
    z: dict
    name: str | None = None
    empty: bool = False

    def to_dict(self):
        return {
            "segment": self.segment,
            "name": self.name,
            "size": self.size,
            "share": self.share,
            "empty": self.empty,
            "means": self.means,
            "z": self.z,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["segment"]), int(d["size"]), float(d["share"]),
            {k: float(v) for k, v in d["means"].items()},
            {k: float(v) for k, v in d["z"].items()},
            d.get("name"), bool(d.get("empty", False)),
        )


def profile_segments(labels, stage2: FeatureMatrix, K: int) -> list[SegmentProfile]:
    """Per-segment means of the stage-2 metrics and their z-scores.

    z = (segment mean - population mean) / population sample sd, with the
    population being every row of ``stage2``.
    """
    labels = np.asarray(labels)
    if len(labels) != stage2.n:
        raise DimensionMismatch("labels and matrix rows differ in length")
    V = stage2.values
    pop_mean = V.mean(axis=0) if stage2.n else np.zeros(stage2.p)
    pop_sd = V.std(axis=0, ddof=1) if stage2.n > 1 else np.zeros(stage2.p)
    flat = [c for c, s in zip(stage2.columns, pop_sd) if not s > 0]
    if flat:
        warnings.warn(f"zero population sd for {', '.join(flat)}; z-scores set to 0", stacklevel=2)
    profiles = []
    for k in range(K):
        rows = V[labels == k]
        size = rows.shape[0]
        if size == 0:
            warnings.warn(f"segment {k} is empty", stacklevel=2)
            means = {c: float("nan") for c in stage2.columns}
            profiles.append(SegmentProfile(k, 0, 0.0, means, {c: 0.0 for c in stage2.columns}, empty=True))
            continue
        mu = rows.mean(axis=0)
        z = np.zeros_like(mu)
        ok = pop_sd > 0
        z[ok] = (mu[ok] - pop_mean[ok]) / pop_sd[ok]
        profiles.append(
            SegmentProfile(
                k, size, size / stage2.n,
                dict(zip(stage2.columns, map(float, mu))),
                dict(zip(stage2.columns, map(float, z))),
            )
        )
    return profiles


_FAMILY_RE = re.compile(r"^(?P<page>.+?)_(cpv|apv|clicks?)(_per_session)?$")


def metric_family(column: str) -> str | None:
    """Page-type family of an engagement column; None for frequency columns."""
    if column in FREQUENCY_COLUMNS:
        return None
    m = _FAMILY_RE.match(column)
    page = m.group("page") if m else column.removesuffix("_per_session")
    return page.replace("_", " ").title()


def family_scores(profile: SegmentProfile) -> dict[str, float]:
    out: dict[str, float] = {}
    for col, z in profile.z.items():
        fam = metric_family(col)
        if fam is not None:
            out[fam] = max(out.get(fam, -math.inf), z)
    return out


def auto_name(profile: SegmentProfile, z_threshold: float = DEFAULT_Z_THRESHOLD) -> str:
    fam = family_scores(profile)
    ranked = sorted(fam.items(), key=lambda kv: (-kv[1], kv[0]))
    top = [f for f, z in ranked if z >= z_threshold][:2]
    if not top:
        return "Tourists"
    if len(top) == 1:
        rest = [z for f, z in fam.items() if f != top[0]]
        return f"{top[0]} Only" if all(z < 0 for z in rest) else top[0]
    return " & ".join(top)


def name_segments(
    profiles,
    z_threshold: float = DEFAULT_Z_THRESHOLD,
    override: dict | None = None,
) -> list[SegmentProfile]:
    """Attach behavioral names; overrides (segment id -> name) win; names are made unique."""
    override = {int(k): v for k, v in (override or {}).items()}
    used: dict[str, int] = {}
    out = []
    for prof in profiles:
        name = override.get(prof.segment) or auto_name(prof, z_threshold)
        base = name
        while name in used:
            used[base] += 1
            name = f"{base} {used[base]}"
        used.setdefault(name, 1)
        out.append(replace(prof, name=name))
    return out
