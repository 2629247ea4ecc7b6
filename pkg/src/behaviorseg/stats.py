"""Significance tests and clustering agreement."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p_value: float
    degenerate: bool = False


def welch_test(x, y) -> WelchResult:
    """Two-sided Welch unequal-variance t-test with Welch-Satterthwaite df.

    When both samples have zero variance the test is degenerate: p = 1 if the
    means agree, else p = 0. Samples with fewer than two values give p = NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = len(x), len(y)
    if nx < 2 or ny < 2:
        return WelchResult(math.nan, math.nan, math.nan, True)
    mx, my = x.mean(), y.mean()
    vx = ((x - mx) ** 2).sum() / (nx - 1)
    vy = ((y - my) ** 2).sum() / (ny - 1)
    ax, ay = vx / nx, vy / ny
    se2 = ax + ay
    if se2 <= 0:
        same = mx == my
        return WelchResult(0.0 if same else math.copysign(math.inf, my - mx), math.nan, 1.0 if same else 0.0, True)
    t = (my - mx) / math.sqrt(se2)
    # Welch-Satterthwaite, written in variance fractions so tiny variances cannot underflow
    fx, fy = ax / se2, ay / se2
    df = 1.0 / (fx * fx / (nx - 1) + fy * fy / (ny - 1))
    # two-sided tail of Student's t: P(|T| > |t|) = I_{df/(df+t^2)}(df/2, 1/2)
    p = float(special.betainc(df / 2, 0.5, df / (df + t * t)))
    return WelchResult(float(t), float(df), min(max(p, 0.0), 1.0))


def _welch_t_rows(Z, nx):
    """Welch t statistic for each row of Z split as [:nx] vs [nx:]."""
    a, b = Z[:, :nx], Z[:, nx:]
    ma, mb = a.mean(axis=1), b.mean(axis=1)
    va, vb = a.var(axis=1, ddof=1), b.var(axis=1, ddof=1)
    se = np.sqrt(va / a.shape[1] + vb / b.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        return (mb - ma) / se


def permutation_pvalue(x, y, n_resamples: int = 100_000, seed: int = 0, chunk: int = 10_000) -> float:
    """Two-sided permutation p-value of the Welch t statistic.

    Arm labels are reshuffled ``n_resamples`` times; the p-value counts
    shuffles whose |t| is at least the observed |t| (observed included).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pooled = np.concatenate([x, y])
    nx = len(x)
    observed = abs(_welch_t_rows(pooled[None, :], nx)[0])
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_resamples:
        m = min(chunk, n_resamples - done)
        idx = rng.permuted(np.tile(np.arange(len(pooled)), (m, 1)), axis=1)
        t = np.abs(_welch_t_rows(pooled[idx], nx))
        hits += int(np.sum(t >= observed * (1 - 1e-12)))
        done += m
    return (hits + 1) / (n_resamples + 1)


def _comb2(v):
    v = np.asarray(v, dtype=np.float64)
    return v * (v - 1) / 2


def adjusted_rand_index(labels_true, labels_pred) -> float:
    """Chance-corrected pair-counting agreement between two labelings."""
    a = np.asarray(labels_true)
    b = np.asarray(labels_pred)
    if a.shape != b.shape:
        raise ValueError("labelings differ in length")
    n = len(a)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if n else 0, bi.max() + 1 if n else 0))
    np.add.at(table, (ai, bi), 1)
    index = _comb2(table).sum()
    rows = _comb2(table.sum(axis=1)).sum()
    cols = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    if total == 0:
        return 1.0
    expected = rows * cols / total
    maximum = (rows + cols) / 2
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))
