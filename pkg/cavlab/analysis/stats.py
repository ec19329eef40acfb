import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata


def welch_test(a, b) -> float:
    """Two-sided Welch t-test p-value through the regularized incomplete beta function."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"Welch test needs at least 2 samples per group, got {len(a)} and {len(b)}")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 == 0.0:
        return 1.0 if diff == 0.0 else 0.0
    t2 = diff**2 / se2
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return float(np.clip(betainc(df / 2, 0.5, df / (df + t2)), 0.0, 1.0))


def pair_fraction(higher, lower) -> float:
    """Fraction of pairs (i, j) with higher[i] > lower[j]; ties count one half.

    Equals the Mann-Whitney U statistic over n1 * n2.
    """
    higher = np.asarray(higher, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    n1, n2 = len(higher), len(lower)
    if n1 == 0 or n2 == 0:
        raise ValueError("pair_fraction needs two non-empty samples")
    ranks = rankdata(np.concatenate([higher, lower]))
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2
    return float(u / (n1 * n2))
