"""Alignment of principal-component subspaces between two activation sets.

Each activation sample is flattened; components come from a deterministic
SVD with a sign convention (largest-magnitude entry positive). Alignment is
the mean absolute cosine between index-matched component pairs.
"""

import numpy as np


class RankDeficientError(ValueError):
    """Raised when a set has fewer effective dimensions than requested."""


def principal_components(samples: np.ndarray, k: int) -> np.ndarray:
    """Top-k principal components of (n_samples, dim) data, rows orthonormal.

    Sign-fixed so the largest-magnitude entry of each component is positive;
    raises RankDeficientError instead of padding when rank < k.
    """
    if samples.ndim != 2:
        raise ValueError("samples must be 2-D (n_samples, dim)")
    n = samples.shape[0]
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} samples for k={k}, got {n}")
    centered = samples - samples.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(centered.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int((s > tol).sum())
    if rank < k:
        raise RankDeficientError(f"effective rank {rank} < requested k={k}")
    comps = vt[:k]
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return comps


def pca_alignment(acts_a, acts_b, ks) -> dict:
    """Mean |cosine| between matched top-k components of two activation sets.

    Args:
        acts_a, acts_b: iterables of activation tensors/arrays (flattened per
            sample), at least max(ks) + 1 samples each.
        ks: list of subspace sizes.

    Returns:
        {k: mean absolute cosine over the top k matched pairs}.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("ks must contain positive integers")
    a = np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for x in acts_a])
    b = np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for x in acts_b])
    if a.shape[1] != b.shape[1]:
        raise ValueError("activation dimensions differ between sets")
    k_max = ks[-1]
    comps_a = principal_components(a, k_max)
    comps_b = principal_components(b, k_max)
    cos = np.abs(np.sum(comps_a * comps_b, axis=1))
    return {k: float(cos[:k].mean()) for k in ks}
