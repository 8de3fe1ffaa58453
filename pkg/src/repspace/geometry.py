"""Low-dimensional geometry of the embedding matrix.

Weighted metric multidimensional scaling by stress majorization, plus a
variance-fraction scree of the embedding rows. Per-representation weights
let a multi-layer model count once in aggregate instead of once per layer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .tournament import EmbeddingMatrix

logger = logging.getLogger(__name__)

_STRESS_SLACK = 1e-9  # relative wiggle allowed by the monotonicity assertion


@dataclass
class EmbeddingCoords:
    """MDS configuration: coords are (n, k), centered."""

    coords: np.ndarray
    stress: float
    dim_variances: np.ndarray  # fraction of embedded variance per dimension
    rep_ids: list[str]

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] < 1:
            raise ValueError("coords must be (n, k) with k >= 1")
        if not np.isfinite(self.stress):
            raise ValueError("stress must be finite")

    @property
    def k(self) -> int:
        return self.coords.shape[1]

    def dim(self, d: int) -> np.ndarray:
        return self.coords[:, d]


def row_distances(emb: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    """Euclidean distances between rows; symmetric with zero diagonal."""
    m = emb.matrix if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)
    sq = (m**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (m @ m.T)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def _weighted_stress(x, d_target, vmat):
    d = row_distances(x)
    diff = d_target - d
    return 0.5 * float((vmat * diff**2).sum())  # i<j pairs counted once


def _classical_start(d, k, weights):
    """Weight-consistent classical scaling (reduces to the standard
    double-centering start for uniform weights); keeps heavily downweighted
    points from dominating the initial configuration."""
    n = d.shape[0]
    j = np.eye(n) - np.outer(np.ones(n), weights) / weights.sum()
    b = -0.5 * j @ (d**2) @ j.T
    root_w = np.sqrt(weights)
    s = root_w[:, None] * b * root_w[None, :]
    evals, evecs = np.linalg.eigh((s + s.T) / 2)
    order = np.argsort(evals)[::-1][:k]
    lam = np.clip(evals[order], 0.0, None)
    return (evecs[:, order] / root_w[:, None]) * np.sqrt(lam)


def weighted_mds(
    d: np.ndarray,
    weights: np.ndarray,
    k: int = 2,
    rep_ids: list[str] | None = None,
    tol: float = 1e-9,
    max_iter: int = 1000,
) -> EmbeddingCoords:
    """Minimize weighted stress by majorization from a classical start.

    Pair (i, j) carries weight w_i * w_j in the stress. The majorization
    update never increases stress (asserted each iteration); iteration stops
    when the relative stress decrease falls below ``tol``. Output columns
    are ordered by embedded variance and centered.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n) or not np.isfinite(d).all():
        raise ValueError("distance matrix must be square and finite")
    if not np.allclose(d, d.T) or not np.allclose(np.diag(d), 0.0):
        raise ValueError("distance matrix must be symmetric with zero diagonal")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,) or (weights <= 0).any():
        raise ValueError("weights must be positive, one per representation")
    if not (1 <= k <= n):
        raise ValueError(f"k must be in [1, {n}]")
    vmat = np.outer(weights, weights)
    np.fill_diagonal(vmat, 0.0)
    v = np.diag(vmat.sum(axis=1)) - vmat
    v_pinv = np.linalg.pinv(v)
    # stress of the all-coincident configuration; sets the fp noise floor
    stress_scale = 0.5 * float((vmat * d**2).sum())

    x = _classical_start(d, k, weights)
    if x.shape[1] < k:  # degenerate rank; pad with zero columns
        x = np.hstack([x, np.zeros((n, k - x.shape[1]))])
    stress = _weighted_stress(x, d, vmat)
    for iteration in range(max_iter):
        dist = row_distances(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 0, d / np.where(dist > 0, dist, 1.0), 0.0)
        b = -vmat * ratio
        np.fill_diagonal(b, 0.0)
        np.fill_diagonal(b, -b.sum(axis=1))
        x_new = v_pinv @ (b @ x)
        new_stress = _weighted_stress(x_new, d, vmat)
        assert new_stress <= stress * (1 + _STRESS_SLACK) + 1e-14 * stress_scale, (
            f"stress increased at iteration {iteration}: {stress} -> {new_stress}"
        )
        x = x_new
        converged = (stress - new_stress) <= tol * max(stress, np.finfo(float).tiny)
        stress = new_stress
        if converged:
            break
    # center and order output dimensions by the weighted point cloud, so a
    # downweighted representation cannot define the principal dimension
    wnorm = weights / weights.sum()
    x = x - wnorm @ x
    col_var = wnorm @ x**2
    order = np.argsort(col_var)[::-1]
    x = x[:, order]
    col_var = col_var[order]
    total = col_var.sum()
    fractions = col_var / total if total > 0 else np.zeros(k)
    return EmbeddingCoords(
        coords=x,
        stress=stress,
        dim_variances=fractions,
        rep_ids=list(rep_ids) if rep_ids is not None else [str(i) for i in range(n)],
    )


def scree(emb: EmbeddingMatrix | np.ndarray, k_max: int) -> np.ndarray:
    """Variance fractions of the leading principal factors of the rows.

    Rows are centered; fractions are eigenvalues of their covariance over
    the total variance, descending. A matrix with identical rows has no
    variance to explain and reports all-zero fractions.
    """
    m = emb.matrix if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)
    n = m.shape[0]
    if not (1 <= k_max <= n):
        raise ValueError(f"k_max must be in [1, {n}]")
    centered = m - m.mean(axis=0)
    cov = centered.T @ centered / n
    evals = np.linalg.eigvalsh(cov)[::-1]
    evals = np.clip(evals, 0.0, None)
    total = evals.sum()
    if total <= 0:
        logger.warning("scree: embedding rows are identical; reporting zero fractions")
        return np.zeros(k_max)
    return evals[:k_max] / total


def orient(coords: EmbeddingCoords, anchor_id: str, sign: str = "negative") -> EmbeddingCoords:
    """Fix per-dimension sign ambiguity using one anchor representation.

    Each dimension is flipped, if needed, so the anchor's coordinate takes
    the requested sign (the convention is stated for dimension 1 and applied
    to every dimension). Dimensions where the anchor sits exactly at 0 are
    left alone with a warning. Idempotent.
    """
    if sign not in ("negative", "positive"):
        raise ValueError("sign must be 'negative' or 'positive'")
    if anchor_id not in coords.rep_ids:
        raise ValueError(f"anchor {anchor_id!r} not among representations")
    idx = coords.rep_ids.index(anchor_id)
    want = -1.0 if sign == "negative" else 1.0
    flipped = coords.coords.copy()
    for dim in range(coords.k):
        value = coords.coords[idx, dim]
        if value == 0:
            logger.warning(
                "orient: anchor %s has coordinate 0 on dimension %d; left unflipped",
                anchor_id, dim + 1,
            )
            continue
        if np.sign(value) != want:
            flipped[:, dim] = -flipped[:, dim]
    return replace(coords, coords=flipped)
