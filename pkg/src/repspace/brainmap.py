"""Linking the embedding geometry to response predictability.

Per-channel encoding performances are z-scored across representations and
projected onto the principal embedding dimension, giving each channel a
position along the low-dimensional representation axis. A leave-two-out
experiment measures whether embedding rows/columns carry enough information
to match each representation to its own performance pattern: a learner fit
on the other representations predicts both held-out performance vectors, and
the discriminability score rewards matching each prediction to its own
representation rather than the partner's.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import EmbeddingCoords
from .tournament import EmbeddingMatrix

logger = logging.getLogger(__name__)


@dataclass
class PerformanceProfile:
    """Encoding performances (representation x channel) with z-scored view."""

    subject_id: str
    rep_ids: list[str]
    raw: np.ndarray       # (n, channels) correlations
    zscored: np.ndarray   # per-channel z-scores across representations
    constant_channels: np.ndarray  # mask of channels with no variance


def perf_profile(rho_rows: np.ndarray, rep_ids: list[str], subject_id: str = "") -> PerformanceProfile:
    """Stack per-representation rho vectors and z-score each channel.

    Z-scoring uses the population (1/n) standard deviation; channels that
    are constant across representations come out all-zero and are flagged.
    """
    raw = np.asarray(rho_rows, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError("rho_rows must be (n reps, channels)")
    n = raw.shape[0]
    if n < 2:
        raise ValueError("need at least 2 representations to z-score")
    if len(rep_ids) != n:
        raise ValueError("rep_ids length does not match rho rows")
    mean = raw.mean(axis=0)
    sd = raw.std(axis=0)
    constant = sd == 0
    z = (raw - mean) / np.where(constant, 1.0, sd)
    z[:, constant] = 0.0
    return PerformanceProfile(
        subject_id=subject_id,
        rep_ids=list(rep_ids),
        raw=raw,
        zscored=z,
        constant_channels=constant,
    )


def project_dim1(profile: PerformanceProfile, coords: EmbeddingCoords) -> np.ndarray:
    """Dot each channel's z-scored profile with the first embedding dimension."""
    if coords.rep_ids != profile.rep_ids:
        raise ValueError("profile and coordinates disagree on representation order")
    return coords.dim(0) @ profile.zscored


def pair_embedding(emb: EmbeddingMatrix | np.ndarray, k: int, pair: tuple[int, int]) -> np.ndarray:
    """Row k then column k of the embedding, with the held-out pair excised.

    For pair (i, j) the entries at positions i and j are removed from both
    the row and the column (dropping the four entries [k==i or k==j] or
    plain cross terms), leaving exactly 2n - 4 elements, ordered
    row-remainder first, column-remainder second.
    """
    m = emb.matrix if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)
    i, j = pair
    if i == j:
        raise ValueError("held-out pair must contain two distinct representations")
    drop = [i, j]
    return np.concatenate([np.delete(m[k, :], drop), np.delete(m[:, k], drop)])


@dataclass
class PairLearner:
    """Least-squares map from pair embeddings to performance vectors."""

    pair: tuple[int, int]
    weights: np.ndarray    # (2n - 4, channels)
    intercept: np.ndarray  # (channels,)

    def predict(self, r: np.ndarray) -> np.ndarray:
        return np.asarray(r, dtype=np.float64) @ self.weights + self.intercept


def fit_pair_learner(
    emb: EmbeddingMatrix | np.ndarray,
    rho_rows: np.ndarray,
    pair: tuple[int, int],
) -> PairLearner:
    """Fit the leave-two-out learner on the n - 2 remaining representations.

    Minimum-norm least squares with an intercept: with ~n samples and 2n - 4
    features the system is underdetermined, so the pseudoinverse picks the
    smallest-weight interpolant.
    """
    m = emb.matrix if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)
    rho_rows = np.asarray(rho_rows, dtype=np.float64)
    n = m.shape[0]
    if n < 4:
        raise ValueError("need at least 4 representations to hold out a pair")
    i, j = pair
    if i == j:
        raise ValueError("held-out pair must contain two distinct representations")
    train_idx = [k for k in range(n) if k not in (i, j)]
    phi = np.vstack([pair_embedding(m, k, pair) for k in train_idx])
    targets = rho_rows[train_idx]
    phi_mean = phi.mean(axis=0)
    t_mean = targets.mean(axis=0)
    weights = np.linalg.pinv(phi - phi_mean) @ (targets - t_mean)
    intercept = t_mean - phi_mean @ weights
    return PairLearner(pair=(i, j), weights=weights, intercept=intercept)


def _corr_flat(a: np.ndarray, b: np.ndarray) -> float:
    """Correlation across channels; 0 when either side is constant."""
    ac = a - a.mean()
    bc = b - b.mean()
    na, nb = np.sqrt((ac**2).sum()), np.sqrt((bc**2).sum())
    if na == 0 or nb == 0:
        return 0.0
    return float((ac * bc).sum() / (na * nb))


def discriminability(
    learner: PairLearner,
    r_i: np.ndarray,
    r_j: np.ndarray,
    rho_i: np.ndarray,
    rho_j: np.ndarray,
) -> float:
    """Matched-minus-crossed correlation score for one held-out pair.

    [corr(pred_i, rho_i) + corr(pred_j, rho_j)]
    - [corr(pred_i, rho_j) + corr(pred_j, rho_i)], correlations across
    channels; constant vectors contribute 0. Symmetric in (i, j) by
    construction.
    """
    pred_i = learner.predict(r_i)
    pred_j = learner.predict(r_j)
    matched = _corr_flat(pred_i, rho_i) + _corr_flat(pred_j, rho_j)
    crossed = _corr_flat(pred_i, rho_j) + _corr_flat(pred_j, rho_i)
    return matched - crossed


def discriminability_matrix(
    emb: EmbeddingMatrix | np.ndarray,
    profile: PerformanceProfile,
) -> np.ndarray:
    """All-pairs leave-two-out scores; symmetric with zero diagonal.

    Each unordered pair is computed once and mirrored, so symmetry is exact.
    """
    m = emb.matrix if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)
    n = m.shape[0]
    if profile.raw.shape[0] != n:
        raise ValueError("profile does not match embedding size")
    scores = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            learner = fit_pair_learner(m, profile.raw, (i, j))
            value = discriminability(
                learner,
                pair_embedding(m, i, (i, j)),
                pair_embedding(m, j, (i, j)),
                profile.raw[i],
                profile.raw[j],
            )
            scores[i, j] = value
            scores[j, i] = value
    return scores


def majority_match(matrices: list[np.ndarray], threshold: int = 3) -> np.ndarray:
    """Percentage of partners matched in at least ``threshold`` subjects.

    For representation i, the fraction of partners j != i whose
    discriminability is positive in >= threshold of the per-subject
    matrices, as a percentage.
    """
    if not matrices:
        raise ValueError("need at least one subject matrix")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in matrices])
    n = stack.shape[1]
    if stack.shape[1:] != (n, n):
        raise ValueError("subject matrices disagree in size")
    positive_counts = (stack > 0).sum(axis=0)
    matched = positive_counts >= threshold
    np.fill_diagonal(matched, False)
    return 100.0 * matched.sum(axis=1) / (n - 1)


def perf_similarity(profile: PerformanceProfile) -> np.ndarray:
    """Correlation between performance vectors for each pair of representations."""
    raw = profile.raw
    if raw.shape[1] < 2:
        raise ValueError("need at least 2 channels")
    centered = raw - raw.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    constant = norms == 0
    if constant.any():
        logger.warning("perf_similarity: %d constant performance rows", constant.sum())
    safe = np.where(constant, 1.0, norms)
    sim = (centered @ centered.T) / np.outer(safe, safe)
    sim[constant, :] = 0.0
    sim[:, constant] = 0.0
    np.fill_diagonal(sim, 1.0)
    return sim
