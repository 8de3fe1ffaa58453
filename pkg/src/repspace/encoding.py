"""Channelwise encoding models over sampled-rate responses.

Word-rate features are averaged into sampling bins (carry-forward for empty
bins), expanded with discrete delays to absorb response lag, and regressed
onto each response channel with ridge regression. The ridge penalty is chosen
per channel by Monte Carlo cross-validation on held-out correlation, the same
metric used for final test scoring.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .feature_store import FeatureBundle, TokenCorpus
from .seeding import make_rng

DEFAULT_ALPHAS = tuple(np.logspace(0, 5, 10))
DEFAULT_DELAYS = (1, 2, 3, 4)


@dataclass
class ResponseDataset:
    """Sampled-rate responses (time x channels) aligned to the stimulus."""

    responses: np.ndarray
    tr_seconds: float = 2.0
    train_trs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    test_trs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    story_tr_counts: tuple[int, ...] | None = None
    channel_labels: list[str] | None = None

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=np.float64)
        if self.responses.ndim != 2:
            raise ValueError("responses must be 2-D (time x channels)")
        if not np.isfinite(self.responses).all():
            raise ValueError("responses contain non-finite entries")
        if self.tr_seconds <= 0:
            raise ValueError("tr_seconds must be > 0")
        self.train_trs = np.asarray(self.train_trs, dtype=np.intp)
        self.test_trs = np.asarray(self.test_trs, dtype=np.intp)
        if np.intersect1d(self.train_trs, self.test_trs).size:
            raise ValueError("train and test TR sets overlap")

    @property
    def n_trs(self) -> int:
        return self.responses.shape[0]

    @property
    def n_channels(self) -> int:
        return self.responses.shape[1]


@dataclass
class DelayedDesign:
    """Delay-expanded design; column blocks ordered by delay then feature."""

    matrix: np.ndarray
    delays: tuple[int, ...]


def select_channels(response: ResponseDataset, channels) -> ResponseDataset:
    """Restrict a response dataset to a channel subset (mask or indices)."""
    channels = np.asarray(channels)
    labels = response.channel_labels
    if labels is not None:
        labels = [labels[i] for i in np.arange(response.n_channels)[channels]]
    return ResponseDataset(
        responses=response.responses[:, channels],
        tr_seconds=response.tr_seconds,
        train_trs=response.train_trs,
        test_trs=response.test_trs,
        story_tr_counts=response.story_tr_counts,
        channel_labels=labels,
    )


def downsample(
    values: np.ndarray | FeatureBundle,
    word_times: np.ndarray,
    tr_seconds: float,
    n_trs: int,
) -> np.ndarray:
    """Average word-rate rows into TR bins.

    Row m is the mean of feature rows whose time falls in
    [m*tr, (m+1)*tr). Empty bins repeat the previous bin; a leading empty
    bin is zero. Words at or beyond n_trs*tr are ignored.
    """
    if isinstance(values, FeatureBundle):
        values = values.values
    values = np.asarray(values, dtype=np.float64)
    times = np.asarray(word_times, dtype=np.float64)
    if times.shape != (values.shape[0],):
        raise ValueError(
            f"word_times has length {times.size}, features have {values.shape[0]} rows"
        )
    if np.any(np.diff(times) < 0):
        raise ValueError("word_times must be nondecreasing")
    if n_trs < 1:
        raise ValueError("n_trs must be >= 1")
    bins = np.floor(times / tr_seconds).astype(np.intp)
    keep = (bins >= 0) & (bins < n_trs)
    bins = bins[keep]
    kept = values[keep]
    dim = values.shape[1]
    sums = np.zeros((n_trs, dim))
    np.add.at(sums, bins, kept)
    counts = np.bincount(bins, minlength=n_trs).astype(np.float64)
    filled = counts > 0
    means = np.zeros_like(sums)
    means[filled] = sums[filled] / counts[filled, None]
    # carry forward the last filled bin into empty ones
    last_filled = np.maximum.accumulate(np.where(filled, np.arange(n_trs), -1))
    out = np.zeros_like(means)
    has_source = last_filled >= 0
    out[has_source] = means[last_filled[has_source]]
    return out


def delay_expand(x_tr: np.ndarray, delays: tuple[int, ...] | list[int]) -> DelayedDesign:
    """Stack time-shifted copies of the TR-rate features.

    The block for delay d at row m equals row m-d of the input, zero where
    m-d < 0, so row m depends only on strictly earlier rows.
    """
    delays = tuple(int(d) for d in delays)
    if len(set(delays)) != len(delays) or any(d <= 0 for d in delays):
        raise ValueError("delays must be positive and distinct")
    x_tr = np.asarray(x_tr, dtype=np.float64)
    n_trs, dim = x_tr.shape
    out = np.zeros((n_trs, dim * len(delays)))
    for b, d in enumerate(delays):
        if d < n_trs:
            out[d:, b * dim : (b + 1) * dim] = x_tr[: n_trs - d]
    return DelayedDesign(matrix=out, delays=delays)


@dataclass
class StimulusDesign(DelayedDesign):
    """Per-story delayed design concatenated in corpus order."""

    story_ids: tuple[str, ...] = ()
    story_tr_counts: tuple[int, ...] = ()

    def role_trs(self, corpus: TokenCorpus, role: str) -> np.ndarray:
        rows = []
        start = 0
        for story, count in zip(corpus.stories, self.story_tr_counts):
            if story.role == role:
                rows.append(np.arange(start, start + count))
            start += count
        if not rows:
            return np.empty(0, dtype=np.intp)
        return np.concatenate(rows)


def story_word_times(token_count: int, tr_seconds: float, words_per_tr: float) -> np.ndarray:
    """Uniform within-story word times placing words_per_tr words per bin."""
    spacing = tr_seconds / words_per_tr
    return (np.arange(token_count) + 0.5) * spacing


def build_design(
    bundle: FeatureBundle,
    corpus: TokenCorpus,
    tr_seconds: float = 2.0,
    delays: tuple[int, ...] = DEFAULT_DELAYS,
    words_per_tr: float = 4.0,
    story_tr_counts: tuple[int, ...] | None = None,
) -> StimulusDesign:
    """Downsample and delay-expand a bundle story by story.

    Stories are resampled independently (each starts at time zero with its
    own zero padding for delays), matching separately recorded responses.
    Explicit per-token times on a story take precedence over the uniform
    words_per_tr timeline; explicit story_tr_counts (e.g. from a recorded
    response file) take precedence over the derived bin count.
    """
    if bundle.token_count != corpus.total_tokens:
        raise ValueError(
            f"bundle {bundle.spec.id!r} has {bundle.token_count} rows, "
            f"corpus has {corpus.total_tokens} tokens"
        )
    if story_tr_counts is not None and len(story_tr_counts) != len(corpus.stories):
        raise ValueError("story_tr_counts length does not match corpus stories")
    blocks = []
    counts = []
    for s_idx, story in enumerate(corpus.stories):
        rows = corpus.story_range(story.id)
        token_count = len(story.tokens)
        if story.word_times is not None:
            times = np.asarray(story.word_times)
        else:
            times = story_word_times(token_count, tr_seconds, words_per_tr)
        if story_tr_counts is not None:
            n_trs = int(story_tr_counts[s_idx])
        else:
            n_trs = int(math.ceil((times[-1] + 1e-9) / tr_seconds))
        if max(delays) >= n_trs:
            raise ValueError(
                f"story {story.id!r}: delay {max(delays)} reaches before the "
                f"stimulus ({n_trs} TRs)"
            )
        tr_rate = downsample(bundle.values[rows.start : rows.stop], times, tr_seconds, n_trs)
        blocks.append(delay_expand(tr_rate, delays).matrix)
        counts.append(n_trs)
    return StimulusDesign(
        matrix=np.concatenate(blocks, axis=0),
        delays=tuple(int(d) for d in delays),
        story_ids=tuple(s.id for s in corpus.stories),
        story_tr_counts=tuple(counts),
    )


# -- ridge regression --------------------------------------------------------

def _svd_ridge(u, s, vt, y, alpha):
    """Ridge weights from a precomputed SVD; min-norm at alpha == 0."""
    if alpha == 0:
        tol = max(u.shape[0], vt.shape[1]) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
        factor = np.where(s > tol, np.divide(1.0, s, where=s > tol), 0.0)
        rank_deficient = bool(np.any(s <= tol))
    else:
        factor = s / (s**2 + alpha)
        rank_deficient = False
    return vt.T @ (factor[:, None] * (u.T @ y)), rank_deficient


def ridge_fit(x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """Closed-form ridge solution argmin ||Xw - y||^2 + alpha ||w||^2.

    Computed through the SVD of X for stability. At alpha == 0 a
    rank-deficient X yields the minimum-norm solution and a warning.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    w, rank_deficient = _svd_ridge(u, s, vt, y, alpha)
    if rank_deficient:
        warnings.warn("alpha=0 on a rank-deficient design; returning minimum-norm solution")
    return w[:, 0] if squeeze else w


def pearson_columns(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Columnwise Pearson correlation; zero-variance columns -> (0, flagged)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    na = np.sqrt((ac**2).sum(axis=0))
    nb = np.sqrt((bc**2).sum(axis=0))
    undefined = (na == 0) | (nb == 0)
    denom = np.where(undefined, 1.0, na * nb)
    rho = (ac * bc).sum(axis=0) / denom
    rho[undefined] = 0.0
    return rho, undefined


def mc_cv_alpha(
    x: np.ndarray,
    y: np.ndarray,
    alphas: tuple[float, ...] | list[float] = DEFAULT_ALPHAS,
    folds: int = 50,
    holdout: float = 0.2,
    seed: int = 0,
) -> np.ndarray:
    """Per-channel ridge penalty by Monte Carlo cross-validation.

    Each fold holds out a seeded random ``holdout`` fraction of the rows,
    fits every alpha on the rest, and scores held-out correlation per
    channel. The alpha maximizing the mean score across folds wins; ties go
    to the earliest grid entry. Degenerate folds (constant held-out target
    or prediction) contribute zero and still count toward the mean.
    """
    alphas = list(alphas)
    if not alphas:
        raise ValueError("alpha grid is empty")
    if not (0 < holdout < 1):
        raise ValueError("holdout must be in (0, 1)")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    n_hold = max(1, int(round(holdout * n)))
    if n_hold >= n:
        raise ValueError("holdout leaves no training rows")
    rng = make_rng(seed, "mc-cv")
    scores = np.zeros((len(alphas), y.shape[1]))
    for _ in range(folds):
        perm = rng.permutation(n)
        hold, keep = perm[:n_hold], perm[n_hold:]
        u, s, vt = np.linalg.svd(x[keep], full_matrices=False)
        for a_idx, alpha in enumerate(alphas):
            w, _ = _svd_ridge(u, s, vt, y[keep], alpha)
            rho, _ = pearson_columns(x[hold] @ w, y[hold])
            scores[a_idx] += rho
    best = np.argmax(scores, axis=0)
    return np.asarray(alphas, dtype=np.float64)[best]


def encoding_performance(
    weights: np.ndarray, x_test: np.ndarray, y_test: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Test correlation per channel between X_test @ w and the target.

    Returns (rho, undefined) where undefined marks channels whose prediction
    or target had zero variance (their rho is reported as 0).
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = weights[:, None]
    y_test = np.asarray(y_test, dtype=np.float64)
    if y_test.ndim == 1:
        y_test = y_test[:, None]
    return pearson_columns(np.asarray(x_test) @ weights, y_test)


@dataclass
class EncodingResult:
    """Fitted encoding model for one representation on one response set."""

    rep_id: str
    alpha: np.ndarray            # per-channel ridge penalty
    weights: np.ndarray          # (design width, channels), standardized space
    design_mean: np.ndarray
    design_scale: np.ndarray
    response_mean: np.ndarray
    rho: np.ndarray
    undefined: np.ndarray

    def predict(self, x_raw: np.ndarray) -> np.ndarray:
        xz = (np.asarray(x_raw) - self.design_mean) / self.design_scale
        return xz @ self.weights + self.response_mean


def fit_encoding_model(
    rep_id: str,
    design: np.ndarray,
    responses: ResponseDataset,
    alphas: tuple[float, ...] | list[float] = DEFAULT_ALPHAS,
    folds: int = 50,
    holdout: float = 0.2,
    seed: int = 0,
) -> EncodingResult:
    """Standardize, cross-validate alpha per channel, fit, and score.

    Design columns are z-scored with training statistics (applied unchanged
    to test rows) because the penalty is scale-dependent; responses are
    centered per channel by the training mean.
    """
    design = np.asarray(design, dtype=np.float64)
    train, test = responses.train_trs, responses.test_trs
    if train.size == 0 or test.size == 0:
        raise ValueError("response dataset needs nonempty train and test TR sets")
    x_train = design[train]
    mean = x_train.mean(axis=0)
    scale = x_train.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    xz_train = (x_train - mean) / scale
    y_mean = responses.responses[train].mean(axis=0)
    y_train = responses.responses[train] - y_mean
    alpha = mc_cv_alpha(xz_train, y_train, alphas, folds=folds, holdout=holdout, seed=seed)
    weights = np.empty((design.shape[1], responses.n_channels))
    u, s, vt = np.linalg.svd(xz_train, full_matrices=False)
    for value in np.unique(alpha):
        cols = np.flatnonzero(alpha == value)
        w, _ = _svd_ridge(u, s, vt, y_train[:, cols], float(value))
        weights[:, cols] = w
    xz_test = (design[test] - mean) / scale
    rho, undefined = encoding_performance(weights, xz_test, responses.responses[test] - y_mean)
    return EncodingResult(
        rep_id=rep_id,
        alpha=alpha,
        weights=weights,
        design_mean=mean,
        design_scale=scale,
        response_mean=y_mean,
        rho=rho,
        undefined=undefined,
    )
