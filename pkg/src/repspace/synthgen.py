"""Synthetic families with analytically known transfer structure.

The generator draws a shared latent stream and exposes a configurable prefix
of it to each representation through a seeded orthonormal mixing matrix, so
the optimal linear transfer error between any two representations has a
closed form. That closed form (``oracle_transfer_mse``) is computed from the
generator parameters alone, never by fitting, and serves as the independent
ground truth for the trained transfer pipeline. The module also synthesizes
sampled-rate response channels driven by a chosen representation for
exercising the encoding models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoding
from .feature_store import FeatureBundle, RepresentationSpec, TokenCorpus
from .seeding import make_rng


@dataclass(frozen=True)
class RepGenSpec:
    """One synthetic representation: sees the first ``visible_latents`` dims."""

    id: str
    visible_latents: int
    output_dim: int
    noise_sd: float = 0.0


@dataclass(frozen=True)
class NestedFamilySpec:
    seed: int
    total_latents: int
    token_count: int
    reps: tuple[RepGenSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "reps", tuple(self.reps))
        ids = [r.id for r in self.reps]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate representation ids in family spec")
        for rep in self.reps:
            if not (1 <= rep.visible_latents <= self.total_latents):
                raise ValueError(
                    f"{rep.id}: visible_latents must be in [1, {self.total_latents}]"
                )
            if rep.output_dim < rep.visible_latents:
                raise ValueError(f"{rep.id}: output_dim must be >= visible_latents")
            if rep.noise_sd < 0:
                raise ValueError(f"{rep.id}: noise_sd must be >= 0")

    def rep(self, rep_id: str) -> RepGenSpec:
        for rep in self.reps:
            if rep.id == rep_id:
                return rep
        raise KeyError(f"unknown representation {rep_id!r}")


def _mixing_matrix(spec: NestedFamilySpec, rep: RepGenSpec) -> np.ndarray:
    """Seeded orthonormal-column mixing matrix, (output_dim, visible_latents)."""
    rng = make_rng(spec.seed, "mixing", rep.id)
    raw = rng.standard_normal((rep.output_dim, rep.visible_latents))
    q, r = np.linalg.qr(raw)
    # fix QR sign ambiguity so the matrix is a pure function of the seed
    q = q * np.sign(np.diag(r))
    return q


def _latents(spec: NestedFamilySpec) -> np.ndarray:
    rng = make_rng(spec.seed, "latents")
    return rng.standard_normal((spec.token_count, spec.total_latents))


def gen_nested_reps(spec: NestedFamilySpec) -> list[FeatureBundle]:
    """Generate the family's bundles; bit-identical for identical specs.

    Latents, mixing matrices, and noise use separate seed streams, so two
    specs differing only in noise levels share latents and mixing exactly.
    """
    z = _latents(spec)
    bundles = []
    for rep in spec.reps:
        mixing = _mixing_matrix(spec, rep)
        values = z[:, : rep.visible_latents] @ mixing.T
        if rep.noise_sd > 0:
            noise_rng = make_rng(spec.seed, "noise", rep.id)
            values = values + rep.noise_sd * noise_rng.standard_normal(values.shape)
        rep_spec = RepresentationSpec(
            id=rep.id,
            dim=rep.output_dim,
            model_group=rep.id,
            layer_index=None,
            mds_weight=None,
        )
        bundles.append(FeatureBundle(spec=rep_spec, values=values))
    return bundles


def oracle_transfer_mse(spec: NestedFamilySpec, source_id: str, target_id: str) -> float:
    """Population least-squares residual of predicting target from source.

    Computed directly from the mixing matrices and noise levels, with no
    fitting. Returned as mean squared error per target dimension, matching
    the per-sample MSE convention used by decoder evaluation.
    """
    src = spec.rep(source_id)
    tgt = spec.rep(target_id)
    a_src = _mixing_matrix(spec, src)
    a_tgt = _mixing_matrix(spec, tgt)
    k_shared = min(src.visible_latents, tgt.visible_latents)
    # cross-covariance of target vs source features through the shared latents
    cross = a_tgt[:, :k_shared] @ a_src[:, :k_shared].T
    cov_src = a_src @ a_src.T + src.noise_sd**2 * np.eye(src.output_dim)
    cov_tgt_trace = float(np.trace(a_tgt @ a_tgt.T)) + tgt.noise_sd**2 * tgt.output_dim
    explained = float(np.trace(cross @ np.linalg.pinv(cov_src, hermitian=True) @ cross.T))
    residual = max(cov_tgt_trace - explained, 0.0)
    return residual / tgt.output_dim


# -- synthetic responses -----------------------------------------------------

@dataclass(frozen=True)
class SyntheticResponseSpec:
    """Channels driven linearly by one representation's delayed features.

    Exactly one of ``noise_sd`` (absolute) or ``noise_snr`` (per-channel
    signal/noise standard-deviation ratio) sets the additive noise level.
    """

    seed: int
    source_rep: str
    channels: int
    tr_seconds: float = 2.0
    delays: tuple[int, ...] = (1, 2, 3, 4)
    words_per_tr: float = 4.0
    noise_sd: float | None = 0.0
    noise_snr: float | None = None
    true_weights: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.tr_seconds <= 0:
            raise ValueError("tr_seconds must be > 0")
        if not self.delays:
            raise ValueError("delays must be nonempty")
        if (self.noise_sd is None) == (self.noise_snr is None):
            raise ValueError("set exactly one of noise_sd / noise_snr")


@dataclass
class SyntheticResponseResult:
    response: encoding.ResponseDataset
    true_weights: np.ndarray       # (design width, channels)
    signal: np.ndarray             # noiseless responses, (trs, channels)
    noise_sd_per_channel: np.ndarray


def gen_synthetic_responses(
    spec: SyntheticResponseSpec,
    source: FeatureBundle,
    corpus: TokenCorpus,
) -> SyntheticResponseResult:
    """Delay-expanded, downsampled source features times true weights + noise.

    Uses the encoding module's own resampling and delay conventions so a
    noiseless run is exactly recoverable by the encoding pipeline.
    """
    if source.token_count != corpus.total_tokens:
        raise ValueError("source bundle is not aligned to the corpus")
    design = encoding.build_design(
        source, corpus, tr_seconds=spec.tr_seconds, delays=spec.delays,
        words_per_tr=spec.words_per_tr,
    )
    width = design.matrix.shape[1]
    if spec.true_weights is not None:
        weights = np.asarray(spec.true_weights, dtype=np.float64)
        if weights.shape != (width, spec.channels):
            raise ValueError(
                f"true_weights must have shape ({width}, {spec.channels})"
            )
    else:
        rng = make_rng(spec.seed, "weights")
        weights = rng.standard_normal((width, spec.channels)) / np.sqrt(width)
    signal = design.matrix @ weights
    if spec.noise_snr is not None:
        sd = signal.std(axis=0) / spec.noise_snr
    else:
        sd = np.full(spec.channels, float(spec.noise_sd))
    noise_rng = make_rng(spec.seed, "noise")
    responses = signal + sd * noise_rng.standard_normal(signal.shape)
    dataset = encoding.ResponseDataset(
        responses=responses,
        tr_seconds=spec.tr_seconds,
        train_trs=design.role_trs(corpus, "train"),
        test_trs=design.role_trs(corpus, "test"),
        story_tr_counts=design.story_tr_counts,
    )
    return SyntheticResponseResult(
        response=dataset,
        true_weights=weights,
        signal=signal,
        noise_sd_per_channel=sd,
    )
