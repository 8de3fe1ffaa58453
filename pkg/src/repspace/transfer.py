"""Bottleneck encoders and cross-representation decoders.

Each representation gets a linear encoder from the universal input space to a
small shared-width latent space, trained end to end with a throwaway linear
readout on a negative-correlation loss (scale-free across feature spaces of
very different magnitudes). Decoders from every latent space to every
representation, including the self pair, are then trained on mean squared
error. All training is plain minibatch SGD with early stopping on a
monitored validation loss.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from .container import read_container, write_container
from .feature_store import AlignedDataset, FeatureBundle, TokenCorpus, split
from .seeding import make_rng

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during SGD."""


@dataclass
class LinearMap:
    """Affine map y = x @ weights + bias."""

    weights: np.ndarray
    bias: np.ndarray
    kind: str  # "encoder" | "decoder"
    source_id: str | None = None
    target_id: str | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kind not in ("encoder", "decoder"):
            raise ValueError(f"kind must be encoder or decoder, got {self.kind!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError("weights must be (d_in, d_out) with matching bias")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("linear map contains non-finite values")

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise ValueError(f"input has width {x.shape[-1]}, map expects {self.d_in}")
        return x @ self.weights + self.bias


@dataclass(frozen=True)
class TrainConfig:
    latent_dim: int = 20
    batch_size: int = 1024
    lr_encoder: float = 1e-4
    lr_decoder: float = 2e-5
    max_batches: int = 1000
    patience: int = 1
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        for name in ("latent_dim", "batch_size", "lr_encoder", "lr_decoder", "max_batches"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not (0 < self.validation_fraction < 1):
            raise ValueError("validation_fraction must be in (0, 1)")


@dataclass
class LatentDataset:
    """Encoded universal inputs for one representation, all T rows."""

    rep_id: str
    values: np.ndarray  # (T, latent_dim)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("latent values must be 2-D")


# -- losses -------------------------------------------------------------------

def neg_corr_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean negative Pearson correlation across columns.

    Columns with zero variance in either argument contribute 0. Invariant
    under positive affine transforms of either argument, column by column.
    """
    loss, _ = _neg_corr_loss_grad(np.asarray(pred, float), np.asarray(target, float),
                                  need_grad=False)
    return loss


def _neg_corr_loss_grad(pred, target, need_grad=True):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.shape[0] < 2:
        raise ValueError("correlation loss needs a batch of at least 2 rows")
    d = pred.shape[1]
    pc = pred - pred.mean(axis=0)
    tc = target - target.mean(axis=0)
    pn = np.sqrt((pc**2).sum(axis=0))
    tn = np.sqrt((tc**2).sum(axis=0))
    live = (pn > 0) & (tn > 0)
    denom_p = np.where(live, pn, 1.0)
    denom_t = np.where(live, tn, 1.0)
    phat = pc / denom_p
    that = tc / denom_t
    corr = np.where(live, (phat * that).sum(axis=0), 0.0)
    loss = -float(corr.sum()) / d
    if not need_grad:
        return loss, None
    grad = -(that - corr * phat) / denom_p / d
    grad[:, ~live] = 0.0
    return loss, grad


def _mse_loss_grad(pred, target, need_grad=True):
    diff = pred - target
    loss = float((diff**2).mean())
    if not need_grad:
        return loss, None
    return loss, (2.0 / diff.size) * diff


# -- SGD core -----------------------------------------------------------------

def _init_layer(rng, d_in, d_out):
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out)), np.zeros(d_out)


def _forward(params, x):
    acts = [x]
    for w, b in params:
        acts.append(acts[-1] @ w + b)
    return acts


def _sgd_train(params, x, y, sgd_rows, val_rows, loss_grad, lr, cfg, rng):
    """Minibatch SGD with early stopping on the validation loss.

    Epochs draw a fresh seeded permutation of the SGD rows; the validation
    loss is evaluated after every batch, and training stops after
    ``cfg.patience`` consecutive evaluations without improvement over the
    best seen, or at ``cfg.max_batches``. The best-so-far parameters are
    restored on exit.
    """
    x_val, y_val = x[val_rows], y[val_rows]
    best_loss = np.inf
    best = [(w.copy(), b.copy()) for w, b in params]
    bad = 0
    batches = 0
    done = False
    while not done:
        perm = rng.permutation(sgd_rows)
        for start in range(0, perm.size, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if idx.size < 2:
                continue
            acts = _forward(params, x[idx])
            loss, grad = loss_grad(acts[-1], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"training loss became {loss} at batch {batches}; "
                    f"lr={lr}, batch_size={cfg.batch_size}"
                )
            g = grad
            for layer in range(len(params) - 1, -1, -1):
                w, b = params[layer]
                gw = acts[layer].T @ g
                gb = g.sum(axis=0)
                if layer > 0:
                    g = g @ w.T
                w -= lr * gw
                b -= lr * gb
            batches += 1
            val_loss, _ = loss_grad(_forward(params, x_val)[-1], y_val)
            if not np.isfinite(val_loss):
                raise TrainingDiverged(
                    f"validation loss became {val_loss} at batch {batches}; lr={lr}"
                )
            if val_loss < best_loss:
                best_loss = val_loss
                best = [(w.copy(), b.copy()) for w, b in params]
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    done = True
                    break
            if batches >= cfg.max_batches:
                done = True
                break
    for (w, b), (bw, bb) in zip(params, best):
        w[...] = bw
        b[...] = bb
    return best_loss, batches


def monitor_split(
    corpus: TokenCorpus, train_rows: np.ndarray, fraction: float
) -> tuple[np.ndarray, np.ndarray]:
    """Split train rows into (sgd rows, validation rows).

    The validation set is the trailing ~fraction of train rows, taken as
    whole stories when more than one train story exists, otherwise as a
    plain trailing slice.
    """
    target = max(1, int(round(fraction * train_rows.size)))
    train_stories = [s for s in corpus.stories if s.role == "train"]
    if len(train_stories) > 1:
        val_rows: list[np.ndarray] = []
        total = 0
        for story in reversed(train_stories[1:]):  # always keep the first story for SGD
            r = corpus.story_range(story.id)
            val_rows.append(np.arange(r.start, r.stop))
            total += len(r)
            if total >= target:
                break
        val = np.sort(np.concatenate(val_rows))
    else:
        val = train_rows[-target:]
    sgd = np.setdiff1d(train_rows, val)
    return sgd, val


def _canonicalize_bottleneck(enc_w, enc_b, dec_w, dec_b, latent_dim, u_train):
    """Re-express the trained bottleneck in its canonical latent basis.

    The training objective only constrains the composition
    u @ enc_w @ dec_w + bias; any invertible change of latent basis is
    invisible to it, and SGD leaves initialization junk in the directions
    the readout learned to ignore. This refactors the pair through the
    SVD of the composition matrix (exactly rank <= latent_dim, so the
    input->target function is unchanged to machine precision): latent
    dimension k becomes singular direction k scaled by its singular value,
    which makes directions outside the composition's row space carry
    essentially zero variance instead of leaking unrelated input content.
    Latents are then centered and unit-scaled per dimension on the training
    rows (dims below 1e-6 of the largest scale are left dead, not
    amplified).
    """
    comp = enc_w @ dec_w
    comp_bias = enc_b @ dec_w + dec_b
    p, s, qt = np.linalg.svd(comp, full_matrices=False)
    k = min(latent_dim, s.size)
    # sign convention: largest-magnitude entry of each input direction positive
    for col in range(k):
        pivot = np.argmax(np.abs(p[:, col]))
        if p[pivot, col] < 0:
            p[:, col] = -p[:, col]
            qt[col, :] = -qt[col, :]
    enc_w2 = np.zeros((enc_w.shape[0], latent_dim))
    dec_w2 = np.zeros((latent_dim, dec_w.shape[1]))
    enc_w2[:, :k] = p[:, :k] * s[:k]
    dec_w2[:k, :] = qt[:k, :]

    latents = u_train @ enc_w2
    mu = latents.mean(axis=0)
    # one global scale: per-dimension rescaling would amplify the near-dead
    # directions right back into the latents
    scale = float(latents.std(axis=0).max())
    if scale <= 0:
        scale = 1.0
    enc_w2 /= scale
    enc_b2 = -mu / scale
    dec_w2 *= scale
    dec_b2 = comp_bias + mu @ dec_w2 / scale
    return enc_w2, enc_b2, dec_w2, dec_b2


def train_encoder(
    dataset: AlignedDataset, target_id: str, cfg: TrainConfig
) -> tuple[LinearMap, LinearMap]:
    """Train the bottleneck for one target representation.

    Returns (encoder, readout); the readout is the throwaway half kept only
    for diagnostics. The composition readout(encoder(U)) approximates the
    target features. Deterministic given (cfg.seed, target_id, data).
    """
    universal = dataset.universal.values
    target = dataset.bundle(target_id).values
    train_rows, _ = split(dataset)
    sgd_rows, val_rows = monitor_split(dataset.corpus, train_rows, cfg.validation_fraction)
    rng = make_rng(cfg.seed, "encoder", target_id)
    d_u, d_t = universal.shape[1], target.shape[1]
    params = [
        list(_init_layer(rng, d_u, cfg.latent_dim)),
        list(_init_layer(rng, cfg.latent_dim, d_t)),
    ]
    best_loss, batches = _sgd_train(
        params, universal, target, sgd_rows, val_rows,
        _neg_corr_loss_grad, cfg.lr_encoder, cfg, rng,
    )
    logger.info("encoder %s: %d batches, val loss %.6f", target_id, batches, best_loss)
    (enc_w, enc_b), (dec_w, dec_b) = params
    enc_w, enc_b, dec_w, dec_b = _canonicalize_bottleneck(
        enc_w, enc_b, dec_w, dec_b, cfg.latent_dim, universal[train_rows]
    )
    encoder = LinearMap(enc_w, enc_b, "encoder",
                        source_id=dataset.universal_id, target_id=target_id)
    readout = LinearMap(dec_w, dec_b, "decoder", source_id=target_id, target_id=target_id)
    return encoder, readout


def encode(encoder: LinearMap, dataset: AlignedDataset) -> LatentDataset:
    """Apply an encoder to the universal bundle over all rows."""
    if encoder.kind != "encoder":
        raise ValueError(f"expected an encoder, got kind={encoder.kind!r}")
    return LatentDataset(
        rep_id=encoder.target_id or "",
        values=encoder.apply(dataset.universal.values),
    )


def train_decoder(
    latent: LatentDataset,
    target: FeatureBundle,
    corpus: TokenCorpus,
    cfg: TrainConfig,
) -> LinearMap:
    """Train one latent-to-target decoder by SGD on mean squared error.

    The self pair (latent.rep_id == target id) is trained like any other.
    The seed derives from (global seed, source id, target id), so results
    do not depend on scheduling order.
    """
    if latent.values.shape[0] != target.token_count:
        raise ValueError(
            f"latent rows ({latent.values.shape[0]}) != target rows ({target.token_count})"
        )
    train_rows = corpus.role_rows("train")
    sgd_rows, val_rows = monitor_split(corpus, train_rows, cfg.validation_fraction)
    rng = make_rng(cfg.seed, "decoder", latent.rep_id, target.spec.id)
    params = [list(_init_layer(rng, latent.values.shape[1], target.spec.dim))]
    best_loss, batches = _sgd_train(
        params, latent.values, target.values, sgd_rows, val_rows,
        _mse_loss_grad, cfg.lr_decoder, cfg, rng,
    )
    logger.info("decoder %s->%s: %d batches, val mse %.6g",
                latent.rep_id, target.spec.id, batches, best_loss)
    w, b = params[0]
    return LinearMap(w, b, "decoder", source_id=latent.rep_id, target_id=target.spec.id)


def decoder_sample_mse(
    decoder: LinearMap, latent_rows: np.ndarray, target_rows: np.ndarray
) -> np.ndarray:
    """Per-row squared error, averaged over target dimensions."""
    pred = decoder.apply(latent_rows)
    target_rows = np.asarray(target_rows, dtype=np.float64)
    if pred.shape != target_rows.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target_rows.shape}")
    return ((pred - target_rows) ** 2).mean(axis=1)


# -- persistence ---------------------------------------------------------------

def save_map(path: str | os.PathLike, m: LinearMap, extra: dict[str, str] | None = None) -> None:
    fields = {
        "kind": m.kind,
        "d_in": str(m.d_in),
        "d_out": str(m.d_out),
        "source_id": m.source_id or "",
        "target_id": m.target_id or "",
        "dtype": "f64le",
        "layout": "row-major",
    }
    if extra:
        fields.update(extra)
    payload = np.concatenate([m.weights.ravel(), m.bias])
    write_container(path, fields, payload)


def load_map(path: str | os.PathLike) -> LinearMap:
    fields, flat = read_container(path)
    d_in, d_out = int(fields["d_in"]), int(fields["d_out"])
    if flat.size != d_in * d_out + d_out:
        raise ValueError(f"{path}: payload size does not match declared shape")
    return LinearMap(
        weights=flat[: d_in * d_out].reshape(d_in, d_out),
        bias=flat[d_in * d_out :],
        kind=fields["kind"],
        source_id=fields.get("source_id") or None,
        target_id=fields.get("target_id") or None,
    )


def save_latents(path: str | os.PathLike, latent: LatentDataset) -> None:
    fields = {
        "kind": "latents",
        "rep_id": latent.rep_id,
        "rows": str(latent.values.shape[0]),
        "latent_dim": str(latent.values.shape[1]),
        "dtype": "f64le",
        "layout": "row-major",
    }
    write_container(path, fields, latent.values)


def load_latents(path: str | os.PathLike) -> LatentDataset:
    fields, flat = read_container(path)
    rows, dim = int(fields["rows"]), int(fields["latent_dim"])
    if flat.size != rows * dim:
        raise ValueError(f"{path}: payload size does not match declared shape")
    return LatentDataset(rep_id=fields["rep_id"], values=flat.reshape(rows, dim))


# -- hyperparameter search ------------------------------------------------------

LATENT_GRID = (10, 20, 50)
LR_GRID = (1e-6, 2e-5, 1e-4, 2e-4)
BATCH_GRID = (256, 512, 1024)


def coordinate_descent_search(
    dataset: AlignedDataset,
    target_id: str,
    base: TrainConfig,
    max_sweeps: int = 2,
) -> TrainConfig:
    """Coordinate descent over (latent_dim, lr_encoder, lr_decoder, batch_size).

    Each candidate is scored by the validation loss of a fresh encoder
    training (and a self-decoder training for the decoder rate), holding the
    other coordinates fixed; sweeps repeat until no coordinate changes.
    """
    axes = [
        ("latent_dim", LATENT_GRID),
        ("lr_encoder", LR_GRID),
        ("lr_decoder", LR_GRID),
        ("batch_size", BATCH_GRID),
    ]

    def encoder_score(cfg: TrainConfig) -> float:
        universal = dataset.universal.values
        target = dataset.bundle(target_id).values
        train_rows, _ = split(dataset)
        sgd_rows, val_rows = monitor_split(dataset.corpus, train_rows, cfg.validation_fraction)
        rng = make_rng(cfg.seed, "hpsearch", target_id, cfg.latent_dim,
                       cfg.lr_encoder, cfg.batch_size)
        params = [
            list(_init_layer(rng, universal.shape[1], cfg.latent_dim)),
            list(_init_layer(rng, cfg.latent_dim, target.shape[1])),
        ]
        loss, _ = _sgd_train(params, universal, target, sgd_rows, val_rows,
                             _neg_corr_loss_grad, cfg.lr_encoder, cfg, rng)
        return loss

    def decoder_score(cfg: TrainConfig) -> float:
        encoder, _ = train_encoder(dataset, target_id, cfg)
        latent = encode(encoder, dataset)
        target = dataset.bundle(target_id)
        train_rows, _ = split(dataset)
        sgd_rows, val_rows = monitor_split(dataset.corpus, train_rows, cfg.validation_fraction)
        rng = make_rng(cfg.seed, "hpsearch-dec", target_id, cfg.lr_decoder)
        params = [list(_init_layer(rng, latent.values.shape[1], target.spec.dim))]
        loss, _ = _sgd_train(params, latent.values, target.values, sgd_rows, val_rows,
                             _mse_loss_grad, cfg.lr_decoder, cfg, rng)
        return loss

    current = base
    for _ in range(max_sweeps):
        changed = False
        for name, grid in axes:
            scorer = decoder_score if name == "lr_decoder" else encoder_score
            best_value, best_score = getattr(current, name), None
            for value in grid:
                candidate = replace(current, **{name: value})
                score = scorer(candidate)
                logger.info("hpsearch %s=%s -> %.6g", name, value, score)
                if best_score is None or score < best_score:
                    best_value, best_score = value, score
            if best_value != getattr(current, name):
                current = replace(current, **{name: best_value})
                changed = True
        if not changed:
            break
    return current
