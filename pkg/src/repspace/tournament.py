"""Pairwise decoder tournaments and the representation embedding matrix.

For a fixed target representation, every pair of decoders is "fought" on the
held-out rows: the win ratio is the smoothed fraction of rows where one has
lower per-row error, over the fraction where the other does. Win ratios are
exact rationals built from integer counts, so a fight and its mirror always
multiply to exactly one. The principal eigenvector of each target's win
matrix (its stationary visiting frequency under a random walk) gives a total
order over source representations; stacking those weight vectors, with the
self entry pinned to a constant, yields the embedding matrix.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .container import read_container, write_container


class ConvergenceError(RuntimeError):
    """Power iteration failed to reach tolerance."""

    def __init__(self, iterations: int, residual: float):
        super().__init__(
            f"power iteration did not converge in {iterations} iterations "
            f"(residual {residual:.3e})"
        )
        self.iterations = iterations


@dataclass
class TournamentMatrix:
    """Win-ratio matrix among decoders into one target; zero diagonal."""

    target_id: str
    win_ratios: np.ndarray
    test_count: int

    def __post_init__(self):
        self.win_ratios = np.asarray(self.win_ratios, dtype=np.float64)
        w = self.win_ratios
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("win_ratios must be square")
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValueError("win_ratios must be finite and nonnegative")
        if np.any(np.diag(w) != 0):
            raise ValueError("win_ratios diagonal must be zero")
        off = w[~np.eye(w.shape[0], dtype=bool)]
        if off.size and (off <= 0).any():
            raise ValueError("off-diagonal win ratios must be positive after smoothing")

    @property
    def n(self) -> int:
        return self.win_ratios.shape[0]


@dataclass
class EmbeddingMatrix:
    """Stacked per-target weight vectors; row = decoded target, col = source."""

    matrix: np.ndarray
    rep_ids: list[str]
    diag_value: float = 0.1

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n) or len(self.rep_ids) != n:
            raise ValueError("matrix must be n x n with n rep ids")
        off = self.matrix[~np.eye(n, dtype=bool)]
        if n > 1 and (off <= 0).any():
            raise ValueError("off-target entries must be positive")
        if not np.allclose(np.diag(self.matrix), self.diag_value):
            raise ValueError("diagonal must equal diag_value")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def fight(mse_i: np.ndarray, mse_j: np.ndarray) -> Fraction:
    """Smoothed win ratio of decoder i over decoder j.

    Counts rows where i has strictly lower error; ties count half for each
    side. The win proportion is clamped to [1/(2N), 1 - 1/(2N)] so a clean
    sweep yields a large finite ratio instead of infinity. Returned as an
    exact rational of the (doubled) win counts, which makes
    fight(i, j) * fight(j, i) == 1 hold exactly whenever no clamping occurs.
    """
    a = np.asarray(mse_i, dtype=np.float64)
    b = np.asarray(mse_j, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("per-row MSE vectors must be 1-D with equal length")
    n = a.size
    if n == 0:
        raise ValueError("per-row MSE vectors are empty")
    wins_doubled = 2 * int(np.count_nonzero(a < b)) + int(np.count_nonzero(a == b))
    wins_doubled = min(max(wins_doubled, 1), 2 * n - 1)
    return Fraction(wins_doubled, 2 * n - wins_doubled)


def build_tournament(target_id: str, mse_vectors: list[np.ndarray],
                     test_count: int | None = None) -> TournamentMatrix:
    """Fight all source pairs (self decoder included as a competitor)."""
    n = len(mse_vectors)
    if n < 2:
        raise ValueError("a tournament needs at least 2 decoders")
    lengths = {np.asarray(v).shape for v in mse_vectors}
    if len(lengths) != 1:
        raise ValueError(f"per-row MSE vectors disagree in length: {sorted(lengths)}")
    rows = np.asarray(mse_vectors[0]).size
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                w[i, j] = float(fight(mse_vectors[i], mse_vectors[j]))
    return TournamentMatrix(target_id=target_id, win_ratios=w,
                            test_count=rows if test_count is None else test_count)


def ahp_weights(w: TournamentMatrix | np.ndarray,
                tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """Principal eigenvector of the win matrix, normalized to sum to 1.

    Power iteration on the diagonally shifted matrix W + cI: the shift leaves
    eigenvectors unchanged but breaks the eigenvalue-magnitude ties of
    zero-diagonal matrices (a plain 2 x 2 tournament has eigenvalues +/- r),
    keeping the whole computation in real arithmetic.
    """
    matrix = w.win_ratios if isinstance(w, TournamentMatrix) else np.asarray(w, dtype=np.float64)
    n = matrix.shape[0]
    if n == 1:
        return np.ones(1)
    if float(matrix.sum()) <= 0:
        raise ValueError("win matrix has no positive entries")
    # size the shift to the dominant eigenvalue, estimated from the two-step
    # growth factor (stable even when the unshifted iteration oscillates);
    # a shift far above the spectrum would stall convergence
    probe = np.full(n, 1.0 / n)
    growth2 = float((matrix @ (matrix @ probe)).sum())
    shift = np.sqrt(growth2) if growth2 > 0 else 1.0
    shifted = matrix + shift * np.eye(n)
    v = np.full(n, 1.0 / n)
    residual = np.inf
    for _ in range(max_iter):
        nxt = shifted @ v
        nxt /= nxt.sum()
        residual = float(np.abs(nxt - v).sum())
        v = nxt
        if residual < tol:
            break
    else:
        raise ConvergenceError(max_iter, residual)
    return v


def assemble_embedding(
    weight_vectors: list[np.ndarray],
    rep_ids: list[str],
    diag_value: float = 0.1,
    renormalize_off_target: bool = False,
) -> EmbeddingMatrix:
    """Stack per-target weight vectors into the embedding matrix.

    Row t is the weight vector for target t with entry t overwritten by
    ``diag_value``; the remaining entries keep their normalized-to-1 scale
    unless ``renormalize_off_target`` rescales them to sum to 1 after the
    overwrite.
    """
    n = len(rep_ids)
    if len(weight_vectors) != n:
        raise ValueError(f"expected {n} weight vectors, got {len(weight_vectors)}")
    rows = []
    for t, vec in enumerate(weight_vectors):
        vec = np.asarray(vec, dtype=np.float64).copy()
        if vec.shape != (n,):
            raise ValueError(f"weight vector {t} has shape {vec.shape}, expected ({n},)")
        if renormalize_off_target:
            others = np.delete(vec, t)
            vec = vec / others.sum()
        vec[t] = diag_value
        rows.append(vec)
    return EmbeddingMatrix(matrix=np.vstack(rows), rep_ids=list(rep_ids),
                           diag_value=diag_value)


# -- persistence -----------------------------------------------------------

def save_tournament(path: str | os.PathLike, t: TournamentMatrix) -> None:
    fields = {
        "kind": "tournament",
        "target_id": t.target_id,
        "n": str(t.n),
        "test_count": str(t.test_count),
        "dtype": "f64le",
        "layout": "row-major",
    }
    write_container(path, fields, t.win_ratios)


def load_tournament(path: str | os.PathLike) -> TournamentMatrix:
    fields, flat = read_container(path)
    n = int(fields["n"])
    return TournamentMatrix(
        target_id=fields["target_id"],
        win_ratios=flat.reshape(n, n),
        test_count=int(fields["test_count"]),
    )


def save_embedding(path: str | os.PathLike, emb: EmbeddingMatrix) -> None:
    fields = {
        "kind": "embedding",
        "n": str(emb.n),
        "rep_ids": ",".join(emb.rep_ids),
        "diag_value": repr(emb.diag_value),
        "dtype": "f64le",
        "layout": "row-major",
    }
    write_container(path, fields, emb.matrix)


def load_embedding(path: str | os.PathLike) -> EmbeddingMatrix:
    fields, flat = read_container(path)
    n = int(fields["n"])
    return EmbeddingMatrix(
        matrix=flat.reshape(n, n),
        rep_ids=fields["rep_ids"].split(","),
        diag_value=float(fields["diag_value"]),
    )
