"""Training objectives for the diarization networks.

The permutation-free loss evaluates the mean binary cross entropy of the
posteriors against every column permutation of the reference labels and
keeps the minimum; the winning permutation is fixed for the backward pass.
The clustering loss matches the Gram matrix of unit-norm frame embeddings to
that of one-hot powerset-of-speakers classes, computed in the expanded form
|V'V|^2 - 2 |V'L|^2 + |L'L|^2 so no T x T matrix is materialized.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import tensor as tt
from .simulate import LabelSequence
from .tensor import Tensor

BCE_CLIP = 1e-7
PERMUTATION_CAP = 8


@dataclass
class LossConfig:
    alpha: float = 0.5        # clustering-loss mixing weight
    bce_clip: float = BCE_CLIP

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 < self.bce_clip < 0.5:
            raise ValueError(f"bce_clip must be in (0, 0.5), got {self.bce_clip}")


@dataclass
class PermutationResult:
    loss: Tensor
    best_perm: tuple[int, ...]


def _label_matrix(labels) -> np.ndarray:
    mat = labels.matrix if isinstance(labels, LabelSequence) else np.asarray(labels)
    if mat.ndim != 2:
        raise tt.DimensionError(f"labels must be (T, C), got {mat.shape}")
    return mat.astype(np.float64)


def bce(z: Tensor, labels, n_valid: int | None = None, clip: float = BCE_CLIP) -> Tensor:
    """Mean binary cross entropy over the first n_valid frames (all by default)."""
    lm = _label_matrix(labels)
    if n_valid is not None:
        lm = lm[:n_valid]
        z = tt.take_rows(z, n_valid)
    if z.data.shape != lm.shape:
        raise tt.DimensionError(
            f"bce: posteriors {z.data.shape} vs labels {lm.shape}")
    zc = tt.clamp(z, clip, 1.0 - clip)
    pos = tt.mul_const(tt.log(zc), -lm)
    neg = tt.mul_const(tt.log(tt.affine(zc, -1.0, 1.0)), lm - 1.0)
    return tt.mean_all(tt.add(pos, neg))


def permutation_free_loss(z: Tensor, labels, n_valid: int | None = None,
                          clip: float = BCE_CLIP) -> PermutationResult:
    """Minimum BCE over all speaker-column permutations of the labels.

    Candidate losses are scanned without building graph nodes; the graph is
    then built once for the winning permutation (ties go to the
    lexicographically smallest permutation), so the backward pass
    differentiates at the selected assignment.
    """
    lm = _label_matrix(labels)
    n = lm.shape[0] if n_valid is None else n_valid
    c = lm.shape[1]
    if z.data.shape[1] != c or z.data.shape[0] < n:
        raise tt.DimensionError(
            f"permutation_free_loss: posteriors {z.data.shape} vs labels {lm.shape}")
    if c > PERMUTATION_CAP:
        raise ValueError(
            f"permutation search enumerates C! assignments and is capped at "
            f"C={PERMUTATION_CAP}, got C={c}")
    zc = np.clip(z.data[:n], clip, 1.0 - clip)
    log_z = np.log(zc)
    log_1mz = np.log(1.0 - zc)
    best_perm = None
    best_val = np.inf
    for perm in permutations(range(c)):
        lp = lm[:n][:, perm]
        val = (-(lp * log_z) + (lp - 1.0) * log_1mz).mean()
        if val < best_val:
            best_val = val
            best_perm = perm
    return PermutationResult(
        loss=bce(z, lm[:, best_perm], n_valid=n, clip=clip),
        best_perm=best_perm,
    )


def powerset_onehot(labels) -> np.ndarray:
    """One row per frame, a single 1 at index sum_c l_c * 2**c."""
    lm = _label_matrix(labels).astype(np.int64)
    c = lm.shape[1]
    if c > PERMUTATION_CAP:
        raise ValueError(f"powerset of {c} speakers exceeds cap {PERMUTATION_CAP}")
    idx = lm @ (1 << np.arange(c))
    out = np.zeros((lm.shape[0], 1 << c))
    out[np.arange(lm.shape[0]), idx] = 1.0
    return out


def dc_loss(v: Tensor, labels, n_valid: int | None = None) -> Tensor:
    """Squared Frobenius distance between embedding and label Gram matrices."""
    lm = _label_matrix(labels)
    if n_valid is not None:
        lm = lm[:n_valid]
        v = tt.take_rows(v, n_valid)
    if v.data.shape[0] != lm.shape[0]:
        raise tt.DimensionError(
            f"dc_loss: embeddings {v.data.shape} vs labels {lm.shape}")
    lset = powerset_onehot(lm)
    vt = tt.transpose(v)
    g_vv = tt.matmul(vt, v)
    s1 = tt.sum_all(tt.mul(g_vv, g_vv))
    g_vl = tt.matmul(vt, Tensor(lset))
    s2 = tt.sum_all(tt.mul(g_vl, g_vl))
    s3 = float(np.sum((lset.T @ lset) ** 2))
    return tt.affine(tt.sub(s1, tt.affine(s2, 2.0)), 1.0, s3)


def multi_objective(pf, dc, alpha: float):
    """(1 - alpha) * pf + alpha * dc, for scalars or graph tensors."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if isinstance(pf, Tensor) or isinstance(dc, Tensor):
        return tt.add(tt.affine(pf, 1.0 - alpha), tt.affine(dc, alpha))
    return (1.0 - alpha) * pf + alpha * dc
