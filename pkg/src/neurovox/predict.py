"""Predictive validation: features from modulated warped tissue maps, linear
kernels, GP classification (Laplace approximation), cross-validation, AUC.

Labels are +1 (female) / -1 (male); probabilities refer to the +1 class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DegenerateInputError, DomainError, GeometryError
from .stats import _midranks
from .volume import BinaryMask, Volume, gaussian_smooth


@dataclass(frozen=True)
class FeatureVector:
    subject_id: str
    values: np.ndarray

    def __len__(self):
        return len(self.values)


@dataclass
class KernelMatrix:
    matrix: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.matrix, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise DomainError(f"kernel must be square, got {k.shape}")
        if np.abs(k - k.T).max() > 1e-9:
            raise DomainError("kernel matrix is not symmetric")
        trace = np.trace(k)
        if len(k) and np.linalg.eigvalsh(k).min() < -1e-8 * max(trace, 1.0):
            raise DomainError("kernel matrix is not positive semidefinite")
        self.matrix = k

    def __len__(self):
        return len(self.matrix)


@dataclass
class CvResult:
    ids: tuple[str, ...]
    probabilities: np.ndarray
    predicted: np.ndarray
    true_labels: np.ndarray
    fold: np.ndarray
    auc: float
    balanced_accuracy: float


def build_features(gm: Volume, wm: Volume, csf: Volume, mask: BinaryMask,
                   fwhm_mm: float = 8.0, subject_id: str = "") -> FeatureVector:
    """Smooth each map, take mask voxels in index order, concatenate GM|WM|CSF."""
    parts = []
    for v in (gm, wm, csf):
        if not v.grid.same_geometry(mask.grid):
            raise GeometryError("feature maps and mask must share the atlas grid")
        parts.append(gaussian_smooth(v, fwhm_mm).data[mask.data])
    values = np.concatenate(parts)
    if not np.isfinite(values).all():
        raise DomainError("non-finite feature values")
    return FeatureVector(subject_id, values)


def linear_kernel(features: list[FeatureVector]) -> KernelMatrix:
    """Gram matrix of inner products, scaled by 1/mean(diagonal)."""
    lengths = {len(f) for f in features}
    if len(lengths) != 1:
        raise DomainError(f"feature lengths differ: {sorted(lengths)}")
    f = np.stack([fv.values for fv in features])
    k = f @ f.T
    scale = float(np.trace(k)) / len(k)
    if scale <= 0:
        raise DegenerateInputError("all-zero feature vectors give a zero kernel")
    return KernelMatrix(k / scale)


def center_kernel_fold(kernel: KernelMatrix, train: np.ndarray,
                       test: np.ndarray) -> KernelMatrix:
    """Kernel-space mean centering with the mean taken over training rows only."""
    train = np.asarray(train, dtype=int)
    test = np.asarray(test, dtype=int)
    if train.size == 0:
        raise DomainError("empty training set")
    if np.intersect1d(train, test).size:
        raise DomainError("train and test sets overlap")
    k = kernel.matrix
    col_mean = k[:, train].mean(axis=1)
    grand = k[np.ix_(train, train)].mean()
    centred = k - col_mean[:, None] - col_mean[None, :] + grand
    return KernelMatrix(centred)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _laplace_mode(k_train: np.ndarray, y: np.ndarray, max_iter: int = 100):
    """Newton iteration for the latent posterior mode (logistic likelihood)."""
    n = len(y)
    t = (y + 1.0) / 2.0
    f = np.zeros(n)
    obj_prev = -np.inf
    for _ in range(max_iter):
        pi = _sigmoid(f)
        w = pi * (1.0 - pi)
        sw = np.sqrt(w)
        b_mat = np.eye(n) + sw[:, None] * k_train * sw[None, :]
        chol = np.linalg.cholesky(b_mat)
        b = w * f + (t - pi)
        rhs = sw * (k_train @ b)
        sol = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        a = b - sw * sol
        f = k_train @ a
        obj = -0.5 * float(a @ f) - float(np.logaddexp(0.0, -y * f).sum())
        if abs(obj - obj_prev) < 1e-10 * (1.0 + abs(obj)):
            pi = _sigmoid(f)
            return f, t - pi, pi * (1.0 - pi), chol
        obj_prev = obj
    raise ConvergenceError("Laplace mode finding did not converge in "
                           f"{max_iter} iterations")


def gp_classify(kernel: KernelMatrix, train_labels: np.ndarray,
                train: np.ndarray, test: np.ndarray) -> np.ndarray:
    """Test-point probabilities for the +1 class.

    Binary GP with logistic likelihood; Laplace approximation at the training
    mode; the logistic predictive integral is collapsed with the standard
    probit rescaling 1/sqrt(1 + pi*var/8).
    """
    train = np.asarray(train, dtype=int)
    test = np.asarray(test, dtype=int)
    y = np.asarray(train_labels, dtype=float)
    if set(np.unique(y)) - {-1.0, 1.0}:
        raise DomainError("labels must be +/-1")
    if len(y) != len(train):
        raise DomainError("labels and training indices differ in length")
    k = kernel.matrix
    k_train = k[np.ix_(train, train)].copy()
    jitter = 1e-6 * np.trace(k_train) / max(len(train), 1)
    k_train[np.diag_indices_from(k_train)] += jitter

    _, grad, w, chol = _laplace_mode(k_train, y)
    k_star = k[np.ix_(test, train)]
    f_star = k_star @ grad
    sw = np.sqrt(w)
    v = np.linalg.solve(chol, (sw[:, None] * k_star.T))
    var_star = np.maximum(k[test, test] + jitter - (v * v).sum(axis=0), 1e-12)
    return _sigmoid(f_star / np.sqrt(1.0 + np.pi * var_star / 8.0))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC; tied scores contribute one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC needs both classes present")
    ranks = _midranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores: np.ndarray, labels: np.ndarray) -> list[tuple[float, float]]:
    """(FPR, TPR) sweep over descending score thresholds, for plotting."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("ROC needs both classes present")
    points = [(0.0, 0.0)]
    for thr in np.unique(scores)[::-1]:
        sel = scores >= thr
        points.append((float((sel & ~pos).sum() / n_neg), float((sel & pos).sum() / n_pos)))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def balanced_accuracy(probabilities: np.ndarray, labels: np.ndarray,
                      threshold: float = 0.5) -> float:
    """Mean of per-class recalls at the threshold."""
    probabilities = np.asarray(probabilities, dtype=float)
    labels = np.asarray(labels)
    pos = labels > 0
    if not pos.any() or pos.all():
        raise DegenerateInputError("balanced accuracy needs both classes present")
    pred_pos = probabilities >= threshold
    recall_pos = float((pred_pos & pos).sum() / pos.sum())
    recall_neg = float((~pred_pos & ~pos).sum() / (~pos).sum())
    return 0.5 * (recall_pos + recall_neg)


def kfold_cv(kernel: KernelMatrix, labels: np.ndarray, ids: list[str],
             k: int = 10, seed: int = 0) -> CvResult:
    """Unstratified k-fold CV with a seed-keyed permutation of the id-sorted
    cohort, so fold membership is identical across methods and independent of
    input ordering."""
    n = len(kernel)
    labels = np.asarray(labels, dtype=float)
    if len(labels) != n or len(ids) != n:
        raise DomainError("kernel, labels and ids must agree in length")
    if len(set(ids)) != n:
        raise DomainError("subject ids must be unique")
    if k < 2 or k > n:
        raise DomainError(f"need 2 <= k <= n, got k={k}, n={n}")
    order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = order[perm]

    prob = np.full(n, np.nan)
    fold_of = np.full(n, -1, dtype=int)
    for fold_idx, test in enumerate(np.array_split(shuffled, k)):
        train = np.setdiff1d(np.arange(n), test)
        centred = center_kernel_fold(kernel, train, test)
        prob[test] = gp_classify(centred, labels[train], train, test)
        fold_of[test] = fold_idx
    predicted = np.where(prob >= 0.5, 1.0, -1.0)
    return CvResult(
        ids=tuple(ids),
        probabilities=prob,
        predicted=predicted,
        true_labels=labels,
        fold=fold_of,
        auc=roc_auc(prob, labels),
        balanced_accuracy=balanced_accuracy(prob, labels),
    )
