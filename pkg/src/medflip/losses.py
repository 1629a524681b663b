"""Semantic soft-target contrastive loss with a spectral (largest singular value) term.

Reading choices, all configurable and documented in the README:

* predicted similarities are computed in both directions (rows = images
  normalised over texts, and rows = texts normalised over images);
* the SVD term is a softmax over the singular spectrum of the batch logit
  matrix, scored on its largest value;
* ``soft_ce`` (default) uses the label-derived soft targets as a
  cross-entropy target; ``verbatim`` keeps the original form
  ``-sum log y_ii + sum_{j != i} log(1 - y_ij)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DomainError, ShapeError, Tensor

LOSS_MODES = ("soft_ce", "verbatim")


class LossConfigError(ValueError):
    pass


@dataclass
class LossBreakdown:
    contrastive_term: Tensor
    svd_term: Tensor
    total: Tensor
    sigma_spectrum: np.ndarray
    beta: float
    temperature_T: float
    temperature_tau: float
    target_entropy: float | None = None

    def as_floats(self) -> dict[str, float]:
        return {
            "contrastive": self.contrastive_term.item(),
            "svd": self.svd_term.item(),
            "total": self.total.item(),
        }


def semantic_similarity(l_img, l_txt) -> np.ndarray:
    """Cosine similarity between image and text label vectors; zero rows give 0."""
    a = np.asarray(l_img.data if isinstance(l_img, Tensor) else l_img, dtype=np.float64)
    b = np.asarray(l_txt.data if isinstance(l_txt, Tensor) else l_txt, dtype=np.float64)
    if a.ndim == 1:
        a = a[None]
    if b.ndim == 1:
        b = b[None]
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"label width mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    a = np.where(na > T.NORM_EPS, a / np.maximum(na, T.NORM_EPS), 0.0)
    b = np.where(nb > T.NORM_EPS, b / np.maximum(nb, T.NORM_EPS), 0.0)
    return a @ b.T


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def soft_targets(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-softmax of s (image -> text) and of s^T (text -> image)."""
    s = np.asarray(s, dtype=np.float64)
    return _softmax_np(s), _softmax_np(s.T)


def predicted_similarity(v_norm: Tensor, t_norm: Tensor, temperature: float) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (logits, y_hat_v2t, y_hat_t2v) with logits = v_norm t_norm^T."""
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    logits = T.matmul(v_norm, T.transpose(t_norm))
    return logits, T.softmax_rows(logits, temperature), T.softmax_rows(T.transpose(logits), temperature)


def svd_loss(logits: Tensor, tau: float = 1.0) -> tuple[Tensor, np.ndarray]:
    """-log softmax(sigma / tau)[0] over the singular values of the logit matrix."""
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    _, sigma, _ = T.svd(logits)
    z = T.scale(sigma, 1.0 / tau)
    # log-sum-exp with a constant shift
    shift = float(z.data.max())
    lse = T.log(T.sum(T.exp(z - shift))) + shift
    return lse - z[0], sigma.data.copy()


def cross_entropy(target: np.ndarray, pred: Tensor) -> Tensor:
    """-sum_ij p_ij log q_ij / N for N rows."""
    return T.scale(T.sum(T.mul(Tensor(target), T.log(pred))), -1.0 / pred.shape[0])


def _verbatim_direction(y_hat: Tensor) -> Tensor:
    n = y_hat.shape[0]
    eye = np.eye(n, y_hat.shape[1])
    diag_term = T.scale(T.sum(T.mul(Tensor(eye), T.log(y_hat))), -1.0)
    off_term = T.sum(T.mul(Tensor(1.0 - eye), T.log(T.sub(1.0, y_hat))))
    return T.scale(diag_term + off_term, 1.0 / n)


def entropy(p: np.ndarray) -> float:
    return float(-(p * np.log(np.maximum(p, T.LOG_CLAMP))).sum() / p.shape[0])


def medflip_loss(y_hat_v2t: Tensor, y_hat_t2v: Tensor, y_v2t: np.ndarray, y_t2v: np.ndarray,
                 svd_term: Tensor, beta: float, mode: str = "soft_ce",
                 sigma: np.ndarray | None = None, temperature_T: float = 0.07,
                 tau: float = 1.0) -> LossBreakdown:
    if mode == "soft_ce":
        contrastive = T.scale(cross_entropy(y_v2t, y_hat_v2t) + cross_entropy(y_t2v, y_hat_t2v), 0.5)
        ent = 0.5 * (entropy(y_v2t) + entropy(y_t2v))
    elif mode == "verbatim":
        if y_hat_v2t.shape[0] != y_hat_v2t.shape[1]:
            raise ShapeError(f"verbatim mode needs a square batch, got {y_hat_v2t.shape}")
        contrastive = T.scale(_verbatim_direction(y_hat_v2t) + _verbatim_direction(y_hat_t2v), 0.5)
        ent = None
    else:
        raise LossConfigError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    total = contrastive + T.scale(svd_term, beta)
    return LossBreakdown(contrastive, svd_term, total, np.asarray(sigma) if sigma is not None else np.array([]),
                         beta, temperature_T, tau, ent)


def compute_loss(pair, l_img: np.ndarray, l_txt: np.ndarray, *, mode: str = "soft_ce",
                 beta: float = 0.1, temperature_T: float = 0.07, tau: float = 1.0) -> LossBreakdown:
    """Full objective for one batch of embeddings and label vectors."""
    s = semantic_similarity(l_img, l_txt)
    y_v2t, y_t2v = soft_targets(s)
    logits, y_hat_v2t, y_hat_t2v = predicted_similarity(pair.v_norm, pair.t_norm, temperature_T)
    svd_term, sigma = svd_loss(logits, tau)
    return medflip_loss(y_hat_v2t, y_hat_t2v, y_v2t, y_t2v, svd_term, beta, mode,
                        sigma=sigma, temperature_T=temperature_T, tau=tau)
