"""Stage-1 distillation losses and the stage-2 next-token objective."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def vision_loss(H_v: Tensor, T_v) -> Tensor:
    """1 - mean row cosine between projected vision states and teacher features."""
    T_v = T_v if isinstance(T_v, Tensor) else Tensor(np.asarray(T_v, dtype=H_v.dtype))
    return 1.0 - ad.cosine_similarity(H_v, T_v.detach()).mean()


def feature_loss(H_t: Tensor, T_t) -> Tensor:
    """1 + mean(||H_t,i - T_t,i|| - cos(H_t,i, T_t,i)): magnitude and direction alignment."""
    T_t = (T_t if isinstance(T_t, Tensor) else Tensor(np.asarray(T_t, dtype=H_t.dtype))).detach()
    return 1.0 + (ad.l2_norm(H_t - T_t) - ad.cosine_similarity(H_t, T_t)).mean()


def ctp_logits(H_t: Tensor, W, tau: Tensor | float) -> Tensor:
    W = W.detach() if isinstance(W, Tensor) else Tensor(np.asarray(W, dtype=H_t.dtype))
    return (H_t @ W.T) / tau


def ctp_loss(H_t: Tensor, token_ids, W, tau: Tensor | float) -> Tensor:
    """Current-token prediction: row i of H_t @ W^T / tau should pick token i itself.

    W receives no gradient; H_t and tau do.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    n_vocab = (W.shape if isinstance(W, Tensor) else np.shape(W))[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_vocab):
        raise IndexError(f"token id outside vocabulary of size {n_vocab}")
    return ad.cross_entropy(ctp_logits(H_t, W, tau), ids)


def total_text_loss(H_t: Tensor, T_t, token_ids, W, tau) -> Tensor:
    return feature_loss(H_t, T_t) + ctp_loss(H_t, token_ids, W, tau)


def ntp_targets(token_ids: np.ndarray, answer: np.ndarray, ignore_index: int = -100) -> np.ndarray:
    """Target for logits at position i is the token at i + 1, kept only where that token is an answer."""
    ids = np.asarray(token_ids, dtype=np.int64)
    answer = np.asarray(answer, dtype=bool)
    targets = np.full(ids.shape, ignore_index, dtype=np.int64)
    keep = answer[..., 1:]
    shifted = ids[..., 1:]
    targets[..., :-1] = np.where(keep, shifted, ignore_index)
    return targets


def ntp_loss(logits: Tensor, token_ids, loss_mask, ignore_index: int = -100) -> Tensor:
    """Mean next-token cross-entropy over answer tokens.

    ``loss_mask`` flags token positions that are answer tokens; the logits one step
    earlier are scored against them. An all-false mask gives 0 with a warning.
    """
    return ad.cross_entropy(logits, ntp_targets(token_ids, loss_mask, ignore_index), ignore_index)
