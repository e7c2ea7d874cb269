"""Token-wise alignment, learned token weights, fused similarity and losses.

Batched functions use the layout ``A[b, c, i, j]`` = cosine between token i of
video b and token j of text c. Similarity matrices are indexed
``S[video, text]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

DEFAULT_TAU = 0.07
DEFAULT_LAMBDA_OT = 1.0
DEFAULT_LAMBDA_D = 1.0

_MASK_NEG = -1e9


@dataclass
class WeightMLP:
    """Scores each token with a two-layer GELU MLP mapping D' -> 1."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "WeightMLP":
        return cls(
            w1=ad.parameter(rng.standard_normal((dim, dim)) / np.sqrt(dim)),
            b1=ad.parameter(np.zeros(dim)),
            w2=ad.parameter(rng.standard_normal((dim, 1)) * 0.1 / np.sqrt(dim)),
            b2=ad.parameter(np.zeros(1)),
        )

    @classmethod
    def zeros(cls, dim: int) -> "WeightMLP":
        return cls(*(ad.parameter(np.zeros(s)) for s in ((dim, dim), (dim,), (dim, 1), (1,))))

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


def token_alignment(V, T) -> np.ndarray:
    """Cosine alignment between the tokens of one video and one text."""
    V = np.asarray(V, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if V.ndim != 2 or T.ndim != 2 or V.shape[1] != T.shape[1]:
        raise ShapeError("token_alignment", V.shape, T.shape)
    out = []
    for name, X in (("video", V), ("text", T)):
        norms = np.linalg.norm(X, axis=1)
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            raise ValueError(f"{name} token {int(bad[0])} has zero norm")
        out.append(X / norms[:, None])
    return out[0] @ out[1].T


def token_weights(X, params: WeightMLP, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over tokens of MLP scores. ``X`` is (N, D') or (B, N, D')."""
    X = ad.as_tensor(X)
    h = ad.gelu(ad.add(ad.matmul(X, params.w1), params.b1))
    scores = ad.add(ad.matmul(h, params.w2), params.b2)
    scores = ad.reshape(scores, scores.shape[:-1])
    if mask is not None:
        scores = ad.add(scores, np.where(mask, 0.0, _MASK_NEG))
    return ad.row_softmax(scores)


def fused_similarity(A, w_v, w_t, s_ot=None, lambda_ot: float = DEFAULT_LAMBDA_OT, mode: str = "inference") -> float:
    """Weighted max-pooled alignment averaged over both directions.

    In ``train`` mode the OT similarity enters once with weight ``lambda_ot``;
    in ``inference`` mode it must be absent.
    """
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and s_ot is None:
        raise ValueError("train mode needs the OT similarity")
    if mode == "inference" and s_ot is not None:
        raise ValueError("the OT similarity is a training-only term; pass s_ot=None at inference")
    A = np.asarray(A, dtype=np.float64)
    w_v = np.asarray(w_v, dtype=np.float64)
    w_t = np.asarray(w_t, dtype=np.float64)
    if A.shape != (w_v.size, w_t.size):
        raise ShapeError("fused_similarity", A.shape, w_v.shape, w_t.shape)
    value = 0.5 * (w_v @ A.max(axis=1) + w_t @ A.max(axis=0))
    if mode == "train":
        value += lambda_ot * float(s_ot)
    return float(value)


def pairwise_alignment(v_norm, t_norm) -> Tensor:
    """(B_v, N_v, D), (B_t, N_t, D) -> (B_v, B_t, N_v, N_t) dot products."""
    v_norm, t_norm = ad.as_tensor(v_norm), ad.as_tensor(t_norm)
    Bv, Nv, D = v_norm.shape
    Bt, Nt, _ = t_norm.shape
    left = ad.reshape(v_norm, (Bv, 1, Nv, D))
    right = ad.reshape(ad.transpose(t_norm), (1, Bt, D, Nt))
    return ad.matmul(left, right)


def token_max_similarity(A, w_v, w_t, mask_v: np.ndarray, mask_t: np.ndarray) -> Tensor:
    """Batched token part of the fused similarity; returns (B_v, B_t).

    Padded tokens never win a max and carry zero weight.
    """
    A = ad.as_tensor(A)
    row_max = ad.max(ad.add(A, np.where(mask_t, 0.0, _MASK_NEG)[None, :, None, :]), axis=-1)
    col_max = ad.max(ad.add(A, np.where(mask_v, 0.0, _MASK_NEG)[:, None, :, None]), axis=-2)
    Bv, Nv = mask_v.shape
    Bt, Nt = mask_t.shape
    v_part = ad.sum(ad.mul(row_max, ad.reshape(w_v, (Bv, 1, Nv))), axis=-1)
    t_part = ad.sum(ad.mul(col_max, ad.reshape(w_t, (1, Bt, Nt))), axis=-1)
    return ad.scale(ad.add(v_part, t_part), 0.5)


def plan_similarity(A, plans: np.ndarray) -> Tensor:
    """sum_ij T*_ij A_ij per pair with the plans held constant."""
    return ad.sum(ad.mul(A, ad.constant(plans)), axis=(-2, -1))


def _symmetric_infonce(S, tau: float) -> Tensor:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    S = ad.as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError("contrastive_loss", S.shape, detail="need a square matrix")
    B = S.shape[0]
    eye = np.eye(B)
    logits = ad.scale(S, 1.0 / tau)
    rows = ad.sum(ad.mul(ad.log_softmax(logits), eye))
    cols = ad.sum(ad.mul(ad.log_softmax(ad.transpose(logits)), eye))
    return ad.scale(ad.add(rows, cols), -0.5 / B)


def contrastive_loss(S, tau: float = DEFAULT_TAU) -> Tensor:
    """Symmetric InfoNCE with matched pairs on the diagonal."""
    return _symmetric_infonce(S, tau)


def ot_loss(Dm, tau: float = DEFAULT_TAU) -> Tensor:
    """Symmetric InfoNCE over the matrix of OT similarities."""
    return _symmetric_infonce(Dm, tau)
