"""Per-token Gaussian heads and reparameterised feature refinement.

Each modality's D-dim token features are split in half. The first half feeds a
self-attention + MLP branch that predicts per-token means (with a residual
connection); the second half feeds an identically shaped branch whose output
passes through softplus to give per-token scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

SIGMA_FLOOR = 1e-4
DEFAULT_HEADS = 8
DEFAULT_K = 2
MLP_RATIO = 4

_MASK_NEG = -1e9


@dataclass
class Branch:
    """Attention + two-layer MLP; shared shape for the mean and scale branches."""

    w_qkv: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, out_scale: float = 0.1, out_bias: float = 0.0) -> "Branch":
        hidden = MLP_RATIO * dim
        return cls(
            w_qkv=ad.parameter(rng.standard_normal((dim, 3 * dim)) / np.sqrt(dim)),
            w1=ad.parameter(rng.standard_normal((dim, hidden)) / np.sqrt(dim)),
            b1=ad.parameter(np.zeros(hidden)),
            w2=ad.parameter(rng.standard_normal((hidden, dim)) * out_scale / np.sqrt(hidden)),
            b2=ad.parameter(np.full(dim, out_bias)),
        )

    @classmethod
    def zeros(cls, dim: int) -> "Branch":
        hidden = MLP_RATIO * dim
        return cls(
            w_qkv=ad.parameter(np.zeros((dim, 3 * dim))),
            w1=ad.parameter(np.zeros((dim, hidden))),
            b1=ad.parameter(np.zeros(hidden)),
            w2=ad.parameter(np.zeros((hidden, dim))),
            b2=ad.parameter(np.zeros(dim)),
        )

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{k}": getattr(self, k) for k in ("w_qkv", "w1", "b1", "w2", "b2")}


@dataclass
class HeadParams:
    mu: Branch
    sigma: Branch
    n_heads: int = DEFAULT_HEADS

    @property
    def dim(self) -> int:
        return self.mu.w_qkv.shape[0]

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError(f"half width {self.dim} not divisible by {self.n_heads} heads")

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, n_heads: int = DEFAULT_HEADS, sigma_bias: float = -3.0):
        return cls(Branch.init(dim, rng), Branch.init(dim, rng, out_bias=sigma_bias), n_heads)

    @classmethod
    def zeros(cls, dim: int, n_heads: int = DEFAULT_HEADS):
        return cls(Branch.zeros(dim), Branch.zeros(dim), n_heads)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {**self.mu.parameters(prefix + "mu."), **self.sigma.parameters(prefix + "sigma.")}


@dataclass
class GaussianTokenField:
    mu: Tensor
    sigma: Tensor


def split_feature(tokens):
    """First D/2 columns feed the mean branch, last D/2 the scale branch."""
    tokens = ad.as_tensor(tokens)
    if tokens.shape[-1] % 2:
        raise ShapeError("split_feature", tokens.shape, detail="feature width must be even")
    return tuple(ad.split(tokens, 2, axis=-1))


def key_mask_bias(mask: np.ndarray | None) -> np.ndarray | None:
    """(B, N) validity mask -> additive bias broadcastable over attention scores."""
    if mask is None:
        return None
    return np.where(mask, 0.0, _MASK_NEG)[:, None, None, :]


def multi_head_attention(x, w_qkv, n_heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product self-attention over the token axis.

    ``x`` is (N, D) or (B, N, D); ``key_mask`` (B, N) hides padded keys.
    """
    x = ad.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    B, N, D = x.shape
    if w_qkv.shape != (D, 3 * D):
        raise ShapeError("attention", x.shape, w_qkv.shape, detail="w_qkv must be (D, 3D)")
    dk = D // n_heads
    q, k, v = ad.split(ad.matmul(x, w_qkv), 3, axis=-1)

    def heads(t):
        return ad.permute(ad.reshape(t, (B, N, n_heads, dk)), (0, 2, 1, 3))

    q, k, v = heads(q), heads(k), heads(v)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dk))
    bias = key_mask_bias(key_mask)
    if bias is not None:
        scores = ad.add(scores, bias)
    out = ad.matmul(ad.row_softmax(scores), v)
    out = ad.reshape(ad.permute(out, (0, 2, 1, 3)), (B, N, D))
    if squeeze:
        out = ad.reshape(out, (N, D))
    return out


def mlp(x, w1, b1, w2, b2) -> Tensor:
    return ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(x, w1), b1)), w2), b2)


def _branch_forward(x, branch: Branch, n_heads: int, key_mask) -> Tensor:
    att = multi_head_attention(x, branch.w_qkv, n_heads, key_mask)
    return mlp(att, branch.w1, branch.b1, branch.w2, branch.b2)


def predict_mu(tokens_mu, params: HeadParams, key_mask=None) -> Tensor:
    """mu = x + MLP(attention(x))."""
    tokens_mu = ad.as_tensor(tokens_mu)
    return ad.add(tokens_mu, _branch_forward(tokens_mu, params.mu, params.n_heads, key_mask))


def predict_sigma(tokens_sigma, params: HeadParams, key_mask=None, floor: float = SIGMA_FLOOR) -> Tensor:
    """sigma = softplus(MLP(attention(x))) + floor; no residual."""
    raw = _branch_forward(tokens_sigma, params.sigma, params.n_heads, key_mask)
    return ad.add(ad.softplus(raw), floor)


def sample_refine(tokens_half, field: GaussianTokenField, K: int, rng: np.random.Generator) -> Tensor:
    """Average the input with K reparameterised draws mu + eps * sigma.

    eps is i.i.d. standard normal per draw, token and channel. Gradients reach
    mu and sigma; eps is data.
    """
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    tokens_half = ad.as_tensor(tokens_half)
    if K == 0:
        return tokens_half
    mu, sigma = field.mu, field.sigma
    if mu.shape != tokens_half.shape or sigma.shape != tokens_half.shape:
        raise ShapeError("sample_refine", tokens_half.shape, mu.shape, sigma.shape)
    eps_sum = rng.standard_normal((K,) + mu.shape).sum(axis=0)
    total = ad.add(ad.add(tokens_half, ad.scale(mu, K)), ad.mul(sigma, eps_sum))
    return ad.scale(total, 1.0 / (K + 1))
