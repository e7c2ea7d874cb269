"""The retrieval model: one distribution head and one token-weight MLP per modality."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dist_head as dh
from . import similarity as sim
from .autodiff import Tensor
from .data import PairedSample
from .ot import sinkhorn_batch

MODALITIES = ("video", "text")


def pad_tokens(arrays: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack variable-length (N, D) arrays into (B, N_max, D) plus a mask and lengths."""
    lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    D = arrays[0].shape[1]
    out = np.zeros((len(arrays), int(lengths.max()), D))
    for b, a in enumerate(arrays):
        out[b, : a.shape[0]] = a
    mask = np.arange(out.shape[1])[None, :] < lengths[:, None]
    return out, mask, lengths


@dataclass
class Encoded:
    tokens: Tensor  # (B, N, D') unit rows, zero at padding
    weights: Tensor  # (B, N)
    mask: np.ndarray
    lengths: np.ndarray


class RetrievalModel:
    def __init__(self, dim: int, n_heads: int = dh.DEFAULT_HEADS, sigma_floor: float = dh.SIGMA_FLOOR,
                 sigma_bias: float = -3.0, rng: np.random.Generator | None = None):
        if dim % 2:
            raise ValueError(f"feature width must be even, got {dim}")
        half = dim // 2
        self.dim = dim
        self.n_heads = n_heads
        self.sigma_floor = sigma_floor
        if rng is None:
            self.heads = {m: dh.HeadParams.zeros(half, n_heads) for m in MODALITIES}
            self.weight_mlps = {m: sim.WeightMLP.zeros(half) for m in MODALITIES}
        else:
            self.heads = {m: dh.HeadParams.init(half, rng, n_heads, sigma_bias) for m in MODALITIES}
            self.weight_mlps = {m: sim.WeightMLP.init(half, rng) for m in MODALITIES}

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for m in MODALITIES:
            out.update(self.heads[m].parameters(f"{m}."))
            out.update(self.weight_mlps[m].parameters(f"{m}.omega."))
        return out

    def set_parameter(self, name: str, tensor: Tensor) -> None:
        """Swap in a different Tensor object for one named parameter."""
        modality, owner, attr = name.split(".")
        target = self.weight_mlps[modality] if owner == "omega" else getattr(self.heads[modality], owner)
        if getattr(target, attr).shape != tensor.shape:
            raise ValueError(f"{name}: shape {tensor.shape} != {getattr(target, attr).shape}")
        setattr(target, attr, tensor)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            raise ValueError(f"parameter names differ: {sorted(set(arrays) ^ set(params))}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def encode(self, samples_tokens: list[np.ndarray], modality: str, K: int, rng: np.random.Generator | None,
               sample: bool = True) -> Encoded:
        """Refine, weight and normalise one modality's tokens.

        ``sample=False`` replaces the K draws by the mean (deterministic path).
        """
        x, mask, lengths = pad_tokens(samples_tokens)
        x_mu, x_sigma = dh.split_feature(Tensor(x))
        if K > 0:
            head = self.heads[modality]
            mu = dh.predict_mu(x_mu, head, key_mask=mask)
            if sample:
                sigma = dh.predict_sigma(x_sigma, head, key_mask=mask, floor=self.sigma_floor)
                refined = dh.sample_refine(x_mu, dh.GaussianTokenField(mu, sigma), K, rng)
            else:
                refined = ad.scale(ad.add(x_mu, ad.scale(mu, K)), 1.0 / (K + 1))
        else:
            refined = x_mu
        weights = sim.token_weights(refined, self.weight_mlps[modality], mask)
        tokens = ad.mul(ad.l2_normalize(refined), mask[..., None].astype(np.float64))
        return Encoded(tokens, weights, mask, lengths)


@dataclass
class BatchOutput:
    loss: Tensor
    loss_s: float
    loss_d: float
    unconverged: int
    plans: np.ndarray | None = None


def batch_loss(model: RetrievalModel, samples: list[PairedSample], rng: np.random.Generator, *, K: int,
               tau: float, lambda_ot: float, lambda_d: float, eta: float, sinkhorn_iters: int,
               sinkhorn_tol: float, plans: np.ndarray | None = None) -> BatchOutput:
    """Training objective L_S + lambda_d * L_D on one mini-batch.

    The OT plans are solved on the current alignment values and then frozen,
    so gradients only reach the alignment inside the plan-weighted sum.
    Passing ``plans`` (shape (B, B, N_v, N_t)) skips the solver and uses them
    as given, which keeps the objective a smooth function of the parameters.
    """
    v = model.encode([s.video for s in samples], "video", K, rng)
    t = model.encode([s.text for s in samples], "text", K, rng)
    A = sim.pairwise_alignment(v.tokens, t.tokens)
    S = sim.token_max_similarity(A, v.weights, t.weights, v.mask, t.mask)
    loss_d = float("nan")
    unconverged = 0
    Dm = None
    use_ot = lambda_ot != 0.0 or lambda_d != 0.0
    if use_ot:
        B_v, B_t, N_v, N_t = A.shape
        cost = 1.0 - A.data.reshape(B_v * B_t, N_v, N_t)
        n_v = np.repeat(v.lengths, B_t)
        n_t = np.tile(t.lengths, B_v)
        if plans is None:
            plans, _, viols = sinkhorn_batch(cost, n_v, n_t, eta, sinkhorn_iters, sinkhorn_tol)
            unconverged = int((viols > sinkhorn_tol).sum())
        plans = plans.reshape(A.shape)
        Dm = sim.plan_similarity(A, plans)
        if lambda_ot != 0.0:
            S = ad.add(S, ad.scale(Dm, lambda_ot))
    L_S = sim.contrastive_loss(S, tau)
    loss = L_S
    if use_ot:
        L_D = sim.ot_loss(Dm, tau)
        loss_d = float(L_D.data)
        if lambda_d != 0.0:
            loss = ad.add(loss, ad.scale(L_D, lambda_d))
    return BatchOutput(loss, float(L_S.data), loss_d, unconverged, plans if use_ot else None)


def inference_similarity(model: RetrievalModel, samples: list[PairedSample], K: int,
                         rng: np.random.Generator | None, sample: bool = True, chunk: int = 128) -> np.ndarray:
    """Token-only fused similarity ``S[video, text]`` over a whole split (no OT term)."""
    enc = {}
    for modality in MODALITIES:
        parts = []
        for lo in range(0, len(samples), chunk):
            batch = samples[lo : lo + chunk]
            e = model.encode([getattr(s, modality) for s in batch], modality, K, rng, sample=sample)
            parts.append(e)
        enc[modality] = parts
    Q = len(samples)
    S = np.empty((Q, Q))
    row = 0
    for ev in enc["video"]:
        col = 0
        for et in enc["text"]:
            A = sim.pairwise_alignment(ev.tokens.data, et.tokens.data)
            block = sim.token_max_similarity(A, ev.weights.data, et.weights.data, ev.mask, et.mask).data
            S[row : row + block.shape[0], col : col + block.shape[1]] = block
            col += block.shape[1]
        row += ev.tokens.shape[0]
    return S
