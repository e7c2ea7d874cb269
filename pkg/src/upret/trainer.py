"""Mini-batch training with Adam, ``UPRC`` checkpoints and deterministic evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import PairedSample
from .metrics import RetrievalReport, evaluate_matrix
from .model import RetrievalModel, batch_loss, inference_similarity
from .ot import NonFiniteCostError

log = logging.getLogger(__name__)

CKPT_MAGIC = b"UPRC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI32sQ")

# keys that change the parameter layout; evaluation refuses a mismatch
ARCH_KEYS = ("dim", "n_heads", "sigma_floor")


class NumericAbort(RuntimeError):
    """Loss went non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: "Checkpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


class CompatibilityError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch: int = 64
    epochs: int = 30
    k: int = 2
    eta: float = 0.1
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6
    lambda_ot: float = 1.0
    lambda_d: float = 1.0
    tau: float = 0.07
    seed: int = 0
    threads: int = 1
    checkpoint_interval: int = 1
    n_heads: int = 8
    sigma_floor: float = 1e-4
    sigma_bias: float = -3.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    eval_seed: int = 0
    eval_sampling: bool = True

    def validate(self) -> None:
        positive = ("batch", "epochs", "eta", "sinkhorn_iters", "sinkhorn_tol", "tau", "threads",
                    "checkpoint_interval", "n_heads", "adam_eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("lr", "k", "lambda_ot", "lambda_d", "sigma_floor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch == 1:
            warnings.warn("batch=1: both contrastive losses are identically zero", stacklevel=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def arch_hash(arch: dict) -> bytes:
    blob = json.dumps({k: arch[k] for k in ARCH_KEYS}, sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    epoch: int
    config: dict
    arch: dict
    rng_state: dict
    config_hash: bytes = b""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = arch_hash(self.arch)

    def model(self) -> RetrievalModel:
        m = RetrievalModel(self.arch["dim"], self.arch["n_heads"], self.arch["sigma_floor"])
        m.load_arrays(self.params)
        return m


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.params)
    meta = {
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "arch": ckpt.arch,
        "rng_state": ckpt.rng_state,
        "tensors": [[n, list(ckpt.params[n].shape)] for n in names],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, ckpt.config_hash, len(meta_bytes)))
        fh.write(meta_bytes)
        for group in (ckpt.params, ckpt.adam_m, ckpt.adam_v):
            for n in names:
                fh.write(np.ascontiguousarray(group[n], dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEADER.size:
        raise CompatibilityError(f"{path}: truncated checkpoint header")
    magic, version, chash, meta_len = _CKPT_HEADER.unpack_from(buf, 0)
    if magic != CKPT_MAGIC:
        raise CompatibilityError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise CompatibilityError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    meta = json.loads(buf[off : off + meta_len].decode())
    off += meta_len
    groups = []
    for _ in range(3):
        g = {}
        for name, shape in meta["tensors"]:
            n = int(np.prod(shape))
            if off + 8 * n > len(buf):
                raise CompatibilityError(f"{path}: truncated tensor {name}")
            g[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
        groups.append(g)
    ckpt = Checkpoint(groups[0], groups[1], groups[2], meta["step"], meta["epoch"], meta["config"],
                      meta["arch"], meta["rng_state"], chash)
    if arch_hash(ckpt.arch) != chash:
        raise CompatibilityError(f"{path}: stored config hash does not match its architecture")
    return ckpt


@dataclass
class EpochRecord:
    epoch: int
    loss_s: float
    loss_d: float
    val_r1_t2v: float
    val_r1_v2t: float
    unconverged: int = 0

    def as_tsv(self) -> str:
        return f"{self.epoch}\t{self.loss_s:.6f}\t{self.loss_d:.6f}\t{self.val_r1_t2v:.2f}\t{self.val_r1_v2t:.2f}"


LOG_HEADER = "epoch\tL_S\tL_D\tval_r1_t2v\tval_r1_v2t"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)


def _set_threads(n: int) -> None:
    try:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except ImportError:  # pragma: no cover
        pass


def _snapshot(model, m, v, step, epoch, config: TrainConfig, dim: int, rng) -> Checkpoint:
    return Checkpoint(
        params={k: t.data.copy() for k, t in model.parameters().items()},
        adam_m={k: a.copy() for k, a in m.items()},
        adam_v={k: a.copy() for k, a in v.items()},
        step=step,
        epoch=epoch,
        config=asdict(config),
        arch={"dim": dim, "n_heads": config.n_heads, "sigma_floor": config.sigma_floor},
        rng_state=rng.bit_generator.state,
    )


def train(
    config: TrainConfig,
    train_set: list[PairedSample],
    val_set: list[PairedSample] | None = None,
    resume: Checkpoint | None = None,
    on_epoch: Callable[[EpochRecord, Checkpoint | None], None] | None = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs (counting those already in ``resume``).

    ``on_epoch`` receives every epoch record, plus a checkpoint on epochs that
    hit ``checkpoint_interval``.
    """
    config.validate()
    if not train_set:
        raise ValueError("training split is empty")
    _set_threads(config.threads)
    dim = train_set[0].video.shape[1]
    init_seq, train_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = RetrievalModel(dim, config.n_heads, config.sigma_floor, config.sigma_bias,
                           rng=np.random.default_rng(init_seq))
    params = model.parameters()
    m = {k: np.zeros_like(t.data) for k, t in params.items()}
    v = {k: np.zeros_like(t.data) for k, t in params.items()}
    rng = np.random.default_rng(train_seq)
    step, start_epoch = 0, 0
    if resume is not None:
        if resume.arch["dim"] != dim:
            raise CompatibilityError(f"checkpoint width {resume.arch['dim']} != corpus width {dim}")
        model.load_arrays(resume.params)
        m = {k: a.copy() for k, a in resume.adam_m.items()}
        v = {k: a.copy() for k, a in resume.adam_v.items()}
        step, start_epoch = resume.step, resume.epoch
        rng.bit_generator.state = resume.rng_state

    history: list[EpochRecord] = []
    last_good = _snapshot(model, m, v, step, start_epoch, config, dim, rng)
    n = len(train_set)
    for epoch in range(start_epoch + 1, config.epochs + 1):
        order = rng.permutation(n)
        ls, ld, unconverged, batches = 0.0, 0.0, 0, 0
        for lo in range(0, n, config.batch):
            batch = [train_set[i] for i in order[lo : lo + config.batch]]
            try:
                out = batch_loss(model, batch, rng, K=config.k, tau=config.tau, lambda_ot=config.lambda_ot,
                                 lambda_d=config.lambda_d, eta=config.eta, sinkhorn_iters=config.sinkhorn_iters,
                                 sinkhorn_tol=config.sinkhorn_tol)
            except NonFiniteCostError:
                raise NumericAbort(f"non-finite alignment at step {step + 1} (epoch {epoch})", last_good) from None
            if not math.isfinite(float(out.loss.data)):
                raise NumericAbort(f"non-finite loss at step {step + 1} (epoch {epoch})", last_good)
            ad.zero_grads(params.values())
            ad.backward(out.loss)
            step += 1
            _adam_step(params, m, v, step, config)
            ls += out.loss_s
            ld += out.loss_d
            unconverged += out.unconverged
            batches += 1
        if unconverged:
            log.warning("epoch %d: %d Sinkhorn solves stopped before tolerance", epoch, unconverged)
        r_t2v = r_v2t = float("nan")
        if val_set:
            reports = evaluate_model(model, val_set, config)
            r_t2v, r_v2t = reports["t2v"].r1, reports["v2t"].r1
        rec = EpochRecord(epoch, ls / batches, ld / batches, r_t2v, r_v2t, unconverged)
        history.append(rec)
        log.info(rec.as_tsv())
        last_good = _snapshot(model, m, v, step, epoch, config, dim, rng)
        if on_epoch is not None:
            due = epoch % config.checkpoint_interval == 0 or epoch == config.epochs
            on_epoch(rec, last_good if due else None)
    return TrainResult(last_good, history)


def _adam_step(params, m, v, step: int, config: TrainConfig) -> None:
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for k, t in params.items():
        g = t.grad
        if g is None:
            continue
        m[k] = b1 * m[k] + (1.0 - b1) * g
        v[k] = b2 * v[k] + (1.0 - b2) * g * g
        t.data = t.data - config.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + config.adam_eps)


def evaluate_model(model: RetrievalModel, samples: list[PairedSample], config: TrainConfig,
                   directions=("t2v", "v2t")) -> dict[str, RetrievalReport]:
    """Inference-mode retrieval metrics; sampling uses a fresh ``eval_seed`` stream."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    if samples[0].video.shape[1] != model.dim:
        raise CompatibilityError(f"corpus width {samples[0].video.shape[1]} != model width {model.dim}")
    rng = np.random.default_rng(config.eval_seed)
    S = inference_similarity(model, samples, config.k, rng, sample=config.eval_sampling)
    return evaluate_matrix(S.T, directions)  # ranking wants [text, video]


def evaluate(checkpoint: Checkpoint, samples: list[PairedSample], directions=("t2v", "v2t"),
             arch: dict | None = None) -> dict[str, RetrievalReport]:
    if arch is not None and arch_hash(arch) != checkpoint.config_hash:
        raise CompatibilityError("configuration does not match the checkpoint's architecture")
    config = TrainConfig.from_dict(checkpoint.config)
    return evaluate_model(checkpoint.model(), samples, config, directions)
