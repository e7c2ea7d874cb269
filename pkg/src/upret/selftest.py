"""Fast oracle suite behind ``upret selftest``.

Every check compares the library against an independent route (brute force,
finite differences, closed forms, Monte Carlo statistics) and reports a single
PASS/FAIL line. Seeds are fixed, so the output is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import dist_head as dh
from . import ot
from .data import CorpusSpec, generate_corpus
from .metrics import metrics, rank_matrix
from .model import RetrievalModel, batch_loss
from .similarity import contrastive_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<22} {self.detail}"


def _weights(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


# op name -> (scalar function of one tensor, point sampler)
def op_cases() -> dict[str, tuple[Callable, Callable]]:
    W = _weights((3, 4), 1)
    R34 = _weights((3, 4), 2)
    R3 = _weights((3,), 3)
    R38 = _weights((3, 8), 4)
    other = _weights((3, 4), 5)

    def weighted(f, R):
        return lambda x: ad.sum(ad.mul(f(x), R))

    normal = lambda rng: rng.standard_normal((3, 4))  # noqa: E731
    positive = lambda rng: np.abs(rng.standard_normal((3, 4))) + 0.5  # noqa: E731
    return {
        "matmul": (weighted(lambda x: ad.matmul(x, W.T), _weights((3, 3), 6)), normal),
        "transpose": (weighted(ad.transpose, _weights((4, 3), 7)), normal),
        "add": (weighted(lambda x: ad.add(x, other), R34), normal),
        "sub": (weighted(lambda x: ad.sub(other, x), R34), normal),
        "mul": (weighted(lambda x: ad.mul(x, x), R34), normal),
        "scale": (weighted(lambda x: ad.scale(x, -2.5), R34), normal),
        "row_softmax": (weighted(ad.row_softmax, R34), normal),
        "log_softmax": (weighted(ad.log_softmax, R34), normal),
        "exp": (weighted(ad.exp, R34), normal),
        "log": (weighted(ad.log, R34), positive),
        "sqrt": (weighted(ad.sqrt, R34), positive),
        "softplus": (weighted(ad.softplus, R34), normal),
        "sum": (weighted(lambda x: ad.sum(x, axis=1), R3), normal),
        "mean": (weighted(lambda x: ad.mean(x, axis=1), R3), normal),
        "max": (weighted(lambda x: ad.max(x, axis=1), R3), normal),
        "concat": (weighted(lambda x: ad.concat([x, ad.mul(x, x)], axis=-1), R38), normal),
        "split": (lambda x: ad.sum(ad.mul(ad.split(x, 2)[1], _weights((3, 2), 8))), normal),
        "l2_normalize": (weighted(ad.l2_normalize, R34), normal),
        "gelu": (weighted(ad.gelu, R34), normal),
        "reshape": (weighted(lambda x: ad.reshape(x, (4, 3)), _weights((4, 3), 9)), normal),
        "permute": (weighted(lambda x: ad.permute(ad.reshape(x, (3, 2, 2)), (2, 0, 1)), _weights((2, 3, 2), 10)),
                    normal),
    }


def check_sinkhorn_feasibility(eta: float | None = None, n: int = 30, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n):
        e = eta if eta is not None else (0.05, 0.1, 0.5)[i % 3]
        n_v, n_t = int(rng.integers(1, 65)), int(rng.integers(1, 33))
        C = rng.uniform(0.0, 2.0, (n_v, n_t))
        plan = ot.sinkhorn(C, ot.Marginals.uniform(n_v, n_t), e, max_iters=100_000, tol=1e-6)
        worst = max(worst, plan.marginal_violation)
    return CheckResult("sinkhorn_feasibility", worst <= 1e-6, f"max violation {worst:.2e} over {n} plans")


def check_exact_ot(eta: float | None = None, n: int = 10, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    e = 0.01 if eta is None else eta
    worst = 0.0
    for _ in range(n):
        N = int(rng.integers(1, 7))
        C = rng.uniform(0.0, 2.0, (N, N))
        m = ot.Marginals.uniform(N, N)
        plan = ot.sinkhorn(C, m, e, max_iters=1_000, tol=1e-9)  # cost settles long before feasibility
        worst = max(worst, abs(float((plan.values * C).sum()) - ot.exact_ot_bruteforce(C, m)))
    return CheckResult("exact_ot_agreement", worst <= 0.02, f"max gap {worst:.2e} at eta={e}")


def check_max_entropy(eta: float | None = None, n: int = 5, seed: int = 2) -> CheckResult:
    # first order: T - p q^T ~ p_i q_j (C_ij - centre) / eta, so instances need
    # N_v * N_t in the hundreds before 1e-4 is reachable at eta = 100
    rng = np.random.default_rng(seed)
    e = 100.0 if eta is None else eta
    worst = 0.0
    for _ in range(n):
        n_v, n_t = int(rng.integers(32, 65)), int(rng.integers(16, 33))
        m = ot.Marginals.uniform(n_v, n_t)
        plan = ot.sinkhorn(rng.uniform(0.0, 2.0, (n_v, n_t)), m, e, max_iters=10_000, tol=1e-12)
        worst = max(worst, float(np.abs(plan.values - np.outer(m.p_v, m.p_t)).max()))
    return CheckResult("max_entropy_limit", worst <= 1e-4, f"max deviation {worst:.2e} at eta={e}")


def check_gradients(points: int = 3, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, worst_op = 0.0, ""
    for name, (fn, sampler) in op_cases().items():
        for _ in range(points):
            err = ad.grad_check(fn, sampler(rng), 1e-5)
            if err > worst:
                worst, worst_op = err, name
    return CheckResult("gradient_ops", worst <= 1e-4, f"max rel err {worst:.2e} ({worst_op})")


def loss_gradient_errors(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """grad_check of L_S + L_D on a 2-pair batch, one parameter tensor at a time.

    The Sinkhorn plans are solved once and then held fixed, as in training,
    and every evaluation replays the same Gaussian draws.
    """
    pairs = generate_corpus(CorpusSpec(pairs=20, vocab=12, dim=8, polysemy=2, seed=seed))["train"][:2]
    model = RetrievalModel(8, n_heads=2, rng=np.random.default_rng(seed))
    opts = dict(K=2, tau=0.07, lambda_ot=1.0, lambda_d=1.0, eta=0.1, sinkhorn_iters=100, sinkhorn_tol=1e-6)
    plans = batch_loss(model, pairs, np.random.default_rng(seed), **opts).plans
    errors = {}
    for name, original in model.parameters().items():
        def loss_of(x, name=name):
            model.set_parameter(name, x)
            return batch_loss(model, pairs, np.random.default_rng(seed), plans=plans, **opts).loss

        errors[name] = ad.grad_check(loss_of, original.data, eps)
        model.set_parameter(name, original)
    return errors


def check_loss_gradient() -> CheckResult:
    errors = loss_gradient_errors()
    name = max(errors, key=errors.get)
    return CheckResult("gradient_loss", errors[name] <= 1e-4, f"max rel err {errors[name]:.2e} ({name})")


def brute_force_ranks(S: np.ndarray, direction: str) -> np.ndarray:
    """Independent re-ranking: sort each query's candidates and find the match."""
    S = np.asarray(S)
    Q = S.shape[0]
    ranks = np.empty(Q, dtype=np.int64)
    for q in range(Q):
        scores = S[q, :] if direction == "t2v" else S[:, q]
        order = sorted(range(Q), key=lambda c: (-scores[c], c != q))
        ranks[q] = next(pos for pos, c in enumerate(order, 1) if c == q)
    return ranks


def brute_force_report(ranks: np.ndarray) -> tuple:
    vals = sorted(int(r) for r in ranks)
    Q = len(vals)
    mid = (vals[(Q - 1) // 2] + vals[Q // 2]) / 2.0
    recall = tuple(100.0 * sum(1 for r in vals if r <= k) / Q for k in (1, 5, 10))
    return recall + (mid, math.fsum(vals) / Q)


def check_metric_oracle(n: int = 10, size: int = 50, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        S = np.round(rng.standard_normal((size, size)), 1)  # coarse values force ties
        for d in ("t2v", "v2t"):
            rep = metrics(rank_matrix(S, d), d)
            if (rep.r1, rep.r5, rep.r10, rep.medr, rep.mnr) != brute_force_report(brute_force_ranks(S, d)):
                bad += 1
    return CheckResult("metric_oracle", bad == 0, f"{bad} mismatches over {2 * n} rankings")


def check_sampling(draws: int = 20_000, seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    zeros = np.zeros((draws, 1))
    field = dh.GaussianTokenField(ad.Tensor(zeros), ad.Tensor(np.ones((draws, 1))))
    x = dh.sample_refine(zeros, field, 2, rng).data.ravel()
    var_target = 2.0 / 9.0
    se_mean = math.sqrt(var_target / draws)
    # var of the sample variance for a Gaussian: 2 sigma^4 / (n - 1)
    se_var = var_target * math.sqrt(2.0 / (draws - 1))
    ok = abs(x.mean()) <= 3 * se_mean and abs(x.var(ddof=1) - var_target) <= 3 * se_var
    return CheckResult("sampling_statistics", ok, f"mean {x.mean():+.4f}, var {x.var(ddof=1):.4f} (2/9={var_target:.4f})")


def check_loss_closed_form() -> CheckResult:
    got = float(contrastive_loss(np.eye(2), tau=1.0).data)
    want = math.log1p(math.exp(-1.0))
    single = float(contrastive_loss(np.array([[0.3]]), tau=0.07).data) + 0.0
    ok = abs(got - want) <= 1e-12 and single == 0.0
    return CheckResult("loss_closed_form", ok, f"B=2: {got:.6f} vs {want:.6f}; B=1: {single}")


def run_selftest(eta: float | None = None) -> list[CheckResult]:
    """Run every check; ``eta`` overrides the regularisation used by the OT checks."""
    checks = [
        lambda: check_sinkhorn_feasibility(eta),
        lambda: check_exact_ot(eta),
        lambda: check_max_entropy(eta),
        check_gradients,
        check_loss_gradient,
        check_metric_oracle,
        check_sampling,
        check_loss_closed_form,
    ]
    names = ["sinkhorn_feasibility", "exact_ot_agreement", "max_entropy_limit", "gradient_ops",
             "gradient_loss", "metric_oracle", "sampling_statistics", "loss_closed_form"]
    results = []
    for name, check in zip(names, checks):
        try:
            res = check()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(name, False, f"error: {exc}")
        results.append(res)
    return results
