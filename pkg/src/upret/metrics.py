"""Retrieval ranks and R@K / MedR / MnR reports.

Ranking takes similarity matrices indexed ``S[text, video]`` with ground-truth
pairs on the diagonal: text-to-video queries are the rows, video-to-text
queries the columns. The model produces ``S[video, text]``, so callers pass
its transpose.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

DIRECTIONS = ("t2v", "v2t")


@dataclass(frozen=True)
class RetrievalReport:
    direction: str
    r1: float
    r5: float
    r10: float
    medr: float
    mnr: float
    queries: int

    def as_tsv(self) -> str:
        return "\t".join(
            [self.direction.upper()]
            + [f"{x:.2f}" for x in (self.r1, self.r5, self.r10, self.medr, self.mnr)]
            + [str(self.queries)]
        )

    def as_keyvalue(self) -> list[str]:
        d = asdict(self)
        prefix = d.pop("direction")
        d["q"] = d.pop("queries")
        return [f"{prefix}.{k}={v!r}" for k, v in d.items()]


TSV_HEADER = "direction\tr1\tr5\tr10\tmedr\tmnr\tq"


def rank_matrix(S, direction: str) -> np.ndarray:
    """1-based rank of the true match for every query.

    ``S`` is indexed [text, video]: T2V queries are rows, V2T queries are
    columns. rank = 1 + number of candidates scoring strictly higher than the
    match, so ties never hurt the true match.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"need a square similarity matrix, got {S.shape}")
    if np.isnan(S).any():
        raise ValueError("similarity matrix contains NaN")
    if direction == "v2t":
        S = S.T
    elif direction != "t2v":
        raise ValueError(f"direction must be 't2v' or 'v2t', got {direction!r}")
    diag = np.diag(S)
    return 1 + (S > diag[:, None]).sum(axis=1)


def metrics(ranks, direction: str = "t2v") -> RetrievalReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no queries to score")
    q = ranks.size

    def recall(k):
        return 100.0 * float((ranks <= k).sum()) / q

    return RetrievalReport(
        direction=direction,
        r1=recall(1),
        r5=recall(5),
        r10=recall(10),
        medr=float(np.median(ranks)),
        mnr=float(ranks.mean()),
        queries=q,
    )


def evaluate_matrix(S, directions=DIRECTIONS) -> dict[str, RetrievalReport]:
    return {d: metrics(rank_matrix(S, d), d) for d in directions}
