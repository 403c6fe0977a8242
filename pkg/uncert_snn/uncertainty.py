"""Dirichlet evidential uncertainty per token and timestep, and the token importance score."""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .backbone import HeadWeights, logits_array
from .errors import ContractViolation, InvalidArgumentError, ShapeError
from .tensor_core import DenseTensor, SpikeTensor, reduce_mean_std

DEFAULT_LAMBDA = 0.9

SCORE_UNCERT = "uncert"
SCORE_MEAN = "mean"
SCORE_STD = "std"
SCORE_LAST = "last"
SCORE_MODES = (SCORE_UNCERT, SCORE_MEAN, SCORE_STD, SCORE_LAST)


@dataclass(frozen=True)
class EvidenceParams:
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidArgumentError(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass(frozen=True)
class UncertaintyTrajectory:
    values: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if any(not 0.0 < v <= 1.0 for v in self.values):
            raise ContractViolation("uncertainty values must lie in (0, 1]")


@dataclass(frozen=True)
class TokenStats:
    mu: float
    sigma: float


@dataclass(frozen=True)
class ImportanceScore:
    """Score of one token together with the lambda it was computed with."""

    score: float
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgumentError(f"lambda must be >= 0, got {self.lam}")

    @classmethod
    def of(cls, stats: TokenStats, lam: float = DEFAULT_LAMBDA) -> "ImportanceScore":
        return cls(score=stats.mu + lam * stats.sigma, lam=lam)


def _softplus(logits: np.ndarray) -> np.ndarray:
    l = np.asarray(logits, dtype=np.float64)
    # max(l, 0) + log1p(exp(-|l|)) never overflows
    return np.maximum(l, 0.0) + np.log1p(np.exp(-np.abs(l)))


def _uncertainty(evidence: np.ndarray) -> np.ndarray:
    c = evidence.shape[-1]
    total = (evidence + 1.0).sum(axis=-1)
    return c / total


def evidence_from_logits(logits: DenseTensor) -> DenseTensor:
    """Non-negative evidence e = softplus(l), evaluated in float64 and stored as float32."""
    return DenseTensor(_softplus(logits.data).astype(np.float32), copy=False)


def uncertainty_from_evidence(evidence: DenseTensor) -> DenseTensor:
    """
    U = C / S with alpha = e + 1 and S = sum_c alpha.

    Returns a tensor with the class axis removed; every value lies in (0, 1].

    Raises:
    ContractViolation: any evidence value is negative.
    """
    e = evidence.data.astype(np.float64)
    if e.shape[-1] < 2:
        raise ShapeError(f"evidence needs at least two classes, got {e.shape[-1]}")
    if np.any(e < 0):
        raise ContractViolation("evidence must be non-negative")
    return DenseTensor(_uncertainty(e).astype(np.float32), copy=False)


def trajectory_stats(traj) -> TokenStats:
    """Temporal mean and population standard deviation of one token's uncertainty trajectory."""
    values = traj.values if isinstance(traj, UncertaintyTrajectory) else traj
    mu, sigma = reduce_mean_std(values)
    return TokenStats(mu=mu, sigma=sigma)


def importance_score(stats: TokenStats, lam: float = DEFAULT_LAMBDA) -> float:
    return ImportanceScore.of(stats, lam).score


@dataclass(frozen=True)
class TokenScoring:
    """Per-token uncertainty analysis of one stage's spikes."""

    trajectories: np.ndarray  # [T,B,N]
    mu: np.ndarray  # [B,N]
    sigma: np.ndarray  # [B,N]
    scores: np.ndarray  # [B,N]


def analyse_tokens(
    tokens: SpikeTensor,
    head: HeadWeights,
    num_classes: int,
    lam: float = DEFAULT_LAMBDA,
    mode: str = SCORE_UNCERT,
) -> TokenScoring:
    """
    Trajectory, temporal statistics and importance score of every token.

    Each sample is scored from its own tokens only; the head consumes the
    binary token vector at every timestep.
    """
    if tokens.shape.rank != 4:
        raise ShapeError(f"token scoring expects [T,B,N,D], got {tokens.shape}")
    if tokens.shape[3] != head.dim:
        raise ShapeError(f"token dim {tokens.shape[3]} does not match head dim {head.dim}")
    EvidenceParams(num_classes)
    if head.num_classes != num_classes:
        raise ShapeError(f"head produces {head.num_classes} classes, expected {num_classes}")
    if lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    if mode not in SCORE_MODES:
        raise InvalidArgumentError(f"unknown score mode '{mode}', choose from {SCORE_MODES}")

    t = tokens.shape[0]
    logits = logits_array(tokens.data, head)
    evidence = _softplus(logits).astype(np.float32).astype(np.float64)
    traj = _uncertainty(evidence)
    mu = traj.sum(axis=0) / t
    sigma = np.sqrt(((traj - mu) ** 2).sum(axis=0) / t)
    if mode == SCORE_UNCERT:
        scores = mu + lam * sigma
    elif mode == SCORE_MEAN:
        scores = mu
    elif mode == SCORE_STD:
        scores = sigma
    else:
        scores = traj[-1]
    return TokenScoring(trajectories=traj, mu=mu, sigma=sigma, scores=np.array(scores, dtype=np.float64))


def score_tokens(
    stage_tokens: SpikeTensor,
    head: HeadWeights,
    num_classes: int,
    lam: float = DEFAULT_LAMBDA,
    mode: str = SCORE_UNCERT,
) -> DenseTensor:
    """Importance scores [B,N]: logits -> evidence -> U per step -> (mu, sigma) -> mu + lam*sigma."""
    return DenseTensor(analyse_tokens(stage_tokens, head, num_classes, lam, mode).scores, copy=True)


def scalar_score_oracle(token_steps: Sequence[Sequence[int]], head: HeadWeights, lam: float) -> float:
    """Plain-loop evaluation of one token's score, used to cross-check score_tokens."""
    w = head.w.data
    b = head.b.data
    trajectory = []
    for z in token_steps:
        alpha_sum = 0.0
        for c in range(w.shape[1]):
            logit = float(b[c])
            for k, bit in enumerate(z):
                if bit:
                    logit += float(w[k, c])
            if logit > 0:
                e = logit + float(np.log1p(np.exp(-logit)))
            else:
                e = float(np.log1p(np.exp(logit)))
            alpha_sum += e + 1.0
        trajectory.append(w.shape[1] / alpha_sum)
    return importance_score(trajectory_stats(trajectory), lam)
