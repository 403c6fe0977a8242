"""
Uncertainty-guided token pruning and merging at one SSA block, plus the baselines.

A keep mask is computed once per sample from temporally aggregated scores and
applied at every timestep. Pruned tokens bypass the block unchanged; merged
tokens are absorbed into their most similar anchor.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .backbone import SpikingTransformer, SsaBlockWeights, ssa_array
from .custom_logging import setup_logging
from .efficiency import AV_STRUCTURAL, SopLedger, count_linear
from .errors import ConfigurationError, InvalidArgumentError, ShapeError
from .tensor_core import DenseTensor, SpikeTensor, gather_tokens, scatter_tokens, topk_indices
from .uncertainty import DEFAULT_LAMBDA, SCORE_MODES, SCORE_UNCERT, TokenScoring, analyse_tokens

log = setup_logging()

UNCERT_PRUNE = "uncert_prune"
UNCERT_MERGE = "uncert_merge"
RANDOM_PRUNE = "random_prune"
LOW_UNCERT_PRUNE = "low_uncert_prune"
RANDOM_MERGE = "random_merge"
NONE = "none"
STRATEGY_KINDS = (UNCERT_PRUNE, UNCERT_MERGE, RANDOM_PRUNE, LOW_UNCERT_PRUNE, RANDOM_MERGE, NONE)

_MERGE_KINDS = (UNCERT_MERGE, RANDOM_MERGE)
_RANDOM_KINDS = (RANDOM_PRUNE, RANDOM_MERGE)


@dataclass(frozen=True)
class Strategy:
    kind: str = NONE
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    score_mode: str = SCORE_UNCERT

    def __post_init__(self):
        kind = self.kind.replace("-", "_")
        if kind not in STRATEGY_KINDS:
            raise InvalidArgumentError(f"unknown strategy '{self.kind}', choose from {STRATEGY_KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.lam < 0:
            raise InvalidArgumentError(f"lambda must be >= 0, got {self.lam}")
        if self.score_mode not in SCORE_MODES:
            raise InvalidArgumentError(f"unknown score mode '{self.score_mode}'")

    @property
    def is_merge(self) -> bool:
        return self.kind in _MERGE_KINDS

    @property
    def is_random(self) -> bool:
        return self.kind in _RANDOM_KINDS

    @property
    def needs_scores(self) -> bool:
        return self.kind in (UNCERT_PRUNE, UNCERT_MERGE, LOW_UNCERT_PRUNE)

    @property
    def cli_name(self) -> str:
        return self.kind.replace("_", "-")


@dataclass(frozen=True)
class KeepMask:
    keep_indices: Tuple[int, ...]
    n_total: int
    ratio: float

    @property
    def n_keep(self) -> int:
        return len(self.keep_indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.keep_indices, dtype=np.int64)

    def kept(self) -> np.ndarray:
        flags = np.zeros(self.n_total, dtype=bool)
        flags[list(self.keep_indices)] = True
        return flags


@dataclass(frozen=True)
class MergeAssignment:
    """
    anchors: ascending anchor indices.
    assign: non-anchor token -> its anchor.
    weights: anchor -> ((member, weight), ...) over {anchor} and its assigned tokens, ascending.
    """

    anchors: Tuple[int, ...]
    assign: Dict[int, int]
    weights: Dict[int, Tuple[Tuple[int, float], ...]]
    n_total: int

    def weight_matrix(self) -> np.ndarray:
        """[N_keep, N] row-stochastic matrix; row i holds anchor i's member weights."""
        matrix = np.zeros((len(self.anchors), self.n_total), dtype=np.float64)
        for row, anchor in enumerate(self.anchors):
            for member, weight in self.weights[anchor]:
                matrix[row, member] = weight
        return matrix

    def anchor_of(self, token: int) -> int:
        return token if token in self.weights else self.assign[token]


def keep_count(n_tokens: int, ratio: float) -> int:
    """floor(r * N), guarded against r*N landing a hair under an integer."""
    if not 0.0 < ratio <= 1.0:
        raise InvalidArgumentError(f"keep ratio must lie in (0, 1], got {ratio}")
    n_keep = int(math.floor(round(ratio * n_tokens, 9)))
    if n_keep < 1:
        raise InvalidArgumentError(f"keep ratio {ratio} keeps no token out of {n_tokens}")
    return n_keep


def _random_keep(n_tokens: int, n_keep: int, seed: int, sample_id: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(sample_id)]))
    # prefixes of one permutation: smaller ratios keep subsets of larger ones
    return np.sort(rng.permutation(n_tokens)[:n_keep]).astype(np.int64)


def build_keep_mask(
    scores: Optional[Union[DenseTensor, np.ndarray]],
    ratio: float,
    strategy: Strategy,
    sample_ids: Optional[Sequence[int]] = None,
    n_tokens: Optional[int] = None,
) -> List[KeepMask]:
    """
    One keep mask per sample.

    Parameters:
    - scores (DenseTensor | ndarray): [B,N] importance scores; random strategies may pass None with n_tokens.
    - ratio (float): keep ratio r in (0, 1]; floor(r*N) tokens survive.
    - strategy (Strategy): uncert kinds keep the top scores, low_uncert the lowest,
      random kinds a seeded sample keyed on (seed, sample id).
    - sample_ids (list): dataset indices of the batch rows, default 0..B-1.

    Returns:
    list: KeepMask per batch row.
    """
    if scores is not None:
        table = scores.data if isinstance(scores, DenseTensor) else np.asarray(scores, dtype=np.float64)
        if table.ndim != 2:
            raise ShapeError(f"scores must be [B,N], got {table.shape}")
        batch, n = table.shape
    else:
        if not strategy.is_random and strategy.kind != NONE:
            raise InvalidArgumentError(f"strategy {strategy.kind} needs scores")
        if n_tokens is None or sample_ids is None:
            raise InvalidArgumentError("random masks without scores need n_tokens and sample_ids")
        table = None
        batch, n = len(sample_ids), int(n_tokens)
    ids = list(range(batch)) if sample_ids is None else [int(i) for i in sample_ids]
    if len(ids) != batch:
        raise ShapeError(f"{len(ids)} sample ids for a batch of {batch}")

    n_keep = keep_count(n, ratio)
    masks = []
    for b in range(batch):
        if strategy.kind == NONE or n_keep == n:
            keep = np.arange(n, dtype=np.int64)
        elif strategy.is_random:
            keep = _random_keep(n, n_keep, strategy.seed, ids[b])
        elif strategy.kind == LOW_UNCERT_PRUNE:
            keep = topk_indices(-table[b], n_keep)
        else:
            keep = topk_indices(table[b], n_keep)
        masks.append(KeepMask(tuple(int(i) for i in keep), n, float(ratio)))
    return masks


def _index_table(masks: Sequence[KeepMask], batch: int, n_tokens: int) -> np.ndarray:
    if len(masks) != batch:
        raise ShapeError(f"{len(masks)} masks for a batch of {batch}")
    if any(m.n_total != n_tokens for m in masks):
        raise ShapeError(f"masks were built for a different token count than {n_tokens}")
    if len({m.n_keep for m in masks}) != 1:
        raise ShapeError("all samples must keep the same number of tokens")
    return np.stack([m.as_array() for m in masks])


def pruned_ssa_array(
    x: np.ndarray,
    masks: Sequence[KeepMask],
    w: SsaBlockWeights,
    ledger: Optional[SopLedger] = None,
    label: str = "ssa",
    av_mode: str = AV_STRUCTURAL,
) -> np.ndarray:
    table = _index_table(masks, x.shape[1], x.shape[2])
    spikes = SpikeTensor(x, copy=False)
    kept = gather_tokens(spikes, table)
    updated = SpikeTensor(ssa_array(kept.data, w, ledger, label, av_mode), copy=False)
    return scatter_tokens(updated, table, spikes).data


def pruned_ssa(
    x: SpikeTensor,
    masks: Union[KeepMask, Sequence[KeepMask]],
    w: SsaBlockWeights,
    ledger: Optional[SopLedger] = None,
    label: str = "ssa",
    av_mode: str = AV_STRUCTURAL,
) -> SpikeTensor:
    """
    SSA on the kept tokens only; pruned rows leave the block exactly as they entered.

    A single KeepMask is shared by every sample of the batch.
    """
    if x.shape.rank != 4:
        raise ShapeError(f"pruned_ssa expects [T,B,N,D], got {x.shape}")
    if isinstance(masks, KeepMask):
        masks = [masks] * x.shape[1]
    return SpikeTensor(pruned_ssa_array(x.data, masks, w, ledger, label, av_mode), copy=False)


def _cosine_to_anchors(zbar: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """[N, K] cosine similarity of every token to every anchor; zero vectors give 0."""
    norms = np.sqrt((zbar * zbar).sum(axis=1))
    dots = zbar @ zbar[anchors].T
    denom = norms[:, None] * norms[anchors][None, :]
    cos = np.zeros_like(dots)
    np.divide(dots, denom, out=cos, where=denom > 0)
    return cos


def _assign_sample(features: np.ndarray, anchors: np.ndarray, n_tokens: int) -> MergeAssignment:
    zbar = features.astype(np.float64).mean(axis=0)
    cos = _cosine_to_anchors(zbar, anchors)
    anchor_set = set(int(a) for a in anchors)
    assign = {}
    members = {int(a): [int(a)] for a in anchors}
    for j in range(n_tokens):
        if j in anchor_set:
            continue
        # argmax returns the first maximum, i.e. the smaller anchor index
        target = int(anchors[int(np.argmax(cos[j]))])
        assign[j] = target
        members[target].append(j)

    weights = {}
    for column, anchor in enumerate(int(a) for a in anchors):
        group = sorted(members[anchor])
        sims = np.array([1.0 if j == anchor else cos[j, column] for j in group], dtype=np.float64)
        expo = np.exp(sims - sims.max())
        normalised = expo / expo.sum()
        weights[anchor] = tuple((j, float(wt)) for j, wt in zip(group, normalised))
    return MergeAssignment(anchors=tuple(int(a) for a in anchors), assign=assign, weights=weights, n_total=n_tokens)


def build_merge_assignment(
    scores: Optional[Union[DenseTensor, np.ndarray]],
    features: SpikeTensor,
    ratio: float,
    strategy: Optional[Strategy] = None,
    sample_ids: Optional[Sequence[int]] = None,
) -> List[MergeAssignment]:
    """
    Anchors are the kept tokens of the strategy (top scores unless random);
    every other token joins the anchor whose time-averaged feature is most
    cosine-similar. Member weights are the normalized exponentials of the
    similarity to the anchor, the anchor itself counting with similarity 1.
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidArgumentError(f"merging needs a keep ratio in (0, 1), got {ratio}")
    if features.shape.rank != 4:
        raise ShapeError(f"merge features must be [T,B,N,D], got {features.shape}")
    strategy = strategy or Strategy(UNCERT_MERGE)
    _, batch, n, _ = features.shape.dims
    anchor_kind = RANDOM_PRUNE if strategy.is_random else UNCERT_PRUNE
    masks = build_keep_mask(
        scores,
        ratio,
        Strategy(anchor_kind, strategy.lam, strategy.seed, strategy.score_mode),
        sample_ids=sample_ids if sample_ids is not None else list(range(batch)),
        n_tokens=n,
    )
    if len(masks) != batch:
        raise ShapeError(f"{len(masks)} score rows for a batch of {batch}")
    assignments = []
    for b, mask in enumerate(masks):
        if mask.n_keep == 0:
            raise InvalidArgumentError("merging needs at least one anchor")
        assignments.append(_assign_sample(features.data[:, b], mask.as_array(), n))
    return assignments


def merge_array(x: np.ndarray, assignments: Sequence[MergeAssignment]) -> np.ndarray:
    t, batch, n, d = x.shape
    if len(assignments) != batch:
        raise ShapeError(f"{len(assignments)} assignments for a batch of {batch}")
    k = len(assignments[0].anchors)
    out = np.empty((t, batch, k, d), dtype=np.float32)
    for b, assignment in enumerate(assignments):
        if assignment.n_total != n or len(assignment.anchors) != k:
            raise ShapeError("merge assignments do not match the token layout")
        matrix = assignment.weight_matrix()
        tokens = x[:, b].astype(np.float64).transpose(1, 0, 2).reshape(n, t * d)
        # fixed-order reduction over members instead of a BLAS product
        merged = (matrix[:, :, None] * tokens[None, :, :]).sum(axis=1)
        out[:, b] = merged.reshape(k, t, d).transpose(1, 0, 2).astype(np.float32)
    return out


def apply_merge(x: SpikeTensor, assignments: Union[MergeAssignment, Sequence[MergeAssignment]]) -> DenseTensor:
    """Weighted sum of each anchor's members at every timestep: [T,B,N,D] -> [T,B,N_keep,D] reals."""
    if x.shape.rank != 4:
        raise ShapeError(f"apply_merge expects [T,B,N,D], got {x.shape}")
    if isinstance(assignments, MergeAssignment):
        assignments = [assignments] * x.shape[1]
    return DenseTensor(merge_array(x.data, assignments), copy=False)


@dataclass
class TokenReduction:
    """
    Reduction hook for forward_full: replaces the SSA block insert_block with
    its pruned or merged variant. The last masks, assignments and scores are
    kept for the dump files.
    """

    strategy: Strategy
    keep_ratio: float = 1.0
    insert_block: str = "2.1"
    scoring: Optional[TokenScoring] = field(default=None, init=False)
    masks: List[KeepMask] = field(default_factory=list, init=False)
    assignments: List[MergeAssignment] = field(default_factory=list, init=False)

    def __post_init__(self):
        if not 0.0 < self.keep_ratio <= 1.0:
            raise InvalidArgumentError(f"keep ratio must lie in (0, 1], got {self.keep_ratio}")

    @property
    def active(self) -> bool:
        return self.strategy.kind != NONE and self.keep_ratio < 1.0

    def validate(self, model: SpikingTransformer) -> None:
        stage, _ = model.config.parse_block_id(self.insert_block)
        if self.strategy.needs_scores:
            if model.head is None:
                raise ConfigurationError(f"strategy {self.strategy.kind} needs a trained head")
            width = model.config.stages[stage].channels
            if width != model.head.dim:
                raise ConfigurationError(
                    f"block {self.insert_block} has width {width}; scoring needs the head width {model.head.dim}"
                )

    def apply(
        self,
        model: SpikingTransformer,
        x: np.ndarray,
        weights: SsaBlockWeights,
        ledger: SopLedger,
        label: str,
        sample_ids: np.ndarray,
    ) -> np.ndarray:
        av_mode = model.config.av_counting
        if not self.active:
            return ssa_array(x, weights, ledger, label, av_mode)
        self.validate(model)
        scores = None
        if self.strategy.needs_scores:
            self.scoring = analyse_tokens(
                SpikeTensor(x, copy=False),
                model.head,
                model.config.num_classes,
                self.strategy.lam,
                self.strategy.score_mode,
            )
            scores = self.scoring.scores
            ledger.credit(f"score.{label}", dense_macs=count_linear(int(np.count_nonzero(x)), model.head.num_classes))
        n_tokens = x.shape[2]
        if self.strategy.is_merge:
            self.assignments = build_merge_assignment(
                scores, SpikeTensor(x, copy=False), self.keep_ratio, self.strategy, sample_ids
            )
            self.masks = [KeepMask(a.anchors, n_tokens, self.keep_ratio) for a in self.assignments]
            merged = merge_array(x, self.assignments)
            ledger.credit(f"merge.{label}", dense_macs=int(np.count_nonzero(x)))
            log.debug(f"{label}: merged {n_tokens} tokens into {merged.shape[2]} anchors")
            return ssa_array(merged, weights, ledger, label, av_mode)
        self.masks = build_keep_mask(scores, self.keep_ratio, self.strategy, sample_ids, n_tokens)
        log.debug(f"{label}: keeping {self.masks[0].n_keep} of {n_tokens} tokens")
        return pruned_ssa_array(x, self.masks, weights, ledger, label, av_mode)
