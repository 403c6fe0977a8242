"""Closed-form ridge fit of the classification head on pooled spike features."""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .backbone import HeadWeights, Reduction, SpikingTransformer, firing_report, forward_full, pool_tokens_array
from .custom_logging import setup_logging
from .efficiency import SopLedger
from .errors import InvalidArgumentError, NumericalError, ShapeError
from .synthetic import Dataset
from .tensor_core import DenseTensor, SpikeTensor, topk_indices

log = setup_logging()

DEFAULT_BATCH_SIZE = 64


@dataclass(frozen=True)
class RidgeConfig:
    l2: float = 1e-3

    def __post_init__(self):
        if self.l2 < 0:
            raise InvalidArgumentError(f"l2 must be >= 0, got {self.l2}")


def pool_features(stage_tokens: SpikeTensor) -> DenseTensor:
    """Mean over timesteps and tokens: [T,B,N,D] -> [B,D]."""
    if stage_tokens.shape.rank != 4:
        raise ShapeError(f"pool_features expects [T,B,N,D], got {stage_tokens.shape}")
    return DenseTensor(pool_tokens_array(stage_tokens.data), copy=False)


def fit_ridge_targets(
    features: np.ndarray,
    targets: np.ndarray,
    cfg: RidgeConfig = RidgeConfig(),
    sample_weight: Optional[np.ndarray] = None,
) -> HeadWeights:
    """
    Solve (Xc^T Xc + l2 I) W = Xc^T Yc on centred data; b = mean(Y) - mean(X) W.

    Raises:
    NumericalError: the system is not positive definite (only possible with l2 = 0).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"features must be [M,D] with M >= 1, got {x.shape}")
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{y.shape[0]} targets for {x.shape[0]} feature rows")
    weight = np.ones(x.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if weight.shape != (x.shape[0],) or np.any(weight < 0) or weight.sum() <= 0:
        raise InvalidArgumentError("sample weights must be non-negative with a positive sum")

    total = weight.sum()
    x_mean = (weight @ x) / total
    y_mean = (weight @ y) / total
    xc = x - x_mean
    yc = y - y_mean
    gram = xc.T @ (xc * weight[:, None]) + cfg.l2 * np.eye(x.shape[1])
    rhs = xc.T @ (yc * weight[:, None])
    if cfg.l2 == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise NumericalError("singular normal equations; use l2 > 0")
    try:
        factor = cho_factor(gram, lower=False, check_finite=True)
    except LinAlgError as e:
        raise NumericalError(f"normal equations are not positive definite: {e}") from e
    w = cho_solve(factor, rhs)
    b = y_mean - x_mean @ w
    return HeadWeights(w=DenseTensor(w.astype(np.float32)), b=DenseTensor(b.astype(np.float32)))


def fit_ridge(
    features: DenseTensor,
    labels: Sequence[int],
    cfg: RidgeConfig = RidgeConfig(),
    num_classes: Optional[int] = None,
) -> HeadWeights:
    """
    Ridge regression of one-hot class targets on pooled features.

    Parameters:
    - features (DenseTensor): [M, D] pooled features.
    - labels (list): class index per row, each below num_classes.
    - cfg (RidgeConfig): regularisation strength.
    - num_classes (int): C; defaults to max(label) + 1.

    Returns:
    HeadWeights: w [D, C] and bias [C].
    """
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != features.shape[0]:
        raise ShapeError(f"{y.shape} labels for {features.shape[0]} feature rows")
    c = int(y.max()) + 1 if num_classes is None else int(num_classes)
    if y.size and (y.min() < 0 or y.max() >= c):
        raise InvalidArgumentError(f"labels must lie in [0, {c})")
    one_hot = np.zeros((y.shape[0], c), dtype=np.float64)
    one_hot[np.arange(y.shape[0]), y] = 1.0
    head = fit_ridge_targets(features.data, one_hot, cfg)
    log.debug(f"Fitted ridge head [{head.dim},{head.num_classes}] on {y.shape[0]} samples (l2={cfg.l2})")
    return head


def extract_features(
    model: SpikingTransformer,
    data: Dataset,
    batch_size: int = DEFAULT_BATCH_SIZE,
    progress: bool = False,
    ledger: Optional[SopLedger] = None,
) -> DenseTensor:
    pooled = []
    for frames, _, ids in data.batches(batch_size, desc="features", disable=not progress):
        pooled.append(forward_full(model, frames, sample_ids=ids, ledger=ledger).pooled.data)
    return DenseTensor(np.concatenate(pooled, axis=0), copy=False)


def train_head(
    model: SpikingTransformer,
    data: Dataset,
    cfg: RidgeConfig = RidgeConfig(),
    batch_size: int = DEFAULT_BATCH_SIZE,
    progress: bool = False,
) -> HeadWeights:
    ledger = SopLedger()
    features = extract_features(model, data, batch_size, progress, ledger)
    # the training split doubles as the calibration batch
    firing_report(ledger)
    return fit_ridge(features, data.labels, cfg, num_classes=model.config.num_classes)


def predict_classes(logits: np.ndarray) -> np.ndarray:
    """argmax per row; np.argmax already breaks ties towards the smaller class index."""
    return np.argmax(logits, axis=-1)


@dataclass
class Evaluation:
    acc1: float
    acc5: float
    ledger: SopLedger
    logits: np.ndarray


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    return np.array([int(label) in set(topk_indices(row, k).tolist()) for row, label in zip(logits, labels)])


def evaluate(
    model: SpikingTransformer,
    data: Dataset,
    reduction: Optional[Reduction] = None,
    batch_size: int = DEFAULT_BATCH_SIZE,
    progress: bool = False,
) -> Evaluation:
    """
    Top-1 (and top-5 when C >= 5) accuracy of a model carrying a head, with
    the ledger of every forward pass merged.
    """
    if model.head is None:
        raise InvalidArgumentError("evaluation needs a model with a trained head")
    if len(data) == 0:
        raise InvalidArgumentError("evaluation needs a nonempty dataset")
    ledger = SopLedger()
    logits = []
    for frames, _, ids in data.batches(batch_size, desc="eval", disable=not progress):
        result = forward_full(model, frames, reduction=reduction, sample_ids=ids, ledger=ledger)
        logits.append(result.logits.data)
    all_logits = np.concatenate(logits, axis=0)
    acc1 = float(np.mean(predict_classes(all_logits) == data.labels))
    if model.config.num_classes >= 5:
        acc5 = float(np.mean(topk_hits(all_logits, data.labels, 5)))
    else:
        acc5 = acc1
    return Evaluation(acc1=acc1, acc5=acc5, ledger=ledger, logits=all_logits)


def eval_accuracy(
    model: SpikingTransformer,
    head: HeadWeights,
    data: Dataset,
    reduction: Optional[Reduction] = None,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    return evaluate(model.with_head(head), data, reduction, batch_size).acc1
