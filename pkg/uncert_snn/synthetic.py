"""
Spike-probability-coded synthetic classification task.

Every class owns a few signature token positions that fire with p_signal;
all other positions fire with p_background. The ground-truth informative
tokens are therefore known per sample.
"""
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import toml
from tqdm import tqdm

from .custom_logging import setup_logging
from .errors import ConfigurationError, TensorFileError
from .tensor_core import DenseTensor, SpikeTensor, read_tensor, topk_indices, write_tensor

log = setup_logging()

DATASET_MANIFEST = "dataset.toml"
_TRAIN, _TEST = 0, 1
_LAYOUT_STREAM = 0x51


@dataclass(frozen=True)
class SyntheticSpec:
    grid: int = 8
    classes: int = 4
    signature_tokens: int = 4
    p_signal: float = 0.9
    p_background: float = 0.1
    channels: int = 2
    steps: int = 4
    train_samples: int = 256
    test_samples: int = 128

    def __post_init__(self):
        if self.grid < 1 or self.channels < 1 or self.steps < 1:
            raise ConfigurationError("grid, channels and steps must be positive")
        if self.classes < 2:
            raise ConfigurationError(f"classes must be >= 2, got {self.classes}")
        if self.signature_tokens < 1:
            raise ConfigurationError("signature_tokens must be >= 1")
        if self.signature_tokens > self.grid * self.grid:
            raise ConfigurationError(
                f"{self.signature_tokens} signature tokens do not fit a {self.grid}x{self.grid} grid"
            )
        if not 0.0 <= self.p_background <= self.p_signal <= 1.0:
            raise ConfigurationError("need 0 <= p_background <= p_signal <= 1")
        if self.train_samples < 1 or self.test_samples < 1:
            raise ConfigurationError("both splits need at least one sample")

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid


@dataclass
class Dataset:
    """One split: binary event frames [T, M, n, H, W], labels and stable sample ids."""

    frames: DenseTensor
    labels: np.ndarray
    sample_ids: np.ndarray
    signatures: np.ndarray
    spec: SyntheticSpec

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def batch(self, start: int, stop: int) -> Tuple[DenseTensor, np.ndarray, np.ndarray]:
        frames = DenseTensor(self.frames.data[:, start:stop], copy=True)
        return frames, self.labels[start:stop], self.sample_ids[start:stop]

    def batches(self, batch_size: int, desc: Optional[str] = None, disable: bool = True):
        starts = range(0, len(self), batch_size)
        for start in tqdm(starts, desc=desc, disable=disable, leave=False):
            yield self.batch(start, min(start + batch_size, len(self)))

    def signature_of(self, label: int) -> np.ndarray:
        return self.signatures[int(label)]


def signature_layout(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """
    [C, K] ascending token positions per class.

    Positions are disjoint between classes while C*K fits the grid and wrap
    around the shuffled grid otherwise.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _LAYOUT_STREAM]))
    order = rng.permutation(spec.n_tokens)
    k = spec.signature_tokens
    layout = np.empty((spec.classes, k), dtype=np.int64)
    for c in range(spec.classes):
        picks = [order[(c * k + i) % spec.n_tokens] for i in range(k)]
        layout[c] = np.sort(np.asarray(picks, dtype=np.int64))
    if spec.classes * k > spec.n_tokens:
        log.warning(f"{spec.classes} classes x {k} signature tokens exceed the grid; signatures overlap")
    return layout


def _generate_split(spec: SyntheticSpec, seed: int, split: int, count: int, layout: np.ndarray) -> Dataset:
    frames = np.zeros((spec.steps, count, spec.channels, spec.grid, spec.grid), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    base = np.full(spec.n_tokens, spec.p_background, dtype=np.float64)
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), split, i]))
        label = int(rng.integers(spec.classes))
        prob = base.copy()
        prob[layout[label]] = spec.p_signal
        draws = rng.random((spec.steps, spec.channels, spec.n_tokens))
        spikes = draws < prob[None, None, :]
        frames[:, i] = spikes.reshape(spec.steps, spec.channels, spec.grid, spec.grid)
        labels[i] = label
    ids = np.arange(count, dtype=np.int64) + (split << 32)
    return Dataset(DenseTensor(frames, copy=False), labels, ids, layout, spec)


def synth_dataset(spec: SyntheticSpec, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Deterministic (train, test) splits for (spec, seed).

    Each sample draws its class uniformly and then every token, channel and
    step independently: p_signal on the class signature, p_background elsewhere.
    """
    if spec.p_signal == spec.p_background:
        log.warning("p_signal equals p_background; labels carry no information")
    layout = signature_layout(spec, seed)
    train = _generate_split(spec, seed, _TRAIN, spec.train_samples, layout)
    test = _generate_split(spec, seed, _TEST, spec.test_samples, layout)
    log.debug(f"Synthesised {len(train)} train and {len(test)} test samples (seed {seed})")
    return train, test


def bayes_predict(data: Dataset) -> np.ndarray:
    """Maximum-likelihood class per sample under the known generative model."""
    spec = data.spec
    counts = data.frames.data.sum(axis=(0, 2)).reshape(len(data), spec.n_tokens).astype(np.float64)
    cells = float(spec.steps * spec.channels)
    eps = 1e-12
    log_lik = np.empty((len(data), spec.classes), dtype=np.float64)
    for c in range(spec.classes):
        p = np.full(spec.n_tokens, spec.p_background)
        p[data.signatures[c]] = spec.p_signal
        p = np.clip(p, eps, 1.0 - eps)
        log_lik[:, c] = counts @ np.log(p) + (cells - counts) @ np.log(1.0 - p)
    return np.argmax(log_lik, axis=1)


def bayes_accuracy(data: Dataset) -> float:
    return float(np.mean(bayes_predict(data) == data.labels))


def signature_recovery(scores: np.ndarray, labels: np.ndarray, signatures: np.ndarray) -> Tuple[float, float]:
    """
    (exact-set rate, mean overlap) of the top-K scored tokens against each sample's signature.

    K is the signature size; overlap is the fraction of signature tokens recovered.
    """
    k = signatures.shape[1]
    exact = 0
    overlap = 0.0
    for row, label in zip(scores, labels):
        top = set(int(i) for i in topk_indices(row, k))
        truth = set(int(i) for i in signatures[int(label)])
        exact += top == truth
        overlap += len(top & truth) / k
    n = len(labels)
    return exact / n, overlap / n


def save_dataset(directory: Union[str, Path], train: Dataset, test: Dataset, seed: int) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, object] = dict(asdict(train.spec))
    manifest["seed"] = int(seed)
    with open(out / DATASET_MANIFEST, "w", encoding="utf-8", newline="\n") as f:
        toml.dump(manifest, f)
    write_tensor(out / "signatures.spkt", DenseTensor(train.signatures.astype(np.float32)))
    for name, split in (("train", train), ("test", test)):
        write_tensor(out / f"{name}_frames.spkt", SpikeTensor(split.frames.data, copy=False))
        write_tensor(out / f"{name}_labels.spkt", DenseTensor(split.labels.astype(np.float32)))
    log.info(f"Wrote dataset to {out}")


def load_dataset(directory: Union[str, Path]) -> Tuple[Dataset, Dataset, int]:
    src = Path(directory)
    manifest_path = src / DATASET_MANIFEST
    if not manifest_path.is_file():
        raise ConfigurationError(f"no {DATASET_MANIFEST} in {src}")
    manifest = toml.load(manifest_path)
    seed = int(manifest.pop("seed", 0))
    try:
        spec = SyntheticSpec(**manifest)
    except TypeError as e:
        raise ConfigurationError(f"dataset manifest is invalid: {e}") from e
    signatures = read_tensor(src / "signatures.spkt").data.astype(np.int64)
    splits = []
    for split_id, name in ((_TRAIN, "train"), (_TEST, "test")):
        frames = read_tensor(src / f"{name}_frames.spkt")
        labels = read_tensor(src / f"{name}_labels.spkt").data.astype(np.int64)
        if frames.shape.rank != 5 or frames.shape[1] != labels.shape[0]:
            raise TensorFileError(f"{name} split frames {frames.shape} do not match {labels.shape[0]} labels")
        ids = np.arange(labels.shape[0], dtype=np.int64) + (split_id << 32)
        splits.append(Dataset(DenseTensor(frames.data.astype(np.float32), copy=False), labels, ids, signatures, spec))
    return splits[0], splits[1], seed
