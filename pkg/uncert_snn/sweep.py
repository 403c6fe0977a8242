"""
Experiment sweeps: (strategy, keep ratio, seed) grids evaluated on the synthetic task.

Each seed owns one experiment (dataset, model weights and fitted head).
Cells run concurrently when workers > 1; results always come back sorted by
(strategy, keep ratio, seed).
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .backbone import ModelConfig, SpikingTransformer, StageConfig, forward_full
from .class_engine_config import DEFAULT_SETTINGS
from .custom_logging import setup_logging
from .efficiency import EnergyModel, SopReportRow, build_sop_report, energy_mj
from .errors import ConfigurationError
from .head_training import DEFAULT_BATCH_SIZE, Evaluation, RidgeConfig, evaluate, train_head
from .neuron import LifParams
from .selection import NONE, KeepMask, MergeAssignment, Strategy, TokenReduction, build_keep_mask
from .synthetic import Dataset, SyntheticSpec, signature_recovery, synth_dataset
from .uncertainty import SCORE_UNCERT, TokenScoring, analyse_tokens

log = setup_logging()


@dataclass(frozen=True)
class SweepConfig:
    strategies: Tuple[str, ...] = ("uncert_prune", "random_prune", "low_uncert_prune", "uncert_merge")
    keep_ratios: Tuple[float, ...] = (1.0, 0.8, 0.6, 0.4, 0.2)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    lam: float = 0.9
    insert_block: str = "2.1"
    score_mode: str = SCORE_UNCERT
    workers: int = 1
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self):
        kinds = tuple(Strategy(kind).kind for kind in self.strategies)
        object.__setattr__(self, "strategies", kinds)
        object.__setattr__(self, "keep_ratios", tuple(float(r) for r in self.keep_ratios))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not kinds:
            raise ConfigurationError("a sweep needs at least one strategy")
        if not self.seeds:
            raise ConfigurationError("a sweep needs at least one seed")
        if not self.keep_ratios or any(not 0.0 < r <= 1.0 for r in self.keep_ratios):
            raise ConfigurationError("keep ratios must lie in (0, 1]")
        if self.workers < 1 or self.batch_size < 1:
            raise ConfigurationError("workers and batch_size must be >= 1")

    @classmethod
    def from_settings(cls, settings: Dict[str, object]) -> "SweepConfig":
        return cls(
            strategies=tuple(settings["strategies"]),
            keep_ratios=tuple(settings["keep_ratios"]),
            seeds=tuple(settings["seeds"]),
            lam=float(settings["lambda"]),
            insert_block=str(settings["insert_block"]),
            score_mode=str(settings["score_mode"]),
            workers=int(settings["workers"]),
            batch_size=int(settings["batch_size"]),
        )

    def strategy(self, kind: str, seed: int) -> Strategy:
        return Strategy(kind, lam=self.lam, seed=seed, score_mode=self.score_mode)


@dataclass(frozen=True)
class ResultRow:
    strategy: str
    keep_ratio: float
    seed: int
    acc1: float
    acc5: float
    block_sops: int
    energy_mj: float

    def sort_key(self):
        return (self.strategy, self.keep_ratio, self.seed)


@dataclass
class Experiment:
    seed: int
    model: SpikingTransformer
    train: Dataset
    test: Dataset
    spec: SyntheticSpec


def synthetic_spec_from(settings: Dict[str, object]) -> SyntheticSpec:
    return SyntheticSpec(
        grid=int(settings["grid"]),
        classes=int(settings["classes"]),
        signature_tokens=int(settings["signature_tokens"]),
        p_signal=float(settings["p_signal"]),
        p_background=float(settings["p_background"]),
        channels=int(settings["channels"]),
        steps=int(settings["steps"]),
        train_samples=int(settings["train_samples"]),
        test_samples=int(settings["test_samples"]),
    )


def model_config_from(settings: Dict[str, object], seed: int = 0) -> ModelConfig:
    """Model shaped for the synthetic task of the same settings; weights seeded by model_seed + seed."""
    channels = list(settings["stage_channels"])
    blocks = list(settings["stage_blocks"])
    downsample = list(settings["stage_downsample"])
    if not len(channels) == len(blocks) == len(downsample):
        raise ConfigurationError("stage_channels, stage_blocks and stage_downsample must have equal length")
    return ModelConfig(
        steps=int(settings["steps"]),
        stages=tuple(StageConfig(c, b, d) for c, b, d in zip(channels, blocks, downsample)),
        num_classes=int(settings["classes"]),
        lif=LifParams(tau=float(settings["tau"]), v_th=float(settings["vth"])),
        seed=int(settings["model_seed"]) + int(seed),
        in_channels=int(settings["channels"]),
        image_size=int(settings["grid"]) * int(settings["patch"]),
        patch=int(settings["patch"]),
        init_rate=float(settings["init_rate"]),
        residual_scale=float(settings["residual_scale"]),
        av_counting=str(settings["av_counting"]),
    )


def prepare_experiment(settings: Optional[Dict[str, object]] = None, seed: int = 0, progress: bool = False) -> Experiment:
    """Synthesise the data for seed, build the model and fit its head on the train split."""
    settings = dict(DEFAULT_SETTINGS if settings is None else settings)
    spec = synthetic_spec_from(settings)
    if int(settings["patch"]) != 1:
        raise ConfigurationError("the synthetic task codes one token per pixel; patch must be 1")
    train, test = synth_dataset(spec, seed)
    model = SpikingTransformer.build(model_config_from(settings, seed))
    head = train_head(model, train, RidgeConfig(float(settings["l2"])), int(settings["batch_size"]), progress)
    log.info(f"Prepared experiment for seed {seed}")
    return Experiment(seed=seed, model=model.with_head(head), train=train, test=test, spec=spec)


def block_prefix(insert_block: str) -> str:
    stage, block = str(insert_block).split(".")
    return f"s{stage}.b{block}."


def run_cell(
    experiment: Experiment,
    strategy: Strategy,
    keep_ratio: float,
    insert_block: str,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> Evaluation:
    reduction = TokenReduction(strategy, keep_ratio, insert_block)
    return evaluate(experiment.model, experiment.test, reduction, batch_size)


def run_sweep(
    cfg: SweepConfig,
    settings: Optional[Dict[str, object]] = None,
    experiments: Optional[Dict[int, Experiment]] = None,
    progress: bool = False,
) -> List[ResultRow]:
    """
    Evaluate every (strategy, keep ratio, seed) cell.

    Parameters:
    - cfg (SweepConfig): the grid.
    - settings (dict): flat model/synthetic settings used to prepare missing experiments.
    - experiments (dict): seed -> prepared Experiment, reused when given.
    - progress (bool): show a tqdm bar over cells.

    Returns:
    list: ResultRow per cell, sorted by (strategy, keep ratio, seed).
    """
    experiments = dict(experiments or {})
    for seed in cfg.seeds:
        if seed not in experiments:
            experiments[seed] = prepare_experiment(settings, seed, progress)
    prefix = block_prefix(cfg.insert_block)
    cells = [(kind, ratio, seed) for kind in cfg.strategies for ratio in cfg.keep_ratios for seed in cfg.seeds]

    def run(cell):
        kind, ratio, seed = cell
        evaluation = run_cell(experiments[seed], cfg.strategy(kind, seed), ratio, cfg.insert_block, cfg.batch_size)
        sops, _ = evaluation.ledger.totals(prefix)
        return ResultRow(
            strategy=kind,
            keep_ratio=ratio,
            seed=seed,
            acc1=evaluation.acc1,
            acc5=evaluation.acc5,
            block_sops=sops,
            energy_mj=energy_mj(evaluation.ledger),
        )

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        rows = list(tqdm(pool.map(run, cells), total=len(cells), desc="sweep", disable=not progress))
    rows.sort(key=ResultRow.sort_key)
    log.info(f"Sweep finished: {len(rows)} cells")
    return rows


def mean_accuracy(rows: Sequence[ResultRow], strategy: str, keep_ratio: float) -> float:
    picked = [r.acc1 for r in rows if r.strategy == strategy and r.keep_ratio == keep_ratio]
    if not picked:
        raise ConfigurationError(f"no rows for {strategy} at keep ratio {keep_ratio}")
    return float(np.mean(picked))


def sop_report(
    experiment: Experiment,
    keep_ratios: Sequence[float],
    strategy: Strategy,
    insert_block: str = "2.1",
    batch_size: int = DEFAULT_BATCH_SIZE,
    energy: EnergyModel = EnergyModel(),
) -> List[SopReportRow]:
    """Block-level operation counts of the insertion block for each keep ratio."""
    ledgers = {}
    for ratio in keep_ratios:
        ledgers[float(ratio)] = run_cell(experiment, strategy, ratio, insert_block, batch_size).ledger
    return build_sop_report(ledgers, block_prefix(insert_block), energy)


def token_recovery(
    experiment: Experiment,
    strategy: Optional[Strategy] = None,
    insert_block: str = "2.1",
    batch_size: int = DEFAULT_BATCH_SIZE,
    lowest: bool = False,
) -> Tuple[float, float]:
    """
    (exact-set rate, mean overlap) of the top-scored tokens at the insertion
    block against the true signature positions of each test sample.
    lowest=True ranks the lowest-scored tokens first instead.
    """
    strategy = strategy or Strategy("uncert_prune")
    model = experiment.model
    stage, _ = model.config.parse_block_id(insert_block)
    if model.config.stage_tokens()[stage] != experiment.spec.n_tokens:
        raise ConfigurationError(f"block {insert_block} does not keep the input token grid")
    passthrough = TokenReduction(Strategy(NONE), 1.0, insert_block)
    scores = []
    for frames, _, ids in experiment.test.batches(batch_size):
        tokens = forward_full(model, frames, reduction=passthrough, sample_ids=ids).insert_tokens
        scoring = analyse_tokens(tokens, model.head, model.config.num_classes, strategy.lam, strategy.score_mode)
        scores.append(-scoring.scores if lowest else scoring.scores)
    return signature_recovery(np.concatenate(scores), experiment.test.labels, experiment.test.signatures)


@dataclass
class InsertionRecord:
    """Scores, masks and merge assignments at the insertion block for a whole split."""

    sample_ids: np.ndarray
    scoring: TokenScoring
    masks: List[KeepMask]
    assignments: List[MergeAssignment]


def inspect_insertion(
    experiment: Experiment,
    strategy: Strategy,
    keep_ratio: float,
    insert_block: str = "2.1",
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> InsertionRecord:
    """Re-run the test split and collect what the reduction saw and decided, for the dump files."""
    model = experiment.model
    ids, trajectories, mu, sigma, scores, masks, assignments = [], [], [], [], [], [], []
    for frames, _, batch_ids in experiment.test.batches(batch_size):
        reduction = TokenReduction(strategy, keep_ratio, insert_block)
        result = forward_full(model, frames, reduction=reduction, sample_ids=batch_ids)
        scoring = reduction.scoring or analyse_tokens(
            result.insert_tokens, model.head, model.config.num_classes, strategy.lam, strategy.score_mode
        )
        ids.append(batch_ids)
        trajectories.append(scoring.trajectories)
        mu.append(scoring.mu)
        sigma.append(scoring.sigma)
        scores.append(scoring.scores)
        n_tokens = result.insert_tokens.shape[2]
        masks.extend(reduction.masks or build_keep_mask(None, 1.0, Strategy(NONE), batch_ids, n_tokens))
        assignments.extend(reduction.assignments)
    merged = TokenScoring(
        trajectories=np.concatenate(trajectories, axis=1),
        mu=np.concatenate(mu),
        sigma=np.concatenate(sigma),
        scores=np.concatenate(scores),
    )
    return InsertionRecord(np.concatenate(ids), merged, masks, assignments)
