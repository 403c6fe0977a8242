"""
Desk-scale trend checks on the default synthetic task.

Part of the default run; `pytest -m acceptance` selects only these and
`-m "not acceptance"` skips them. Thresholds live in test/config/acceptance.toml.
"""
from pathlib import Path

import numpy as np
import pytest
import toml

from uncert_snn.backbone import HeadWeights, SpikingTransformer, forward_full
from uncert_snn.class_engine_config import DEFAULT_SETTINGS, validate_settings
from uncert_snn.selection import Strategy, TokenReduction, build_keep_mask
from uncert_snn.sweep import (
    SweepConfig,
    mean_accuracy,
    model_config_from,
    prepare_experiment,
    run_sweep,
    sop_report,
    token_recovery,
)
from uncert_snn.tensor_core import DenseTensor, quantize_to_grid
from uncert_snn.uncertainty import analyse_tokens

pytestmark = pytest.mark.acceptance

THRESHOLDS = toml.load(Path(__file__).parent / "config" / "acceptance.toml")
SETTINGS = validate_settings(DEFAULT_SETTINGS)


@pytest.fixture(scope="module")
def experiments():
    return {seed: prepare_experiment(SETTINGS, seed) for seed in THRESHOLDS["seeds"]}


@pytest.fixture(scope="module")
def trend_rows(experiments):
    cfg = SweepConfig(
        strategies=("uncert_prune", "random_prune", "low_uncert_prune", "uncert_merge"),
        keep_ratios=tuple(sorted({*THRESHOLDS["trend_ratios"], THRESHOLDS["prune_vs_merge_ratio"]})),
        seeds=tuple(THRESHOLDS["seeds"]),
    )
    return run_sweep(cfg, experiments=experiments)


def test_full_keep_ratio_is_the_identity():
    rng = np.random.default_rng(0)
    for seed in range(THRESHOLDS["identity_seeds"]):
        config = model_config_from(SETTINGS, seed)
        dim = config.stages[-1].channels
        head = HeadWeights(
            w=DenseTensor(quantize_to_grid(rng.normal(0.0, 0.5, size=(dim, config.num_classes)))),
            b=DenseTensor(np.zeros(config.num_classes, dtype=np.float32)),
        )
        model = SpikingTransformer.build(config).with_head(head)
        frames = DenseTensor(
            (rng.random((config.input_steps, 6, config.in_channels, config.image_size, config.image_size)) < 0.2)
            .astype(np.float32)
        )
        plain = forward_full(model, frames).logits.data
        for kind in ("none", "uncert_prune", "random_prune", "low_uncert_prune"):
            reduced = forward_full(model, frames, reduction=TokenReduction(Strategy(kind, seed=seed), 1.0)).logits.data
            np.testing.assert_array_equal(reduced, plain)


def test_uncertainty_beats_random_at_low_keep_ratios(trend_rows):
    for ratio in THRESHOLDS["trend_ratios"]:
        uncert = mean_accuracy(trend_rows, "uncert_prune", ratio)
        random = mean_accuracy(trend_rows, "random_prune", ratio)
        low = mean_accuracy(trend_rows, "low_uncert_prune", ratio)
        assert uncert >= random >= low, (ratio, uncert, random, low)

    lowest = min(THRESHOLDS["trend_ratios"])
    gap = mean_accuracy(trend_rows, "uncert_prune", lowest) - mean_accuracy(trend_rows, "random_prune", lowest)
    assert gap >= THRESHOLDS["uncert_over_random_gap"]

    by_seed = {(r.strategy, r.seed): r.acc1 for r in trend_rows if r.keep_ratio == lowest}
    wins = sum(by_seed[("uncert_prune", s)] > by_seed[("random_prune", s)] for s in THRESHOLDS["seeds"])
    assert wins >= THRESHOLDS["uncert_over_random_min_wins"]


def test_pruning_beats_merging(trend_rows):
    ratio = THRESHOLDS["prune_vs_merge_ratio"]
    assert mean_accuracy(trend_rows, "uncert_prune", ratio) >= mean_accuracy(trend_rows, "uncert_merge", ratio)


def test_full_score_beats_std_only(experiments):
    ratio = THRESHOLDS["ablation_ratio"]
    seeds = tuple(THRESHOLDS["seeds"])
    full = run_sweep(SweepConfig(("uncert_prune",), (ratio,), seeds), experiments=experiments)
    std_only = run_sweep(SweepConfig(("uncert_prune",), (ratio,), seeds, score_mode="std"), experiments=experiments)
    assert mean_accuracy(full, "uncert_prune", ratio) >= mean_accuracy(std_only, "uncert_prune", ratio)


def test_zero_lambda_is_the_mean_ranking(experiments):
    experiment = experiments[THRESHOLDS["seeds"][0]]
    model = experiment.model
    frames, _, ids = next(iter(experiment.test.batches(32)))
    tokens = forward_full(model, frames, TokenReduction(Strategy("none"), 1.0), ids).insert_tokens
    c = model.config.num_classes
    zero_lambda = analyse_tokens(tokens, model.head, c, lam=0.0).scores
    mean_only = analyse_tokens(tokens, model.head, c, lam=0.9, mode="mean").scores
    ratio = THRESHOLDS["ablation_ratio"]
    a = build_keep_mask(zero_lambda, ratio, Strategy("uncert_prune", lam=0.0), ids)
    b = build_keep_mask(mean_only, ratio, Strategy("uncert_prune", score_mode="mean"), ids)
    assert [m.keep_indices for m in a] == [m.keep_indices for m in b]


def test_block_operations_fall_with_keep_ratio(experiments):
    experiment = experiments[THRESHOLDS["seeds"][0]]
    rows = sop_report(experiment, THRESHOLDS["sop_ratios"], Strategy("uncert_prune"))
    sops = [r.block_sops for r in rows]
    assert all(a > b for a, b in zip(sops, sops[1:]))
    reductions = [r.reduction_pct for r in rows]
    assert all(a < b for a, b in zip(reductions, reductions[1:]))


def test_scores_recover_the_class_signature(experiments):
    assert THRESHOLDS["token_recovery_calibrated_seeds"] == THRESHOLDS["seeds"]
    exact = [token_recovery(experiments[seed])[0] for seed in THRESHOLDS["seeds"]]
    assert float(np.mean(exact)) >= THRESHOLDS["token_recovery_exact_rate"]


def test_signature_tokens_carry_the_most_evidence(experiments):
    gaps = []
    for seed in THRESHOLDS["seeds"]:
        experiment = experiments[seed]
        model = experiment.model
        frames, labels, ids = experiment.test.batch(0, len(experiment.test))
        tokens = forward_full(model, frames, TokenReduction(Strategy("none"), 1.0), ids).insert_tokens
        scores = analyse_tokens(tokens, model.head, model.config.num_classes).scores
        on_signature = np.zeros(scores.shape, dtype=bool)
        for row, label in enumerate(labels):
            on_signature[row, experiment.test.signatures[int(label)]] = True
        gaps.append(scores[~on_signature].mean() - scores[on_signature].mean())
    assert float(np.mean(gaps)) > 0.0
