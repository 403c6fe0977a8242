from dataclasses import replace

import numpy as np
import pytest

from uncert_snn.backbone import (
    GAIN_STEPS,
    EmbedWeights,
    HeadWeights,
    ModelConfig,
    SpikingTransformer,
    SsaBlockWeights,
    StageConfig,
    calibrate_gain,
    firing_report,
    forward_full,
    patch_embed,
    ssa_forward,
    token_logits,
)
from uncert_snn.class_engine_config import DEFAULT_SETTINGS, validate_settings
from uncert_snn.efficiency import AV_DATA, SopLedger
from uncert_snn.errors import ConfigurationError, ShapeError
from uncert_snn.neuron import LifParams
from uncert_snn.presets import FIRING_RATE_BAND
from uncert_snn.selection import Strategy, TokenReduction
from uncert_snn.sweep import model_config_from, synthetic_spec_from
from uncert_snn.synthetic import synth_dataset
from uncert_snn.tensor_core import DenseTensor, SpikeTensor, on_weight_grid, quantize_to_grid


def _block(rng, d: int, shift: int = 0) -> SsaBlockWeights:
    def mat():
        return DenseTensor(quantize_to_grid(rng.normal(scale=0.8, size=(d, d))))

    return SsaBlockWeights(mat(), mat(), mat(), mat(), shift=shift)


class TestModelConfig:
    def test_defaults(self):
        config = ModelConfig()
        assert config.stage_tokens() == [64, 64]
        assert config.head_dim == 64
        assert config.block_ids() == ["1.0", "2.0", "2.1"]
        assert config.shift_for(0) == 2
        assert config.shift_for(1) == 3

    def test_fixed_shift(self):
        assert ModelConfig(attn_shift=5).shift_for(1) == 5

    def test_downsampling_grid(self):
        config = ModelConfig(stages=(StageConfig(8), StageConfig(16, 1, 2)), image_size=8)
        assert config.stage_sides() == [8, 4]
        assert config.stage_tokens() == [64, 16]

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"num_classes": 1},
            {"steps": 0},
            {"image_size": 9, "patch": 2},
            {"stages": (StageConfig(8, 1, 2),)},
            {"stages": (StageConfig(8), StageConfig(8, 1, 2), StageConfig(8, 1, 2)), "image_size": 6},
            {"av_counting": "sparse"},
            {"init_rate": 0.0},
            {"residual_scale": -0.1},
        ],
    )
    def test_rejects_bad_configs(self, kwargs):
        with pytest.raises(ConfigurationError):
            ModelConfig(**kwargs)

    def test_stage_config_checks(self):
        with pytest.raises(ConfigurationError):
            StageConfig(0)
        with pytest.raises(ConfigurationError):
            StageConfig(8, 1, 3)

    def test_parse_block_id(self):
        config = ModelConfig()
        assert config.parse_block_id("2.1") == (1, 1)
        assert config.parse_block_id("1.0") == (0, 0)
        for bad in ("3.0", "1.1", "x", "2"):
            with pytest.raises(ConfigurationError):
                config.parse_block_id(bad)

    def test_manifest_round_trip(self):
        config = ModelConfig(
            steps=3, num_classes=5, seed=11, static_input=True, attn_shift=2, residual_scale=0.25, av_counting=AV_DATA
        )
        assert ModelConfig.from_manifest(config.to_manifest()) == config

    def test_manifest_missing_key(self):
        with pytest.raises(ConfigurationError):
            ModelConfig.from_manifest({"steps": 4})


class TestBuild:
    def test_deterministic_per_seed(self, tiny_config):
        a = SpikingTransformer.build(tiny_config)
        b = SpikingTransformer.build(tiny_config)
        assert a.embeds[0].w == b.embeds[0].w
        assert a.blocks[1][1].w_proj == b.blocks[1][1].w_proj

    def test_seed_changes_weights(self, tiny_config):
        a = SpikingTransformer.build(tiny_config)
        b = SpikingTransformer.build(replace(tiny_config, seed=tiny_config.seed + 1))
        assert a.embeds[0].w != b.embeds[0].w

    def test_weights_live_on_grid(self, tiny_model):
        for stage_blocks in tiny_model.blocks:
            for block in stage_blocks:
                for w in (block.w_q, block.w_k, block.w_v, block.w_proj):
                    assert on_weight_grid(w.data)
        assert tiny_model.embeds[0].pos.shape.dims == (16, 8)
        assert tiny_model.embeds[1].pos is None

    def test_with_head_checks_shape(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.with_head(HeadWeights(DenseTensor.zeros(8, 3), DenseTensor.zeros(3)))
        with pytest.raises(ShapeError):
            tiny_model.with_head(HeadWeights(DenseTensor.zeros(16, 4), DenseTensor.zeros(4)))

    def test_block_weights_must_be_square(self):
        square = DenseTensor.zeros(4, 4)
        with pytest.raises(ShapeError):
            SsaBlockWeights(square, square, square, DenseTensor.zeros(4, 3))

    def test_calibration_records_a_gain_per_spiking_layer(self, tiny_model, tiny_frames):
        rates = forward_full(tiny_model, tiny_frames).ledger.firing_rates()
        assert set(tiny_model.gains) == set(rates)
        lo, hi = GAIN_STEPS
        assert all(2.0 ** (lo / 4) <= g <= 2.0 ** (hi / 4) for g in tiny_model.gains.values())

    def test_uncalibrated_build_keeps_the_raw_draw(self, tiny_config):
        raw = SpikingTransformer.build(tiny_config, calibrate=False)
        assert raw.gains == {}
        assert raw.embeds[0].pos == SpikingTransformer.build(tiny_config).embeds[0].pos


class TestCalibrateGain:
    def test_nearest_quarter_octave(self):
        gain, rate = calibrate_gain(lambda g: min(1.0, 0.1 * g), 0.15)
        assert gain == 2.0**0.5
        assert rate == pytest.approx(0.1 * 2.0**0.5)

    def test_unreachable_target_takes_the_largest_gain(self):
        gain, rate = calibrate_gain(lambda g: 0.0, 0.15)
        assert gain == 2.0 ** (GAIN_STEPS[1] / 4)
        assert rate == 0.0

    def test_saturated_layer_takes_the_smallest_gain(self):
        gain, _ = calibrate_gain(lambda g: 0.9, 0.15)
        assert gain == 2.0 ** (GAIN_STEPS[0] / 4)


class TestSsaForward:
    def test_output_is_binary_and_shaped(self, rng):
        x = SpikeTensor(rng.random((3, 2, 6, 4)) < 0.5)
        out = ssa_forward(x, _block(rng, 4))
        assert out.shape.dims == (3, 2, 6, 4)
        assert set(np.unique(out.data).tolist()) <= {0, 1}

    def test_ledger_labels(self, rng):
        ledger = SopLedger()
        ssa_forward(SpikeTensor(rng.random((2, 1, 5, 4)) < 0.5), _block(rng, 4), ledger, "s2.b1")
        assert set(ledger.entries) == {"s2.b1.q", "s2.b1.k", "s2.b1.v", "s2.b1.attn", "s2.b1.proj"}
        # structural A*V: T * B * N * N * d
        assert ledger.entries["s2.b1.attn"].dense_macs == 2 * 1 * 5 * 5 * 4
        assert "s2.b1.out" in ledger.firing_rates()

    def test_silent_input_stays_silent(self, rng):
        ledger = SopLedger()
        out = ssa_forward(SpikeTensor.zeros(2, 1, 5, 4), _block(rng, 4), ledger, "b", av_mode=AV_DATA)
        assert out.nnz == 0
        assert ledger.totals() == (0, 0)

    def test_rows_match_single_sample_runs(self, rng):
        x = SpikeTensor(rng.random((2, 3, 5, 4)) < 0.5)
        block = _block(rng, 4, shift=1)
        together = ssa_forward(x, block).data
        for b in range(3):
            alone = ssa_forward(SpikeTensor(x.data[:, b : b + 1]), block).data
            np.testing.assert_array_equal(together[:, b : b + 1], alone)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ssa_forward(SpikeTensor.zeros(1, 1, 3, 5), _block(rng, 4))

    def test_residual_alone_never_fires(self, rng):
        block = _block(rng, 4)
        silent_proj = SsaBlockWeights(block.w_q, block.w_k, block.w_v, DenseTensor.zeros(4, 4))
        out = ssa_forward(SpikeTensor(np.ones((4, 2, 5, 4), dtype=np.uint8)), silent_proj)
        assert out.nnz == 0

    def test_output_depends_on_the_other_tokens(self):
        one = DenseTensor([[1.0]])
        block = SsaBlockWeights(one, one, one, DenseTensor([[0.3125]]))
        # Y = 2 with both tokens present: 0.625 + 0.4 crosses v_th, 0.3125 + 0.4 alone does not
        together = ssa_forward(SpikeTensor(np.ones((1, 1, 2, 1), dtype=np.uint8)), block)
        alone = ssa_forward(SpikeTensor(np.ones((1, 1, 1, 1), dtype=np.uint8)), block)
        assert together.data[0, 0, 0, 0] == 1
        assert alone.data[0, 0, 0, 0] == 0


class TestPatchEmbed:
    def test_patch_shapes(self, rng):
        frames = DenseTensor((rng.random((2, 1, 2, 4, 4)) < 0.5).astype(np.float32))
        weights = EmbedWeights(DenseTensor(quantize_to_grid(rng.normal(size=(8, 6)))))
        out = patch_embed(frames, 2, weights, LifParams())
        assert out.shape.dims == (2, 1, 4, 6)

    def test_static_input_repeats(self, rng):
        frames = DenseTensor((rng.random((1, 1, 2, 2, 2)) < 0.5).astype(np.float32))
        weights = EmbedWeights(DenseTensor(quantize_to_grid(rng.normal(size=(2, 3)))))
        ledger = SopLedger()
        out = patch_embed(frames, 1, weights, LifParams(), steps=4, ledger=ledger)
        assert out.shape.dims == (4, 1, 4, 3)
        assert ledger.entries["s1.embed"].spike_accumulates == int(np.count_nonzero(frames.data)) * 4 * 3

    def test_shape_errors(self, rng):
        frames = DenseTensor.zeros(1, 1, 2, 4, 4)
        with pytest.raises(ShapeError):
            patch_embed(frames, 3, EmbedWeights(DenseTensor.zeros(18, 4)))
        with pytest.raises(ShapeError):
            patch_embed(frames, 2, EmbedWeights(DenseTensor.zeros(4, 4)))
        with pytest.raises(ShapeError):
            patch_embed(DenseTensor.zeros(1, 2, 4, 4), 1, EmbedWeights(DenseTensor.zeros(2, 4)))


class TestTokenLogits:
    def test_binary_rows(self):
        w = DenseTensor([[1.0, 2.0], [10.0, 20.0], [100.0, 200.0]])
        out = token_logits(SpikeTensor([1, 0, 1]), HeadWeights(w, DenseTensor.zeros(2)))
        np.testing.assert_array_equal(out.data, [101.0, 202.0])

    def test_bias_and_batching(self):
        head = HeadWeights(DenseTensor([[1.0], [2.0]]), DenseTensor([0.5]))
        z = SpikeTensor(np.array([[[1, 1], [0, 0]]], dtype=np.uint8))
        np.testing.assert_array_equal(token_logits(z, head).data[0, :, 0], [3.5, 0.5])

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            token_logits(SpikeTensor([1, 0]), HeadWeights(DenseTensor.zeros(3, 2), DenseTensor.zeros(2)))


class TestForwardFull:
    def test_shapes_without_head(self, tiny_model, tiny_frames):
        result = forward_full(tiny_model, tiny_frames)
        assert result.logits is None
        assert [t.shape.dims for t in result.stage_tokens] == [(3, 2, 16, 8), (3, 2, 16, 16)]
        assert result.pooled.shape.dims == (2, 16)
        assert "head" not in result.ledger.entries

    def test_logits_with_head(self, tiny_model_with_head, tiny_frames):
        result = forward_full(tiny_model_with_head, tiny_frames)
        assert result.logits.shape.dims == (2, 3)
        assert "head" in result.ledger.entries

    def test_repeatable(self, tiny_model_with_head, tiny_frames):
        a = forward_full(tiny_model_with_head, tiny_frames)
        b = forward_full(tiny_model_with_head, tiny_frames)
        assert a.logits == b.logits
        assert a.ledger == b.ledger

    def test_input_must_match_model(self, tiny_model):
        with pytest.raises(ConfigurationError):
            forward_full(tiny_model, DenseTensor.zeros(3, 1, 2, 8, 8))
        with pytest.raises(ConfigurationError):
            forward_full(tiny_model, DenseTensor.zeros(2, 1, 2, 4, 4))

    def test_sample_ids_must_cover_batch(self, tiny_model, tiny_frames):
        with pytest.raises(ConfigurationError):
            forward_full(tiny_model, tiny_frames, sample_ids=[0])

    def test_insert_tokens_recorded(self, tiny_model_with_head, tiny_frames):
        reduction = TokenReduction(Strategy("uncert_prune"), 0.5, "2.1")
        result = forward_full(tiny_model_with_head, tiny_frames, reduction=reduction)
        assert result.insert_tokens.shape.dims == (3, 2, 16, 16)

    def test_merge_before_downsampling_is_rejected(self, rng, make_head):
        config = ModelConfig(steps=2, stages=(StageConfig(16), StageConfig(16, 1, 2)), num_classes=3, image_size=4)
        model = SpikingTransformer.build(config).with_head(make_head(16, 3))
        frames = DenseTensor((rng.random((2, 1, 2, 4, 4)) < 0.5).astype(np.float32))
        with pytest.raises(ConfigurationError):
            forward_full(model, frames, reduction=TokenReduction(Strategy("uncert_merge"), 0.5, "1.0"))

    def test_firing_report(self, tiny_model, tiny_frames):
        rates = firing_report(forward_full(tiny_model, tiny_frames).ledger)
        assert "s1.embed" in rates
        assert all(0.0 <= r <= 1.0 for r in rates.values())


class TestSaveLoad:
    def test_round_trip(self, tmp_path, tiny_model_with_head, tiny_frames):
        tiny_model_with_head.save(tmp_path / "model")
        assert (tmp_path / "model" / "manifest.toml").is_file()
        loaded = SpikingTransformer.load(tmp_path / "model")
        assert loaded.config == tiny_model_with_head.config
        assert loaded.head.w == tiny_model_with_head.head.w
        assert forward_full(loaded, tiny_frames).logits == forward_full(tiny_model_with_head, tiny_frames).logits
        assert loaded.gains == tiny_model_with_head.gains
        assert loaded.block("2.0").residual_scale == tiny_model_with_head.config.residual_scale

    def test_without_head(self, tmp_path, tiny_model):
        tiny_model.save(tmp_path)
        assert SpikingTransformer.load(tmp_path).head is None

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ConfigurationError):
            SpikingTransformer.load(tmp_path)


@pytest.mark.slow
class TestDefaultBuild:
    @pytest.fixture(scope="class")
    def default_run(self):
        settings = validate_settings(DEFAULT_SETTINGS)
        train, _ = synth_dataset(synthetic_spec_from(settings), 0)
        model = SpikingTransformer.build(model_config_from(settings, 0))
        frames, _, ids = train.batch(0, 64)
        passthrough = TokenReduction(Strategy("none"), 1.0, "2.1")
        return forward_full(model, frames, reduction=passthrough, sample_ids=ids)

    def test_every_layer_fires_inside_the_band(self, default_run):
        low, high = FIRING_RATE_BAND
        rates = firing_report(default_run.ledger)
        assert len(rates) == 14
        outside = {label: rate for label, rate in rates.items() if not low <= rate <= high}
        assert not outside

    def test_last_block_is_not_the_identity(self, default_run):
        block_in = default_run.insert_tokens.data
        block_out = default_run.stage_tokens[-1].data
        assert float(np.mean(block_in == block_out)) < 0.97
