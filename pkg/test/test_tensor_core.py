import numpy as np
import pytest

from uncert_snn.efficiency import SopLedger
from uncert_snn.errors import InvalidArgumentError, ShapeError, TensorFileError, TokenIndexError
from uncert_snn.tensor_core import (
    WEIGHT_GRID_BITS,
    DenseTensor,
    Shape,
    SpikeTensor,
    _accumulate_ascending,
    decode_tensor,
    encode_tensor,
    flatten_spatial,
    gather_tokens,
    on_weight_grid,
    pack_header,
    quantize_to_grid,
    read_tensor,
    reduce_mean_std,
    scatter_tokens,
    spike_dense_matmul,
    spike_rows_matmul,
    topk_indices,
    unflatten_tokens,
    write_tensor,
)


class TestShape:
    def test_rank_bounds(self):
        with pytest.raises(ShapeError):
            Shape(())
        with pytest.raises(ShapeError):
            Shape((1,) * 6)

    def test_extents_must_be_positive(self):
        with pytest.raises(ShapeError):
            Shape((2, 0))
        with pytest.raises(ShapeError):
            Shape((2, -1))

    def test_size_rank_and_text(self):
        shape = Shape.of(2, 3, 4)
        assert shape.size == 24
        assert shape.rank == 3
        assert str(shape) == "[2,3,4]"


class TestTensors:
    def test_dense_rejects_non_finite(self):
        with pytest.raises(InvalidArgumentError):
            DenseTensor([1.0, np.nan])
        with pytest.raises(InvalidArgumentError):
            DenseTensor([np.inf])

    def test_spike_rejects_non_binary(self):
        with pytest.raises(InvalidArgumentError):
            SpikeTensor([0, 1, 2])

    def test_tensors_are_read_only(self):
        dense = DenseTensor([1.0, 2.0])
        with pytest.raises(ValueError):
            dense.data[0] = 5.0
        spikes = SpikeTensor([0, 1])
        with pytest.raises(ValueError):
            spikes.data[0] = 1

    def test_bool_input_and_nnz(self):
        spikes = SpikeTensor(np.array([[True, False], [True, True]]))
        assert spikes.data.dtype == np.uint8
        assert spikes.nnz == 3
        np.testing.assert_array_equal(spikes.to_dense().data, [[1.0, 0.0], [1.0, 1.0]])


class TestFlatten:
    def test_token_index_is_row_major(self):
        x = np.zeros((4, 1, 8, 2, 3), dtype=np.uint8)
        x[:, 0, :, 1, 0] = 1
        tokens = flatten_spatial(SpikeTensor(x))
        assert tokens.shape.dims == (4, 1, 6, 8)
        nonzero_tokens = sorted(set(np.argwhere(tokens.data[0, 0])[:, 0].tolist()))
        assert nonzero_tokens == [3]

    def test_unflatten_inverts_flatten(self, rng):
        x = SpikeTensor(rng.random((2, 3, 5, 2, 3)) < 0.5)
        assert unflatten_tokens(flatten_spatial(x), 2, 3) == x

    def test_rank_checks(self):
        with pytest.raises(ShapeError):
            flatten_spatial(SpikeTensor.zeros(2, 2, 2))
        with pytest.raises(ShapeError):
            unflatten_tokens(SpikeTensor.zeros(1, 1, 6, 2), 2, 2)


class TestGatherScatter:
    def test_shared_index_list(self):
        x = DenseTensor(np.arange(24, dtype=np.float32).reshape(2, 1, 4, 3))
        out = gather_tokens(x, [1, 3])
        np.testing.assert_array_equal(out.data, x.data[:, :, [1, 3]])

    def test_per_sample_table(self):
        x = DenseTensor(np.arange(8, dtype=np.float32).reshape(1, 2, 4, 1))
        out = gather_tokens(x, np.array([[0, 2], [1, 3]]))
        np.testing.assert_array_equal(out.data[0, :, :, 0], [[0.0, 2.0], [5.0, 7.0]])

    def test_scatter_direct_construction(self):
        base = DenseTensor.zeros(1, 1, 4, 2)
        out = scatter_tokens(DenseTensor(np.ones((1, 1, 2, 2))), [1, 3], base)
        np.testing.assert_array_equal(out.data[0, 0, :, 0], [0.0, 1.0, 0.0, 1.0])

    def test_scatter_of_gather_restores_rows(self, rng):
        x = SpikeTensor(rng.random((3, 2, 6, 4)) < 0.5)
        base = SpikeTensor(rng.random((3, 2, 6, 4)) < 0.5)
        idx = [0, 2, 5]
        out = scatter_tokens(gather_tokens(x, idx), idx, base)
        np.testing.assert_array_equal(out.data[:, :, idx], x.data[:, :, idx])
        np.testing.assert_array_equal(out.data[:, :, [1, 3, 4]], base.data[:, :, [1, 3, 4]])

    @pytest.mark.parametrize("idx", [[2, 1], [1, 1], [0, 4], [-1, 2]])
    def test_bad_indices(self, idx):
        x = DenseTensor.zeros(1, 1, 4, 2)
        with pytest.raises(TokenIndexError):
            gather_tokens(x, idx)

    def test_empty_gather(self):
        with pytest.raises(ShapeError):
            gather_tokens(DenseTensor.zeros(1, 1, 4, 2), [])

    def test_scatter_needs_same_kind(self):
        with pytest.raises(ShapeError):
            scatter_tokens(SpikeTensor.zeros(1, 1, 1, 2), [0], DenseTensor.zeros(1, 1, 4, 2))


class TestTopk:
    def test_scores(self):
        assert topk_indices([0.9, 0.1, 0.5, 0.5, 0.3], 3).tolist() == [0, 2, 3]

    def test_ties_go_to_smaller_index(self):
        assert topk_indices([0.5, 0.5, 0.5, 0.1], 2).tolist() == [0, 1]

    def test_bounds(self):
        assert topk_indices([1.0, 2.0], 0).tolist() == []
        with pytest.raises(InvalidArgumentError):
            topk_indices([1.0, 2.0], 3)
        with pytest.raises(InvalidArgumentError):
            topk_indices([1.0, np.nan], 1)


class TestSpikeMatmul:
    def test_op_count(self):
        ledger = SopLedger()
        out = spike_dense_matmul(SpikeTensor([[1, 0, 1, 1]]), DenseTensor(np.ones((4, 8))), ledger, "fc")
        np.testing.assert_array_equal(out.data, np.full((1, 8), 3.0))
        assert ledger.total_ops() == 24
        assert ledger.entries["fc"].spike_accumulates == 24

    def test_identity(self):
        a = SpikeTensor([[1, 0], [0, 1]])
        out = spike_dense_matmul(a, DenseTensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, np.eye(2))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            spike_dense_matmul(SpikeTensor.zeros(2, 3), DenseTensor.zeros(4, 2))

    def test_grid_weights_match_ascending_loop(self, rng):
        a = (rng.random((7, 12)) < 0.4).astype(np.uint8)
        w = quantize_to_grid(rng.normal(size=(12, 5)))
        assert on_weight_grid(w)
        np.testing.assert_array_equal(spike_rows_matmul(a, w), _accumulate_ascending(a, w))

    def test_off_grid_weights(self, rng):
        a = (rng.random((7, 12)) < 0.4).astype(np.uint8)
        w = rng.normal(size=(12, 5)).astype(np.float32)
        assert not on_weight_grid(w)
        expected = a.astype(np.float64) @ w.astype(np.float64)
        np.testing.assert_allclose(spike_rows_matmul(a, w), expected, rtol=1e-5, atol=1e-5)

    def test_quantize_to_grid(self, rng):
        w = quantize_to_grid(rng.normal(size=100))
        scaled = w.astype(np.float64) * 2**WEIGHT_GRID_BITS
        np.testing.assert_array_equal(scaled, np.round(scaled))


class TestReduceMeanStd:
    def test_example(self):
        mu, sigma = reduce_mean_std([0.2, 0.4, 0.6, 0.8])
        assert mu == pytest.approx(0.5, abs=1e-6)
        assert sigma == pytest.approx(0.2236068, abs=1e-6)

    def test_single_value(self):
        assert reduce_mean_std([0.3]) == (pytest.approx(0.3), 0.0)

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            reduce_mean_std([])


class TestTensorFile:
    def test_round_trip(self, tmp_path, rng):
        dense = DenseTensor(rng.normal(size=(2, 3, 4)))
        spikes = SpikeTensor(rng.random((5, 2)) < 0.5)
        write_tensor(tmp_path / "d.spkt", dense)
        write_tensor(tmp_path / "s.spkt", spikes)
        assert read_tensor(tmp_path / "d.spkt") == dense
        assert read_tensor(tmp_path / "s.spkt") == spikes

    def test_header_layout(self):
        blob = encode_tensor(SpikeTensor([[1, 0, 1]]))
        assert blob[:4] == b"SPKT"
        assert blob[4] == 1  # version
        assert blob[5] == 1  # binary dtype code
        assert blob[6] == 2  # rank
        assert len(blob) == 8 + 2 * 4 + 3

    def test_bad_magic(self):
        blob = encode_tensor(DenseTensor([1.0, 2.0]))
        with pytest.raises(TensorFileError):
            decode_tensor(b"XXXX" + blob[4:])

    def test_truncated(self):
        blob = encode_tensor(DenseTensor([1.0, 2.0]))
        with pytest.raises(TensorFileError):
            decode_tensor(blob[:-1])
        with pytest.raises(TensorFileError):
            decode_tensor(blob[:5])

    def test_unknown_dtype_and_version(self):
        blob = bytearray(encode_tensor(DenseTensor([1.0, 2.0])))
        bad_dtype = bytearray(blob)
        bad_dtype[5] = 7
        with pytest.raises(TensorFileError):
            decode_tensor(bytes(bad_dtype))
        bad_version = bytearray(blob)
        bad_version[4] = 9
        with pytest.raises(TensorFileError):
            decode_tensor(bytes(bad_version))

    def test_binary_payload_must_be_binary(self):
        blob = bytearray(encode_tensor(SpikeTensor([0, 1])))
        blob[-1] = 3
        with pytest.raises(TensorFileError):
            decode_tensor(bytes(blob))

    def test_extents_beyond_32_bits_are_rejected(self):
        assert pack_header(1, (3, 2**32 - 1))[6] == 2
        with pytest.raises(TensorFileError):
            pack_header(1, (2**32, 1))

    def test_wide_tensor_raises_before_encoding(self):
        tensor = SpikeTensor([0, 1])
        tensor.shape = Shape((2**32, 1))
        with pytest.raises(TensorFileError):
            encode_tensor(tensor)
