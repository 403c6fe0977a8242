import numpy as np
import pytest

from uncert_snn.errors import InvalidArgumentError, NumericalError, ShapeError
from uncert_snn.head_training import (
    RidgeConfig,
    eval_accuracy,
    evaluate,
    fit_ridge,
    fit_ridge_targets,
    pool_features,
    predict_classes,
    topk_hits,
)
from uncert_snn.selection import Strategy, TokenReduction
from uncert_snn.tensor_core import DenseTensor, SpikeTensor


class TestRidge:
    def test_normal_equations_by_hand(self):
        head = fit_ridge_targets(np.array([[1.0], [-1.0]]), np.array([1.0, -1.0]), RidgeConfig(0.0))
        assert head.w.data[0, 0] == pytest.approx(1.0, abs=1e-6)
        assert head.b.data[0] == pytest.approx(0.0, abs=1e-6)

    def test_matches_closed_form(self, rng):
        x = rng.normal(size=(40, 6))
        y = rng.normal(size=(40, 3))
        head = fit_ridge_targets(x, y, RidgeConfig(0.5))
        xc = x - x.mean(axis=0)
        yc = y - y.mean(axis=0)
        w = np.linalg.solve(xc.T @ xc + 0.5 * np.eye(6), xc.T @ yc)
        b = y.mean(axis=0) - x.mean(axis=0) @ w
        np.testing.assert_allclose(head.w.data, w, atol=1e-5)
        np.testing.assert_allclose(head.b.data, b, atol=1e-5)

    def test_duplicated_rows_equal_double_weight(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        y = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        doubled = fit_ridge_targets(np.vstack([x, x[:1]]), np.vstack([y, y[:1]]), RidgeConfig(0.1))
        weighted = fit_ridge_targets(x, y, RidgeConfig(0.1), sample_weight=np.array([2.0, 1.0, 1.0]))
        np.testing.assert_allclose(doubled.w.data, weighted.w.data, atol=1e-6)
        np.testing.assert_allclose(doubled.b.data, weighted.b.data, atol=1e-6)

    def test_singular_without_regularisation(self):
        with pytest.raises(NumericalError):
            fit_ridge_targets(np.array([[1.0, 1.0], [2.0, 2.0]]), np.array([0.0, 1.0]), RidgeConfig(0.0))

    def test_argument_checks(self):
        with pytest.raises(InvalidArgumentError):
            RidgeConfig(-1.0)
        with pytest.raises(ShapeError):
            fit_ridge_targets(np.zeros((3, 2)), np.zeros(4))
        with pytest.raises(InvalidArgumentError):
            fit_ridge_targets(np.zeros((2, 2)), np.zeros(2), sample_weight=np.array([1.0, -1.0]))

    def test_separable_classes(self):
        features = np.tile(np.eye(3), (4, 1))
        labels = np.tile(np.arange(3), 4)
        head = fit_ridge(DenseTensor(features), labels, RidgeConfig(1e-3))
        logits = features @ head.w.data + head.b.data
        np.testing.assert_array_equal(predict_classes(logits), labels)

    def test_labels_checked(self):
        with pytest.raises(InvalidArgumentError):
            fit_ridge(DenseTensor(np.eye(3)), [0, 1, 3], num_classes=3)
        with pytest.raises(ShapeError):
            fit_ridge(DenseTensor(np.eye(3)), [0, 1])

    def test_class_count_defaults_to_label_range(self):
        head = fit_ridge(DenseTensor(np.eye(3)), [0, 1, 1])
        assert head.num_classes == 2


class TestPrediction:
    def test_ties_go_to_smaller_class(self):
        assert predict_classes(np.array([[0.2, 0.5, 0.5], [1.0, 1.0, 0.0]])).tolist() == [1, 0]

    def test_topk_hits(self):
        logits = np.array([[0.1, 0.9, 0.5], [0.7, 0.2, 0.1]])
        assert topk_hits(logits, np.array([2, 2]), 2).tolist() == [True, False]

    def test_pool_features(self):
        tokens = np.zeros((2, 1, 4, 3), dtype=np.uint8)
        tokens[0, 0, :, 0] = 1
        tokens[:, 0, 0, 2] = 1
        pooled = pool_features(SpikeTensor(tokens)).data
        np.testing.assert_allclose(pooled, [[0.5, 0.0, 0.25]])


class TestEvaluate:
    def test_accuracy_and_ledger(self, tiny_experiment):
        evaluation = evaluate(tiny_experiment.model, tiny_experiment.test, batch_size=10)
        assert 0.0 <= evaluation.acc1 <= 1.0
        # three classes: top-5 degenerates to top-1
        assert evaluation.acc5 == evaluation.acc1
        assert evaluation.logits.shape == (len(tiny_experiment.test), 3)
        assert evaluation.ledger.total_ops("s2.b1.") > 0

    def test_batch_size_does_not_change_results(self, tiny_experiment):
        a = evaluate(tiny_experiment.model, tiny_experiment.test, batch_size=5)
        b = evaluate(tiny_experiment.model, tiny_experiment.test, batch_size=24)
        np.testing.assert_array_equal(a.logits, b.logits)
        assert a.ledger == b.ledger

    def test_random_prune_is_batch_invariant(self, tiny_experiment):
        reduction = TokenReduction(Strategy("random_prune", seed=1), 0.5)
        a = evaluate(tiny_experiment.model, tiny_experiment.test, reduction, batch_size=7)
        b = evaluate(tiny_experiment.model, tiny_experiment.test, reduction, batch_size=24)
        np.testing.assert_array_equal(a.logits, b.logits)

    def test_eval_accuracy(self, tiny_experiment):
        model = tiny_experiment.model
        expected = evaluate(model, tiny_experiment.test).acc1
        assert eval_accuracy(model, model.head, tiny_experiment.test) == expected

    def test_needs_head(self, tiny_model, tiny_experiment):
        with pytest.raises(InvalidArgumentError):
            evaluate(tiny_model, tiny_experiment.test)
