"""Hand-derived oracle values checked against the implementation."""
import time
from typing import Callable, List, NamedTuple, Tuple

import numpy as np
from rich.table import Table

from .backbone import HeadWeights, SsaBlockWeights, ssa_forward, token_logits
from .custom_logging import get_console, setup_logging
from .efficiency import SopLedger, count_attention, count_linear, energy_mj, reduction_percent
from .head_training import RidgeConfig, fit_ridge_targets
from .neuron import LifParams, LifState, lif_sequence, lif_step
from .selection import KeepMask, Strategy, apply_merge, build_keep_mask, build_merge_assignment, pruned_ssa
from .tensor_core import (
    DenseTensor,
    SpikeTensor,
    flatten_spatial,
    quantize_to_grid,
    reduce_mean_std,
    scatter_tokens,
    spike_dense_matmul,
    topk_indices,
)
from .uncertainty import (
    TokenStats,
    evidence_from_logits,
    importance_score,
    scalar_score_oracle,
    score_tokens,
    trajectory_stats,
    uncertainty_from_evidence,
)

log = setup_logging()

TOL = 1e-6


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def _close(value: float, expected: float, tol: float = TOL) -> Tuple[bool, str]:
    return abs(float(value) - expected) <= tol, f"{float(value):.7f} vs {expected:.7f}"


def _equal(value, expected) -> Tuple[bool, str]:
    return list(value) == list(expected), f"{list(value)} vs {list(expected)}"


def check_flatten_index():
    x = np.zeros((1, 1, 3, 2, 3), dtype=np.uint8)
    x[0, 0, 2, 1, 0] = 1
    tokens = flatten_spatial(SpikeTensor(x)).data
    hits = np.argwhere(tokens[0, 0] == 1).tolist()
    return hits == [[3, 2]], f"nonzero at {hits}"


def check_scatter():
    base = DenseTensor.zeros(1, 1, 4, 2)
    out = scatter_tokens(DenseTensor(np.ones((1, 1, 2, 2))), [1, 3], base).data[0, 0, :, 0]
    return _equal(out, [0.0, 1.0, 0.0, 1.0])


def check_topk_scores():
    return _equal(topk_indices([0.9, 0.1, 0.5, 0.5, 0.3], 3), [0, 2, 3])


def check_topk_ties():
    return _equal(topk_indices([0.5, 0.5, 0.5, 0.1], 2), [0, 1])


def check_matmul_ops():
    ledger = SopLedger()
    spike_dense_matmul(SpikeTensor([[1, 0, 1, 1]]), DenseTensor(np.ones((4, 8))), ledger, "fc")
    return ledger.total_ops() == 24, f"{ledger.total_ops()} ops"


def check_mean_std():
    mu, sigma = reduce_mean_std([0.2, 0.4, 0.6, 0.8])
    ok_mu, _ = _close(mu, 0.5)
    ok_sigma, _ = _close(sigma, 0.2236068)
    return ok_mu and ok_sigma, f"({mu:.7f}, {sigma:.7f})"


def check_lif_train():
    spikes = lif_sequence(LifParams(0.5, 1.0), DenseTensor(np.full((4, 1), 0.6))).data[:, 0]
    return _equal(spikes, [0, 0, 1, 0])


def check_lif_leak():
    state = LifState(LifParams(0.5, 1.0), (1,), membrane=[0.8])
    fired = [int(lif_step(state, DenseTensor([0.0])).data[0]) for _ in range(2)]
    ok, detail = _close(state.membrane[0], 0.2)
    return ok and fired == [0, 0], detail


def check_token_logits():
    w = DenseTensor([[1.0, 2.0], [10.0, 20.0], [100.0, 200.0]])
    out = token_logits(SpikeTensor([1, 0, 1]), HeadWeights(w, DenseTensor.zeros(2))).data
    return _equal(out, [101.0, 202.0])


def check_softplus():
    return _close(evidence_from_logits(DenseTensor([0.0])).data[0], 0.6931472)


def check_uncertainty_zero_logits():
    u = uncertainty_from_evidence(evidence_from_logits(DenseTensor.zeros(10))).data[0]
    return _close(u, 0.5906161)


def check_uncertainty_one_class():
    u = uncertainty_from_evidence(evidence_from_logits(DenseTensor([40.0, -40.0]))).data[0]
    return _close(u, 2.0 / 42.0)


def check_trajectory_stats():
    stats = trajectory_stats([0.2, 0.4, 0.6, 0.8])
    ok = abs(stats.mu - 0.5) <= TOL and abs(stats.sigma - 0.2236068) <= TOL
    return ok, f"({stats.mu:.7f}, {stats.sigma:.7f})"


def check_importance_score():
    return _close(importance_score(TokenStats(0.5, 0.2236068), 0.9), 0.7012461)


def check_score_oracle():
    rng = np.random.default_rng(7)
    tokens = SpikeTensor(rng.random((4, 2, 5, 6)) < 0.4)
    head = HeadWeights(DenseTensor(rng.normal(size=(6, 3))), DenseTensor(rng.normal(size=3)))
    scores = score_tokens(tokens, head, 3, 0.9).data
    worst = 0.0
    for b in range(2):
        for n in range(5):
            expected = scalar_score_oracle(tokens.data[:, b, n].tolist(), head, 0.9)
            worst = max(worst, abs(float(scores[b, n]) - expected))
    return worst <= TOL, f"max deviation {worst:.2e}"


def check_keep_count():
    masks = build_keep_mask(np.zeros((1, 10)), 0.6, Strategy("uncert_prune"))
    return masks[0].n_keep == 6, f"{masks[0].n_keep} kept"


def check_low_uncert_mask():
    masks = build_keep_mask(np.array([[0.9, 0.1, 0.5, 0.5, 0.3]]), 0.6, Strategy("low_uncert_prune"))
    return _equal(masks[0].keep_indices, [1, 2, 4])


def _toy_block(d: int, seed: int) -> SsaBlockWeights:
    rng = np.random.default_rng(seed)

    def mat():
        return DenseTensor(quantize_to_grid(rng.normal(scale=0.8, size=(d, d))))

    return SsaBlockWeights(mat(), mat(), mat(), mat())


def check_pruned_ops():
    rng = np.random.default_rng(3)
    x = SpikeTensor(rng.random((2, 1, 6, 4)) < 0.5)
    block = _toy_block(4, 11)
    full, pruned = SopLedger(), SopLedger()
    ssa_forward(x, block, full)
    pruned_ssa(x, KeepMask((0, 2, 4), 6, 0.5), block, pruned)
    return pruned.total_ops() < full.total_ops(), f"{pruned.total_ops()} < {full.total_ops()}"


def check_merge_weights():
    features = SpikeTensor(np.array([[1, 0], [0, 1]], dtype=np.uint8).reshape(1, 1, 2, 2))
    assignment = build_merge_assignment(np.array([[1.0, 0.0]]), features, 0.5)[0]
    (_, w_self), (_, w_other) = assignment.weights[0]
    ok_a, _ = _close(w_self, 0.7310586)
    ok_b, _ = _close(w_other, 0.2689414)
    return ok_a and ok_b, f"{{{w_self:.7f}, {w_other:.7f}}}"


def check_merged_token():
    features = SpikeTensor(np.array([[1, 0], [0, 1]], dtype=np.uint8).reshape(1, 1, 2, 2))
    assignment = build_merge_assignment(np.array([[1.0, 0.0]]), features, 0.5)
    merged = apply_merge(features, assignment).data[0, 0, 0]
    ok = abs(merged[0] - 0.7310586) <= TOL and abs(merged[1] - 0.2689414) <= TOL
    return ok, f"[{merged[0]:.7f}, {merged[1]:.7f}]"


def check_count_linear():
    return count_linear(4, 8) == 32, str(count_linear(4, 8))


def check_count_attention():
    return count_attention(3, 4, 2) == (12, 32) and count_attention(0, 4, 2) == (0, 32), str(count_attention(3, 4, 2))


def check_energy():
    ledger = SopLedger()
    ledger.credit("all", spike_accumulates=10**9)
    return _close(energy_mj(ledger), 0.9)


def check_reduction_percent():
    return _close(reduction_percent(1_233_000_000, 1_050_000_000), 14.84, 0.005)


def check_ridge_by_hand():
    head = fit_ridge_targets(np.array([[1.0], [-1.0]]), np.array([1.0, -1.0]), RidgeConfig(0.0))
    return _close(head.w.data[0, 0], 1.0)


def check_ridge_duplicates():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    y = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    doubled = fit_ridge_targets(np.vstack([x, x[:1]]), np.vstack([y, y[:1]]), RidgeConfig(0.1))
    weighted = fit_ridge_targets(x, y, RidgeConfig(0.1), sample_weight=np.array([2.0, 1.0, 1.0]))
    gap = float(np.abs(doubled.w.data - weighted.w.data).max())
    return gap <= TOL, f"max gap {gap:.2e}"


def check_ledger_merge():
    a, b = SopLedger(), SopLedger()
    a.credit("x", 3, 4)
    b.credit("x", 1, 0)
    b.credit("y", 0, 9)
    return a.merge(b) == b.merge(a), repr(a.merge(b))


CHECKS: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
    ("flatten_spatial token index h*W+w", check_flatten_index),
    ("scatter_tokens direct construction", check_scatter),
    ("topk_indices scores [0.9,0.1,0.5,0.5,0.3]", check_topk_scores),
    ("topk_indices tie-break", check_topk_ties),
    ("spike_dense_matmul ops nnz*P", check_matmul_ops),
    ("reduce_mean_std [0.2,0.4,0.6,0.8]", check_mean_std),
    ("LIF train under constant 0.6", check_lif_train),
    ("LIF leak tau^2 * U0", check_lif_leak),
    ("token_logits binary rows", check_token_logits),
    ("softplus(0) = ln 2", check_softplus),
    ("U with C=10 and zero logits", check_uncertainty_zero_logits),
    ("U with one dominant class", check_uncertainty_one_class),
    ("trajectory_stats", check_trajectory_stats),
    ("importance score lambda=0.9", check_importance_score),
    ("score_tokens vs scalar oracle", check_score_oracle),
    ("keep count floor(rN)", check_keep_count),
    ("low_uncert_prune tie-break", check_low_uncert_mask),
    ("pruned_ssa counts fewer ops", check_pruned_ops),
    ("merge weights", check_merge_weights),
    ("merged token", check_merged_token),
    ("count_linear", check_count_linear),
    ("count_attention", check_count_attention),
    ("energy 1e9 ops", check_energy),
    ("reduction_percent rounded table values", check_reduction_percent),
    ("ridge normal equations by hand", check_ridge_by_hand),
    ("ridge duplicated rows", check_ridge_duplicates),
    ("ledger merge order", check_ledger_merge),
]


def run_checks() -> List[CheckResult]:
    results = []
    for name, check in CHECKS:
        try:
            passed, detail = check()
        except Exception as e:  # a crashing oracle is a failed oracle
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(passed), detail))
        if not passed:
            log.error(f"Self-test failed: {name} ({detail})")
    return results


def run_selftest(show_table: bool = True) -> bool:
    start = time.perf_counter()
    results = run_checks()
    elapsed = time.perf_counter() - start
    if show_table:
        table = Table(title="Oracle self-test")
        table.add_column("check")
        table.add_column("result")
        table.add_column("detail")
        for r in results:
            table.add_row(r.name, "[green]ok[/green]" if r.passed else "[red]FAIL[/red]", r.detail)
        get_console().print(table)
    passed = sum(r.passed for r in results)
    log.info(f"{passed}/{len(results)} oracle checks passed in {elapsed:.2f}s")
    return passed == len(results)
