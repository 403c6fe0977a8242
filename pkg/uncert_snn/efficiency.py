"""
Synaptic-operation accounting and the uniform per-operation energy model.

Two counters are kept per layer label: spike-accumulates (a binary input
triggers one add per fan-out weight) and dense multiply-accumulates (for
integer- or real-valued operands such as the attention map A).
"""
import threading
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .errors import CountingError, InvalidArgumentError

INT64_MAX = 2**63 - 1

AV_STRUCTURAL = "structural"
AV_DATA = "data"
AV_COUNTING_CHOICES = (AV_STRUCTURAL, AV_DATA)


def _checked(value: int) -> int:
    if value < 0:
        raise InvalidArgumentError(f"operation counts must be non-negative, got {value}")
    if value > INT64_MAX:
        raise CountingError(f"operation count {value} overflows a 64-bit counter")
    return value


def count_linear(nnz_in: int, fan_out: int) -> int:
    """Spike-accumulates of a linear layer: every active input adds fan_out weights."""
    return _checked(_checked(int(nnz_in)) * _checked(int(fan_out)))


def count_attention(
    nnz_q: int,
    n_tokens: int,
    d: int,
    av_mode: str = AV_STRUCTURAL,
    nnz_a: Optional[int] = None,
) -> Tuple[int, int]:
    """
    Operation counts of one spike-driven attention step.

    Q K^T is credited nnz_q * N spike-accumulates. A V is credited as dense
    MACs because A is integer-valued: N * N * d in the structural convention,
    nnz(A) * d in the data-dependent one.

    Returns:
    tuple: (spike_accumulates, dense_macs)
    """
    spike_accumulates = count_linear(nnz_q, n_tokens)
    if av_mode == AV_STRUCTURAL:
        dense_macs = _checked(_checked(int(n_tokens)) * int(n_tokens) * _checked(int(d)))
    elif av_mode == AV_DATA:
        if nnz_a is None:
            raise InvalidArgumentError("data-dependent A*V counting needs nnz_a")
        dense_macs = count_linear(nnz_a, d)
    else:
        raise InvalidArgumentError(f"unknown A*V counting mode '{av_mode}'")
    return spike_accumulates, dense_macs


@dataclass
class LedgerEntry:
    spike_accumulates: int = 0
    dense_macs: int = 0

    @property
    def total(self) -> int:
        return self.spike_accumulates + self.dense_macs


class SopLedger:
    """
    Per-layer operation counts plus firing statistics of the spiking layers.

    Credits may arrive from several threads; merging two ledgers is entrywise
    addition and therefore independent of order.
    """

    def __init__(self):
        self._entries: Dict[str, LedgerEntry] = {}
        self._firing: Dict[str, List[int]] = {}
        self._lock = threading.Lock()

    def credit(self, label: str, spike_accumulates: int = 0, dense_macs: int = 0) -> None:
        spike_accumulates = _checked(int(spike_accumulates))
        dense_macs = _checked(int(dense_macs))
        with self._lock:
            entry = self._entries.setdefault(label, LedgerEntry())
            entry.spike_accumulates = _checked(entry.spike_accumulates + spike_accumulates)
            entry.dense_macs = _checked(entry.dense_macs + dense_macs)

    def record_firing(self, label: str, ones: int, cells: int) -> None:
        with self._lock:
            counts = self._firing.setdefault(label, [0, 0])
            counts[0] += int(ones)
            counts[1] += int(cells)

    @property
    def entries(self) -> Dict[str, LedgerEntry]:
        with self._lock:
            return {
                k: LedgerEntry(v.spike_accumulates, v.dense_macs)
                for k, v in sorted(self._entries.items())
            }

    def firing_rates(self) -> Dict[str, float]:
        with self._lock:
            return {
                k: (ones / cells if cells else 0.0)
                for k, (ones, cells) in sorted(self._firing.items())
            }

    def absorb(self, other: "SopLedger") -> "SopLedger":
        """Add every entry of other into this ledger, in place."""
        for label, entry in other.entries.items():
            self.credit(label, entry.spike_accumulates, entry.dense_macs)
        with other._lock:
            firing = {k: list(v) for k, v in other._firing.items()}
        for label, (ones, cells) in firing.items():
            self.record_firing(label, ones, cells)
        return self

    def merge(self, other: "SopLedger") -> "SopLedger":
        return SopLedger().absorb(self).absorb(other)

    def totals(self, prefix: str = "") -> Tuple[int, int]:
        """(spike_accumulates, dense_macs) summed over labels starting with prefix."""
        sa = 0
        macs = 0
        for label, entry in self.entries.items():
            if label.startswith(prefix):
                sa = _checked(sa + entry.spike_accumulates)
                macs = _checked(macs + entry.dense_macs)
        return sa, macs

    def total_ops(self, prefix: str = "") -> int:
        sa, macs = self.totals(prefix)
        return _checked(sa + macs)

    def __eq__(self, other):
        if not isinstance(other, SopLedger):
            return NotImplemented
        return self.entries == other.entries

    __hash__ = None

    def __repr__(self):
        sa, macs = self.totals()
        return f"SopLedger(labels={len(self._entries)}, spike_accumulates={sa}, dense_macs={macs})"


@dataclass(frozen=True)
class EnergyModel:
    pj_per_op: float = 0.9

    def __post_init__(self):
        if not self.pj_per_op > 0:
            raise InvalidArgumentError(f"pj_per_op must be positive, got {self.pj_per_op}")


def energy_mj(ledger: SopLedger, model: EnergyModel = EnergyModel(), prefix: str = "") -> float:
    """Energy in millijoule: every counted operation costs pj_per_op picojoule."""
    return ledger.total_ops(prefix) * model.pj_per_op * 1e-9


def reduction_percent(base: int, reduced: int) -> float:
    if base <= 0:
        raise InvalidArgumentError("reduction_percent needs a positive base count")
    return 100.0 * (base - reduced) / base


@dataclass(frozen=True)
class SopReportRow:
    keep_ratio: float
    block_sops: int
    block_macs: int
    block_total: int
    reduction_pct: float
    energy_mj: float


def build_sop_report(
    ledgers: Mapping[float, SopLedger],
    block_label: str,
    model: EnergyModel = EnergyModel(),
) -> List[SopReportRow]:
    """
    Block-level report rows, one per keep ratio, highest ratio first.

    The reduction column is measured against the row with the highest keep
    ratio (normally 1.0), using block totals.
    """
    if not ledgers:
        raise InvalidArgumentError("build_sop_report needs at least one ledger")
    ratios = sorted(ledgers, reverse=True)
    base = ledgers[ratios[0]].total_ops(block_label)
    rows = []
    for ratio in ratios:
        ledger = ledgers[ratio]
        sa, macs = ledger.totals(block_label)
        total = _checked(sa + macs)
        rows.append(
            SopReportRow(
                keep_ratio=ratio,
                block_sops=sa,
                block_macs=macs,
                block_total=total,
                reduction_pct=reduction_percent(base, total) if base > 0 else 0.0,
                energy_mj=energy_mj(ledger, model),
            )
        )
    return rows


def merge_ledgers(ledgers: Iterable[SopLedger]) -> SopLedger:
    merged = SopLedger()
    for ledger in ledgers:
        merged.absorb(ledger)
    return merged
