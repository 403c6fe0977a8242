"""CSV emission: comma separated, LF line endings, reals with six decimals."""
import csv
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

from .custom_logging import setup_logging
from .efficiency import SopReportRow
from .selection import KeepMask, MergeAssignment
from .sweep import ResultRow
from .uncertainty import TokenScoring

log = setup_logging()

RESULT_HEADER = ["strategy", "keep_ratio", "seed", "acc1", "acc5", "block_sops", "energy_mj"]
# C < 5: the acc5 column repeats acc1 and says so in its name
RESULT_HEADER_ACC5_AS_ACC1 = ["strategy", "keep_ratio", "seed", "acc1", "acc5=acc1", "block_sops", "energy_mj"]
SOP_HEADER = ["keep_ratio", "block_sops", "block_macs", "block_total", "reduction_pct", "energy_mj"]
UNCERTAINTY_HEADER = ["sample", "token", "t", "U"]
STATS_HEADER = ["sample", "token", "mu", "sigma", "score"]
MASK_HEADER = ["sample", "token", "kept", "anchor"]


def fmt(value: float) -> str:
    return f"{float(value):.6f}"


def _write(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    log.info(f"Wrote {path}")


def result_rows(rows: Sequence[ResultRow]) -> List[List[str]]:
    return [
        [r.strategy, fmt(r.keep_ratio), str(r.seed), fmt(r.acc1), fmt(r.acc5), str(r.block_sops), fmt(r.energy_mj)]
        for r in rows
    ]


def write_results_csv(path, rows: Sequence[ResultRow], num_classes: int) -> None:
    header = RESULT_HEADER if num_classes >= 5 else RESULT_HEADER_ACC5_AS_ACC1
    _write(path, header, result_rows(rows))


def write_sop_csv(path, rows: Sequence[SopReportRow]) -> None:
    _write(
        path,
        SOP_HEADER,
        (
            [fmt(r.keep_ratio), str(r.block_sops), str(r.block_macs), str(r.block_total), fmt(r.reduction_pct), fmt(r.energy_mj)]
            for r in rows
        ),
    )


def write_uncertainty_csv(path, scoring: TokenScoring, sample_ids: Sequence[int]) -> None:
    traj = scoring.trajectories
    steps, batch, tokens = traj.shape
    _write(
        path,
        UNCERTAINTY_HEADER,
        (
            [str(int(sample_ids[b])), str(n), str(t), fmt(traj[t, b, n])]
            for b in range(batch)
            for n in range(tokens)
            for t in range(steps)
        ),
    )


def write_stats_csv(path, scoring: TokenScoring, sample_ids: Sequence[int]) -> None:
    batch, tokens = scoring.mu.shape
    _write(
        path,
        STATS_HEADER,
        (
            [str(int(sample_ids[b])), str(n), fmt(scoring.mu[b, n]), fmt(scoring.sigma[b, n]), fmt(scoring.scores[b, n])]
            for b in range(batch)
            for n in range(tokens)
        ),
    )


def mask_rows(
    masks: Sequence[KeepMask],
    sample_ids: Sequence[int],
    assignments: Optional[Sequence[MergeAssignment]] = None,
) -> List[List[str]]:
    """kept is 1/0; anchor is the owning anchor for merges, the token itself if kept, else -1."""
    rows = []
    for b, mask in enumerate(masks):
        kept = mask.kept()
        for token in range(mask.n_total):
            if assignments:
                anchor = assignments[b].anchor_of(token)
            else:
                anchor = token if kept[token] else -1
            rows.append([str(int(sample_ids[b])), str(token), str(int(kept[token])), str(anchor)])
    return rows


def write_mask_csv(path, masks, sample_ids, assignments=None) -> None:
    _write(path, MASK_HEADER, mask_rows(masks, sample_ids, assignments))


def read_csv(path) -> List[List[str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return [row for row in csv.reader(f)]

