import argparse
import re
import sys
from pathlib import Path

import numpy as np
from rich.table import Table

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from uncert_snn.class_engine_config import EngineConfig
from uncert_snn.custom_logging import get_console, setup_logging
from uncert_snn.selection import Strategy
from uncert_snn.sweep import prepare_experiment, token_recovery
from uncert_snn.synthetic import bayes_accuracy

# Set up logging
log = setup_logging()

ACCEPTANCE_TOML = Path(__file__).resolve().parent.parent / "test" / "config" / "acceptance.toml"
NOMINAL_RATE = 0.8
RATE_LINE = re.compile(r"^token_recovery_exact_rate\s*=.*$", re.MULTILINE)
SEEDS_LINE = re.compile(r"^token_recovery_calibrated_seeds\s*=.*$", re.MULTILINE)


def calibrate(settings: dict, seeds, lam: float):
    strategy = Strategy("uncert_prune", lam=lam)
    rows = []
    for seed in seeds:
        experiment = prepare_experiment(settings, seed)
        exact, overlap = token_recovery(experiment, strategy)
        low_exact, low_overlap = token_recovery(experiment, strategy, lowest=True)
        chance = experiment.spec.signature_tokens / experiment.spec.n_tokens
        rows.append((seed, exact, overlap, low_exact, low_overlap, chance, bayes_accuracy(experiment.test)))
        log.info(f"seed {seed}: top exact {exact:.4f} overlap {overlap:.4f}, bottom exact {low_exact:.4f}")
    return rows


def frozen_rate(rate: float) -> float:
    """Measured rate rounded down to two decimals, capped at the nominal threshold."""
    return min(NOMINAL_RATE, float(np.floor(rate * 100) / 100))


def write_rate(path: Path, rate: float, seeds):
    text = path.read_text(encoding="utf-8")
    if not RATE_LINE.search(text) or not SEEDS_LINE.search(text):
        raise SystemExit(f"{path} needs token_recovery_exact_rate and token_recovery_calibrated_seeds lines")
    text = RATE_LINE.sub(f"token_recovery_exact_rate = {rate:.2f}", text)
    text = SEEDS_LINE.sub(f"token_recovery_calibrated_seeds = {sorted(seeds)}", text)
    path.write_text(text, encoding="utf-8")
    log.info(f"Froze token_recovery_exact_rate = {rate:.2f} for seeds {sorted(seeds)} in {path}")


def main():
    parser = argparse.ArgumentParser(
        description="Measure how often the top-scored tokens are exactly the class signature"
    )
    parser.add_argument("--config", type=str, default=None, help="TOML settings; presets when omitted")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--lambda", dest="lam", type=float, default=0.9)
    parser.add_argument(
        "--write",
        action="store_true",
        help=f"Freeze the measured rate (capped at {NOMINAL_RATE}) and its seeds in test/config/acceptance.toml",
    )
    args = parser.parse_args()

    settings = EngineConfig(args.config).settings()
    rows = calibrate(settings, args.seeds, args.lam)

    table = Table(title="token recovery")
    for column in ("seed", "top exact", "top overlap", "bottom exact", "bottom overlap", "chance", "bayes acc"):
        table.add_column(column, justify="right")
    for row in rows:
        table.add_row(str(row[0]), *(f"{v:.4f}" for v in row[1:]))
    get_console().print(table)

    rate = float(np.mean([r[1] for r in rows]))
    log.info(f"Mean exact-set rate over {len(rows)} seeds: {rate:.4f}")
    if rate < NOMINAL_RATE:
        log.warning(f"Exact-set rate {rate:.4f} is below the nominal {NOMINAL_RATE}")
    if args.write:
        write_rate(ACCEPTANCE_TOML, frozen_rate(rate), args.seeds)


if __name__ == "__main__":
    main()
