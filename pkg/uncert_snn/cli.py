import argparse
import sys
from pathlib import Path

from rich.table import Table

from . import __version__
from .backbone import SpikingTransformer, firing_report
from .class_engine_config import EngineConfig
from .custom_logging import get_console, setup_logging
from .efficiency import energy_mj
from .errors import ConfigurationError, UncertError
from .head_training import RidgeConfig, evaluate, train_head
from .presets import (
    AV_COUNTING_CHOICES,
    DEFAULT_RUN_CONFIG,
    DEFAULT_SOP_RATIOS,
    SCORE_MODE_CHOICES,
    STRATEGY_CHOICES,
)
from .reports import write_mask_csv, write_results_csv, write_sop_csv, write_stats_csv, write_uncertainty_csv
from .selection import Strategy, TokenReduction
from .selftest import run_selftest
from .svg_chart import emit_svg_lines, write_svg
from .sweep import (
    Experiment,
    ResultRow,
    SweepConfig,
    block_prefix,
    inspect_insertion,
    model_config_from,
    prepare_experiment,
    run_sweep,
    sop_report,
    synthetic_spec_from,
)
from .synthetic import load_dataset, save_dataset, synth_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

log = setup_logging()


class UsageArgumentParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(parser):
    parser.add_argument("--config", type=str, default=None, help="TOML file with flat key = value settings")
    parser.add_argument("--debug", action="store_true", help="Debug on")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars")
    parser.add_argument("--log-file", type=str, default=None, help="Also append log records to this file")


def _add_model_flags(parser):
    parser.add_argument("--steps", type=int, default=None, help="Simulation timesteps T")
    parser.add_argument("--tau", type=float, default=None, help="LIF decay factor")
    parser.add_argument("--vth", type=float, default=None, help="LIF firing threshold")
    parser.add_argument("--av-counting", choices=AV_COUNTING_CHOICES, default=None, help="A*V MAC counting convention")


def _add_selection_flags(parser):
    parser.add_argument("--lambda", dest="lam", type=float, default=None, help="Weight of the temporal std in the score")
    parser.add_argument("--insert-block", type=str, default=None, help="Block id stage.block, e.g. 2.1")
    parser.add_argument("--score-mode", choices=SCORE_MODE_CHOICES, default=None)


def initialize_arg_parser():
    parser = UsageArgumentParser(prog="uncert_snn", description="Uncertainty-guided token reduction for spiking transformers")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=UsageArgumentParser)
    sub.required = True

    gen = sub.add_parser("gen", help="Synthesise a dataset to tensor files")
    _add_common(gen)
    gen.add_argument("--out", type=str, required=True, help="Output directory")
    gen.add_argument("--seed", type=int, default=DEFAULT_RUN_CONFIG["seed"])
    gen.add_argument("--steps", type=int, default=None)
    gen.set_defaults(func=cmd_gen)

    head = sub.add_parser("train-head", help="Fit the ridge head and save model plus head")
    _add_common(head)
    _add_model_flags(head)
    head.add_argument("--data", type=str, required=True, help="Dataset directory written by gen")
    head.add_argument("--out", type=str, required=True, help="Model output directory")
    head.add_argument("--seed", type=int, default=DEFAULT_RUN_CONFIG["seed"], help="Model weight seed offset")
    head.add_argument("--l2", type=float, default=None, help="Ridge regularisation")
    head.set_defaults(func=cmd_train_head)

    run = sub.add_parser("run", help="Evaluate one strategy at one keep ratio")
    _add_common(run)
    _add_model_flags(run)
    _add_selection_flags(run)
    run.add_argument("--keep-ratio", type=float, default=DEFAULT_RUN_CONFIG["keep_ratio"])
    run.add_argument("--strategy", choices=STRATEGY_CHOICES, default=DEFAULT_RUN_CONFIG["strategy"])
    run.add_argument("--seed", type=int, default=DEFAULT_RUN_CONFIG["seed"], help="Data, model and random-baseline seed")
    run.add_argument("--model", type=str, default=None, help="Model directory written by train-head")
    run.add_argument("--data", type=str, default=None, help="Dataset directory written by gen")
    run.add_argument("--dump-uncertainty", type=str, default=None, help="CSV sample,token,t,U")
    run.add_argument("--dump-mask", type=str, default=None, help="CSV sample,token,kept,anchor")
    run.add_argument("--dump-stats", type=str, default=None, help="CSV sample,token,mu,sigma,score")
    run.add_argument("--out-csv", type=str, default=None, help="Write the result row as CSV")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="Strategy x keep ratio x seed grid")
    _add_common(sweep)
    _add_model_flags(sweep)
    _add_selection_flags(sweep)
    sweep.add_argument("--strategies", nargs="+", choices=STRATEGY_CHOICES, default=None)
    sweep.add_argument("--keep-ratios", nargs="+", type=float, default=None)
    sweep.add_argument("--seeds", nargs="+", type=int, default=None)
    sweep.add_argument("--workers", type=int, default=None)
    sweep.add_argument("--out-csv", type=str, default="sweep.csv")
    sweep.add_argument("--out-svg", type=str, default="sweep.svg")
    sweep.set_defaults(func=cmd_sweep)

    sop = sub.add_parser("sop", help="Block-level operation report per keep ratio")
    _add_common(sop)
    _add_model_flags(sop)
    _add_selection_flags(sop)
    sop.add_argument("--strategy", choices=STRATEGY_CHOICES, default="uncert-prune")
    sop.add_argument("--keep-ratios", nargs="+", type=float, default=DEFAULT_SOP_RATIOS)
    sop.add_argument("--seed", type=int, default=DEFAULT_RUN_CONFIG["seed"])
    sop.add_argument("--out-csv", type=str, default=None)
    sop.set_defaults(func=cmd_sop)

    selftest = sub.add_parser("selftest", help="Check the hand-derived oracle values")
    _add_common(selftest)
    selftest.set_defaults(func=cmd_selftest)
    return parser


def _settings(args) -> dict:
    overrides = {
        "steps": getattr(args, "steps", None),
        "tau": getattr(args, "tau", None),
        "vth": getattr(args, "vth", None),
        "av_counting": getattr(args, "av_counting", None),
        "lambda": getattr(args, "lam", None),
        "insert_block": getattr(args, "insert_block", None),
        "score_mode": getattr(args, "score_mode", None),
        "l2": getattr(args, "l2", None),
        "strategies": getattr(args, "strategies", None),
        "keep_ratios": getattr(args, "keep_ratios", None) if args.command == "sweep" else None,
        "seeds": getattr(args, "seeds", None),
        "workers": getattr(args, "workers", None),
    }
    config = EngineConfig(args.config)
    if config.is_config_loaded():
        log.info(f"Loaded settings from '{args.config}'...")
    return config.settings(overrides)


def _strategy(args, settings) -> Strategy:
    return Strategy(args.strategy, lam=float(settings["lambda"]), seed=args.seed, score_mode=str(settings["score_mode"]))


def cmd_gen(args) -> int:
    settings = _settings(args)
    train, test = synth_dataset(synthetic_spec_from(settings), args.seed)
    save_dataset(args.out, train, test, args.seed)
    return EXIT_OK


def _dataset_settings(settings: dict, spec) -> dict:
    merged = dict(settings)
    merged.update(
        grid=spec.grid, classes=spec.classes, channels=spec.channels, steps=spec.steps, patch=1,
        signature_tokens=spec.signature_tokens, p_signal=spec.p_signal, p_background=spec.p_background,
    )
    return merged


def cmd_train_head(args) -> int:
    train, _, _ = load_dataset(args.data)
    settings = _dataset_settings(_settings(args), train.spec)
    model = SpikingTransformer.build(model_config_from(settings, args.seed))
    head = train_head(model, train, RidgeConfig(float(settings["l2"])), int(settings["batch_size"]), not args.quiet)
    model.with_head(head).save(args.out)
    return EXIT_OK


def _load_experiment(args, settings) -> Experiment:
    if args.model is None and args.data is None:
        return prepare_experiment(settings, args.seed, progress=not args.quiet)
    if args.model is None or args.data is None:
        raise ConfigurationError("--model and --data must be given together")
    model = SpikingTransformer.load(args.model)
    if model.head is None:
        raise ConfigurationError(f"model in {args.model} carries no head; run train-head first")
    train, test, data_seed = load_dataset(args.data)
    return Experiment(seed=data_seed, model=model, train=train, test=test, spec=train.spec)


def cmd_run(args) -> int:
    settings = _settings(args)
    experiment = _load_experiment(args, settings)
    strategy = _strategy(args, settings)
    insert_block = str(settings["insert_block"])
    reduction = TokenReduction(strategy, args.keep_ratio, insert_block)
    reduction.validate(experiment.model)
    evaluation = evaluate(experiment.model, experiment.test, reduction, int(settings["batch_size"]), not args.quiet)
    sops, macs = evaluation.ledger.totals(block_prefix(insert_block))
    row = ResultRow(strategy.kind, args.keep_ratio, args.seed, evaluation.acc1, evaluation.acc5, sops, energy_mj(evaluation.ledger))

    table = Table(title=f"run {strategy.cli_name} @ keep {args.keep_ratio}")
    for column in ("acc1", "acc5", "block spike-acc", "block MACs", "energy (mJ)"):
        table.add_column(column, justify="right")
    table.add_row(f"{row.acc1:.6f}", f"{row.acc5:.6f}", str(sops), str(macs), f"{row.energy_mj:.6f}")
    console = get_console()
    console.print(table)

    rates = firing_report(evaluation.ledger)
    firing = Table(title="firing rates")
    firing.add_column("layer")
    firing.add_column("rate", justify="right")
    for label, rate in rates.items():
        firing.add_row(label, f"{rate:.4f}")
    console.print(firing)

    if args.out_csv:
        write_results_csv(args.out_csv, [row], experiment.model.config.num_classes)
    if args.dump_uncertainty or args.dump_mask or args.dump_stats:
        record = inspect_insertion(experiment, strategy, args.keep_ratio, insert_block, int(settings["batch_size"]))
        if args.dump_uncertainty:
            write_uncertainty_csv(args.dump_uncertainty, record.scoring, record.sample_ids)
        if args.dump_stats:
            write_stats_csv(args.dump_stats, record.scoring, record.sample_ids)
        if args.dump_mask:
            write_mask_csv(args.dump_mask, record.masks, record.sample_ids, record.assignments or None)
    return EXIT_OK


def cmd_sweep(args) -> int:
    settings = _settings(args)
    cfg = SweepConfig.from_settings(settings)
    rows = run_sweep(cfg, settings, progress=not args.quiet)
    for path in (args.out_csv, args.out_svg):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_results_csv(args.out_csv, rows, int(settings["classes"]))
    write_svg(args.out_svg, emit_svg_lines(rows))
    return EXIT_OK


def cmd_sop(args) -> int:
    settings = _settings(args)
    experiment = prepare_experiment(settings, args.seed, progress=not args.quiet)
    rows = sop_report(
        experiment,
        args.keep_ratios,
        _strategy(args, settings),
        str(settings["insert_block"]),
        int(settings["batch_size"]),
    )
    table = Table(title=f"block {settings['insert_block']} operations")
    for column in ("keep_ratio", "block_sops", "block_macs", "block_total", "reduction_pct", "energy_mj"):
        table.add_column(column, justify="right")
    for r in rows:
        table.add_row(
            f"{r.keep_ratio:.2f}", str(r.block_sops), str(r.block_macs), str(r.block_total),
            f"{r.reduction_pct:.2f}", f"{r.energy_mj:.6f}",
        )
    get_console().print(table)
    if args.out_csv:
        write_sop_csv(args.out_csv, rows)
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if run_selftest() else EXIT_DATA


def cli_main(argv=None) -> int:
    """
    Parse argv and dispatch to the subcommand.

    Returns:
    int: 0 on success, 1 on a usage error, 2 on a data or contract error.
    """
    parser = initialize_arg_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    log = setup_logging(debug=args.debug, log_file=args.log_file)
    try:
        return args.func(args)
    except (UncertError, OSError) as e:
        log.error(f"{type(e).__name__}: {e}")
        return EXIT_DATA
