"""
Analyze networks, plan layer fusion and simulate accelerator dataflows.
"""
import argparse
from dataclasses import dataclass
from enum import Enum, IntEnum
import logging
import os
import sys
from typing import NoReturn, Optional, Sequence, Union

import numpy as np
import yaml

from .blocking import (BlockingPattern, InfeasibleBlockingError, load_blocking_plan,
                       make_blocking_plan, blocking_ratio, save_blocking_plan)
from .networks import (NetworkDesc, NetworkError, feature_map_volumes, init_params, load_network,
                       reference_forward)
from .planner import (EnumerationCapError, PlanMismatchError, explore, load_budget, load_plan,
                      save_plan)
from .presets import PRESETS, available_budgets, preset
from .reports import frame_to_text, frame_to_xlsx, write_table
from .simulator import (BufferOverflowError, Tiling, simulate_baseline, simulate_fused,
                        traffic_frame, traffic_report_render, verify_equivalence)
from .tensorio import TensorFileError, read_tensor, write_tensor
from .tensors import PadMode, random_tensor


class Command(Enum):
    """Available commands."""
    PRESETS = "presets"
    ANALYZE = "analyze"
    BLOCKING = "blocking"
    PLAN = "plan"
    SIMULATE = "simulate"
    VERIFY = "verify"


class ExitCode(IntEnum):
    """Process exit codes."""
    OK = 0
    MISMATCH = 1
    INFEASIBLE = 2
    INPUT_ERROR = 3


class InputError(Exception):
    """Missing or unusable command-line input."""


@dataclass
class RunConfig:  # pylint: disable=too-many-instance-attributes
    """
    Resolved command-line options.

    Attributes:
        command: the subcommand
        network: preset name or path of a network description
        input_hw: input resolution overriding a preset's default
        budget: number, name or path of a hardware budget
        plan: path of a fusion plan
        input_path: path of an input tensor file
        output_path: path of the main output file
        tiles: candidate tiles (plan) or baseline tiling (simulate)
        fmt: output format of tables
        seed: seed of generated weights and inputs
    """
    command: Command
    network: Optional[str] = None
    input_hw: Optional[tuple[int, int]] = None
    budget: Union[int, str, None] = None
    plan: Optional[str] = None
    input_path: Optional[str] = None
    output_path: Optional[str] = None
    tiles: Sequence[tuple[int, ...]] = ()
    fmt: str = "csv"
    seed: int = 0

    def __post_init__(self):
        for path in (self.plan, self.input_path):
            if path is not None and not os.path.isfile(path):
                raise InputError(f"File not found: {path}")
        if self.network is not None and self.network not in PRESETS \
                and not os.path.isfile(self.network):
            raise InputError(f"Neither a preset nor a file: {self.network}")

    def load_network(self) -> NetworkDesc:
        """The network, from a preset or a file."""
        if self.network in PRESETS:
            return preset(self.network, self.input_hw)
        if self.input_hw is not None:
            logging.warning("Ignoring --input-hw for network file %s", self.network)
        return load_network(self.network)


def setup_log(debug: bool = False, log_file=None, level: int = logging.INFO) -> None:
    """
    Setup logging to a file or to terminal.

    Args:
        debug: If True, print debugging information with the log messages.
        log_file: Path to the log file. If None, log to terminal.
        level: Logging level. Default is INFO.
    """
    if debug:
        log_format = "%(filename)s %(funcName)s() %(lineno)d : %(message)s"
        level = logging.DEBUG
    else:
        log_format = "%(message)s"
    if log_file:
        # Log to a file
        logging.basicConfig(
            filename=log_file,
            filemode="a",
            level=level,
            format=log_format,
        )
    else:
        # Log to terminal
        logging.basicConfig(
            stream=sys.stdout,
            level=level,
            format=log_format,
        )
    # Disable all third-party logging below ERROR
    for logger_name in logging.root.manager.loggerDict.keys():  # pylint: disable=no-member # Spurious warning
        if not logger_name.startswith("blkconv"):
            logging.getLogger(logger_name).setLevel(logging.ERROR)


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser exiting with the input-error code on usage errors."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(ExitCode.INPUT_ERROR, f"{self.prog}: error: {message}\n")


def str_or_int(value: str) -> Union[str, int]:
    """Return `value` parsed as an `int` if possible, otherwise return `value`."""
    try:
        return int(value)
    except ValueError:
        return str(value)


def parse_tile(value: str) -> tuple[int, ...]:
    """Parse `28` or `28x56`."""
    try:
        sizes = tuple(int(part) for part in value.lower().split("x"))
    except ValueError as error:
        raise argparse.ArgumentTypeError(f"Invalid tile: {value}") from error
    if len(sizes) == 1:
        sizes = sizes * 2
    if len(sizes) != 2 or min(sizes) <= 0:
        raise argparse.ArgumentTypeError(f"Invalid tile: {value}")
    return sizes


def _emit_table(frame, config: RunConfig, sheet_name: str) -> None:
    if config.output_path is None:
        sys.stdout.write(frame_to_text(frame, config.fmt))
        return
    fmt = "xlsx" if config.output_path.endswith(".xlsx") else config.fmt
    write_table(frame, config.output_path, sheet_name, fmt)


def _emit(text: str, out_path: Optional[str]) -> None:
    if out_path is None:
        sys.stdout.write(text)
        return
    with open(out_path, "w", encoding="utf-8", newline="") as file:
        file.write(text)
    logging.info("Written file: %s", out_path)


def cmd_presets() -> ExitCode:
    """Print the built-in networks and the packaged hardware budgets."""
    print("=== NETWORKS ===")
    for name in PRESETS:
        print(name)
    print()
    for index, (name, content) in enumerate(available_budgets().items(), start=1):
        print(f"=== BUDGET #{index}: {name} ===")
        print(content)
    return ExitCode.OK


# pylint: disable=too-many-arguments
def cmd_analyze(config: RunConfig, unit: str, bits: Optional[int], all_layers: bool,
                xlsx_path: Optional[str]) -> ExitCode:
    """Feature-map volume of every layer."""
    net = config.load_network()
    frame = feature_map_volumes(net, unit=unit, bits=bits, conv_only=not all_layers)
    _emit_table(frame, config, "Volumes")
    if xlsx_path:
        frame_to_xlsx(frame, xlsx_path, "Volumes")
    return ExitCode.OK


def cmd_blocking(config: RunConfig, pattern: str, depth: Optional[int],
                 min_resolution: Optional[int], pad_mode: Optional[str]) -> ExitCode:
    """Blocking plan of a network under a blocking pattern."""
    net = config.load_network()
    parsed = BlockingPattern.parse(pattern, depth=depth, min_resolution=min_resolution,
                                   pad_mode=None if pad_mode is None else PadMode(pad_mode))
    plan = make_blocking_plan(net, parsed)
    ratio = blocking_ratio(plan, net)
    if config.output_path:
        save_blocking_plan(plan, config.output_path)
    print(f"Blocking ratio: {100 * ratio:.2f}%")
    return ExitCode.OK


def cmd_plan(config: RunConfig, cut_at: str, onchip_only: bool, prefetch: bool,
             xlsx_path: Optional[str], best_path: Optional[str]) -> ExitCode:
    """Explore fusion plans of a network under a hardware budget."""
    net = config.load_network()
    budget = load_budget(config.budget)
    if budget.bram_bits == 0:
        logging.warning("Budget %s has no on-chip memory: no plan can fit", budget.name)
    exploration = explore(net, budget, config.tiles, cut_at=cut_at,
                          boundary_policies=(True,) if onchip_only else (True, False),
                          prefetch=prefetch)
    frame = exploration.to_frame()
    if budget.bram_bits == 0:
        frame = frame[frame["fits_onchip"]]
    _emit_table(frame, config, "Plans")
    if xlsx_path:
        frame_to_xlsx(frame, xlsx_path, "Plans")
    if budget.bram_bits == 0:
        return ExitCode.OK
    if not exploration.plans:
        logging.error("No feasible grouping for the candidate tiles")
        return ExitCode.INFEASIBLE
    best = exploration.best()
    if best is None:
        return ExitCode.INFEASIBLE
    plan, score = best
    logging.info("Best plan #%d: %s, %d cycles, %d BRAM blocks", plan.plan_id,
                 plan.describe(net)["grouping"], score.cycles, score.bram_blocks)
    if best_path:
        save_plan(plan, best_path)
    return ExitCode.OK


# pylint: disable=too-many-arguments, too-many-locals
def cmd_simulate(config: RunConfig, mode: str, blocking_path: Optional[str], shapes_only: bool,
                 traffic_path: Optional[str], trace_path: Optional[str],
                 reference_path: Optional[str], summary: bool, fused_stem: int = 0) -> ExitCode:
    """Simulate the fused or baseline dataflow and report its traffic."""
    net = config.load_network()
    if config.input_path:
        x = read_tensor(config.input_path)
    elif shapes_only:
        x = None
    else:
        rng = np.random.default_rng(config.seed)
        x = random_tensor((1,) + tuple(net.input_shape), net.activation_format, rng)
    params = init_params(net, config.seed) if x is not None else None
    if mode == "fused":
        if config.plan is None:
            raise InputError("Fused simulation needs --plan")
        plan = load_plan(config.plan)
        blocking = load_blocking_plan(blocking_path) if blocking_path else None
        result = simulate_fused(net, x, plan, blocking=blocking, params=params,
                                record_trace=trace_path is not None)
    else:
        if not config.tiles:
            raise InputError("Baseline simulation needs --tiles")
        result = simulate_baseline(net, x, Tiling(*config.tiles[0]), params=params,
                                   fused_stem=fused_stem, record_trace=trace_path is not None)
    if traffic_path and traffic_path.endswith(".xlsx"):
        frame = result.traffic.summary_frame() if summary else traffic_frame(result.traffic)
        write_table(frame, traffic_path, "Traffic", "xlsx")
    else:
        _emit(traffic_report_render(result.traffic, config.fmt, summary=summary), traffic_path)
    if trace_path:
        result.trace.to_jsonl(trace_path)
    if config.output_path and result.output is not None:
        write_tensor(result.output, config.output_path)
    if reference_path and x is not None:
        write_tensor(reference_forward(net, params, x), reference_path)
    return ExitCode.OK


def cmd_verify(actual_path: str, expected_path: str) -> ExitCode:
    """Compare two tensor files bit by bit."""
    actual, expected = read_tensor(actual_path), read_tensor(expected_path)
    try:
        verdict = verify_equivalence(actual, expected)
    except ValueError as error:
        print(f"MISMATCH: {error}")
        return ExitCode.MISMATCH
    if verdict.passed:
        print("OK")
        return ExitCode.OK
    print(f"MISMATCH at {list(verdict.mismatch_index)}: "
          f"expected {verdict.expected}, got {verdict.actual}")
    return ExitCode.MISMATCH


def build_parser() -> ArgumentParser:  # pylint: disable=too-many-statements
    """The command-line parser."""
    parser = ArgumentParser(
        prog="blkconv",
        description="Block convolution: analyze networks, plan layer fusion and simulate dataflows."
        )
    parser.add_argument("--debug", default=False, action="store_true",
                        help="print debugging information about what is being done")
    subparsers = parser.add_subparsers(dest="command", required=True,
                                       help="command to execute")
    cmd_parsers = {
        Command.PRESETS: subparsers.add_parser(
            "presets", help="list the built-in networks and the packaged hardware budgets"),
        Command.ANALYZE: subparsers.add_parser(
            "analyze", help="feature-map volume of every layer of a network"),
        Command.BLOCKING: subparsers.add_parser(
            "blocking", help="block a network with a blocking pattern"),
        Command.PLAN: subparsers.add_parser(
            "plan", help="explore fusion plans under a hardware budget"),
        Command.SIMULATE: subparsers.add_parser(
            "simulate", help="simulate the fused or the baseline dataflow"),
        Command.VERIFY: subparsers.add_parser(
            "verify", help="compare two tensor files bit by bit"),
    }
    for command in (Command.ANALYZE, Command.BLOCKING, Command.PLAN, Command.SIMULATE):
        cmd_parser = cmd_parsers[command]
        cmd_parser.add_argument(
            "network", type=str,
            help=f"A built-in network ({', '.join(PRESETS)}) or a network JSON/YAML file.")
        cmd_parser.add_argument(
            "--input-hw", type=int, nargs=2, metavar=("ROWS", "COLS"), default=None,
            help="Input resolution of a built-in network (default: its own).")
        cmd_parser.add_argument(
            "--out_path", type=str, default=None,
            help="Path to the output file (default: print to terminal).")
    for command in (Command.ANALYZE, Command.PLAN, Command.SIMULATE):
        cmd_parsers[command].add_argument(
            "--format", choices=("csv", "json"), default="csv",
            help="Format of the printed table (default: %(default)s).")
    for command in (Command.ANALYZE, Command.PLAN):
        cmd_parsers[command].add_argument(
            "--xlsx", type=str, default=None, help="Also write the table to an XLSX file.")

    analyze = cmd_parsers[Command.ANALYZE]
    analyze.add_argument("--unit", choices=("bit", "Kbit", "Mbit", "KB", "MB"), default="Mbit",
                         help="Volume unit, binary prefixes (default: %(default)s).")
    analyze.add_argument("--bits", type=int, default=None,
                         help="Bits per activation (default: the network's).")
    analyze.add_argument("--all-layers", action="store_true",
                         help="List poolings and sums too.")

    blocking = cmd_parsers[Command.BLOCKING]
    blocking.add_argument("pattern", type=str,
                          help="Blocking pattern: F28 (fixed 28x28 blocks), F28x56, H2x2 "
                               "(hierarchical 2x2 grid).")
    blocking.add_argument("--depth", type=int, default=None,
                          help="Leave a convolution unblocked after this many blocked ones.")
    blocking.add_argument("--min-resolution", type=int, default=None,
                          help="Only block layers whose input is at least this large.")
    blocking.add_argument("--pad-mode", choices=[mode.value for mode in PadMode], default=None,
                          help="Block padding mode (default: each layer's).")

    plan = cmd_parsers[Command.PLAN]
    plan.add_argument(
        "--budget", type=str_or_int, default=1,
        help=("Either a number, indicating one of the packaged budget files,"
              " or a budget name or a path to a budget YAML/JSON file "
              "(default: %(default)sst packaged budget file)."))
    plan.add_argument("--tiles", type=parse_tile, nargs="+", required=True,
                      help="Candidate start tiles, such as 28 or 28x56.")
    plan.add_argument("--cut-at", choices=("pool", "conv"), default="pool",
                      help="Where groups may be cut (default: %(default)s).")
    plan.add_argument("--onchip-only", action="store_true",
                      help="Only keep group boundaries on chip.")
    plan.add_argument("--prefetch", action="store_true",
                      help="Add a third intermediate buffer for prefetching.")
    plan.add_argument("--best", type=str, default=None,
                      help="Write the fastest plan fitting on chip to this JSON file.")

    simulate = cmd_parsers[Command.SIMULATE]
    simulate.add_argument("--mode", choices=("fused", "baseline"), default="fused",
                          help="Dataflow to simulate (default: %(default)s).")
    simulate.add_argument("--plan", type=str, default=None, help="Fusion plan JSON file.")
    simulate.add_argument("--blocking", type=str, default=None,
                          help="Blocking plan JSON file (default: derived from the plan).")
    simulate.add_argument("--tiles", type=int, nargs="+", default=None,
                          metavar="SIZE", help="Baseline tiling: TR TC [TM TN].")
    simulate.add_argument("--input", type=str, default=None,
                          help="Input tensor file (default: seeded random input).")
    simulate.add_argument("--shapes-only", action="store_true",
                          help="Count traffic without computing.")
    simulate.add_argument("--traffic", type=str, default=None,
                          help="Traffic report file (default: print to terminal).")
    simulate.add_argument("--summary", action="store_true",
                          help="Report traffic per tensor class instead of per layer.")
    simulate.add_argument("--trace", type=str, default=None,
                          help="Write the simulation trace to a JSONL file.")
    simulate.add_argument("--reference", type=str, default=None,
                          help="Also write the reference output to this tensor file.")
    simulate.add_argument("--fused-stem", type=int, default=0, metavar="N",
                          help="Baseline: compute the first N convolutions inside the tiles "
                               "of the next one (default: %(default)s).")
    simulate.add_argument("--seed", type=int, default=0,
                          help="Seed of weights and random input (default: %(default)s).")

    verify = cmd_parsers[Command.VERIFY]
    verify.add_argument("actual", type=str, help="Tensor file to check.")
    verify.add_argument("expected", type=str, help="Expected tensor file.")
    return parser


def _config(args: argparse.Namespace, parser: ArgumentParser) -> RunConfig:
    command = Command(args.command)
    tiles: list[tuple[int, ...]] = []
    if command == Command.PLAN:
        tiles = list(args.tiles)
    elif command == Command.SIMULATE and args.tiles:
        if len(args.tiles) not in (2, 4):
            parser.error("--tiles takes TR TC or TR TC TM TN")
        tiles = [tuple(args.tiles)]
    return RunConfig(
        command=command,
        network=getattr(args, "network", None),
        input_hw=tuple(args.input_hw) if getattr(args, "input_hw", None) else None,
        budget=getattr(args, "budget", None),
        plan=getattr(args, "plan", None),
        input_path=getattr(args, "input", None),
        output_path=getattr(args, "out_path", None),
        tiles=tiles,
        fmt=getattr(args, "format", "csv"),
        seed=getattr(args, "seed", 0))


def _run(args: argparse.Namespace, config: RunConfig) -> ExitCode:
    if config.command == Command.PRESETS:
        return cmd_presets()
    if config.command == Command.ANALYZE:
        return cmd_analyze(config, args.unit, args.bits, args.all_layers, args.xlsx)
    if config.command == Command.BLOCKING:
        return cmd_blocking(config, args.pattern, args.depth, args.min_resolution, args.pad_mode)
    if config.command == Command.PLAN:
        return cmd_plan(config, args.cut_at, args.onchip_only, args.prefetch, args.xlsx,
                        args.best)
    if config.command == Command.SIMULATE:
        return cmd_simulate(config, args.mode, args.blocking, args.shapes_only, args.traffic,
                            args.trace, args.reference, args.summary, args.fused_stem)
    assert config.command == Command.VERIFY
    return cmd_verify(args.actual, args.expected)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function to parse command line arguments and run a command."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_log(debug=args.debug, log_file=None)
    try:
        config = _config(args, parser)
        return int(_run(args, config))
    except (InfeasibleBlockingError, EnumerationCapError) as error:
        logging.error("%s", error)
        return int(ExitCode.INFEASIBLE)
    except BufferOverflowError as error:
        logging.error("%s", error)
        return int(ExitCode.INFEASIBLE)
    except (InputError, NetworkError, TensorFileError, PlanMismatchError, OSError,
            yaml.YAMLError, ValueError) as error:
        logging.error("%s", error)
        return int(ExitCode.INPUT_ERROR)


if __name__ == "__main__":
    sys.exit(main())
