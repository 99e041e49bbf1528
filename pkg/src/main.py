"""
main.py - CLI for the store: run a coordinator or a storage server, benchmark a live cluster,
simulate one in-process, or check a recorded history.

    python -m src.main coordinator --listen 127.0.0.1:7000 --servers 127.0.0.1:7001,127.0.0.1:7002
    python -m src.main server --listen 127.0.0.1:7001 --coordinator 127.0.0.1:7000
    python -m src.main bench --coordinator 127.0.0.1:7000 --workload micro --txn-size 8
    python -m src.main sim --seed 7 --workload tpcc-lite --txns 5000
    python -m src.main sim --seed 7 --workload tpcc-lite --txns 2000 --compare
    python -m src.main check history.json

Reports go to stdout as JSON lines, human-readable tables and logs go to stderr. Exit codes: 0 ok,
1 a serializability or invariant violation was found, 2 bad arguments or configuration.
"""

import argparse
import logging
import sys
import threading
import tomllib
import zlib
from collections.abc import Sequence
from dataclasses import replace
from enum import IntEnum, StrEnum
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler

from src.applylog import FsyncPolicy
from src.client import Client
from src.core import TokenStrategy
from src.harness import (
    ClusterParams,
    Metrics,
    SearchMode,
    Violation,
    crash_schedule,
    interleaving_search,
    overlap_scenario,
    run_bench,
    run_workload,
    safety_problems,
    triangle_scenario,
)
from src.history import History, MalformedHistoryError, Ok, check_serializable
from src.mapping import DEFAULT_PARTITIONS, default_configuration
from src.messages import ConfigResponse, GetConfig
from src.printers import check_record, comparison_record, metrics_records, print_report, search_record, write_records
from src.transport import DestinationCrashedError
from src.wire import BindFailureError, WireTransport, serve_coordinator, serve_storage
from src.workload import WorkloadSpec, hot_mixed, micro, scalability, tpcc_lite

logger = logging.getLogger(__name__)


class ExitCode(IntEnum):
    ok = 0
    violation = 1
    config_error = 2


class WorkloadName(StrEnum):
    micro = "micro"
    tpcc_lite = "tpcc-lite"
    scalability = "scalability"
    hot_mixed = "hot-mixed"


class ScenarioName(StrEnum):
    overlap = "overlap"
    triangle = "triangle"


class ConfigFileError(Exception):
    """Raised when the --config file cannot be read or names options that do not exist."""

    ...


# Argument parsing


def _shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML file with defaults; explicit flags win")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log protocol traces")
    parser.add_argument("--seed", type=int, help="Random seed (required by sim)")
    parser.add_argument("--fault-tolerance", "-f", dest="f", type=int, default=1, help="Replicas per partition minus one")
    parser.add_argument("--data-dir", type=Path, help="Directory for durable logs")
    parser.add_argument("--fsync", type=FsyncPolicy, choices=list(FsyncPolicy), default=FsyncPolicy.batched)
    parser.add_argument("--coordinator", default="127.0.0.1:7000", help="Coordinator address host:port")


def _workload_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--workload", type=WorkloadName, choices=list(WorkloadName), default=WorkloadName.micro)
    parser.add_argument("--txns", type=int, default=1000, help="Transactions to issue")
    parser.add_argument("--txn-size", type=int, default=8, help="Keys per microbenchmark transaction")
    parser.add_argument("--write-fraction", type=float, default=1.0)
    parser.add_argument("--partitions", type=int, default=DEFAULT_PARTITIONS)
    parser.add_argument("--clients", type=int, default=8)
    parser.add_argument("--warehouses", type=int, default=10)
    parser.add_argument("--districts", type=int, default=100)
    parser.add_argument("--baseline", action="store_true", help="Commit with mini-transactions instead")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="chainstore", description="A sharded transactional key-value store")
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    p = commands["coordinator"] = sub.add_parser("coordinator", help="Run the configuration coordinator")
    _shared(p)
    p.add_argument("--listen", default="127.0.0.1:7000")
    p.add_argument("--servers", required=True, help="Comma-separated host:port of the initial servers")
    p.add_argument("--partitions", type=int, default=DEFAULT_PARTITIONS)

    p = commands["server"] = sub.add_parser("server", help="Run a storage server")
    _shared(p)
    p.add_argument("--listen", required=True)
    p.add_argument("--token-strategy", type=TokenStrategy, choices=list(TokenStrategy), default=TokenStrategy.counter)

    p = commands["bench"] = sub.add_parser("bench", help="Benchmark a live cluster")
    _shared(p)
    _workload_flags(p)
    p.add_argument("--listen", default="127.0.0.1:7100", help="Where this process receives replies")
    p.add_argument("--commit-timeout", type=float, default=10.0, help="Seconds")

    p = commands["sim"] = sub.add_parser("sim", help="Simulate a cluster in-process")
    _shared(p)
    _workload_flags(p)
    p.add_argument("--servers", type=int, default=6)
    p.add_argument("--service-us", type=int, default=0, help="Per-message processing time at each server")
    p.add_argument("--token-strategy", type=TokenStrategy, choices=list(TokenStrategy), default=TokenStrategy.counter)
    p.add_argument("--no-order-check", dest="order_check", action="store_false", help="Disable token ordering")
    p.add_argument("--crash", type=int, default=0, help="Servers to crash at random early in the run")
    p.add_argument("--recover-after-us", type=int, help="Recover each crashed server this much later")
    p.add_argument("--search", type=ScenarioName, choices=list(ScenarioName), help="Search a scripted scenario")
    p.add_argument("--search-mode", type=SearchMode, choices=list(SearchMode), default=SearchMode.dfs)
    p.add_argument("--bound", type=int, default=10_000, help="Schedules to explore")
    p.add_argument("--history-out", type=Path, help="Write the recorded history here")
    p.add_argument("--compare", action="store_true", help="Run the workload with chains and with the baseline")

    p = commands["check"] = sub.add_parser("check", help="Check a recorded history for serializability")
    _shared(p)
    p.add_argument("history", type=Path)

    return parser, commands


def _option_names(parser: argparse.ArgumentParser) -> set[str]:
    return {a.dest for a in parser._actions}  # pyright: ignore[reportPrivateUsage]


def apply_config_file(argv: Sequence[str], commands: dict[str, argparse.ArgumentParser]) -> None:
    """
    Load `--config` (if any) and install it as parser defaults. Top-level keys apply to every
    subcommand; a table named after a subcommand applies to it alone. Dashes and underscores in keys
    are interchangeable.
    """

    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return

    try:
        doc = tomllib.loads(known.config.read_text())
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigFileError(f"Cannot read {known.config}: {e}") from e

    shared = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict)}
    for name, parser in commands.items():
        section = doc.get(name, {})
        values = shared | {k.replace("-", "_"): v for k, v in section.items()}
        values = {("f" if k == "fault_tolerance" else k): v for k, v in values.items()}
        unknown = set(values) - _option_names(parser)
        if unknown and name in doc:
            raise ConfigFileError(f"Unknown options for {name}: {', '.join(sorted(unknown))}")
        parser.set_defaults(**{k: v for k, v in values.items() if k not in unknown})


def build_workload(args: argparse.Namespace) -> WorkloadSpec:
    match args.workload:
        case WorkloadName.micro:
            return micro(args.txn_size, args.write_fraction, args.txns, args.seed, args.partitions)
        case WorkloadName.tpcc_lite:
            return tpcc_lite(args.seed, args.warehouses, args.districts, args.txns)
        case WorkloadName.scalability:
            return scalability(args.txns, args.seed)
        case WorkloadName.hot_mixed:
            return hot_mixed(args.txns, args.seed, txn_size=args.txn_size, write_fraction=args.write_fraction)
        case _:
            raise ValueError(f"Unknown workload {args.workload!r}")


# Subcommands


def _wait_forever() -> None:
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        logger.info("Shutting down")


def cmd_coordinator(args: argparse.Namespace) -> ExitCode:
    servers = [s.strip() for s in args.servers.split(",") if s.strip()]
    initial = default_configuration(servers, args.f, args.partitions)
    transport, coordinator = serve_coordinator(args.listen, initial, args.data_dir)
    logger.info(f"Coordinator on {args.listen} at configuration {coordinator.current.version}")
    _wait_forever()
    transport.stop()
    return ExitCode.ok


def cmd_server(args: argparse.Namespace) -> ExitCode:
    data_dir = args.data_dir / args.listen.replace(":", "_") if args.data_dir is not None else None
    transport, _ = serve_storage(
        args.listen, args.coordinator, data_dir, args.fsync, token_strategy=args.token_strategy
    )
    _wait_forever()
    transport.stop()
    return ExitCode.ok


def cmd_bench(args: argparse.Namespace) -> ExitCode:
    spec = build_workload(args)
    transport = WireTransport(args.listen, args.coordinator)
    reply = transport.request(args.listen, args.coordinator, GetConfig())
    if not isinstance(reply, ConfigResponse):
        raise DestinationCrashedError(f"Coordinator answered {type(reply).__name__}")

    base = zlib.crc32(args.listen.encode()) << 16
    clients: list[Client] = []
    for i in range(args.clients):
        name = f"{args.listen}/c{i}"
        client = Client(name, transport, reply.config, base | (i + 1), args.coordinator, baseline=args.baseline)
        transport.register(name, client)
        clients.append(client)
    transport.start()

    try:
        metrics = run_bench(spec, clients, commit_timeout_s=args.commit_timeout)
    finally:
        transport.stop()

    print_report(spec.name, metrics)
    write_records(metrics_records(spec.name, metrics, f=reply.config.f, mode="bench"), sys.stdout)
    return ExitCode.ok


def cmd_sim(args: argparse.Namespace) -> ExitCode:
    params = ClusterParams(
        servers=args.servers,
        f=args.f,
        partitions=args.partitions,
        clients=args.clients,
        service_us=args.service_us,
        order_check=args.order_check,
        token_strategy=args.token_strategy,
        baseline=args.baseline,
        seed=args.seed,
        data_dir=args.data_dir,
        fsync=args.fsync,
    )

    if args.search is not None:
        scenario = triangle_scenario() if args.search is ScenarioName.triangle else overlap_scenario()
        result = interleaving_search(scenario, args.bound, args.search_mode, args.seed, args.order_check)
        write_records([search_record(scenario.name, result)], sys.stdout)
        if isinstance(result.outcome, Violation):
            logger.error(f"{scenario.name}: {result.outcome.reason}")
            return ExitCode.violation
        return ExitCode.ok

    spec = build_workload(args)
    if args.compare:
        return _compare(args, spec, params)
    faults = crash_schedule(params, args.crash, recover_after_us=args.recover_after_us)
    history, metrics, cluster = run_workload(spec, params, faults)
    problems = safety_problems(history, cluster)

    if args.history_out is not None:
        history.dump(args.history_out)
    print_report(spec.name, metrics)
    write_records(
        metrics_records(spec.name, metrics, seed=args.seed, f=args.f, violations=len(problems), mode="sim"),
        sys.stdout,
    )
    for problem in problems:
        logger.error(problem)
    return ExitCode.violation if problems else ExitCode.ok


def _compare(args: argparse.Namespace, spec: WorkloadSpec, params: ClusterParams) -> ExitCode:
    """Fault-free runs of `spec` with chains and with the baseline, reported side by side."""

    if args.crash:
        raise ValueError("--compare runs without faults; the baseline has no recovery path")

    runs: dict[str, Metrics] = {}
    problems: list[str] = []
    for mode, baseline in (("chains", False), ("baseline", True)):
        history, metrics, cluster = run_workload(spec, replace(params, baseline=baseline))
        problems += [f"{mode}: {p}" for p in safety_problems(history, cluster)]
        print_report(f"{spec.name} ({mode})", metrics)
        write_records(metrics_records(spec.name, metrics, seed=args.seed, f=args.f, mode=mode), sys.stdout)
        runs[mode] = metrics

    write_records([comparison_record(spec.name, runs["chains"], runs["baseline"])], sys.stdout)
    for problem in problems:
        logger.error(problem)
    return ExitCode.violation if problems else ExitCode.ok


def cmd_check(args: argparse.Namespace) -> ExitCode:
    history = History.load(args.history)
    verdict = check_serializable(history)
    write_records([check_record(str(args.history), verdict, len(history))], sys.stdout)
    return ExitCode.ok if isinstance(verdict, Ok) else ExitCode.violation


COMMANDS = {
    "coordinator": cmd_coordinator,
    "server": cmd_server,
    "bench": cmd_bench,
    "sim": cmd_sim,
    "check": cmd_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, commands = build_parser()
    try:
        apply_config_file(argv, commands)
    except ConfigFileError as e:
        parser.error(str(e))
    args = parser.parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(level=level, console=Console(stderr=True), show_path=False)],
        force=True,
    )

    if args.f < 0:
        parser.error("--fault-tolerance must be non-negative")
    if args.seed is None:
        if args.command == "sim":
            parser.error("sim needs --seed")
        args.seed = 0

    try:
        return COMMANDS[args.command](args)
    except (
        ValueError,
        MalformedHistoryError,
        BindFailureError,
        DestinationCrashedError,
        OSError,
    ) as e:
        logger.error(f"{args.command}: {e}")
        return ExitCode.config_error


if __name__ == "__main__":
    sys.exit(main())
