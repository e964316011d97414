"""
Command-line interface.

    ownership keygen [--seed SEED]
    ownership node start [--config FILE] [--host HOST] [--port PORT]
    ownership scenario run FILE [--out DIR]
    ownership attack eval FILE [--strategy NAME ...] [--no-directory]
    ownership attack experiment --k K --batches N [--chaff constant] [--no-shuffle]
    ownership export {store,ledger,trace,records} FILE [--custodian NAME]

Exit codes: 0 success, 1 runtime or assertion failure, 2 malformed input.
"""

import argparse
import secrets
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import orjson

from . import __version__
from .config import load_settings
from .crypto import KeyPair
from .errors import ConfigurationError, OwnershipError, ScenarioError
from .logging_config import configure_logging
from .trace import EventTrace

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT = 2


def _write(data: Any, out: Optional[str] = None) -> None:
    if isinstance(data, bytes):
        raw = data
    else:
        raw = orjson.dumps(data, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS) + b"\n"
    if out:
        Path(out).write_bytes(raw)
    else:
        sys.stdout.write(raw.decode("utf-8"))


def _scenario_path(value: str) -> Path:
    from .sim.scenario import bundled_scenario_path

    path = Path(value)
    if path.exists() or path.suffix:
        return path
    return bundled_scenario_path(value)


# -- commands ---------------------------------------------------------------------------


def cmd_keygen(args: argparse.Namespace) -> int:
    seed = args.seed or secrets.token_hex(32)
    key = KeyPair.from_seed(seed)
    _write({"seed": seed, "address": key.address, "public_key": key.public_key_hex})
    return EXIT_OK


def cmd_node_start(args: argparse.Namespace) -> int:
    from .gateway.app import serve

    overrides: Dict[str, Any] = {"host": args.host}
    if args.port is not None:
        overrides["ports"] = {"api": args.port}
    settings = load_settings(args.config, **overrides)
    serve(settings)
    return EXIT_OK


def cmd_scenario_run(args: argparse.Namespace) -> int:
    from .sim.runner import run_scenario

    path = _scenario_path(args.file)
    run = run_scenario(path, config_path=args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / f"{run.scenario.name}.trace.ndjson"
    report_path = out_dir / f"{run.scenario.name}.report.json"
    trace_path.write_bytes(run.trace.to_ndjson())
    _write(run.report.model_dump(mode="json"), str(report_path))

    report = run.report
    sys.stdout.write(
        f"scenario {report.name} (seed {report.seed}): {'passed' if report.passed else 'FAILED'}, "
        f"{report.steps} steps, {len(run.trace)} events\n"
    )
    for failure in report.failures:
        sys.stdout.write(f"  step failure: {failure}\n")
    for assertion in report.assertions:
        if not assertion.passed:
            sys.stdout.write(f"  assertion failed: {assertion.name}: {assertion.detail}\n")
    sys.stdout.write(f"trace written to {trace_path}\n")
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_attack_eval(args: argparse.Namespace) -> int:
    from .sim.adversary import STRATEGIES, evaluate_attacks
    from .sim.runner import run_scenario

    strategies = args.strategy or list(STRATEGIES)
    path = Path(args.file)
    if path.suffix == ".ndjson":
        try:
            trace = EventTrace.from_ndjson(path.read_bytes())
        except (OSError, ValueError) as exc:
            raise ScenarioError(f"cannot read trace {path}: {exc}")
        endpoint = args.store or _only_store(trace)
        reports = evaluate_attacks(trace, endpoint, strategies, include_directory=not args.no_directory, seed=args.seed)
    else:
        run = run_scenario(_scenario_path(args.file), config_path=args.config)
        store = run.system.store(args.store or run.system.settings.custodians[0].name)
        reports = evaluate_attacks(
            run.trace,
            store.endpoint_url,
            strategies,
            store=store,
            include_directory=not args.no_directory,
            seed=args.seed,
        )
    _write([r.model_dump(mode="json") for r in reports])
    return EXIT_OK


def _only_store(trace: EventTrace) -> str:
    stores = sorted({e.data["store"] for e in trace.select("identity", "rekey_batch")})
    if len(stores) != 1:
        raise ConfigurationError(f"trace covers {len(stores)} stores; pick one with --store")
    return stores[0]


def cmd_attack_experiment(args: argparse.Namespace) -> int:
    from .sim.adversary import STRATEGIES, run_tumble_experiment

    result = run_tumble_experiment(
        k=args.k,
        batches=args.batches,
        chaff_generator=args.chaff,
        shuffle=not args.no_shuffle,
        seed=args.seed,
        strategies=args.strategy or list(STRATEGIES),
        include_directory=not args.no_directory,
    )
    _write(result.model_dump(mode="json"))
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    from .sim.runner import run_scenario

    run = run_scenario(_scenario_path(args.file), config_path=args.config)
    system = run.system
    name = args.custodian or system.settings.custodians[0].name
    if args.what == "ledger":
        data = system.ledger.export_log()
    elif args.what == "trace":
        data = run.trace.to_ndjson()
    elif args.what == "store":
        data = system.store(name).export_snapshot() + b"\n"
    else:
        node = system.consortium.node_for(system.custodian(name).address)
        data = node.export_snapshot() + b"\n"
    _write(data, args.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ownership", description="Data ownership ledger and simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", help="log level for stderr output")
    parser.add_argument("--log-format", default="console", choices=["json", "console"])
    commands = parser.add_subparsers(dest="command", required=True)

    keygen = commands.add_parser("keygen", help="create a key pair (printed as seed, address, public key)")
    keygen.add_argument("--seed", help="derive the key from this seed instead of a random one")
    keygen.set_defaults(func=cmd_keygen)

    node = commands.add_parser("node", help="run the gateway service").add_subparsers(dest="action", required=True)
    start = node.add_parser("start", help="serve the HTTP gateway until interrupted")
    start.add_argument("--config", help="JSON config file")
    start.add_argument("--host", default=None)
    start.add_argument("--port", type=int, default=None)
    start.set_defaults(func=cmd_node_start)

    scenario = commands.add_parser("scenario", help="scenario runs").add_subparsers(dest="action", required=True)
    run = scenario.add_parser("run", help="run a scenario file (or a bundled scenario by name)")
    run.add_argument("file")
    run.add_argument("--config", help="JSON config file applied under the scenario's settings")
    run.add_argument("--out", default=".", help="directory for the trace and report files")
    run.set_defaults(func=cmd_scenario_run)

    attack = commands.add_parser("attack", help="linkage attacks").add_subparsers(dest="action", required=True)
    evaluate = attack.add_parser("eval", help="attack the tumble batches of a scenario or trace file")
    evaluate.add_argument("file", help="scenario JSON or trace NDJSON")
    evaluate.add_argument("--config")
    evaluate.add_argument("--strategy", action="append", help="repeatable; default all")
    evaluate.add_argument("--store", help="custodian name (scenario) or endpoint url (trace)")
    evaluate.add_argument("--no-directory", action="store_true", help="hide directory history from the attacker")
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.set_defaults(func=cmd_attack_eval)

    experiment = attack.add_parser("experiment", help="seeded tumble experiment at one custodian")
    experiment.add_argument("--k", type=int, default=9)
    experiment.add_argument("--batches", type=int, default=1000)
    experiment.add_argument("--chaff", default="distributional", choices=["distributional", "constant"])
    experiment.add_argument("--no-shuffle", action="store_true", help="apply the real update first")
    experiment.add_argument("--no-directory", action="store_true")
    experiment.add_argument("--strategy", action="append")
    experiment.add_argument("--seed", type=int, default=0)
    experiment.set_defaults(func=cmd_attack_experiment)

    export = commands.add_parser("export", help="run a scenario and export one artifact")
    export.add_argument("what", choices=["store", "ledger", "trace", "records"])
    export.add_argument("file", help="scenario file or bundled scenario name")
    export.add_argument("--config")
    export.add_argument("--custodian", help="custodian whose store or node to export")
    export.add_argument("--out", help="write to this file instead of stdout")
    export.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(list(argv) if argv is not None else None)
    configure_logging(args.log_level, args.log_format)
    try:
        return int(args.func(args))
    except (ScenarioError, ConfigurationError) as exc:
        sys.stderr.write(f"error: {exc.message}\n")
        return EXIT_INPUT
    except OwnershipError as exc:
        sys.stderr.write(f"error: {exc.code}: {exc.message}\n")
        return EXIT_FAILURE
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
