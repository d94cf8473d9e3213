"""Command line entry points for the deployable pieces.

Layout: one subcommand group per service. ``sim`` seeds and drives the
simulated EHR estate, ``tss`` serves the central study system, ``dnc`` runs a
practice connector with its form console, ``eval`` turns a recruitment log
into the evaluation report, and ``study`` runs the whole desk-scale trial in
one process.
"""

from __future__ import annotations

import argparse
import datetime as dt
import sys
from pathlib import Path


def _listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(
            f"expected host:port, got {value!r}")
    return host, int(port)


def _default_practices():
    from .harness import DESK_PRACTICES
    return DESK_PRACTICES


def _cmd_sim_seed(args) -> int:
    from . import ehrsim, population
    cfg = population.PopulationConfig(size=args.size, seed=args.seed)
    world = ehrsim.EhrWorld(population.seed_population(cfg),
                            practices=_default_practices(), seed=args.seed,
                            data_dir=args.data_dir)
    by_practice: dict[str, int] = {}
    for patient in world.population:
        by_practice[patient.practice_id] = by_practice.get(patient.practice_id, 0) + 1
    print(f"seeded {len(world.population)} patients into {args.data_dir}")
    for practice_id, count in sorted(by_practice.items()):
        print(f"  {practice_id:<16}{count:>6}")
    return 0


def _cmd_sim_run_day(args) -> int:
    from . import ehrsim
    world = ehrsim.EhrWorld.load(args.data_dir)
    events = world.run_clinic_day(args.practice, args.date)
    for event in events:
        print(f"{event.encounter_instant.iso()}  {event.patient_native_id}")
    print(f"{len(events)} encounters at {args.practice} on {args.date}")
    return 0


def _cmd_sim_serve(args) -> int:
    import uvicorn
    from . import ehrsim
    from .http_api import make_ehr_app
    world = ehrsim.EhrWorld.load(args.data_dir)
    if args.source not in {p.source_id for p in world.practices.values()}:
        print(f"unknown source {args.source!r}", file=sys.stderr)
        return 2
    host, port = args.listen
    uvicorn.run(make_ehr_app(world, args.source), host=host, port=port,
                log_level="warning")
    return 0


def _cmd_tss_serve(args) -> int:
    import uvicorn
    from . import tss
    from .http_api import make_tss_app
    system = tss.StudySystem(data_dir=args.data_dir)
    host, port = args.listen
    print(f"study system on {host}:{port}, data in {args.data_dir}")
    uvicorn.run(make_tss_app(system), host=host, port=port,
                log_level="warning")
    return 0


def _cmd_dnc_run(args) -> int:
    import httpx
    import uvicorn
    from . import dnc, transport
    from .http_api import make_dnc_app

    trace = transport.NetworkTrace()
    agent = f"dnc:{args.practice}"
    config = dnc.DncConfig(practice_id=args.practice, source_id=args.source,
                           country=args.country, site_key=args.site_key,
                           data_dir=args.data_dir)
    connector = dnc.PracticeConnector(
        config,
        transport.HttpTssClient(httpx.Client(base_url=args.tss_url), trace, agent),
        transport.HttpEhrClient(httpx.Client(base_url=args.ehr_url), trace, agent,
                                args.source))
    report = connector.sync_protocols(dt.datetime.now().isoformat(timespec="minutes"))
    state = "degraded" if report.degraded else "ok"
    print(f"initial protocol sync {state}; "
          f"{len(connector.active_studies())} active studies")
    host, port = args.listen
    print(f"console on {host}:{port}")
    uvicorn.run(make_dnc_app(connector, static_dir=args.console_dir,
                             sync_every=args.sync_every),
                host=host, port=port, log_level="warning")
    return 0


def _cmd_eval_analyze(args) -> int:
    from . import analytics, tss
    log = tss.load_recruitment_log(args.log)
    pairs = analytics.load_practice_pairs(args.pairs) if args.pairs else None
    text = analytics.render_report(log, practice_pairs=pairs)
    Path(args.report).write_text(text, encoding="utf-8")
    print(text, end="")
    print(f"report written to {args.report}")
    return 0


def _cmd_study_run(args) -> int:
    from .harness import DeskConfig, run_desk_study
    summary = run_desk_study(DeskConfig(patients=args.patients, seed=args.seed,
                                        clinic_days=args.clinic_days,
                                        data_dir=args.data_dir))
    print(summary.report_text, end="")
    print(f"{summary.encounters} encounters over {summary.clinic_days} clinic "
          f"days in {summary.elapsed_seconds:.2f}s; "
          f"{summary.submissions} submissions, "
          f"{summary.verified_ok}/{summary.verified_total} verified")
    return 0 if summary.completed_cleanly() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esource")
    groups = parser.add_subparsers(dest="group", required=True)

    sim = groups.add_parser("sim", help="simulated EHR estate")
    sim_cmds = sim.add_subparsers(dest="command", required=True)
    seed = sim_cmds.add_parser("seed", help="seed a persistent practice population")
    seed.add_argument("--size", type=int, required=True)
    seed.add_argument("--seed", type=int, required=True)
    seed.add_argument("--data-dir", default="ehr-world")
    seed.set_defaults(func=_cmd_sim_seed)
    run_day = sim_cmds.add_parser("run-day", help="run one clinic day")
    run_day.add_argument("--practice", required=True)
    run_day.add_argument("--date", type=dt.date.fromisoformat, required=True)
    run_day.add_argument("--data-dir", default="ehr-world")
    run_day.set_defaults(func=_cmd_sim_run_day)
    serve = sim_cmds.add_parser("serve", help="serve one source's record endpoints")
    serve.add_argument("--source", required=True)
    serve.add_argument("--data-dir", default="ehr-world")
    serve.add_argument("--listen", type=_listen, default=("127.0.0.1", 8010))
    serve.set_defaults(func=_cmd_sim_serve)

    tss = groups.add_parser("tss", help="central study system")
    tss_cmds = tss.add_subparsers(dest="command", required=True)
    tss_serve = tss_cmds.add_parser("serve", help="serve the study system")
    tss_serve.add_argument("--data-dir", required=True)
    tss_serve.add_argument("--listen", type=_listen, default=("127.0.0.1", 8000))
    tss_serve.set_defaults(func=_cmd_tss_serve)

    dnc = groups.add_parser("dnc", help="practice connector")
    dnc_cmds = dnc.add_subparsers(dest="command", required=True)
    run = dnc_cmds.add_parser("run", help="run one practice connector and console")
    run.add_argument("--source", required=True)
    run.add_argument("--practice", required=True)
    run.add_argument("--tss-url", required=True)
    run.add_argument("--data-dir", required=True)
    run.add_argument("--ehr-url", default="http://127.0.0.1:8010")
    run.add_argument("--country", default="")
    run.add_argument("--site-key", default="")
    run.add_argument("--listen", type=_listen, default=("127.0.0.1", 8020))
    run.add_argument("--console-dir", default=None,
                     help="directory with the built form console")
    run.add_argument("--sync-every", type=float, default=300.0,
                     help="protocol poll interval in seconds")
    run.set_defaults(func=_cmd_dnc_run)

    evaluation = groups.add_parser("eval", help="evaluation analytics")
    eval_cmds = evaluation.add_subparsers(dest="command", required=True)
    analyze = eval_cmds.add_parser("analyze", help="recruitment log to report")
    analyze.add_argument("--log", required=True)
    analyze.add_argument("--report", required=True)
    analyze.add_argument("--pairs", default=None,
                         help="matched practice pairs json")
    analyze.set_defaults(func=_cmd_eval_analyze)

    study = groups.add_parser("study", help="desk-scale end-to-end run")
    study_cmds = study.add_subparsers(dest="command", required=True)
    study_run = study_cmds.add_parser("run", help="run the whole desk study")
    study_run.add_argument("--patients", type=int, default=200)
    study_run.add_argument("--seed", type=int, default=2015)
    study_run.add_argument("--clinic-days", type=int, default=10)
    study_run.add_argument("--data-dir", default=None)
    study_run.set_defaults(func=_cmd_study_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
