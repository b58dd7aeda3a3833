"""``caltrace`` command line: benchmarks, summaries, fixtures and the PDP server."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import bench
from .conflicts import (
    ChainTopology,
    Fixture,
    extract_conflict_sets,
    gen_chain,
    gen_er_graph,
)
from .labels import IntegrityLadder

EXIT_OK, EXIT_ERROR, EXIT_ASSERTION = 0, 1, 2


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _int_list(values: list[str]) -> tuple[int, ...]:
    out: list[int] = []
    for v in values:
        out.extend(_ints(v))
    return tuple(out)


def cmd_bench(args: argparse.Namespace) -> int:
    modes = ("unified", "baseline") if args.mode == "both" else (args.mode,)
    spec = bench.ExperimentSpec(
        experiment=args.experiment,
        levels=_int_list(args.levels) if args.levels else bench.DEFAULT_LEVELS,
        branches=_int_list(args.branches) if args.branches else (
            (1, 2, 4) if args.experiment == "branching" else (1,)),
        conflict_sizes=_int_list(args.sizes) if args.sizes else tuple(range(1, 51)),
        iterations=args.iterations,
        warmup=args.warmup,
        seed=args.seed,
        modes=modes,
        transport=args.transport,
    )
    manifest = bench.run_manifest(spec)
    if args.parallel:
        result = bench.measure_throughput(spec, args.parallel)
        manifest["throughput"] = result
        json.dump(result, sys.stdout, indent=2)
        print()
        return EXIT_OK
    rows = bench.run_experiment(spec)
    summary = bench.summarize(rows)
    manifest_path = bench.write_results(rows, args.out, manifest)
    print(bench.format_summary(summary))
    print(f"\nwrote {len(rows)} rows to {args.out} (manifest {manifest_path})")
    if args.check:
        checks = bench.shape_checks(spec, summary, args.ratio_target)
        for c in checks:
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
        if not all(c.passed for c in checks):
            return EXIT_ASSERTION
    return EXIT_OK


def cmd_summarize(args: argparse.Namespace) -> int:
    with open(args.csv) as fh:
        rows = bench.parse_csv(fh.read())
    print(bench.format_summary(bench.summarize(rows)))
    return EXIT_OK


def cmd_gen(args: argparse.Namespace) -> int:
    universe = extract_conflict_sets(gen_er_graph(args.graph_n, args.graph_p, args.seed))
    fixture = gen_chain(
        ChainTopology(args.depth, args.branches), universe,
        IntegrityLadder(args.q or args.depth), args.seed,
    )
    with open(args.out, "w") as fh:
        json.dump(fixture.to_manifest(), fh, indent=2)
    print(f"leaf device {fixture.leaf}; {len(fixture.reports)} reports -> {args.out}")
    return EXIT_OK


def cmd_load(args: argparse.Namespace) -> int:
    with open(args.manifest) as fh:
        fixture = Fixture.from_manifest(json.load(fh))
    store = fixture.build_store(args.store)
    print(f"replayed {len(fixture.reports)} reports into {args.store} (seq {store.seq})")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import load_config, serve

    config = load_config(args.config)
    if args.store:
        config.store_path = args.store
    if args.mode:
        config.engine_mode = args.mode
    if args.listen:
        config.listen_addr = args.listen
    serve(config)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caltrace", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run an authorisation-latency experiment")
    b.add_argument("--experiment", choices=bench.EXPERIMENTS, default="depth")
    b.add_argument("--levels", nargs="+", help="chain depths, e.g. 10 20 30 or 10,20,30")
    b.add_argument("--branches", nargs="+", help="parents per level (branching experiment)")
    b.add_argument("--sizes", nargs="+", help="conflict-set sizes (conflict experiment)")
    b.add_argument("--iterations", type=int, default=100)
    b.add_argument("--warmup", type=int, default=100)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--mode", choices=("unified", "baseline", "both"), default="both")
    b.add_argument("--transport", choices=("inproc", "service"), default="inproc")
    b.add_argument("--parallel", type=int, default=0,
                   help="measure throughput with N threads instead of latency")
    b.add_argument("--out", default="results.csv")
    b.add_argument("--check", action="store_true",
                   help="assert the relative performance shape; exit 2 on failure")
    b.add_argument("--ratio-target", type=float, default=1.0,
                   help="max unified/baseline median ratio at the deepest single chain")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("summarize", help="aggregate a results CSV")
    s.add_argument("csv")
    s.set_defaults(func=cmd_summarize)

    g = sub.add_parser("gen", help="write a fixture manifest")
    g.add_argument("--depth", type=int, default=10)
    g.add_argument("--branches", type=int, default=1)
    g.add_argument("--q", type=int, default=0)
    g.add_argument("--graph-n", type=int, default=20)
    g.add_argument("--graph-p", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="fixture.json")
    g.set_defaults(func=cmd_gen)

    ld = sub.add_parser("load", help="replay a fixture manifest into a new store file")
    ld.add_argument("manifest")
    ld.add_argument("--store", required=True)
    ld.set_defaults(func=cmd_load)

    sv = sub.add_parser("serve", help="run the policy decision point")
    sv.add_argument("--config")
    sv.add_argument("--store")
    sv.add_argument("--mode", choices=("unified", "baseline"))
    sv.add_argument("--listen")
    sv.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except bench.TrialDenied as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    except KeyboardInterrupt:
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logging.getLogger("caltrace").debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
