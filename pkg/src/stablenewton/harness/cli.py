"""Command line: ``stablenewton {run,compare,probe,presets}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure in a
solver (partial trace still written), 4 too few stability samples.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from ..errors import ConfigError, InsufficientSamples
from .config import list_presets, load_config, preset_path
from .runner import compare_experiments, dump_json, probe_problem, build_problem, run_experiment, write_atomic

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_SAMPLES = 0, 2, 3, 4


def _add_source(p, multiple=False):
    if multiple:
        p.add_argument("--config", action="append", default=[], metavar="PATH")
        p.add_argument("--preset", action="append", default=[], metavar="NAME")
    else:
        g = p.add_mutually_exclusive_group(required=True)
        g.add_argument("--config", metavar="PATH")
        g.add_argument("--preset", metavar="NAME")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, metavar="N", help="seed (overrides the config)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--k", metavar="K", help="shorthand for --set problem.k=K")


def make_parser():
    parser = argparse.ArgumentParser(prog="stablenewton",
                                     description="Newton-type solvers and Hessian stability probes.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_source(sub.add_parser("run", help="run the solver(s) of one config"))
    _add_source(sub.add_parser("compare", help="iterations-to-gap table over several configs"), True)
    _add_source(sub.add_parser("probe", help="estimate stability constants only"))
    pres = sub.add_parser("presets", help="bundled experiment configs")
    pres.add_argument("action", choices=["list", "show"])
    pres.add_argument("name", nargs="?")
    return parser


def _overrides(args):
    items = list(args.set)
    if args.k is not None:
        items.append(f"problem.k={args.k}")
    return items


def _load(args, path=None, preset=None):
    path = path or (preset_path(preset) if preset else None)
    if path is None:
        path = args.config if args.config else preset_path(args.preset)
    return load_config(path, overrides=_overrides(args), seed=args.seed, out=args.out)


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "presets":
            if args.action == "list":
                for name in list_presets():
                    print(name)
            else:
                if not args.name:
                    raise ConfigError("presets show needs a name")
                with open(preset_path(args.name)) as fh:
                    sys.stdout.write(fh.read())
            return EXIT_OK
        if args.command == "run":
            cfg = _load(args)
            code, report = run_experiment(cfg)
            for entry in report["runs"]:
                bc = entry.get("bound_comparison") or {}
                print(f"{entry['solver']}: status={entry['status']} iterations={entry['iterations']} "
                      f"final_gap={entry['final_gap']} measured={bc.get('measured_factor')} "
                      f"predicted={bc.get('predicted_factor')}")
            print(f"wrote {os.path.join(cfg.output, 'report.json')}")
            return code
        if args.command == "compare":
            cfgs = [_load(args, path=p) for p in args.config] + [_load(args, preset=n) for n in args.preset]
            out = args.out or (cfgs[0].output if cfgs else None)
            _, table = compare_experiments(cfgs, out)
            sys.stdout.write(table)
            return EXIT_OK
        if args.command == "probe":
            cfg = _load(args)
            if cfg.probe is None:
                raise ConfigError("config has no [probe] section")
            stab = probe_problem(build_problem(cfg.problem), cfg.probe, cfg.seed)
            path = os.path.join(cfg.output, "stability.json")
            write_atomic(path, dump_json(stab))
            print(json.dumps({k: stab[k] for k in stab if k in ("D", "r_star", "predicted")}, indent=2))
            print(f"wrote {path}")
            return EXIT_OK
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientSamples as exc:
        print(f"stability probe failed: {exc}", file=sys.stderr)
        return EXIT_SAMPLES
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
