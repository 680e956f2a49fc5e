"""Command-line entry point: graph checks, single localizations, Monte Carlo runs."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import baseline, graph, robust, sim
from .channel import ChannelParams


def _scenario(path) -> sim.Scenario:
    return sim.Scenario.load(path) if path else sim.Scenario()


def cmd_check_graph(args) -> int:
    net = sim.load_network(args.file)
    print(json.dumps(graph.compatibility_test(net).as_dict()))
    return 0


def _load_oracle(path):
    with open(path) as fh:
        d = yaml.safe_load(fh)
    return ChannelParams(**d["channel"]), np.array(d["los"], bool)


def cmd_localize(args) -> int:
    scn = _scenario(args.scenario).with_(seed=args.seed)
    inst = sim.generate_trial(scn, args.trial)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = {"channel": inst.channel.as_dict(), "los": inst.net.los.astype(int).tolist(),
             "agent_positions": inst.agent_positions.tolist()}
    (out / "oracle_channel.json").write_text(json.dumps(truth))
    log = []
    if args.algo == "rdml":
        res = robust.run_rdml(inst.net, inst.meas, robust.RobustConfig(search_box=scn.box))
        estimates = [e.as_dict() for e in res.estimates]
        log = res.log
    elif args.algo == "dml":
        res = baseline.run_dml(inst.net, inst.meas, baseline.SearchConfig(box=scn.box))
        estimates = [e.as_dict() for e in res.estimates]
        log = res.log
    else:
        if not args.oracle_channel:
            print("cmle needs --oracle-channel with the true link modes and channel parameters", file=sys.stderr)
            return 2
        eta, los = _load_oracle(args.oracle_channel)
        pos = baseline.cmle_solve(inst.net, inst.meas, los, eta, box=scn.box)
        estimates = [{"node": i, "position": [float(v) for v in p]} for i, p in enumerate(pos)]
    for e in estimates:
        if e.get("position") is not None:
            e["error_m"] = float(np.linalg.norm(np.array(e["position"]) - inst.agent_positions[e["node"]]))
    (out / "estimates.json").write_text(json.dumps({"algo": args.algo, "seed": args.seed,
                                                    "digest": inst.meas.digest(), "estimates": estimates}, indent=2))
    with open(out / "rounds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "node", "objective", "broadcast_count"])
        for entry in log:
            w.writerow([entry.round, entry.node, repr(float(entry.objective)), entry.broadcast_count])
    print(json.dumps({"median_error_m": sim.median_error([e.get("error_m", np.nan) for e in estimates])}))
    return 0


def cmd_simulate(args) -> int:
    scn = _scenario(args.scenario).with_(seed=args.seed)
    if args.algos:
        scn = scn.with_(algorithms=tuple(a.strip() for a in args.algos.split(",")))
    results = sim.run_trials(scn, args.trials, args.parallel)
    summary = sim.write_outputs(results, args.out, scn)
    print(json.dumps({a: s["median_error_m"] for a, s in summary.items()}))
    return 0


def cmd_sweep(args) -> int:
    scn = _scenario(args.scenario).with_(seed=args.seed)
    if args.algos:
        scn = scn.with_(algorithms=tuple(a.strip() for a in args.algos.split(",")))
    name, values = sim.parse_sweep(args.param)
    rows = sim.sweep(scn, name, values, args.trials, args.parallel)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    for row in rows:
        print(json.dumps(row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdml", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("check-graph", help="run the compatibility test on a network file")
    c.add_argument("file")
    c.set_defaults(func=cmd_check_graph)

    c = sub.add_parser("localize", help="generate one trial and run one algorithm on it")
    c.add_argument("--algo", choices=("rdml", "dml", "cmle"), required=True)
    c.add_argument("--scenario")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--trial", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--oracle-channel")
    c.set_defaults(func=cmd_localize)

    for name, func, help_ in (("simulate", cmd_simulate, "Monte Carlo run of a scenario"),
                              ("sweep", cmd_sweep, "sweep one scenario field")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--scenario")
        c.add_argument("--seed", type=int, default=0)
        c.add_argument("--out", required=(name == "simulate"))
        c.add_argument("--algos")
        c.add_argument("--trials", type=int)
        c.add_argument("--parallel", type=int, default=1)
        if name == "sweep":
            c.add_argument("--param", required=True, help="e.g. K=1,10,40 or nlos_fraction=0:0.1:1")
        c.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
