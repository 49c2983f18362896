"""Command line entry point: ``diapredict <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .config import load_config
from .data import load_dataset
from .scene import build_graph, insertion_label, node_goal_labels
from .synth import SCENARIOS, write_corpus


def _common(p):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="runs/default")


def _parser():
    ap = argparse.ArgumentParser(prog="diapredict", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic track file and map")
    _common(p)
    p.add_argument("--scenario", choices=SCENARIOS, default="intersection")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--agents", type=int, default=10)
    p.add_argument("--frames", type=int, default=400)
    p.add_argument("--style-shift", type=float, default=0.0)

    p = sub.add_parser("extract-graph", help="semantic graph of one agent at one frame, as JSON")
    _common(p)
    p.add_argument("--tracks", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--agent", type=int, required=True)
    p.add_argument("--frame", type=int, required=True)

    for name, hlp in (("train-sgn", "train the intention network"), ("train-edn", "train the trajectory network")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
    sub.choices["train-edn"].add_argument("--no-ablation", action="store_true",
                                          help="skip the no-intention comparison model")

    p = sub.add_parser("eval", help="ADE/FDE report for the learned pipeline and baselines")
    _common(p)
    p.add_argument("--baseline", action="append", choices=("idm", "fsm_d", "fsm_t", "const_vel"),
                   help="restrict baselines (repeatable)")
    p.add_argument("--goal", choices=("sgn", "truth"), help="goal source fed to the trajectory network")

    p = sub.add_parser("adapt", help="online adaptation replay on the style-shift corpus")
    _common(p)
    p.add_argument("--tau", type=int, nargs="+", help="one or more adaptation step counts")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--sigma-q", type=float)
    p.add_argument("--sigma-r", type=float)
    p.add_argument("--p0", type=float)
    p.add_argument("--adapt-layers", nargs="+", help="layers adapted together, e.g. W^F_3 W^F_2")
    p.add_argument("--layer-sweep", nargs="*", help="adapt each listed layer alone and tabulate")

    p = sub.add_parser("predict", help="stream per-frame intention and trajectory JSON lines")
    _common(p)
    p.add_argument("--tracks", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--agent", type=int)

    p = sub.add_parser("bench", help="inference time against agent count")
    _common(p)
    p.add_argument("--counts", type=int, nargs="+", default=[1, 2, 5, 10, 20, 50, 100])
    p.add_argument("--repeats", type=int, default=20)
    return ap


def _graph_doc(args, cfg):
    ds = load_dataset(args.tracks, args.map, cfg.data.__class__(**{**cfg.data.__dict__, "graphs": False}))
    if args.agent not in ds.tracks:
        raise ValueError(f"agent {args.agent} not in {args.tracks}")
    ego = ds.tracks[args.agent]
    g = build_graph(ego, ds.others(args.agent), ds.ctx, args.frame, cfg.data.T_h, cfg.data.D_h, cfg.data.m_max)
    doc = {"agent_id": args.agent, "frame_id": args.frame, "reference_node": g.reference_node,
           "nodes": [{"id": n.id, "kind": n.kind, "front_agent": n.front_agent, "rear_agent": n.rear_agent,
                      "features": n.abs_features[-1].tolist()} for n in g.nodes]}
    if args.frame + cfg.data.T_f <= ego.last:
        label, consistent = insertion_label(g, ego, ds.tracks, ds.ctx, cfg.data.T_f)
        doc["insertion_label"] = label
        doc["label_consistent"] = consistent
        doc["node_goals"] = node_goal_labels(g, ds.tracks, ds.ctx, cfg.data.T_f).tolist()
    return doc


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    cfg = load_config(args.config, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.cmd == "synth":
        seed = cfg.seed if args.seed is not None else 0
        paths = write_corpus(out, args.scenario, args.episodes, seed, n_agents=args.agents,
                             n_frames=args.frames, style_shift=args.style_shift)
        print(json.dumps({"tracks": str(paths[0]), "map": str(paths[1])}))
    elif args.cmd == "extract-graph":
        doc = _graph_doc(args, cfg)
        (out / f"graph_{args.agent}_{args.frame}.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
        print(json.dumps(doc, sort_keys=True))
    elif args.cmd == "train-sgn":
        print(json.dumps(ex.run_train(cfg, out, models=("sgn",))))
    elif args.cmd == "train-edn":
        print(json.dumps(ex.run_train(cfg, out, models=("edn",), ablation=not args.no_ablation)))
    elif args.cmd == "eval":
        if args.baseline:
            cfg.baselines = tuple(args.baseline)
        if args.goal:
            cfg.eval_goal = args.goal
        rep = ex.run_eval(cfg, out)
        print(json.dumps(rep["scenarios"], indent=1, sort_keys=True))
    elif args.cmd == "adapt":
        for flag, attr in (("lam", "lam"), ("sigma_q", "sigma_q"), ("sigma_r", "sigma_r"), ("p0", "p0")):
            if getattr(args, flag) is not None:
                setattr(cfg.adapt, attr, getattr(args, flag))
        if args.adapt_layers:
            cfg.adapt.layers = tuple(args.adapt_layers)
        cfg.adapt.__post_init__()
        rep = ex.run_adapt(cfg, out, taus=args.tau, layer_sweep=args.layer_sweep)
        print(json.dumps({"tau_sweep": rep["tau_sweep"], "layer_sweep": rep["layer_sweep"]}, indent=1))
    elif args.cmd == "predict":
        print(ex.run_predict(cfg, out, args.tracks, args.map, args.agent))
    elif args.cmd == "bench":
        sp, scfg, ep, ecfg = ex.load_models(out)
        rows = ex.benchmark_runtime(sp, scfg, ep, ecfg, args.counts, args.repeats)
        (out / "bench.json").write_text(json.dumps(rows, indent=1))
        for r in rows:
            print(f"{r['count']:4d}  sgn {r['sgn_ms']:8.3f} ms  edn {r['edn_ms']:8.3f} ms")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
