"""Training, evaluation, adaptation replay, streaming prediction, plots and timing.

Every run writes plain files under ``out_dir``: parameter JSON, JSON reports
(sorted keys, no wall-clock fields) and CSV curves, so a second run with the
same config reproduces them byte for byte. Timing lives in its own file.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adapt, baselines, edn, sgn
from .config import CorpusConfig, ExperimentConfig
from .data import Dataset, load_dataset, split_by_segment
from .geometry import frenet_to_xy
from .nn import load_params, save_params
from .synth import write_corpus

SHORT = 3   # 0.3 s at 10 Hz


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def corpus_paths(cc: CorpusConfig, out_dir):
    tag = cc.scenario + (f"_shift{cc.style_shift:g}" if cc.style_shift else "") + f"_s{cc.seed}_n{cc.n_episodes}"
    d = Path(out_dir) / "data"
    return d / f"{tag}_tracks.csv", d / f"{tag}_map.json"


def ensure_corpus(cc: CorpusConfig, out_dir):
    csv_path, map_path = corpus_paths(cc, out_dir)
    if not (csv_path.exists() and map_path.exists()):
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        tmp_csv, tmp_map = write_corpus(csv_path.parent / "tmp", cc.scenario, cc.n_episodes, cc.seed,
                                        n_agents=cc.n_agents, n_frames=cc.n_frames, style_shift=cc.style_shift)
        tmp_csv.replace(csv_path)
        tmp_map.replace(map_path)
        (csv_path.parent / "tmp").rmdir()
    return csv_path, map_path


def corpus_dataset(cc: CorpusConfig, cfg: ExperimentConfig, out_dir, **data_kw) -> Dataset:
    csv_path, map_path = ensure_corpus(cc, out_dir)
    return load_dataset(csv_path, map_path, replace(cfg.data, **data_kw))


def to_map_frame(pos, windows, lines, coordinate: str = "frenet") -> np.ndarray:
    """(N, T, 2) representation-frame positions -> map-frame xy."""
    if coordinate == "cartesian":
        return np.asarray(pos)
    return np.stack([frenet_to_xy(p[:, 0], p[:, 1], lines[w.line_id], extrapolate=True)
                     for p, w in zip(pos, windows)]) if len(pos) else np.zeros((0,) + np.shape(pos)[1:])


def truth_xy(samples, T_h: int) -> np.ndarray:
    return np.stack([s.cart.pos[T_h + 1:] for s in samples])


def horizon_stats(err) -> dict:
    """ADE / FDE at 0.3 s and the full horizon, mean and std over samples."""
    err = np.asarray(err)
    out = {"n": int(len(err))}
    if len(err) == 0:
        return out
    T = err.shape[1]
    for tag, k in (("0.3s", min(SHORT, T)), (f"{T / 10:g}s", T)):
        ade = err[:, :k].mean(axis=1)
        fde = err[:, k - 1]
        out[f"ade_{tag}"] = {"mean": float(ade.mean()), "std": float(ade.std())}
        out[f"fde_{tag}"] = {"mean": float(fde.mean()), "std": float(fde.std())}
    return out


def edn_errors(params, ecfg: edn.EdnConfig, samples, lines, goals=None) -> np.ndarray:
    windows = [s.frenet if ecfg.coordinate == "frenet" else s.cart for s in samples]
    batch = edn.apply_representation(windows, ecfg, goals=goals)
    pred = to_map_frame(edn.predict(params, batch, ecfg), windows, lines, ecfg.coordinate)
    return edn.step_errors(pred, truth_xy(samples, ecfg.T_h))


def baseline_errors(policy: str, ds: Dataset, samples, cfg: ExperimentConfig) -> np.ndarray:
    T_h, T_f = cfg.data.T_h, cfg.data.T_f
    preds = []
    for s in samples:
        ego = ds.tracks[s.agent_id]
        sc = baselines.scene_from_tracks(ego, ds.others(s.agent_id), ds.ctx, s.t)
        preds.append(baselines.rollout(policy, sc, T_f, cfg.data.dt, cfg.idm))
    pred = to_map_frame(np.stack(preds), [s.frenet for s in samples], ds.lines)
    return edn.step_errors(pred, truth_xy(samples, T_h))


def train_edn(cfg_e: edn.EdnConfig, samples, goals=None):
    windows = [s.frenet if cfg_e.coordinate == "frenet" else s.cart for s in samples]
    return edn.edn_train(edn.apply_representation(windows, cfg_e, goals=goals), cfg_e)


def _log_csv(path, rows) -> None:
    keys = sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def run_train(cfg: ExperimentConfig, out_dir, models=("sgn", "edn"), ablation: bool = True) -> dict:
    """Trains the intention network and/or the trajectory network (plus a no-intention copy)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = corpus_dataset(cfg.train, cfg, out, graphs="sgn" in models)
    train, _ = split_by_segment(ds.samples, cfg.train_frac, cfg.seed)
    if not train:
        raise ValueError("training corpus produced no samples")
    files = []
    if "sgn" in models:
        sp, slog = sgn.sgn_train([s.sgn for s in train], cfg.sgn)
        save_params(out / "sgn_params.json", sp, cfg.sgn.to_dict(), cfg.sgn.seed)
        _log_csv(out / "sgn_train_log.csv", slog)
        files.append("sgn_params.json")
    if "edn" in models:
        runs = [("edn", cfg.edn)] + ([("edn_none", replace(cfg.edn, mode="none"))] if ablation else [])
        for stem, ecfg in runs:
            ep, elog = train_edn(ecfg, train)
            save_params(out / f"{stem}_params.json", ep, ecfg.to_dict(), ecfg.seed)
            _log_csv(out / f"{stem}_train_log.csv", elog)
            files.append(f"{stem}_params.json")
    return {"n_train": len(train), "files": files}


def _load(out, name):
    path = Path(out) / name
    if not path.exists():
        raise FileNotFoundError(f"missing parameter file {path}")
    params, header = load_params(path)
    return params, header["config"]


def load_models(out_dir):
    sp, sc = _load(out_dir, "sgn_params.json")
    ep, ec = _load(out_dir, "edn_params.json")
    return sp, sgn.SgnConfig(**sc), ep, edn.EdnConfig(**ec)


def _goals(cfg, sp, scfg, samples):
    if cfg.eval_goal == "truth":
        return None
    _, g = sgn.predict_batch(sp, [s.sgn for s in samples], scfg)
    return g


def run_eval(cfg: ExperimentConfig, out_dir) -> dict:
    """Per-scenario ADE/FDE of the learned pipeline and every baseline; writes the report and curves."""
    out = Path(out_dir)
    sp, scfg, ep, ecfg = load_models(out)
    none_path = out / "edn_none_params.json"
    np_ = ncfg = None
    if none_path.exists():
        np_, nc = _load(out, "edn_none_params.json")
        ncfg = edn.EdnConfig(**nc)
    report = {"config": cfg.to_dict(), "scenarios": {}}
    curves = {}
    ds_train = corpus_dataset(cfg.train, cfg, out)
    _, test = split_by_segment(ds_train.samples, cfg.train_frac, cfg.seed)
    ds_tr = corpus_dataset(cfg.transfer, cfg, out)
    blocks = [(cfg.train.scenario, ds_train, test),
              (f"{cfg.transfer.scenario} (transfer)", ds_tr, ds_tr.samples)]
    for name, ds, samples in blocks:
        block = {"n": len(samples)}
        if samples:
            block["insertion"] = sgn.evaluate(sp, [s.sgn for s in samples], scfg)
            err = edn_errors(ep, ecfg, samples, ds.lines, _goals(cfg, sp, scfg, samples))
            block["hatn"] = horizon_stats(err)
            curves[f"hatn@{name}"] = err.mean(axis=0)
            if np_ is not None:
                err = edn_errors(np_, ncfg, samples, ds.lines)
                block["edn_no_intention"] = horizon_stats(err)
                curves[f"no_intention@{name}"] = err.mean(axis=0)
            for b in cfg.baselines:
                err = baseline_errors(b, ds, samples, cfg)
                block[b] = horizon_stats(err)
                curves[f"{b}@{name}"] = err.mean(axis=0)
        report["scenarios"][name] = block
    _write_json(out / "eval_report.json", report)
    emit_plots(curves, out, "step_errors")
    return report


def agent_streams(samples, min_len: int):
    """Consecutive-frame runs per agent, each at least ``min_len`` long."""
    by = {}
    for s in sorted(samples, key=lambda s: (s.agent_id, s.t)):
        runs = by.setdefault(s.agent_id, [])
        if runs and runs[-1][-1].t == s.t - 1:
            runs[-1].append(s)
        else:
            runs.append([s])
    return [r for aid in sorted(by) for r in by[aid] if len(r) >= min_len]


def adapt_sweep(ep, ecfg, streams, acfg: adapt.AdaptConfig, goals=None, cycles_out=None) -> dict:
    """Replay every stream with a private filter; returns the averaged metrics."""
    records = []
    for k, st in enumerate(streams):
        g = None if goals is None else goals[k]
        batches = [edn.apply_representation([s.frenet], ecfg, goals=None if g is None else g[i:i + 1])
                   for i, s in enumerate(st)]
        # realized outputs do not depend on the goal fed to the network
        true_out = np.stack([b.targets[0] for b in batches])
        true_pos = np.stack([edn.reconstruct(b.targets, b, ecfg)[0] for b in batches])
        _, recs = adapt.adapt_stream(ep, ecfg, acfg, batches, true_out, true_pos)
        if cycles_out is not None:
            for r in recs:
                m = adapt.ade_windows(r["past_pred"], r["past_true"], r["cur_pred"], r["cur_true"], acfg.tau)
                cycles_out.append({"agent_id": st[0].agent_id, "t": int(st[r["t"]].t), "tau": acfg.tau, **m})
        records += recs
    return adapt.compute_adapt_metrics(records, acfg.tau)


def run_adapt(cfg: ExperimentConfig, out_dir, taus=None, layer_sweep=None) -> dict:
    """Adaptation replay on the style-shift corpus: a tau sweep and an optional per-layer sweep."""
    out = Path(out_dir)
    sp, scfg, ep, ecfg = load_models(out)
    use_sgn = cfg.eval_goal == "sgn" and ecfg.mode != "none"
    ds = corpus_dataset(cfg.shift, cfg, out, stride=1, graphs=use_sgn)
    taus = list(taus or [cfg.adapt.tau])
    streams = agent_streams(ds.samples, max(taus) + 2)
    goals = None
    if use_sgn:
        goals = [sgn.predict_batch(sp, [s.sgn for s in st], scfg)[1] for st in streams]
    report = {"config": cfg.to_dict(), "n_streams": len(streams), "tau_sweep": [], "layer_sweep": []}
    cycles = []
    for tau in taus:
        acfg = replace(cfg.adapt, tau=tau)
        report["tau_sweep"].append(adapt_sweep(ep, ecfg, streams, acfg, goals, cycles))
    for layer in layer_sweep or []:
        acfg = replace(cfg.adapt, layers=(layer,))
        m = adapt_sweep(ep, ecfg, streams, acfg, goals)
        report["layer_sweep"].append({"layer": layer, **m})
    _write_json(out / "adapt_report.json", report)
    with open(out / "adapt_cycles.jsonl", "w") as fh:
        for c in cycles:
            fh.write(json.dumps(c, sort_keys=True) + "\n")
    bars = {}
    if len(taus) > 1:
        bars["ade2_improvement_by_tau"] = [(m["tau"], m["ade2_improvement"]) for m in report["tau_sweep"]]
    if report["layer_sweep"]:
        bars["ade2_delta_by_layer"] = [(m["layer"], m["ade2_delta"]) for m in report["layer_sweep"]]
    emit_bars(bars, out)
    return report


def run_predict(cfg: ExperimentConfig, out_dir, track_csv, map_json, agent_id: int | None = None) -> Path:
    """Per-frame intention and trajectory for every window of a track file, as JSON lines."""
    out = Path(out_dir)
    sp, scfg, ep, ecfg = load_models(out)
    ds = load_dataset(track_csv, map_json, cfg.data)
    samples = [s for s in ds.samples if agent_id is None or s.agent_id == agent_id]
    path = out / "predictions.jsonl"
    with open(path, "w") as fh:
        if samples:
            ws, goals = sgn.predict_batch(sp, [s.sgn for s in samples], scfg)
            windows = [s.frenet if ecfg.coordinate == "frenet" else s.cart for s in samples]
            b = edn.apply_representation(windows, ecfg, goals=goals)
            xy = to_map_frame(edn.predict(ep, b, ecfg), windows, ds.lines, ecfg.coordinate)
            for s, w, g, p in zip(samples, ws, goals, xy):
                fh.write(json.dumps({
                    "agent_id": s.agent_id, "frame_id": s.t, "insertion_probs": [float(v) for v in w],
                    "reference_node": int(s.sgn.ref), "goal_m": float(g),
                    "trajectory_xy": [[float(a), float(c)] for a, c in p]}, sort_keys=True) + "\n")
    return path


def emit_plots(curves: dict, out_dir, stem: str = "step_errors") -> list:
    """Per-step error curves as one CSV (a column per series) and one SVG. Empty -> nothing."""
    if not curves:
        return []
    out = Path(out_dir)
    names = list(curves)
    T = max(len(curves[n]) for n in names)
    csv_path = out / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + names)
        for k in range(T):
            w.writerow([k + 1] + [repr(float(curves[n][k])) if k < len(curves[n]) else "" for n in names])
    svg = out / f"{stem}.svg"
    _plot_lines(curves, svg)
    return [csv_path, svg]


def emit_bars(bars: dict, out_dir) -> list:
    files = []
    for name, rows in bars.items():
        if not rows:
            continue
        path = Path(out_dir) / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key", "value"])
            for k, v in rows:
                w.writerow([k, repr(float(v))])
        files.append(path)
    return files


def _plot_lines(curves, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "diapredict"
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, c in curves.items():
        ax.plot(np.arange(1, len(c) + 1), c, label=name)
    ax.set_xlabel("prediction step")
    ax.set_ylabel("error (m)")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _median_ms(fn, repeats: int) -> float:
    fn()
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return 1000.0 * float(np.median(ts))


def benchmark_runtime(sp, scfg: sgn.SgnConfig, ep, ecfg: edn.EdnConfig, counts=(1, 2, 5, 10, 20, 50, 100),
                      repeats: int = 20, seed: int = 0) -> list:
    """Median wall time (ms) of one intention forward over an n-node graph and one batched decode of n agents."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in sorted(counts):
        a = rng.normal(size=(n, ecfg.T_h, 7)) * 10
        r = a - a[0]
        t_sgn = _median_ms(lambda: sgn.predict_arrays(sp, a, r, scfg.K, scfg.goal_scale), repeats)
        pos = np.cumsum(rng.uniform(0, 1, size=(n, ecfg.T_h + 1 + ecfg.T_f, 2)), axis=1)
        windows = [edn.Window(edn.snap(p), np.ones_like(p), np.zeros(len(p)), 20.0) for p in pos]
        b = edn.apply_representation(windows, ecfg)
        t_edn = _median_ms(lambda: edn.predict(ep, b, ecfg), max(repeats // 4, 3))
        rows.append({"count": n, "sgn_ms": t_sgn, "edn_ms": t_edn})
    return rows
