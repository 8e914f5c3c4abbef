"""Pipeline stages, their on-disk artifacts and manifests.

Each stage writes into ``<out>/<stage>/`` and finishes with a
``manifest.json`` holding the stage key (hash of its config section and the
output hashes of the stages it reads), the seed, library versions, the
timeline index ranges it touched, and a hash of its outputs. A rerun whose key
and outputs still match is a no-op.
"""
from __future__ import annotations

import logging
import platform
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__
from ..data import (GridSeries, TrafficSeries, compute_cell_stats, derive_mask, impute_missing,
                    impute_traffic, normalize_grid, split_dataset, split_windows, test_start)
from ..graphs import (SensorGraph, build_adjacency_graph, build_distance_graph, build_proximity_graph,
                      read_coords_csv, read_edges_csv, write_coords_csv, write_edges_csv)
from ..io import read_f32, read_json, tree_sha256, write_csv, write_f32, write_json
from .config import ConfigError, out_root, stable_hash, stage_seed

log = logging.getLogger(__name__)

STAGES = ("synth", "preprocess", "train-vae", "embed", "train-forecaster", "train-predictor",
          "evaluate", "interpret", "report")

DEPENDS = {
    "synth": (),
    "preprocess": ("synth",),
    "train-vae": ("preprocess",),
    "embed": ("preprocess", "train-vae"),
    "train-forecaster": ("preprocess", "train-vae", "embed"),
    "train-predictor": ("preprocess", "embed", "train-forecaster"),
    "evaluate": ("preprocess", "embed", "train-forecaster", "train-predictor"),
    "interpret": ("preprocess", "train-vae", "embed"),
    "report": ("evaluate",),
}

SECTIONS = {
    "synth": ("seed", "data", "synth"),
    "preprocess": ("seed", "data", "graph", "split_ratios", "p", "q"),
    "train-vae": ("seed", "vae"),
    "embed": (),
    "train-forecaster": ("seed", "forecaster", "p", "q", "split_ratios"),
    "train-predictor": ("seed", "predictor", "p", "q", "split_ratios"),
    "evaluate": ("horizons", "predictor"),
    "interpret": ("interpret",),
    "report": ("horizons", "report"),
}


class MissingDependency(RuntimeError):
    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage {stage!r} needs stage {missing!r}, which has not been run")
        self.stage, self.missing = stage, missing


def _versions() -> dict:
    import torch

    return {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__,
            "vibrancy": __version__}


def stage_dir(cfg: dict, stage: str) -> Path:
    return out_root(cfg) / stage


def read_manifest(cfg: dict, stage: str) -> dict | None:
    path = stage_dir(cfg, stage) / "manifest.json"
    return read_json(path) if path.exists() else None


def _deps(cfg: dict, stage: str) -> tuple[str, ...]:
    deps = DEPENDS[stage]
    if cfg["data"]["source"] == "files":
        deps = tuple(d for d in deps if d != "synth")
    return deps


def run_stage(stage: str, cfg: dict, force: bool = False) -> str:
    """Run one stage; returns ``"ran"`` or ``"skipped"``."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    inputs = {}
    for dep in _deps(cfg, stage):
        m = read_manifest(cfg, dep)
        if m is None:
            raise MissingDependency(stage, dep)
        inputs[dep] = m["outputs_hash"]
    key = stable_hash({"stage": stage, "config": {s: cfg[s] for s in SECTIONS[stage]}, "inputs": inputs,
                       "version": __version__})
    sdir = stage_dir(cfg, stage)
    old = read_manifest(cfg, stage)
    if not force and old is not None and old.get("key") == key and tree_sha256(sdir) == old.get("outputs_hash"):
        log.info("stage %s up to date", stage)
        return "skipped"
    if sdir.exists():
        shutil.rmtree(sdir)
    sdir.mkdir(parents=True)
    t0 = time.perf_counter()
    extra = _RUNNERS[stage](cfg, sdir) or {}
    log.info("stage %s finished in %.1fs", stage, time.perf_counter() - t0)
    manifest = {
        "stage": stage,
        "key": key,
        "inputs": inputs,
        "seed": stage_seed(cfg["seed"], stage),
        "versions": _versions(),
        "outputs_hash": tree_sha256(sdir),
        **extra,
    }
    write_json(sdir / "manifest.json", manifest)
    return "ran"


def run_all(cfg: dict, stages=STAGES, force: bool = False) -> dict[str, str]:
    out = {}
    for s in stages:
        if s == "synth" and cfg["data"]["source"] == "files":
            continue
        out[s] = run_stage(s, cfg, force=force)
    return out


# -- loaders ---------------------------------------------------------------------

def load_raw(cfg: dict) -> tuple[GridSeries, TrafficSeries, dict]:
    """Raw grid, traffic and side information (coords, truth) from synth or files."""
    if cfg["data"]["source"] == "synth":
        d = stage_dir(cfg, "synth")
        grid, gmeta = read_f32(d / "grid.f32")
        traffic, tmeta = read_f32(d / "traffic.f32")
        truth = read_json(d / "truth.json")
        ids, coords = read_coords_csv(d / "coords.csv")
        side = {"coords": coords, "truth": truth, "sensor_ids": ids}
    else:
        dc = cfg["data"]
        if not dc["grid_path"] or not dc["traffic_path"]:
            raise ConfigError("data.source 'files' needs data.grid_path and data.traffic_path")
        grid, gmeta = read_f32(dc["grid_path"])
        traffic, tmeta = read_f32(dc["traffic_path"])
        side = {"truth": None}
        ids = None
        if dc.get("coords_path"):
            ids, side["coords"] = read_coords_csv(dc["coords_path"])
        side["sensor_ids"] = ids
    if grid.ndim == 3:
        grid = grid[..., None]
    start = np.datetime64(gmeta.get("start_time", "2017-01-01T00:00"), "h")
    if int(gmeta.get("step_hours", 1)) != 1 or int(tmeta.get("step_hours", 1)) != 1:
        raise ConfigError("only hourly data (step_hours == 1) is supported")
    if traffic.shape[0] != grid.shape[0]:
        raise ConfigError(f"grid has {grid.shape[0]} steps but traffic has {traffic.shape[0]}")
    ts = start + np.arange(grid.shape[0]) * np.timedelta64(1, "h")
    g = GridSeries(grid.astype(np.float64), ts)
    tr = TrafficSeries(traffic.astype(np.float64), ts, list(side["sensor_ids"] or []))
    side["bbox"] = gmeta.get("bbox")
    return g, tr, side


def load_prepared(cfg: dict) -> dict:
    d = stage_dir(cfg, "preprocess")
    grid, gmeta = read_f32(d / "grid.f32")
    mask, _ = read_f32(d / "mask.f32")
    traffic, _ = read_f32(d / "traffic.f32")
    split = read_json(d / "split.json")
    n_s = traffic.shape[1]
    graph = read_edges_csv(d / "edges.csv", n_s)
    ts = np.datetime64(gmeta["start_time"], "h") + np.arange(grid.shape[0]) * np.timedelta64(1, "h")
    return {"grid": grid, "mask": mask, "traffic": traffic, "split": split, "graph": graph,
            "timestamps": ts, "T": grid.shape[0], "test_start": split["test_start"]}


def _mask(prep: dict):
    from ..data import ActivityMask

    return ActivityMask(prep["mask"])


def _span(anchors, p: int, q: int) -> list[int]:
    a = np.asarray(anchors)
    return [int(a.min() - p + 1), int(a.max() + q + 1)]


# -- stages ----------------------------------------------------------------------

def _stage_synth(cfg: dict, sdir: Path) -> dict:
    from ..synth import SynthConfig, synth_city

    scfg = SynthConfig.from_dict(cfg["synth"])
    seed = stage_seed(cfg["seed"], "synth")
    grid, traffic, meta = synth_city(scfg, seed)
    start = str(grid.timestamps[0])
    write_f32(sdir / "grid.f32", grid.values, start_time=start, step_hours=1)
    write_f32(sdir / "traffic.f32", traffic.values, start_time=start, step_hours=1)
    write_f32(sdir / "zones.f32", meta["zones"])
    write_coords_csv(sdir / "coords.csv", meta["sensor_coords"], traffic.sensor_ids)
    write_json(sdir / "truth.json", {
        "zone_names": meta["zone_names"],
        "latent_rank": meta["latent_rank"],
        "line_pairs": [list(p) for p in meta["line_pairs"]],
        "lag": meta["lag"],
        "synth_seed": seed,
        "config": meta["config"],
    })
    return {"T": int(grid.T)}


def _build_graph(cfg: dict, side: dict, n_s: int) -> SensorGraph:
    gc = cfg["graph"]
    kind = gc["kind"]
    coords = side.get("coords")
    if kind == "file":
        if not cfg["data"].get("edges_path"):
            raise ConfigError("graph.kind 'file' needs data.edges_path")
        g = read_edges_csv(cfg["data"]["edges_path"], n_s)
    elif kind == "adjacency":
        truth = side.get("truth") or {}
        pairs = truth.get("line_pairs")
        if pairs is None:
            raise ConfigError("adjacency graph needs line pairs (synthetic data) or use graph.kind 'file'")
        g = build_adjacency_graph([tuple(p) for p in pairs], n_s)
    else:
        if coords is None:
            raise ConfigError(f"{kind} graph needs sensor coordinates (data.coords_path)")
        if kind == "proximity":
            g = build_proximity_graph(coords, min(gc["k"], n_s - 1))
        else:
            dist = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
            np.fill_diagonal(dist, np.inf)
            g = build_distance_graph(dist, gc["sigma"], gc["threshold"])
    if gc.get("symmetrize"):
        g = g.symmetrized()
    return g


def _stage_preprocess(cfg: dict, sdir: Path) -> dict:
    raw, traffic, side = load_raw(cfg)
    T = raw.T
    ratios = cfg["split_ratios"]
    b = test_start(T, ratios)
    stats_range = (0, b) if cfg["data"]["stats_range"] == "train" else (0, T)
    seed = stage_seed(cfg["seed"], "preprocess")

    missing = np.isnan(raw.values)
    stats = compute_cell_stats(raw, stats_range)
    filled = impute_missing(raw, missing, stats)
    mask = derive_mask(filled, stats_range)
    norm = normalize_grid(filled, stats).values * mask.mask[None, :, :, None]
    tvals = impute_traffic(traffic.values)

    snap = split_dataset(T, ratios, seed)
    win = split_windows(T, cfg["p"], cfg["q"], ratios, seed)
    graph = _build_graph(cfg, side, traffic.n_sensors)

    start = str(raw.timestamps[0])
    write_f32(sdir / "grid.f32", norm, start_time=start, step_hours=1, normalized=True, bbox=side.get("bbox"))
    write_f32(sdir / "mask.f32", mask.mask)
    write_f32(sdir / "cell_mean.f32", stats.mean)
    write_f32(sdir / "cell_std.f32", stats.std)
    write_f32(sdir / "traffic.f32", tvals, start_time=start, step_hours=1)
    write_edges_csv(sdir / "edges.csv", graph)
    if side.get("coords") is not None:
        write_coords_csv(sdir / "coords.csv", side["coords"], traffic.sensor_ids)
    write_json(sdir / "split.json", {
        "T": T,
        "test_start": b,
        "snapshots": {k: getattr(snap, k).tolist() for k in ("train", "val", "test")},
        "windows": {k: getattr(win, k).tolist() for k in ("train", "val", "test")},
    })
    return {"index_ranges": {"fit": list(stats_range)}, "test_start": b, "T": T,
            "n_missing_imputed": int(missing.sum()), "n_active_cells": mask.n_active}


def _stage_train_vae(cfg: dict, sdir: Path) -> dict:
    from ..vae import VAEConfig, save_vae, train_vae

    prep = load_prepared(cfg)
    grid = prep["grid"]
    _, H, W, n_c = grid.shape
    vcfg = VAEConfig.from_dict({**cfg["vae"], "height": H, "width": W, "n_channels": n_c,
                                "seed": stage_seed(cfg["seed"], "train-vae")})
    snaps = prep["split"]["snapshots"]
    model, hist = train_vae(grid, _mask(prep), snaps["train"], snaps["val"], vcfg)
    save_vae(sdir / "checkpoint", model, best_epoch=hist.best_epoch)
    write_json(sdir / "history.json", {"train_total": hist.train_total, "val_total": hist.val_total,
                                       "val_recon": hist.val_recon, "best_epoch": hist.best_epoch})
    used = snaps["train"] + snaps["val"]
    return {"index_ranges": {"fit": [min(used), max(used) + 1]}, "test_start": prep["test_start"],
            "best_val_recon": hist.val_recon[hist.best_epoch]}


def _stage_embed(cfg: dict, sdir: Path) -> dict:
    from ..vae import embed_series, load_vae

    prep = load_prepared(cfg)
    vae = load_vae(stage_dir(cfg, "train-vae") / "checkpoint")
    E = embed_series(prep["grid"], vae)
    write_f32(sdir / "embeddings.f32", E, start_time=str(prep["timestamps"][0]), step_hours=1)
    return {"index_ranges": {"inference": [0, prep["T"]]}}


def _stage_train_forecaster(cfg: dict, sdir: Path) -> dict:
    from ..checkpoint import state_checksum
    from ..forecaster import (ForecasterConfig, forecast_cache, horizon_mse, persistence_mse,
                              save_forecaster, train_forecaster)
    from ..vae import load_vae

    prep = load_prepared(cfg)
    vae = load_vae(stage_dir(cfg, "train-vae") / "checkpoint")
    E, _ = read_f32(stage_dir(cfg, "embed") / "embeddings.f32")
    win = prep["split"]["windows"]
    fcfg = ForecasterConfig.from_dict({**cfg["forecaster"], "latent_dim": E.shape[1], "p": cfg["p"],
                                       "q": cfg["q"], "seed": stage_seed(cfg["seed"], "train-forecaster")})
    before = state_checksum(vae)
    mask = _mask(prep)
    model, hist = train_forecaster(E, prep["grid"], mask, win["train"], win["val"], vae, fcfg)
    after = state_checksum(vae)
    save_forecaster(sdir / "checkpoint", model, best_epoch=hist.best_epoch)
    F = forecast_cache(model, E)
    write_f32(sdir / "forecasts.f32", F, start_time=str(prep["timestamps"][0]), step_hours=1,
              first_valid=cfg["p"] - 1)
    val = np.asarray(win["val"])
    metrics = {
        "val_forecaster_mse": horizon_mse(model, vae, E, prep["grid"], val, mask).tolist(),
        "val_persistence_mse": persistence_mse(prep["grid"], val, cfg["q"], mask).tolist(),
        "vae_checksum_before": before,
        "vae_checksum_after": after,
    }
    write_json(sdir / "metrics.json", metrics)
    write_json(sdir / "history.json", {"train_loss": hist.train_loss, "val_pixel_mse": hist.val_pixel_mse,
                                       "val_embed_mse": hist.val_embed_mse, "best_epoch": hist.best_epoch})
    used = list(win["train"]) + list(win["val"])
    return {"index_ranges": {"fit": _span(used, cfg["p"], cfg["q"])}, "test_start": prep["test_start"],
            "vae_frozen": before == after}


def predictor_data(cfg: dict, prep: dict, purpose: str = "evaluate"):
    """Assemble :class:`PredictorData`; training may swap in true future embeddings."""
    from ..predictors import PredictorData, traffic_scaler
    from ..stve import time_onehot

    E, _ = read_f32(stage_dir(cfg, "embed") / "embeddings.f32")
    F, _ = read_f32(stage_dir(cfg, "train-forecaster") / "forecasts.f32")
    q = cfg["q"]
    ts = prep["timestamps"]
    ext = np.concatenate([ts, ts[-1] + np.arange(1, q + 1) * np.timedelta64(1, "h")])
    mean, std = traffic_scaler(prep["traffic"], np.arange(prep["test_start"]))
    source = "forecaster"
    if purpose == "train" and cfg["predictor"].get("train_on_true_future"):
        T = len(E)
        idx = np.clip(np.arange(T)[:, None] + np.arange(1, q + 1), 0, T - 1)
        F = E[idx]
        source = "ground_truth"
    return PredictorData(prep["traffic"], time_onehot(ext), E, F, mean, std, forecast_source=source)


def predictor_runs(cfg: dict) -> list[tuple[str, str, int]]:
    pc = cfg["predictor"]
    return [(m, v, s) for m in pc["models"] for v in pc["variants"].get(m, []) for s in pc["seeds"]]


def _run_name(model: str, variant: str, seed: int) -> str:
    return f"{model}-{variant}-s{seed}"


def _predictor_cfg(cfg: dict, prep: dict, model: str, variant: str, seed: int, d_v: int):
    from ..predictors import PredictorConfig

    fields = {k: v for k, v in cfg["predictor"].items() if k not in ("models", "variants", "seeds")}
    n_s, n_f = prep["traffic"].shape[1:]
    return PredictorConfig.from_dict({**fields, "model": model, "variant": variant, "n_sensors": n_s,
                                      "n_features": n_f, "p": cfg["p"], "q": cfg["q"], "d_v": d_v,
                                      "seed": stage_seed(cfg["seed"], "train-predictor", seed)})


def _stage_train_predictor(cfg: dict, sdir: Path) -> dict:
    from ..predictors import save_predictor, train_predictor

    prep = load_prepared(cfg)
    data = predictor_data(cfg, prep, purpose="train")
    win = prep["split"]["windows"]
    runs = {}
    for model, variant, seed in predictor_runs(cfg):
        pcfg = _predictor_cfg(cfg, prep, model, variant, seed, data.embeddings.shape[1])
        t0 = time.perf_counter()
        net, hist = train_predictor(data, prep["graph"], pcfg, win["train"], win["val"])
        name = _run_name(model, variant, seed)
        save_predictor(sdir / name, net, best_epoch=hist.best_epoch, run_seed=seed)
        write_json(sdir / name / "history.json", {"train_loss": hist.train_loss, "val_mae": hist.val_mae,
                                                  "best_val_mae": hist.best_val_mae,
                                                  "best_epoch": hist.best_epoch})
        runs[name] = {"best_val_mae": min(hist.val_mae), "best_epoch": hist.best_epoch}
        log.info("trained %s in %.1fs", name, time.perf_counter() - t0)
    used = list(win["train"]) + list(win["val"])
    return {"index_ranges": {"fit": _span(used, cfg["p"], cfg["q"])}, "test_start": prep["test_start"],
            "runs": runs, "forecast_source": data.forecast_source}


def _chunk_abs_errors(model, data, anchors: np.ndarray, q: int) -> np.ndarray:
    from ..predictors import predict, truth

    err = np.abs(predict(model, data, anchors) - truth(data, anchors, q))
    return err.sum(axis=(0, 2, 3))  # [q]


def _parallel_mae(model, data, anchors: np.ndarray, q: int, horizons, workers: int) -> dict[int, float]:
    chunks = [c for c in np.array_split(anchors, max(workers, 1) * 4) if len(c)]
    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        parts = list(pool.map(lambda c: _chunk_abs_errors(model, data, c, q), chunks))
    total = np.zeros(q)
    for part in parts:  # fixed order keeps the sum reproducible
        total += part
    n = len(anchors) * data.traffic.shape[1] * data.traffic.shape[2]
    return {int(h): float(total[h - 1] / n) for h in horizons}


def _stage_evaluate(cfg: dict, sdir: Path) -> dict:
    from ..predictors import load_predictor

    prep = load_prepared(cfg)
    data = predictor_data(cfg, prep, purpose="evaluate")
    if data.forecast_source != "forecaster":
        raise RuntimeError("evaluation must use forecaster outputs for future vibrancy rows")
    test = np.asarray(prep["split"]["windows"]["test"])
    horizons = cfg["horizons"]
    workers = int(cfg["evaluate"].get("workers", 1))
    by_seed = []
    for model, variant, seed in predictor_runs(cfg):
        net = load_predictor(stage_dir(cfg, "train-predictor") / _run_name(model, variant, seed), prep["graph"])
        mae = _parallel_mae(net, data, test, cfg["q"], horizons, workers)
        for h in horizons:
            by_seed.append((model, variant, seed, h, mae[h]))
    write_csv(sdir / "results_by_seed.csv", ["model", "variant", "seed", "horizon", "mae"],
              [(m, v, s, h, repr(x)) for m, v, s, h, x in by_seed])
    rows = []
    for model in cfg["predictor"]["models"]:
        for variant in cfg["predictor"]["variants"].get(model, []):
            for h in horizons:
                vals = [x for m, v, _, hh, x in by_seed if m == model and v == variant and hh == h]
                rows.append((model, variant, h, repr(float(np.median(vals)))))
    write_csv(sdir / "results.csv", ["model", "variant", "horizon", "mae"], rows)
    return {"index_ranges": {"test": [int(test.min() - cfg["p"] + 1), int(test.max() + cfg["q"] + 1)]},
            "test_start": prep["test_start"], "forecast_source": data.forecast_source}


def _stage_interpret(cfg: dict, sdir: Path) -> dict:
    from ..interpret import (decode_component, export_trajectories, fit_pca, loop_closure, project,
                             render_heatmap, select_components)
    from ..vae import load_vae

    ic = cfg["interpret"]
    prep = load_prepared(cfg)
    b = prep["test_start"]
    E, _ = read_f32(stage_dir(cfg, "embed") / "embeddings.f32")
    E_fit, ts_fit = E[:b], prep["timestamps"][:b]
    model = fit_pca(E_fit)
    k = select_components(model, E_fit, ic["threshold"])
    for grouping in ic["groupings"]:
        export_trajectories(E_fit, ts_fit, model, grouping, sdir / grouping.replace("/", "_"),
                            render=ic["render"])
    vae = load_vae(stage_dir(cfg, "train-vae") / "checkpoint")
    mask = _mask(prep)
    decoded = {}
    for idx in range(min(ic["components"], len(model.components))):
        for alpha in ic["alphas"]:
            img = decode_component(model, idx, alpha, mask, vae)
            tag = f"pc{idx + 1}_decode_alpha{alpha:+g}"
            write_f32(sdir / f"{tag}.f32", img)
            if ic["render"]:
                render_heatmap(sdir / f"{tag}.png", img, title=tag)
            decoded[tag] = img
    gap, diam = loop_closure(project(E_fit, model, 2), ts_fit)
    summary = {
        "n_components_at_threshold": k,
        "threshold": ic["threshold"],
        "explained_variance": model.explained_variance.tolist(),
        "explained_ratio": (model.explained_variance / max(model.total_variance, 1e-300)).tolist(),
        "hour_loop_gap": gap,
        "hour_loop_diameter": diam,
    }
    zones_path = stage_dir(cfg, "synth") / "zones.f32"
    if cfg["data"]["source"] == "synth" and zones_path.exists() and len(ic["alphas"]) >= 2:
        zones, _ = read_f32(zones_path)
        names = read_json(stage_dir(cfg, "synth") / "truth.json")["zone_names"]
        lo, hi = min(ic["alphas"]), max(ic["alphas"])
        diff = np.abs(decoded[f"pc1_decode_alpha{hi:+g}"] - decoded[f"pc1_decode_alpha{lo:+g}"])[..., 0]
        summary["pc1_zone_mean_abs_diff"] = {names[z]: float(diff[zones == z].mean())
                                             for z in range(1, len(names)) if (zones == z).any()}
    write_json(sdir / "summary.json", summary)
    np.savetxt(sdir / "components.csv", model.components, delimiter=",")
    return {"index_ranges": {"fit": [0, b]}, "test_start": b}


def _stage_report(cfg: dict, sdir: Path) -> dict:
    from .report import report, write_report

    table = report([stage_dir(cfg, "evaluate") / "results.csv"])
    write_report(table, sdir, render=cfg["report"]["render"])
    return {}


_RUNNERS = {
    "synth": _stage_synth,
    "preprocess": _stage_preprocess,
    "train-vae": _stage_train_vae,
    "embed": _stage_embed,
    "train-forecaster": _stage_train_forecaster,
    "train-predictor": _stage_train_predictor,
    "evaluate": _stage_evaluate,
    "interpret": _stage_interpret,
    "report": _stage_report,
}
