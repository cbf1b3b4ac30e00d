"""Subcommand implementations. Every output lands under the run's ``out`` directory.

Layout::

    out/config.txt                    resolved configuration
    out/dataset/manifest.json         sha256 of every dataset file
    out/dataset/<object>/surface.sset inference sample set
    out/dataset/<object>/<split>/     gt.jsonl plus one RCRP file per scene
    out/models/<object>[/E<dim>]/     key/query models and loss.csv
    out/estimate/                     poses.csv, eval.csv, recall.csv
    out/visualize/                    PPM/PGM dumps
    out/ablate/ablation.csv
    out/timings.log                   wall-clock times (kept out of the CSVs)
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from surfdist.bench.config import RunConfig
from surfdist.bench.report import (EVAL_HEADER, POSE_HEADER, EvalReport, eval_rows, evaluate_estimate,
                                   pose_rows, recall_rows, write_csv)
from surfdist.bench.visualize import embedding_rgb, key_image
from surfdist.correspondence import build_table, dump_table
from surfdist.errors import IoError
from surfdist.geometry.sampling import read_sset, write_sset
from surfdist.oracle import oracle_models
from surfdist.pipeline import as_query_source, estimate_pose
from surfdist.pnm import to_uint8, write_pgm, write_ppm
from surfdist.synthetic import (ObjectSpec, default_camera, make_object, read_crop, read_ground_truth,
                                render_features, sample_scene, write_crop, write_ground_truth)
from surfdist.training import EmbeddingModels, TrainingCrop, train, write_loss_csv

log = logging.getLogger(__name__)

SPLITS = ("train", "test")


class Run:
    """Paths and shared state for one invocation."""

    def __init__(self, cfg: RunConfig, out):
        if not os.path.isdir(out):
            raise IoError(f"output directory does not exist: {out}")
        self.cfg = cfg
        self.out = os.path.abspath(out)
        self.hash = cfg.config_hash()
        self._objects = {}

    def path(self, *parts) -> str:
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def dataset_dir(self, kind, split=None) -> str:
        parts = ["dataset", kind] + ([split] if split else [])
        return os.path.join(self.out, *parts)

    def model_dir(self, kind, embed_dim=None) -> str:
        parts = ["models", kind] + ([f"E{embed_dim}"] if embed_dim else [])
        return os.path.join(self.out, *parts)

    def object(self, kind):
        """Object geometry; the dataset's saved sample set replaces the fresh one when present."""
        if kind not in self._objects:
            obj = make_object(ObjectSpec(kind, self.cfg.object_size), self.cfg.sample_count)
            sset = os.path.join(self.dataset_dir(kind), "surface.sset")
            if os.path.exists(sset):
                obj.surface = read_sset(sset)
            self._objects[kind] = obj
        return self._objects[kind]

    def camera(self):
        return default_camera(self.cfg.crop_size)

    def log_time(self, label, seconds) -> None:
        with open(self.path("timings.log"), "a", encoding="utf-8") as fh:
            fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {label} {seconds:.3f}s\n")

    def write_config(self) -> None:
        with open(self.path("config.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"# config_hash={self.hash}\n{self.cfg.text()}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _seed_tree(seed: int, kinds) -> dict:
    """Independent seeds per (object, split), stable under changes to the object list order."""
    out = {}
    for kind in kinds:
        salt = int.from_bytes(hashlib.sha256(kind.encode()).digest()[:4], "little")
        children = np.random.SeedSequence([seed, salt]).spawn(len(SPLITS))
        out[kind] = dict(zip(SPLITS, children))
    return out


# --- generate --------------------------------------------------------------------------

def cmd_generate(run: Run) -> dict:
    """Render train/test scenes per object and write a manifest of content hashes."""
    cfg = run.cfg
    t0 = time.perf_counter()
    cam = run.camera()
    seeds = _seed_tree(cfg.seed, cfg.object_list)
    for kind in cfg.object_list:
        obj = make_object(ObjectSpec(kind, cfg.object_size), cfg.sample_count)
        run._objects[kind] = obj
        write_sset(obj.surface, run.path("dataset", kind, "surface.sset"))
        for split, count in (("train", cfg.train_scenes), ("test", cfg.test_scenes)):
            rng = np.random.default_rng(seeds[kind][split])
            scenes = []
            for i in range(count):
                scene = sample_scene(obj, cam, rng, max_occluders=cfg.max_occluders)
                write_crop(render_features(scene, obj), run.path("dataset", kind, split, f"{i:06d}.rcrp"))
                scenes.append(scene)
            write_ground_truth(scenes, run.path("dataset", kind, split, "gt.jsonl"))
    manifest = {"config_hash": run.hash, "files": {}}
    root = os.path.join(run.out, "dataset")
    for kind in cfg.object_list:
        for dirpath, _, files in os.walk(os.path.join(root, kind)):
            for name in files:
                full = os.path.join(dirpath, name)
                manifest["files"][os.path.relpath(full, root).replace(os.sep, "/")] = _sha256(full)
    manifest["files"] = dict(sorted(manifest["files"].items()))
    with open(run.path("dataset", "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    run.log_time("generate", time.perf_counter() - t0)
    return manifest


def load_split(run: Run, kind: str, split: str, limit: int | None = None, convert=None):
    """(scenes, crops) of one dataset split; ``convert`` is applied to each crop as it is read."""
    d = run.dataset_dir(kind, split)
    gt = os.path.join(d, "gt.jsonl")
    if not os.path.exists(gt):
        raise IoError(f"dataset split missing: {gt}")
    scenes = read_ground_truth(gt)
    if limit is not None:
        scenes = scenes[:limit]
    convert = convert or (lambda c: c)
    crops = [convert(read_crop(os.path.join(d, f"{i:06d}.rcrp"))) for i in range(len(scenes))]
    return scenes, crops


# --- train -------------------------------------------------------------------------------

def train_object(run: Run, kind: str, embed_dim: int | None = None) -> EmbeddingModels:
    cfg = run.cfg
    tcfg = dataclasses.replace(cfg.train, rng_seed=cfg.train.rng_seed + cfg.seed)
    if embed_dim is not None:
        tcfg = dataclasses.replace(tcfg, embed_dim=embed_dim)
    obj = run.object(kind)
    _, crops = load_split(run, kind, "train", cfg.train_scenes, TrainingCrop.from_crop)
    if not crops:
        raise IoError(f"no training scenes for {kind}")
    t0 = time.perf_counter()
    models, trace = train(crops, obj.surface, tcfg)
    run.log_time(f"train {kind} E={tcfg.embed_dim} steps={len(trace)}", time.perf_counter() - t0)
    d = run.model_dir(kind, embed_dim)
    models.save(d)
    write_loss_csv(trace, os.path.join(d, "loss.csv"), run.hash)
    return models


def cmd_train(run: Run) -> dict:
    return {kind: train_object(run, kind) for kind in run.cfg.object_list}


# --- estimate ----------------------------------------------------------------------------

_WORKER = {}


def _worker_init(state):
    _WORKER.clear()
    _WORKER.update(state)


def _estimate_one(i):
    w = _WORKER
    t0 = time.perf_counter()
    crop, scene = w["crops"][i], w["scenes"][i]
    est = estimate_pose(crop, w["models"], w["obj"].surface, scene.camera, w["pipeline"], seed_offset=i)
    return i, est, time.perf_counter() - t0


def _map_ordered(state, count, threads):
    """Results for scene indices 0..count-1 in order, optionally on a process pool."""
    if threads <= 1 or count <= 1:
        _worker_init(state)
        return [_estimate_one(i) for i in range(count)]
    with ProcessPoolExecutor(max_workers=threads, initializer=_worker_init, initargs=(state,)) as pool:
        return list(pool.map(_estimate_one, range(count)))


def load_models(run: Run, kind: str, embed_dim: int | None = None):
    if run.cfg.oracle:
        return oracle_models(run.object(kind))
    d = run.model_dir(kind, embed_dim)
    if not os.path.exists(os.path.join(d, "models.json")):
        raise IoError(f"no trained models in {d}")
    return EmbeddingModels.load(d)


def estimate_object(run: Run, kind: str, models, pipeline=None, limit=None) -> list:
    cfg = run.cfg
    pipeline = pipeline or dataclasses.replace(cfg.estimate, rng_seed=cfg.estimate.rng_seed + cfg.seed)
    obj = run.object(kind)
    scenes, crops = load_split(run, kind, "test", cfg.test_scenes if limit is None else limit)
    state = {"crops": crops, "scenes": scenes, "models": as_query_source(models), "obj": obj,
             "pipeline": pipeline}
    out = []
    for i, est, secs in _map_ordered(state, len(scenes), cfg.threads):
        out.append(evaluate_estimate(i, kind, est, scenes[i].pose, obj, secs))
    return out


def cmd_estimate(run: Run) -> EvalReport:
    t0 = time.perf_counter()
    results = []
    for kind in run.cfg.object_list:
        results += estimate_object(run, kind, load_models(run, kind))
    report = EvalReport(results, {k: run.object(k).diameter for k in run.cfg.object_list},
                        tuple(run.cfg.threshold_list))
    write_csv(run.path("estimate", "poses.csv"), POSE_HEADER, pose_rows(results), run.hash)
    write_csv(run.path("estimate", "eval.csv"), EVAL_HEADER, eval_rows(report), run.hash)
    header, rows = recall_rows(report)
    write_csv(run.path("estimate", "recall.csv"), header, rows, run.hash)
    for r in results:
        run.log_time(f"estimate {r.object_id} scene {r.scene_id}", r.runtime_s)
    run.log_time("estimate total", time.perf_counter() - t0)
    return report


# --- visualize ---------------------------------------------------------------------------

def cmd_visualize(run: Run) -> list:
    """Query, key and entropy images for one test scene per object."""
    cfg = run.cfg
    written = []
    for kind in cfg.object_list:
        obj = run.object(kind)
        src = as_query_source(load_models(run, kind))
        scenes, crops = load_split(run, kind, "test", cfg.visualize_scene + 1)
        if len(crops) <= cfg.visualize_scene:
            raise IoError(f"test split of {kind} has no scene {cfg.visualize_scene}")
        crop = crops[cfg.visualize_scene]
        base = f"{kind}_scene{cfg.visualize_scene:06d}"
        q = src.query_image(crop, 1)
        paths = [run.path("visualize", f"{base}_query.ppm"), run.path("visualize", f"{base}_keys.ppm"),
                 run.path("visualize", f"{base}_mask.pgm"), run.path("visualize", f"{base}_argmax.pgm"),
                 run.path("visualize", f"{base}_entropy.pgm")]
        write_ppm(paths[0], embedding_rgb(q.queries))
        write_ppm(paths[1], key_image(src.keys, crop.coord_image, crop.full_mask))
        write_pgm(paths[2], to_uint8(q.mask_prob, 0.0, 1.0))
        q_small = src.query_image(crop, cfg.estimate.downscale)
        table = build_table(q_small, src.keys(obj.surface.points), obj.surface, cfg.estimate.table_budget)
        dump_table(table, paths[3], paths[4])
        written += paths
    return written


# --- ablate ------------------------------------------------------------------------------

ABLATION_HEADER_BASE = ["object_id", "embed_dim", "refine", "gamma"]


def cmd_ablate(run: Run) -> list:
    """Recall over the grid embed_dim × refinement × gamma; one row per cell and object.

    ``ablate_scenes`` limits each cell to the first test scenes (0 uses them all).
    """
    cfg = run.cfg
    ths = cfg.threshold_list
    rows = []
    for kind in cfg.ablate_object_list:
        obj = run.object(kind)
        for dim in cfg.ablate_dim_list:
            d = run.model_dir(kind, dim)
            if cfg.oracle:
                models = oracle_models(obj)
            elif os.path.exists(os.path.join(d, "models.json")):
                models = EmbeddingModels.load(d)
            else:
                models = train_object(run, kind, dim)
            for refine in (False, True):
                for gamma in cfg.ablate_gamma_list:
                    pipe = dataclasses.replace(cfg.estimate, refine=refine, gamma=gamma,
                                               rng_seed=cfg.estimate.rng_seed + cfg.seed)
                    res = estimate_object(run, kind, models, pipe, cfg.ablate_scenes or None)
                    rep = EvalReport(res, {kind: obj.diameter}, tuple(ths))
                    rows.append([kind, dim, int(refine), gamma] + [rep.recall[kind][t] for t in ths])
    header = ABLATION_HEADER_BASE + [f"recall@{t:g}" for t in ths]
    write_csv(run.path("ablate", "ablation.csv"), header, rows, run.hash)
    return rows
