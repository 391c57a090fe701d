"""Batch command line: one subcommand per pipeline stage, plus ``pipeline`` to chain them.

Every artifact lands in the ``--out`` directory and starts with a provenance
line ``stage=<name> config_hash=<hash> seed=<n>``. Stages read only artifact
files, so each one can be rerun on its own from earlier outputs.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import traceback
from collections import Counter, defaultdict

import numpy as np

from . import imaging, roadmap, scenegen, stabilize, tracking
from .errors import DependencyError, InvalidArgument

log = logging.getLogger("urbanflow")

STAGES = ("gen", "stabilize", "transform", "track", "smooth", "predict-train", "predict-eval", "metrics")
PIPELINE_DEFAULT = "stabilize,transform,track,smooth"

# artifact file names inside the output directory
FRAMES_DIR = "frames"
DETECTIONS_PX = "detections_px.jsonl"
GEOMETRY = "geometry.json"
TRUTH_HOMOGRAPHIES = "homographies_truth.csv"
TRUTH_ROAD = "truth_road.csv"
HOMOGRAPHIES = "homographies.csv"
DETECTIONS_ROAD = "detections_road.jsonl"
TRACKS = "tracks.jsonl"
TRACKS_FILTERED = "tracks_filtered.csv"
TRAJECTORIES = "trajectories.csv"
VEHICLE_RECORDS = "vehicle_records.csv"
METRICS_BINS = "metrics_bins.csv"
METRICS_SUMMARY = "metrics_summary.csv"
METRICS_PIPELINE = "metrics_pipeline.csv"
INTENTION_MODEL = "model_intention.bin"
TRAJECTORY_MODEL = "model_trajectory_{mode}.bin"
EFFECTIVE_CONFIG = "config.effective.txt"
MANIFEST = "manifest.txt"
ERROR_RECORD = "error.json"


def _stab_defaults():
    return {f"stabilize.{f.name}": f.default for f in dataclasses.fields(stabilize.StabilizerConfig)
            if f.name != "seed"}


DEFAULTS = {
    "seed": 0,
    "pipeline.stages": PIPELINE_DEFAULT,
    "gen.n_pairs": 4,
    "gen.pair_spacing_s": 3.0,
    "gen.min_separation_m": 5.0,
    "gen.frames": 200,
    "gen.width": 320,
    "gen.height": 320,
    "gen.meters_per_pixel": 0.25,
    "gen.fps": 30.0,
    "gen.t_start": 4.0,
    "gen.detection_noise_m": 0.2,
    "gen.jitter_translation_px": 10.0,
    "gen.jitter_rotation_deg": 1.0,
    "gen.jitter_perspective": 1e-4,
    "gen.dataset_pairs": 0,
    "gen.split": "0.7,0.1,0.2",
    **_stab_defaults(),
    "track.accel_var": 2.0,
    "track.meas_std": 0.2,
    "track.gate_m": 3.0,
    "track.confirm_hits": 3,
    "track.max_misses": 5,
    "track.init_vel_var": 100.0,
    "predict.modes": "plain,intention,reference",
    "predict.hidden": 64,
    "predict.window": 20,
    "predict.horizon": 30,
    "predict.intention_epochs": 60,
    "predict.intention_batch_size": 32,
    "predict.intention_lr_decay": 0.96,
    "predict.epochs": 30,
    "predict.batch_size": 64,
    "predict.lr": 3e-3,
    "predict.lr_decay": 0.95,
    "predict.stride": 3,
    "predict.folds": 0,
    "predict.eval_stride": 2,
}


# --------------------------------------------------------------------------
# configuration

def _coerce(key, text):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise InvalidArgument(f"config {key}: cannot parse {text!r}") from None
    return text


def parse_config_text(text):
    """Flat ``section.key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"config line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise InvalidArgument(f"config line {n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def effective_config(config_path=None, overrides=()):
    cfg = dict(DEFAULTS)
    if config_path:
        if not os.path.exists(config_path):
            raise InvalidArgument(f"config file not found: {config_path}")
        with open(config_path) as fh:
            cfg.update(parse_config_text(fh.read()))
    for item in overrides:
        if "=" not in item:
            raise InvalidArgument(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise InvalidArgument(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def config_text(cfg):
    return "".join(f"{k}={cfg[k]!r}\n" if isinstance(cfg[k], float) else f"{k}={cfg[k]}\n"
                   for k in sorted(cfg))


def config_hash(cfg):
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:16]


def _section(cfg, name):
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def _list(text):
    return [s.strip() for s in str(text).split(",") if s.strip()]


# --------------------------------------------------------------------------
# run context

class Run:
    """Paths and provenance for one invocation."""

    def __init__(self, out_dir, cfg, frames=None, detections=None, geometry=None, model=None):
        self.out = out_dir
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.hash = config_hash(cfg)
        self.frames_dir = frames
        self.detections = detections
        self.geometry = geometry
        self.model = model

    def header(self, stage):
        return f"stage={stage} config_hash={self.hash} seed={self.seed}"

    def path(self, name):
        return os.path.join(self.out, name)

    def need(self, path):
        if not os.path.exists(path):
            raise DependencyError(path)
        return path


# --------------------------------------------------------------------------
# stages

def _jitter(cfg):
    return scenegen.JitterModel(max_translation=cfg["gen.jitter_translation_px"],
                                max_rotation_deg=cfg["gen.jitter_rotation_deg"],
                                max_perspective=cfg["gen.jitter_perspective"])


def write_homography_table(path, homographies, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(stabilize.LOG_COLUMNS[:9])
        for k, h in enumerate(homographies):
            w.writerow([k, *(repr(float(v)) for v in imaging.normalize_homography(h).ravel()[:8])])


def stage_gen(run: Run):
    g = _section(run.cfg, "gen")
    world = scenegen.gen_world(run.seed, g["n_pairs"], pair_spacing_s=g["pair_spacing_s"],
                               min_separation_m=g["min_separation_m"] or None)
    res = scenegen.render_frames(world, _jitter(run.cfg), dims=(g["width"], g["height"]),
                                 meters_per_pixel=g["meters_per_pixel"], n_frames=g["frames"],
                                 fps=g["fps"], t_start=g["t_start"],
                                 detection_noise_m=g["detection_noise_m"])
    hdr = run.header("gen")
    frames_dir = run.path(FRAMES_DIR)
    os.makedirs(frames_dir, exist_ok=True)
    for k, f in enumerate(res.frames):
        imaging.write_pgm(os.path.join(frames_dir, f"frame_{k:05d}.pgm"), f, comment=hdr)
    scenegen.write_detections(run.path(DETECTIONS_PX), res.detections, hdr)
    geo = scenegen.road_geometry_json(world, res.width, res.height, res.meters_per_pixel)
    roadmap.write_road_geometry(run.path(GEOMETRY), {"provenance": hdr, **geo})
    write_homography_table(run.path(TRUTH_HOMOGRAPHIES), res.homographies, hdr)

    rf = roadmap.road_frame_from_json(geo)
    with open(run.path(TRUTH_ROAD), "w", newline="") as fh:
        fh.write(f"# {hdr}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("vehicle_id", "frame", "x_m", "y_m"))
        for v in world.vehicles:
            for k, t in enumerate(res.times):
                xy, _, present = v.state_at(t)
                if not present[0]:
                    continue
                px = scenegen.world_to_px(xy, res.width, res.height, res.meters_per_pixel)
                x_m, y_m, amb = rf.to_road(px)
                if not amb[0]:
                    w.writerow((v.vehicle_id, k, repr(float(x_m[0])), repr(float(y_m[0]))))

    if g["dataset_pairs"] > 0:
        ratios = tuple(float(r) for r in _list(g["split"]))
        data_world = scenegen.gen_world(run.seed + 1, g["dataset_pairs"])
        scenegen.gen_pairs_dataset(data_world, ratios, out_dir=run.out, header=hdr)
    log.info("gen: %d frames, %d detections", len(res.frames), len(res.detections))


def _stab_config(run):
    s = _section(run.cfg, "stabilize")
    return stabilize.StabilizerConfig(seed=run.seed, **s)


def stage_stabilize(run: Run):
    frames_dir = run.need(run.frames_dir or run.path(FRAMES_DIR))
    frames = imaging.read_frame_dir(frames_dir)
    if not frames:
        raise DependencyError(os.path.join(frames_dir, "*.pgm"))
    res = stabilize.stabilize_stream(frames, _stab_config(run))
    stabilize.write_homography_log(run.path(HOMOGRAPHIES), res.frames, run.header("stabilize"))
    log.info("stabilize: %d frames, %d alignments", len(frames), res.alignment_count)


def _read_jsonl(path):
    with open(path) as fh:
        return [json.loads(ln) for ln in fh if ln.strip() and not ln.startswith("#")]


def stage_transform(run: Run):
    """Stabilize detection pixels, mask them to the road frame, convert to road metres."""
    det_path = run.need(run.detections or run.path(DETECTIONS_PX))
    homs = stabilize.read_homography_log(run.need(run.path(HOMOGRAPHIES)))
    rf = roadmap.read_road_geometry(run.need(run.geometry or run.path(GEOMETRY)))
    out = []
    dropped = 0
    for d in _read_jsonl(det_path):
        h = homs.get(int(d["frame"]))
        if h is None:
            raise DependencyError(f"{run.path(HOMOGRAPHIES)} (frame {d['frame']})")
        x_m, y_m, amb = roadmap.transform_points([[d["x_px"], d["y_px"]]], h, rf)
        if amb[0]:
            dropped += 1
            continue
        out.append(tracking.Measurement(int(d["frame"]), (x_m[0], y_m[0]), d.get("length_m", 4.5),
                                        d.get("width_m", 1.8), d.get("score", 1.0), d.get("vehicle_id")))
    out.sort(key=lambda m: m.frame)
    tracking.write_detections(run.path(DETECTIONS_ROAD), out, run.header("transform"))
    log.info("transform: %d detections, %d outside the road frame", len(out), dropped)


def _kalman(run):
    t = _section(run.cfg, "track")
    fps = run.cfg["gen.fps"]
    model = tracking.KalmanModel.constant_velocity(1.0 / fps, t["accel_var"], t["meas_std"])
    tcfg = tracking.TrackerConfig(t["gate_m"], t["confirm_hits"], t["max_misses"], t["init_vel_var"])
    return model, tcfg


def stage_track(run: Run):
    dets = tracking.read_detections(run.need(run.path(DETECTIONS_ROAD)))
    model, tcfg = _kalman(run)
    tracks = tracking.run_tracker(dets, model, tcfg)
    hdr = run.header("track")
    tracking.write_track_histories(run.path(TRACKS), tracks, hdr)
    rows = [r for t in tracks if t.confirmed_at is not None for r in tracking.trajectory_rows(t)]
    tracking.write_trajectories(run.path(TRACKS_FILTERED), rows, hdr)
    log.info("track: %d tracks, %d confirmed", len(tracks),
             sum(t.confirmed_at is not None for t in tracks))


def stage_smooth(run: Run):
    tracks = tracking.read_track_histories(run.need(run.path(TRACKS)))
    rf = roadmap.read_road_geometry(run.need(run.geometry or run.path(GEOMETRY)))
    model, _ = _kalman(run)
    rows = []
    for t in tracks:
        if t.confirmed_at is None or len(t.history) < 2:
            continue
        sm = tracking.rts_smooth(t, model)
        rows.extend(tracking.trajectory_rows(t, sm.x, rf))
    hdr = run.header("smooth")
    tracking.write_trajectories(run.path(TRAJECTORIES), rows, hdr)
    records = []
    for r in rows:
        tid, frame, x, y, sec, lane, length, width = r[:8]
        pos = roadmap.RoadPosition(x, y, sec, lane, False)
        records.append((roadmap.VehicleRecord(tid, frame, pos, length, width),
                        {"vx": r[8], "vy": r[9], "heading_rad": r[10]}))
    roadmap.write_vehicle_records(run.path(VEHICLE_RECORDS), records, hdr,
                                  extra_columns=("vx", "vy", "heading_rad"))
    log.info("smooth: %d rows", len(rows))


def _predict_modes(run):
    from .predict.models import MODES
    modes = _list(run.cfg["predict.modes"])
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise InvalidArgument(f"unknown predict modes {bad}")
    return modes


def _model_path(run, mode):
    return run.path(TRAJECTORY_MODEL.format(mode=mode))


def stage_predict_train(run: Run):
    from .predict import data, models, train

    p = _section(run.cfg, "predict")
    records = data.read_dataset(run.need(run.path("pairs_train.jsonl")))
    cfg = train.AblationConfig(
        hidden=p["hidden"], window=p["window"], horizon=p["horizon"],
        intention=train.TrainConfig(lr=p["lr"], epochs=p["intention_epochs"], seed=run.seed,
                                    batch_size=p["intention_batch_size"],
                                    lr_decay=p["intention_lr_decay"]),
        trajectory=train.TrainConfig(lr=p["lr"], epochs=p["epochs"], seed=run.seed,
                                     batch_size=p["batch_size"], lr_decay=p["lr_decay"],
                                     stride=p["stride"]),
        folds=p["folds"])
    trained = train.train_ablation(records, _predict_modes(run), cfg)
    hdr = run.header("predict-train")
    models.save_model(run.path(INTENTION_MODEL), trained.intention, provenance=hdr)
    for mode, net in trained.trajectory.items():
        models.save_model(_model_path(run, mode), net, provenance=hdr)
    log.info("predict-train: saved intention and %s", ", ".join(trained.trajectory))


def stage_predict_eval(run: Run):
    from .predict import data, evaluate, models

    records = data.read_dataset(run.need(run.path("pairs_test.jsonl")))
    intention = models.load_model(run.need(run.path(INTENTION_MODEL)))
    if run.model:
        nets = [models.load_model(run.need(run.model))]
    else:
        nets = [models.load_model(run.need(_model_path(run, m))) for m in _predict_modes(run)]
    stride = run.cfg["predict.eval_stride"]
    hdr = run.header("predict-eval")
    summary = []
    with open(run.path(METRICS_BINS), "w", newline="") as fh:
        fh.write(f"# {hdr}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model",) + evaluate.METRIC_COLUMNS)
        for net in nets:
            bins = evaluate.evaluate(records, intention, net, stride=stride)
            for b in bins:
                w.writerow((net.mode,) + evaluate.metric_row(b))
            summary.append((net.mode,) + evaluate.overall(bins) + (sum(b.n_windows for b in bins),))
    with open(run.path(METRICS_SUMMARY), "w", newline="") as fh:
        fh.write(f"# {hdr}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model", "n_windows", "trajectory_mse_m2", "direction_accuracy", "yield_accuracy",
                    "relative_improvement"))
        prev = None
        for mode, acc_d, acc_y, mse, n in summary:
            gain = "" if prev is None or mse is None else repr(1.0 - mse / prev)
            w.writerow((mode, n, repr(mse), repr(acc_d), repr(acc_y), gain))
            prev = mse
    log.info("predict-eval: %s", ", ".join(f"{m}={mse:.3f}" for m, _, _, mse, _ in summary))


def _read_truth(path):
    truth = defaultdict(dict)
    with open(path, newline="") as fh:
        for row in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            truth[int(row["vehicle_id"])][int(row["frame"])] = (float(row["x_m"]), float(row["y_m"]))
    return truth


def pipeline_metrics(out_dir):
    """Stabilization and tracking errors against generator truth.

    Returns a list of ``(metric, track_id, value)`` rows; a row is present
    only when the files it needs exist.
    """
    p = lambda name: os.path.join(out_dir, name)  # noqa: E731
    rows = []
    if os.path.exists(p(TRUTH_HOMOGRAPHIES)) and os.path.exists(p(HOMOGRAPHIES)):
        est = stabilize.read_homography_log(p(HOMOGRAPHIES))
        ref = stabilize.read_homography_log(p(TRUTH_HOMOGRAPHIES))
        frames = sorted(os.listdir(p(FRAMES_DIR))) if os.path.isdir(p(FRAMES_DIR)) else []
        if frames:
            h, w = imaging.read_pgm(os.path.join(p(FRAMES_DIR), frames[0])).shape
        else:
            w, h = DEFAULTS["gen.width"], DEFAULTS["gen.height"]
        errs = [imaging.corner_error(est[k], ref[k], w, h) for k in sorted(est) if k in ref]
        rows.append(("stabilization_corner_error_px", "", float(np.mean(errs))))
    if os.path.exists(p(TRUTH_ROAD)) and os.path.exists(p(TRACKS)) and os.path.exists(p(TRAJECTORIES)):
        truth = _read_truth(p(TRUTH_ROAD))
        tracks = tracking.read_track_histories(p(TRACKS))
        smoothed = tracking.read_trajectories(p(TRAJECTORIES))
        detections = [e.measurement for t in tracks for e in t.history if e.measurement is not None]
        if os.path.exists(p(DETECTIONS_ROAD)):
            detections = tracking.read_detections(p(DETECTIONS_ROAD))
            # identity_report matches measurements by object, so rebuild them from the tracks
            owned = {(e.measurement.frame, tuple(e.measurement.z)): e.measurement
                     for t in tracks for e in t.history if e.measurement is not None}
            detections = [owned.get((m.frame, tuple(m.z)), m) for m in detections]
        rep = tracking.identity_report(tracks, detections)
        rows.append(("identity_switches", "", rep.identity_switches))
        rows.append(("confirmed_tracks", "", sum(t.confirmed_at is not None for t in tracks)))
        worst = 0.0
        for t in tracks:
            if t.confirmed_at is None or t.track_id not in smoothed:
                continue
            ids = Counter(e.measurement.truth_id for e in t.history if e.measurement is not None)
            vid = ids.most_common(1)[0][0]
            s = smoothed[t.track_id]
            sq = [(x - truth[vid][f][0]) ** 2 + (y - truth[vid][f][1]) ** 2
                  for f, x, y in zip(s["frame"], s["x_m"], s["y_m"]) if f in truth.get(vid, {})]
            if sq:
                rms = math.sqrt(float(np.mean(sq)))
                worst = max(worst, rms)
                rows.append(("track_rms_m", t.track_id, rms))
        rows.append(("max_track_rms_m", "", worst))
    return rows


def stage_metrics(run: Run):
    rows = pipeline_metrics(run.out)
    with open(run.path(METRICS_PIPELINE), "w", newline="") as fh:
        fh.write(f"# {run.header('metrics')}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "track_id", "value"))
        for name, tid, value in rows:
            w.writerow((name, tid, repr(value) if isinstance(value, float) else value))
    log.info("metrics: %d rows", len(rows))


STAGE_FUNCS = {
    "gen": stage_gen,
    "stabilize": stage_stabilize,
    "transform": stage_transform,
    "track": stage_track,
    "smooth": stage_smooth,
    "predict-train": stage_predict_train,
    "predict-eval": stage_predict_eval,
    "metrics": stage_metrics,
}


# --------------------------------------------------------------------------
# entry point

def _parser():
    ap = argparse.ArgumentParser(prog="urbanflow", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline",):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--out", required=True, help="artifact directory")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry")
        sp.add_argument("--frames", help="directory of PGM frames")
        sp.add_argument("--detections", help="pixel detections (JSON lines)")
        sp.add_argument("--geometry", help="road geometry JSON")
        sp.add_argument("--model", help="trajectory model to evaluate")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "pipeline":
            sp.add_argument("--stage", action="append", choices=STAGES,
                            help="stage to run (repeatable); default from pipeline.stages")
    return ap


def _write_error(out_dir, stage, exc):
    record = {"stage": stage, "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, DependencyError):
        record["missing"] = exc.missing
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, ERROR_RECORD), "w") as fh:
            json.dump(record, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError:
        pass
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = effective_config(args.config, overrides)
        if args.command == "pipeline":
            stages = args.stage if args.stage is not None else _list(cfg["pipeline.stages"])
            unknown = [s for s in stages if s not in STAGES]
            if unknown:
                raise InvalidArgument(f"unknown stages {unknown}")
            stages = [s for s in STAGES if s in stages]   # canonical order
        else:
            stages = [args.command]
        for path in (args.frames, args.detections, args.geometry, args.model):
            if path and not os.path.exists(path):
                raise InvalidArgument(f"input path does not exist: {path}")
        os.makedirs(args.out, exist_ok=True)
        stale = os.path.join(args.out, ERROR_RECORD)
        if os.path.exists(stale):
            os.remove(stale)
        run = Run(args.out, cfg, args.frames, args.detections, args.geometry, args.model)
        with open(run.path(EFFECTIVE_CONFIG), "w") as fh:
            fh.write(f"# {run.header(args.command)}\n")
            fh.write(config_text(cfg))
        with open(run.path(MANIFEST), "w") as fh:
            fh.write(f"# {run.header(args.command)}\n")
            for stage in stages:
                STAGE_FUNCS[stage](run)
                fh.write(f"{stage}\n")
                fh.flush()
    except Exception as exc:  # every failure must leave an error record
        log.debug("%s", traceback.format_exc())
        _write_error(args.out, stage, exc)
        return 2 if isinstance(exc, DependencyError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
