"""Command line entry point: synth, train-matcher, train-lifter, infer, eval, plot.

Exit codes: 2 for configuration or schema errors, 3 for numeric failures
during training, 4 for checkpoint or architecture mismatches.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import lifter as lf
from . import matcher as mt
from . import metrics
from .diffcore import CheckpointError
from .geometry import CalibrationError, Rig
from .scene_forge import (
    BONES,
    FrameSample,
    InvalidConfig,
    SchemaError,
    SynthConfig,
    check_against_rig,
    generate_scene_frames,
    generate_track,
    iter_detections,
    load_track,
    make_rig,
    save_detections,
    save_track,
)

log = logging.getLogger("posegraph")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_ARTIFACT = 2, 3, 4


class ConfigError(ValueError):
    pass


class ArtifactMismatch(ValueError):
    pass


# ---------------------------------------------------------------- config


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    return doc


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: must be an object")
    return sec


def _dataclass_from(cls, data: dict, where: str, **overrides):
    known = {f.name for f in fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"{where}.{k}: unknown field")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _path_field(args, cfg: dict, attr: str, key: str, required: bool = True) -> Path | None:
    value = getattr(args, attr, None) or cfg.get(key)
    if value is None:
        if required:
            raise ConfigError(f"{key}: required (flag --{attr.replace('_', '-')} or config key)")
        return None
    p = Path(value)
    if not p.exists():
        raise ConfigError(f"{key}: path does not exist: {value}")
    return p


def _load_rig(path: Path) -> Rig:
    try:
        return Rig.load(path)
    except CalibrationError as exc:
        raise ConfigError(f"calibration: {exc}") from None


def _canonical(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def config_hash(doc) -> str:
    return hashlib.sha256(_canonical(doc)).hexdigest()


def blob_hash(path: Path) -> str:
    """Content hash computed the way git names blobs."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out: Path, command: str, effective: dict, inputs: list[Path], outputs: list[Path]) -> None:
    doc = {
        "command": command,
        "config": effective,
        "config_hash": config_hash(effective),
        "inputs": {str(p): blob_hash(p) for p in inputs},
        "outputs": {p.name: blob_hash(p) for p in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_curve(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_metric"])
        for step, loss, val in history:
            w.writerow([step, repr(float(loss)), repr(float(val))])


def _track_files(path: Path) -> list[Path]:
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    if not files:
        raise ConfigError(f"tracks: no .jsonl files in {path}")
    return files


def _load_tracks(files: list[Path], rig: Rig):
    tracks = []
    for f in files:
        t = load_track(f)
        check_against_rig(t.frames, rig)
        tracks.append(t)
    return tracks


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    synth = _section(cfg, "synth")
    seed = args.seed if args.seed is not None else synth.get("seed", cfg.get("seed", 0))
    try:
        sc = SynthConfig.from_dict({**synth, "seed": seed})
    except InvalidConfig as exc:
        raise ConfigError(f"synth.{exc}") from None
    n_tracks = args.tracks if args.tracks is not None else cfg.get("tracks", 20)
    n_frames = args.frames if args.frames is not None else cfg.get("frames", 200)
    n_eval = args.eval_frames if args.eval_frames is not None else cfg.get("eval_frames", 100)
    persons = tuple(cfg.get("persons", (1, 10)))
    for name, v in (("tracks", n_tracks), ("frames", n_frames), ("eval_frames", n_eval)):
        if not isinstance(v, int) or v < 0:
            raise ConfigError(f"{name}: must be a non-negative integer")
    if len(persons) != 2 or not 1 <= persons[0] <= persons[1]:
        raise ConfigError("persons: must be [min, max] with 1 <= min <= max")
    if args.calibration or cfg.get("calibration"):
        rig = _load_rig(_path_field(args, cfg, "calibration", "calibration"))
    else:
        rig = make_rig(sc)
    out = Path(args.out)
    (out / "tracks").mkdir(parents=True, exist_ok=True)
    rig.save(out / "calib.json")
    for i in range(n_tracks):
        track, _ = generate_track(sc, n_frames, rig, track_index=i)
        save_track(track, out / "tracks" / f"track_{i:03d}.jsonl")
    outputs = [out / "calib.json"]
    if n_eval:
        frames = generate_scene_frames(sc, rig, n_eval, persons, stream=1)
        save_detections(frames, out / "eval.jsonl")
        clean = SynthConfig.from_dict({**sc.to_dict(), "pixel_noise": 0.0, "drop_prob": 0.0, "occlusion_prob": 0.0})
        save_detections(generate_scene_frames(clean, rig, n_eval, persons, stream=2), out / "eval_noiseless.jsonl")
        outputs += [out / "eval.jsonl", out / "eval_noiseless.jsonl"]
    effective = {"synth": sc.to_dict(), "tracks": n_tracks, "frames": n_frames, "eval_frames": n_eval, "persons": list(persons)}
    write_manifest(out, "synth", effective, [], outputs)
    print(f"synth: {len(rig)} cameras, {n_tracks} tracks x {n_frames} frames, {n_eval} evaluation frames -> {out}")
    return 0


# ---------------------------------------------------------------- training


def cmd_train_matcher(args) -> int:
    cfg = load_config(args.config)
    rig_path = _path_field(args, cfg, "calibration", "calibration")
    rig = _load_rig(rig_path)
    files = _track_files(_path_field(args, cfg, "tracks", "tracks"))
    tracks = _load_tracks(files, rig)
    sec = dict(_section(cfg, "matcher"))
    threshold = float(sec.pop("threshold", 0.5))
    arch_sec = sec.pop("arch", None)
    tc = _dataclass_from(mt.MatcherTrainConfig, sec, "matcher", seed=args.seed if args.seed is not None else cfg.get("seed"))
    nk = tracks[0].frames[0].gt[0][1].shape[0] if tracks[0].frames[0].gt else None
    if nk is None:
        nk = next(d.n_keypoints for t in tracks for f in t.frames for _, _, d in f.detections())
    if arch_sec is not None:
        arch = _dataclass_from(mt.MatcherArch, {**arch_sec, "n_keypoints": nk, "n_cameras": len(rig)}, "matcher.arch")
    else:
        arch = mt.matcher_profile(args.profile or cfg.get("profile", "paper"), nk, len(rig))
    net, result = mt.train_matcher(tracks, rig, arch, tc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / "matcher.json")
    (out / "matcher.threshold.json").write_text(json.dumps({"threshold": threshold}) + "\n")
    write_curve(out / "matcher_curve.csv", result.history)
    effective = {"matcher": {**vars(tc), "threshold": threshold}, "arch": arch.to_dict()}
    write_manifest(out, "train-matcher", effective, [rig_path, *files],
                   [out / "matcher.json", out / "matcher_curve.csv"])
    print(f"train-matcher: {result.steps} steps, best validation edge accuracy {result.best_metric:.4f}")
    return 0


def cmd_train_lifter(args) -> int:
    cfg = load_config(args.config)
    rig_path = _path_field(args, cfg, "calibration", "calibration")
    rig = _load_rig(rig_path)
    files = _track_files(_path_field(args, cfg, "tracks", "tracks"))
    tracks = _load_tracks(files, rig)
    sec = dict(_section(cfg, "lifter"))
    hidden = sec.pop("hidden", None)
    tc = _dataclass_from(lf.LifterTrainConfig, sec, "lifter", seed=args.seed if args.seed is not None else cfg.get("seed"))
    profile = args.profile or cfg.get("profile", "paper")
    if profile not in lf.PROFILES:
        raise ConfigError(f"profile: unknown profile {profile!r}")
    layers = tuple(hidden) if hidden is not None else lf.PROFILES[profile]
    nk = next(d.n_keypoints for t in tracks for f in t.frames for _, _, d in f.detections())
    arch = lf.LifterArch(nk, len(rig), layers)
    net, result = lf.train_lifter(tracks, rig, arch, tc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / "lifter.json")
    write_curve(out / "lifter_curve.csv", result.history)
    effective = {"lifter": vars(tc), "arch": arch.to_dict()}
    write_manifest(out, "train-lifter", effective, [rig_path, *files], [out / "lifter.json", out / "lifter_curve.csv"])
    print(
        f"train-lifter: {result.steps} steps, validation loss {result.initial_val_loss:.4g} -> {result.best_val_loss:.4g}"
    )
    return 0


# ---------------------------------------------------------------- inference


def _load_matcher(path: Path, rig: Rig):
    net = mt.MatcherNet.load(path)
    if net.arch.n_cameras != len(rig):
        raise ArtifactMismatch(f"{path}: matcher built for {net.arch.n_cameras} cameras, calibration has {len(rig)}")
    sidecar = path.with_name(path.stem + ".threshold.json")
    threshold = 0.5
    if sidecar.exists():
        threshold = float(json.loads(sidecar.read_text())["threshold"])
    return net, threshold


def _load_lifter(path: Path, rig: Rig):
    net = lf.LifterNet.load(path)
    if net.arch.n_cameras != len(rig):
        raise ArtifactMismatch(f"{path}: lifter built for {net.arch.n_cameras} cameras, calibration has {len(rig)}")
    return net


def infer_frame(sample: FrameSample, rig: Rig, matcher, threshold: float, lifter=None):
    """Persons of one frame plus (t_pp, t_3Dg) in seconds.

    Without a lifter, joints come from the triangulation baseline and joints
    seen by fewer than two views are NaN.
    """
    views, index = {}, {}
    for c, dets in sample.views.items():
        keep = [i for i, d in enumerate(dets) if not d.is_empty()]
        views[c] = [dets[i] for i in keep]
        for k, i in enumerate(keep):
            index[(c, k)] = i
    if not index:
        return [], 0.0, 0.0
    view = FrameSample(sample.frame_id, views)
    t0 = time.perf_counter()
    graph = mt.build_graph(view, rig)
    if matcher is not None and graph.n_edges:
        matcher.score(graph)
    else:
        graph.scores = np.zeros(graph.n_edges)
    groups = mt.group_views(graph, threshold)
    t1 = time.perf_counter()
    members = [[view.views[c][i] for c, i in g.members] for g in groups]
    if lifter is not None:
        X = np.stack([lf.build_lift_input(m, rig) for m in members])
        poses = lf.lift_many(lifter, X)
    else:
        poses = np.stack([lf.triangulation_baseline(m, rig) for m in members])
    t2 = time.perf_counter()
    persons = []
    for g, pose in zip(groups, poses):
        persons.append({
            "group": [[c, index[(c, i)]] for c, i in g.members],
            "confidence": g.confidence,
            "joints": [[float(v) for v in j] if np.isfinite(j).all() else None for j in pose],
        })
    return persons, t1 - t0, t2 - t1


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    rig_path = _path_field(args, cfg, "calibration", "calibration")
    rig = _load_rig(rig_path)
    det_path = _path_field(args, cfg, "detections", "detections")
    m_path = _path_field(args, cfg, "matcher", "matcher")
    baseline = args.baseline or cfg.get("baseline", False)
    l_path = None if baseline else _path_field(args, cfg, "lifter", "lifter")
    matcher, threshold = _load_matcher(m_path, rig)
    if args.threshold is not None:
        threshold = args.threshold
    lifter = None if baseline else _load_lifter(l_path, rig)
    nk = matcher.arch.n_keypoints
    if lifter is not None and lifter.arch.n_keypoints != nk:
        raise ArtifactMismatch(f"matcher expects {nk} keypoints, lifter {lifter.arch.n_keypoints}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t_pp, t_3dg, counts = [], [], []
    with open(out / "predictions.jsonl", "w") as fh:
        for sample in iter_detections(det_path, nk):
            check_against_rig([sample], rig)
            persons, a, b = infer_frame(sample, rig, matcher, threshold, lifter)
            t_pp.append(a)
            t_3dg.append(b)
            counts.append(len(persons))
            fh.write(json.dumps({"frame_id": sample.frame_id, "persons": persons}, separators=(",", ":")) + "\n")
    timing = metrics.timing_report(t_pp, t_3dg, counts)
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    print(f"infer: {len(counts)} frames, {sum(counts)} persons, t_pp {timing['t_pp']:.2f} ms, t_3Dg {timing['t_3Dg']:.2f} ms")
    return 0


# ---------------------------------------------------------------- eval / plot


def load_predictions(path: Path) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(doc, dict) or "frame_id" not in doc or not isinstance(doc.get("persons"), list):
                raise SchemaError("expected {frame_id, persons}", lineno)
            for p, person in enumerate(doc["persons"]):
                if not isinstance(person, dict) or not isinstance(person.get("joints"), list):
                    raise SchemaError("person needs a joints list", lineno, f"persons[{p}]")
            out.append(doc)
    return out


def _pose_array(joints) -> np.ndarray:
    return np.array([[np.nan] * 3 if j is None else j for j in joints], dtype=np.float64)


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    pred_path = _path_field(args, cfg, "pred", "predictions")
    gt_path = _path_field(args, cfg, "gt", "ground_truth")
    thresholds = args.thresholds or cfg.get("thresholds") or metrics.DEFAULT_THRESHOLDS
    try:
        ec = metrics.EvalConfig(tuple(thresholds))
    except ValueError as exc:
        raise ConfigError(f"thresholds: {exc}") from None
    preds = {d["frame_id"]: d for d in load_predictions(pred_path)}
    frames = []
    for sample in iter_detections(gt_path):
        if sample.gt is None:
            raise SchemaError("ground-truth file has a frame without gt", None, f"frame {sample.frame_id}")
        gt = [np.asarray(j) for _, j in sample.gt]
        doc = preds.get(sample.frame_id, {"persons": []})
        poses = [_pose_array(p["joints"]) for p in doc["persons"]]
        for p in poses:
            if gt and p.shape != gt[0].shape:
                raise ConfigError(
                    f"predictions: frame {sample.frame_id} has {p.shape[0]} joints, ground truth has {gt[0].shape[0]}"
                )
        conf = [p.get("confidence") for p in doc["persons"]]
        frames.append((poses, conf, gt))
    timing = json.loads(Path(args.timing).read_text()) if args.timing else None
    report = metrics.evaluate(frames, ec, timing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    sys.stdout.write(report.to_csv())
    return 0


_VIEWS = (("top (x, y)", 0, 1), ("front (x, z)", 0, 2), ("side (y, z)", 1, 2))


def render_svg(poses: list[np.ndarray], title: str, panel: int = 240) -> str:
    bones = BONES.get(poses[0].shape[0], ()) if poses else ()
    pts = np.concatenate(poses) if poses else np.zeros((0, 3))
    pts = pts[np.isfinite(pts).all(axis=1)]
    lo = pts.min(axis=0) if len(pts) else np.zeros(3)
    hi = pts.max(axis=0) if len(pts) else np.ones(3)
    span = float(max((hi - lo).max(), 1.0)) * 1.1
    mid = (lo + hi) / 2
    pad = 20
    width = len(_VIEWS) * (panel + pad) + pad
    height = panel + 2 * pad + 10
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{pad}" y="14" font-size="12">{title}</text>',
    ]
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
    for v, (name, a, b) in enumerate(_VIEWS):
        ox = pad + v * (panel + pad)
        oy = pad + 10
        parts.append(f'<rect x="{ox}" y="{oy}" width="{panel}" height="{panel}" fill="none" stroke="#999"/>')
        parts.append(f'<text x="{ox + 4}" y="{oy + 12}" font-size="10">{name}</text>')

        def to_px(p):
            x = ox + panel / 2 + (p[a] - mid[a]) / span * panel
            y = oy + panel / 2 - (p[b] - mid[b]) / span * panel
            return x, y

        for n, pose in enumerate(poses):
            col = colors[n % len(colors)]
            for i, j in bones:
                if np.isfinite(pose[i]).all() and np.isfinite(pose[j]).all():
                    (x1, y1), (x2, y2) = to_px(pose[i]), to_px(pose[j])
                    parts.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" stroke="{col}"/>')
            for p in pose:
                if np.isfinite(p).all():
                    x, y = to_px(p)
                    parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="2" fill="{col}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    if bool(args.pred) == bool(args.dataset):
        raise ConfigError("plot: give exactly one of --pred or --dataset")
    if args.pred:
        src = Path(args.pred)
        if not src.exists():
            raise ConfigError(f"pred: path does not exist: {src}")
        frames = [(d["frame_id"], [_pose_array(p["joints"]) for p in d["persons"]]) for d in load_predictions(src)]
    else:
        src = Path(args.dataset)
        if not src.exists():
            raise ConfigError(f"dataset: path does not exist: {src}")
        frames = [(s.frame_id, [np.asarray(j) for _, j in (s.gt or [])]) for s in iter_detections(src)]
    if args.frames is not None:
        frames = frames[: args.frames]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "joints.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "person", "joint", "x", "y", "z"])
        for fid, poses in frames:
            for n, pose in enumerate(poses):
                for k, p in enumerate(pose):
                    w.writerow([fid, n, k, *(f"{v:.3f}" if np.isfinite(v) else "" for v in p)])
            (out / f"frame_{fid}.svg").write_text(render_svg(poses, f"frame {fid}: {len(poses)} persons"))
    print(f"plot: {len(frames)} frames -> {out}")
    return 0


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--profile", choices=("paper", "small"), help="network size profile")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="posegraph", description="Multi-camera multi-person 3D pose estimation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic rig, tracks and evaluation frames")
    p.add_argument("--tracks", type=int, help="number of single-person tracks")
    p.add_argument("--frames", type=int, help="frames per track")
    p.add_argument("--eval-frames", type=int, help="multi-person evaluation frames")
    p.add_argument("--calibration", help="use this rig instead of generating one")
    p.set_defaults(func=cmd_synth)

    for name, func in (("train-matcher", cmd_train_matcher), ("train-lifter", cmd_train_lifter)):
        p = sub.add_parser(name, parents=[common], help=f"train the {name.split('-')[1]}")
        p.add_argument("--calibration", help="rig JSON")
        p.add_argument("--tracks", help="directory of track .jsonl files")
        p.set_defaults(func=func)

    p = sub.add_parser("infer", parents=[common], help="group views and lift every frame")
    p.add_argument("--calibration", help="rig JSON")
    p.add_argument("--detections", help="detections .jsonl")
    p.add_argument("--matcher", help="matcher checkpoint")
    p.add_argument("--lifter", help="lifter checkpoint")
    p.add_argument("--threshold", type=float, help="grouping threshold (default: checkpoint sidecar or 0.5)")
    p.add_argument("--baseline", action="store_true", help="use triangulation instead of the lifter")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--pred", help="predictions .jsonl")
    p.add_argument("--gt", help="frames .jsonl with ground truth")
    p.add_argument("--thresholds", type=float, nargs="+", help="distance thresholds in mm")
    p.add_argument("--timing", help="timing JSON to include in the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", parents=[common], help="SVG skeleton views and a joint CSV")
    p.add_argument("--pred", help="predictions .jsonl")
    p.add_argument("--dataset", help="frames .jsonl with ground truth")
    p.add_argument("--frames", type=int, help="number of frames to draw")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidConfig, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (mt.NonFiniteLoss, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, ArtifactMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (mt.InsufficientTracks, lf.EmptyGroup) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
