"""Stage-wise command line over the pipeline.

Each subcommand consumes the previous stage's files from one data
directory and writes its own: synth renders a scene into clouds/ and
labels/, align adds poses.txt and align.npz, autolabel adds scores/,
boxes.csv, tracks.csv and corr/, train adds ckpt/, segment and cascade
write pred/, eval writes report.json. Stages stamp their outputs with a
hash of the configuration slice they depend on and are skipped while the
stamp still matches; --force reruns a stage in place. Failures print a
machine-readable JSON record on stderr and exit nonzero.
"""

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .cascade import cascade_segment
from .cloud import (project_to_range_image, read_kitti_bin, read_labels,
                    read_poses, write_labels, write_ply, write_poses)
from .config import (MODES, PSEUDO_SCHEMES, SCENES, _format_value,
                     _section_keys, config_text, load_config, reference_doc,
                     save_config)
from .correspond import read_correspondence_cache, write_correspondence_cache
from .dynamics import DynamicScoreField
from .embed import EmbeddingNet, load_checkpoint, save_checkpoint
from .evalkit import ConfusionMatrix, map_clusters_to_classes, miou, \
    write_report
from .preprocess import AlignedSequence, align_sequence
from .synth import CLASS_NAMES, demo_scene, intersection_scene, \
    render_sequence
from .tracking import write_boxes_csv, write_tracks_csv
from .train import (TrainingData, autolabel_sequence, predict_point_labels,
                    train_model)

log = logging.getLogger(__name__)

# which config keys each stage's outputs depend on; entries name a whole
# section or one dotted key, and every stage inherits its upstream's slice
_STAGE_KEYS = {
    "synth": ["data", "synth", "run.seed"],
    "align": ["ground", "outliers", "icp", "align"],
    "autolabel": ["dynamics", "tracking", "correspond", "train.intervals",
                  "cascade.seg_intervals"],
    "train": ["train", "run.seed"],
    "segment": [],
    "cascade": ["cascade", "run.seed"],
    "eval": [],
}
_STAGE_CHAIN = {
    "synth": ("synth",),
    "align": ("synth", "align"),
    "autolabel": ("synth", "align", "autolabel"),
    "train": ("synth", "align", "autolabel", "train"),
    "segment": ("synth", "align", "autolabel", "train", "segment"),
    "cascade": ("synth", "align", "autolabel", "cascade"),
    "eval": ("synth", "align", "autolabel", "train", "segment", "cascade",
             "eval"),
}

_PALETTE = np.array(
    [(96, 96, 96), (214, 39, 40), (31, 119, 180), (44, 160, 44),
     (255, 127, 14), (148, 103, 189), (140, 86, 75), (227, 119, 194),
     (188, 189, 34), (23, 190, 207)], dtype=np.uint8)


class StageError(Exception):
    """Pipeline failure the operator can act on."""

    def __init__(self, stage, message, missing=()):
        super().__init__(message)
        self.stage = stage
        self.missing = list(missing)


def _stage_hash(cfg, stage):
    lines = []
    for st in _STAGE_CHAIN[stage]:
        for entry in _STAGE_KEYS[st]:
            if "." in entry:
                name, key = entry.split(".", 1)
                keys = [key]
            else:
                name, keys = entry, _section_keys(cfg, entry)
            section = getattr(cfg, name)
            for key in keys:
                lines.append(f"{name}.{key}="
                             f"{_format_value(getattr(section, key))}")
    return hashlib.sha256("\n".join(sorted(set(lines))).encode()) \
        .hexdigest()[:12]


def _stamp_path(root, stage):
    return os.path.join(root, ".stages", stage + ".json")


def _write_stamp(root, stage, cfg, outputs):
    os.makedirs(os.path.join(root, ".stages"), exist_ok=True)
    with open(_stamp_path(root, stage), "w") as fh:
        json.dump({"stage": stage, "hash": _stage_hash(cfg, stage),
                   "outputs": list(outputs)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stage_current(root, stage, cfg):
    path = _stamp_path(root, stage)
    if not os.path.exists(path):
        return False
    try:
        with open(path) as fh:
            stamp = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return False
    if stamp.get("hash") != _stage_hash(cfg, stage):
        return False
    return all(os.path.exists(os.path.join(root, out))
               for out in stamp.get("outputs", []))


def _require_stage(root, needed, stage, cfg):
    if _stage_current(root, needed, cfg):
        return
    if os.path.exists(_stamp_path(root, needed)):
        why = "is stale for the current configuration"
    else:
        why = "has not run"
    raise StageError(stage, f"upstream stage '{needed}' {why}; "
                     f"run `stseg {needed} {root}` first", missing=[needed])


def _skip_if_current(root, stage, cfg, force):
    if not force and _stage_current(root, stage, cfg):
        log.info("%s: up to date, skipping (use --force to rerun)", stage)
        return True
    return False


def _cloud_paths(root, stage):
    paths = sorted(glob.glob(os.path.join(root, "clouds", "*.bin")))
    if not paths:
        raise StageError(stage, f"no point clouds in {root}/clouds; run "
                         f"`stseg synth {root}` first or point at a dataset",
                         missing=["synth"])
    return paths


def _load_clouds(root, stage):
    return [read_kitti_bin(p, t)
            for t, p in enumerate(_cloud_paths(root, stage))]


def _load_aligned(root, clouds, stage, cfg):
    _require_stage(root, "align", stage, cfg)
    z = np.load(os.path.join(root, "align.npz"))
    poses = read_poses(os.path.join(root, "poses.txt"))
    n = len(clouds)
    if len(poses) != n or z["excluded"].shape != (n,):
        raise StageError(stage, "align outputs do not match the cloud "
                         "count; re-run `stseg align`", missing=["align"])
    grounds = [z[f"ground_{t:06d}"] for t in range(n)]
    keeps = [z[f"keep_{t:06d}"] for t in range(n)]
    return AlignedSequence(clouds, grounds, keeps, poses, z["excluded"],
                           z["icp_residuals"])


def _pair_universe(n_frames, cfg):
    ks = sorted(set(cfg.train.intervals) | set(cfg.cascade.seg_intervals))
    pairs = []
    for k in ks:
        if 1 <= k <= n_frames - 1:
            pairs.extend((t, t - k) for t in range(k, n_frames))
    return pairs


class _CachedData(TrainingData):
    """TrainingData over on-disk caches: every correspondence set must
    already sit in csets, there is nothing to rebuild from."""

    def correspondences(self, a, b):
        if (a, b) not in self.csets and self.tracks is None:
            raise StageError(getattr(self, "stage_name", "train"),
                             f"correspondence pair ({a}, {b}) is not "
                             "cached; re-run `stseg autolabel`",
                             missing=["autolabel"])
        return super().correspondences(a, b)


def _load_training_data(root, cfg, stage):
    clouds = _load_clouds(root, stage)
    aligned = _load_aligned(root, clouds, stage, cfg)
    _require_stage(root, "autolabel", stage, cfg)
    n = len(clouds)
    score_fields = []
    groups = []
    for t in range(n):
        z = np.load(os.path.join(root, "scores", f"{t:06d}.npz"))
        groups.append(z["groups"])
        if bool(z["excluded"]):
            score_fields.append(None)
        else:
            score_fields.append(DynamicScoreField(
                t, z["scores"], z["point_ids"], int(z["m_window"]),
                float(z["lam"])))
    images = [project_to_range_image(c, cfg.data.h, cfg.data.w, cfg.fov())
              for c in clouds]
    data = _CachedData(clouds, images, cfg.data.h, cfg.data.w, cfg.fov(),
                       aligned, None, None, groups,
                       correspond_cfg=cfg.correspond_config(),
                       score_fields=score_fields)
    data.stage_name = stage
    for path in sorted(glob.glob(os.path.join(root, "corr", "*.corr"))):
        cset = read_correspondence_cache(path)
        data.csets[(cset.frame_a, cset.frame_b)] = cset
    return data


def cmd_synth(root, cfg, args):
    if _skip_if_current(root, "synth", cfg, args.force):
        return
    sensor = cfg.sensor()
    if cfg.synth.scene == "demo":
        spec = demo_scene(seed=cfg.run.seed, n_cars=cfg.synth.n_cars,
                          n_pedestrians=cfg.synth.n_pedestrians,
                          n_buildings=cfg.synth.n_buildings, sensor=sensor)
    else:
        spec = intersection_scene(seed=cfg.run.seed, sensor=sensor)
    seq = render_sequence(spec, cfg.synth.frames, seed=cfg.run.seed)
    seq.save(root)
    n_points = sum(len(f.cloud) for f in seq.frames)
    log.info("synth: %d frames of scene '%s', %d points", len(seq),
             cfg.synth.scene, n_points)
    _write_stamp(root, "synth", cfg,
                 ["clouds", "labels", "gt_poses.txt", "meta.json"])


def cmd_align(root, cfg, args):
    clouds = _load_clouds(root, "align")
    if _skip_if_current(root, "align", cfg, args.force):
        return
    aligned = align_sequence(clouds, cfg.align_config())
    write_poses(os.path.join(root, "poses.txt"), aligned.poses)
    arrays = {"excluded": aligned.excluded,
              "icp_residuals": aligned.icp_residuals}
    for t in range(len(clouds)):
        arrays[f"ground_{t:06d}"] = aligned.ground_masks[t]
        arrays[f"keep_{t:06d}"] = aligned.keep_masks[t]
    np.savez_compressed(os.path.join(root, "align.npz"), **arrays)
    log.info("align: %d frames, %d excluded", len(clouds),
             int(aligned.excluded.sum()))
    _write_stamp(root, "align", cfg, ["poses.txt", "align.npz"])


def cmd_autolabel(root, cfg, args):
    clouds = _load_clouds(root, "autolabel")
    aligned = _load_aligned(root, clouds, "autolabel", cfg)
    if _skip_if_current(root, "autolabel", cfg, args.force):
        return
    data = autolabel_sequence(clouds, cfg.data.h, cfg.data.w, cfg.fov(),
                              dyn_cfg=cfg.dynamics_config(),
                              track_cfg=cfg.tracking_config(),
                              corr_cfg=cfg.correspond_config(),
                              aligned=aligned)
    os.makedirs(os.path.join(root, "scores"), exist_ok=True)
    dyn = cfg.dynamics
    for t in range(len(clouds)):
        fld = data.score_fields[t]
        np.savez_compressed(
            os.path.join(root, "scores", f"{t:06d}.npz"),
            scores=fld.scores if fld else np.empty(0),
            point_ids=fld.point_ids if fld else np.empty(0, np.int64),
            groups=data.groups[t], excluded=fld is None,
            m_window=dyn.m_window, lam=dyn.lam)
    write_boxes_csv(os.path.join(root, "boxes.csv"),
                    dict(enumerate(data.boxes_per_frame)))
    write_tracks_csv(os.path.join(root, "tracks.csv"), data.tracks)
    os.makedirs(os.path.join(root, "corr"), exist_ok=True)
    pairs = _pair_universe(len(clouds), cfg)
    for a, b in pairs:
        cset = data.correspondences(a, b)
        write_correspondence_cache(
            os.path.join(root, "corr", f"{a:06d}_{b:06d}.corr"), cset)
    n_boxes = sum(len(bs) for bs in data.boxes_per_frame)
    log.info("autolabel: %d tracked boxes over %d tracks, %d pair caches",
             n_boxes, len(data.tracks), len(pairs))
    _write_stamp(root, "autolabel", cfg,
                 ["scores", "boxes.csv", "tracks.csv", "corr"])


def cmd_train(root, cfg, args):
    if _skip_if_current(root, "train", cfg, args.force):
        return
    mode = cfg.train.mode
    if mode == "baseline":
        # the baseline objective never touches motion labels or pair caches
        clouds = _load_clouds(root, "train")
        images = [project_to_range_image(c, cfg.data.h, cfg.data.w,
                                         cfg.fov()) for c in clouds]
        data = TrainingData(clouds, images, cfg.data.h, cfg.data.w,
                            cfg.fov())
    else:
        data = _load_training_data(root, cfg, "train")
    ckpt_dir = os.path.join(root, "ckpt")
    os.makedirs(ckpt_dir, exist_ok=True)
    net = EmbeddingNet(c_in=5, hidden=cfg.train.hidden,
                       c_out=cfg.train.features, head="unit",
                       seed=cfg.run.seed)
    res = train_model(data, cfg.train_config(
        log_path=os.path.join(ckpt_dir, "train_log.jsonl")), net=net)
    save_checkpoint(os.path.join(ckpt_dir, "model.ckpt"), res.net,
                    extra={"centroids": res.centroids.tolist(),
                           "mode": mode,
                           "n_clusters": cfg.train.n_clusters})
    with open(os.path.join(ckpt_dir, "train_log.json"), "w") as fh:
        json.dump(res.records, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("train: mode %s, final loss %.4f", mode,
             res.records[-1]["total"])
    _write_stamp(root, "train", cfg,
                 ["ckpt/model.ckpt", "ckpt/train_log.json"])


def _write_predictions(root, cfg, clouds, labels_per_frame, meta, ply,
                       stage):
    pred_dir = os.path.join(root, "pred")
    os.makedirs(pred_dir, exist_ok=True)
    for t, labels in enumerate(labels_per_frame):
        write_labels(os.path.join(pred_dir, f"{t:06d}.label"), labels)
        if ply:
            colors = _PALETTE[np.asarray(labels) % len(_PALETTE)]
            write_ply(os.path.join(pred_dir, f"{t:06d}.ply"), clouds[t],
                      colors)
    with open(os.path.join(pred_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    # segment and cascade compete for pred/; the loser's stamp must not
    # keep claiming it
    sibling = "cascade" if stage == "segment" else "segment"
    if os.path.exists(_stamp_path(root, sibling)):
        os.remove(_stamp_path(root, sibling))


def cmd_segment(root, cfg, args):
    _require_stage(root, "train", "segment", cfg)
    if _skip_if_current(root, "segment", cfg, args.force):
        return
    net, extra = load_checkpoint(os.path.join(root, "ckpt", "model.ckpt"))
    centroids = np.asarray(extra["centroids"], dtype=np.float64)
    clouds = _load_clouds(root, "segment")

    def one(cloud):
        return predict_point_labels(net, centroids, cloud, cfg.data.h,
                                    cfg.data.w, cfg.fov())

    if cfg.run.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.run.threads) as pool:
            labels = list(pool.map(one, clouds))
    else:
        labels = [one(c) for c in clouds]
    _write_predictions(root, cfg, clouds, labels,
                       {"task": "clusters", "n_pred": len(centroids),
                        "mode": extra.get("mode", "")}, args.ply, "segment")
    log.info("segment: %d frames labeled into %d clusters", len(clouds),
             len(centroids))
    _write_stamp(root, "segment", cfg, ["pred/meta.json"])


def cmd_cascade(root, cfg, args):
    if _skip_if_current(root, "cascade", cfg, args.force):
        return
    data = _load_training_data(root, cfg, "cascade")
    res = cascade_segment(data, cfg.cascade_config())
    ckpt_dir = os.path.join(root, "ckpt")
    os.makedirs(ckpt_dir, exist_ok=True)
    save_checkpoint(os.path.join(ckpt_dir, "cascade_fgbg.ckpt"),
                    res.fgbg.net, extra={"records": res.fgbg.records})
    if res.seg is not None:
        save_checkpoint(os.path.join(ckpt_dir, "cascade_seg.ckpt"),
                        res.seg.net,
                        extra={"centroids": res.seg.centroids.tolist()})
    _write_predictions(root, cfg, data.clouds, res.labels,
                       {"task": "cascade", "n_pred": 3,
                        "pseudo": cfg.cascade.pseudo}, args.ply, "cascade")
    n_fg = sum(int(m.sum()) for m in res.fg_masks)
    log.info("cascade: %s pseudo-labels, %d foreground points",
             cfg.cascade.pseudo, n_fg)
    _write_stamp(root, "cascade", cfg, ["pred/meta.json"])


# truth remap for scoring 3-class cascade output: ground and structure
# fold into background, vehicles and pedestrians keep their own class
_CASCADE_LUT = np.array([0, 0, 0, 1, 2], dtype=np.int64)
_CASCADE_NAMES = ["background", "vehicle", "person"]


def cmd_eval(root, cfg, args):
    pred_dir = os.path.join(root, args.pred_dir)
    pred_paths = sorted(glob.glob(os.path.join(pred_dir, "*.label")))
    if not pred_paths:
        raise StageError("eval", f"no predictions in {pred_dir}; run "
                         f"`stseg segment {root}` or `stseg cascade {root}` "
                         "first", missing=["segment"])
    truth_paths = sorted(glob.glob(os.path.join(root, "labels", "*.label")))
    if len(truth_paths) != len(pred_paths):
        raise StageError("eval", f"{len(pred_paths)} prediction files but "
                         f"{len(truth_paths)} ground-truth files in "
                         f"{root}/labels", missing=["synth"])
    meta_path = os.path.join(pred_dir, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        task = meta["task"]
        n_pred = int(meta["n_pred"])
    else:
        # bare label files (e.g. scoring the ground truth against itself)
        meta = {}
        task = "clusters"
        n_pred = 1 + max(int(read_labels(p)[0].max()) for p in pred_paths)
    n_true = len(CLASS_NAMES)
    if task == "cascade":
        conf = ConfusionMatrix(n_pred, 3)
        names = _CASCADE_NAMES
    else:
        conf = ConfusionMatrix(n_pred, n_true)
        names = [CLASS_NAMES[i] for i in range(n_true)]
    for pp, tp in zip(pred_paths, truth_paths):
        pred = read_labels(pp)[0]
        truth = read_labels(tp)[0]
        if task == "cascade":
            keep = truth != 0
            conf.accumulate(pred[keep], _CASCADE_LUT[truth[keep]])
        else:
            conf.accumulate(pred, truth, ignore=(0,))
    mapping = map_clusters_to_classes(conf)
    iou, mean = miou(conf, mapping)
    # the stage hash skips run.threads: scores do not depend on it
    extra = {"task": task, "n_frames": len(pred_paths),
             "config_hash": _stage_hash(cfg, "eval")}
    if "mode" in meta:
        extra["mode"] = meta["mode"]
    if "pseudo" in meta:
        extra["pseudo"] = meta["pseudo"]
    report = write_report(os.path.join(root, "report.json"), iou, mean,
                          mapping, conf, class_names=names, extra=extra)
    per_class = ", ".join(f"{n} {v:.3f}" for n, v in
                          zip(names, iou) if not np.isnan(v))
    print(f"mIoU {mean:.4f} over {len(pred_paths)} frames ({per_class})")
    _write_stamp(root, "eval", cfg, ["report.json"])
    return report


def cmd_config(root, cfg, args):
    if args.reference:
        print(reference_doc())
        return
    if args.write:
        save_config(args.write, cfg)
        log.info("config: wrote %s", args.write)
        return
    print(config_text(cfg), end="")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="INI configuration file")
    common.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", dest="overrides",
                        help="override one configuration value "
                             "(repeatable)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--threads", type=int, help="override run.threads")
    common.add_argument("--force", action="store_true",
                        help="rerun the stage even if its outputs are "
                             "current")
    common.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")

    parser = argparse.ArgumentParser(
        prog="stseg",
        description="Unsupervised LiDAR segmentation pipeline, one stage "
                    "per subcommand; run them in order: synth, align, "
                    "autolabel, train, segment (or cascade), eval.")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, help_, **kw):
        p = sub.add_parser(name, parents=[common], help=help_,
                           description=help_, **kw)
        p.add_argument("dir", nargs="?", default=None,
                       help="data directory (default: data.root from the "
                            "config)")
        return p

    p = stage("synth", "render a synthetic scene into the data directory")
    p.add_argument("--scene", choices=SCENES, help="override synth.scene")
    p.add_argument("--frames", type=int, help="override synth.frames")
    stage("align", "estimate ego-motion and filter the clouds")
    stage("autolabel", "score motion, track objects, cache correspondences")
    p = stage("train", "fit the embedding model on cached labels")
    p.add_argument("--mode", choices=MODES, help="override train.mode")
    p = stage("segment", "write per-point cluster predictions")
    p.add_argument("--ply", action="store_true",
                   help="also write colored PLY point clouds")
    p = stage("eval", "score predictions against ground truth")
    p.add_argument("--pred-dir", default="pred",
                   help="prediction directory relative to the data "
                        "directory (default: pred)")
    p = stage("cascade", "foreground cascade: pseudo-labels, binary model, "
                         "foreground clustering")
    p.add_argument("--pseudo", choices=PSEUDO_SCHEMES,
                   help="override cascade.pseudo")
    p.add_argument("--ply", action="store_true",
                   help="also write colored PLY point clouds")
    p = sub.add_parser("config", parents=[common],
                       help="print, write, or document the configuration")
    p.add_argument("--write", metavar="FILE",
                   help="write the effective configuration to FILE")
    p.add_argument("--reference", action="store_true",
                   help="print the generated configuration reference")
    return parser


_COMMANDS = {"synth": cmd_synth, "align": cmd_align,
             "autolabel": cmd_autolabel, "train": cmd_train,
             "segment": cmd_segment, "cascade": cmd_cascade,
             "eval": cmd_eval, "config": cmd_config}


def _error_record(stage, message, missing=()):
    json.dump({"error": str(message), "stage": stage,
               "missing": list(missing)}, sys.stderr, sort_keys=True)
    sys.stderr.write("\n")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    for attr, key in (("scene", "synth.scene"), ("frames", "synth.frames"),
                      ("mode", "train.mode"), ("pseudo", "cascade.pseudo")):
        if getattr(args, attr, None) is not None:
            overrides.append(f"{key}={getattr(args, attr)}")
    try:
        cfg = load_config(args.config, overrides)
    except (ValueError, OSError) as e:
        _error_record(args.command, e)
        return 2
    root = getattr(args, "dir", None) or cfg.data.root
    if args.command != "config" and not root:
        _error_record(args.command,
                      "no data directory given and data.root is unset")
        return 2
    try:
        _COMMANDS[args.command](root, cfg, args)
    except StageError as e:
        _error_record(e.stage, e, e.missing)
        return 3
    except (ValueError, OSError) as e:
        _error_record(args.command, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
