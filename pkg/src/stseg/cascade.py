"""Foreground cascade: motion-derived fg/bg pseudo-labels, a binary
per-pixel model, then semantic clustering restricted to the predicted
foreground.

Two pseudo-labeling schemes feed the binary stage. The simple threshold
calls every point with a high motion score foreground, which by
construction misses parked vehicles. The heuristic keeps that dynamic
branch but also inspects static clusters: ones whose bounding box matches
a car footprint resting on the ground plane become UNCERTAIN and are left
out of the binary loss, so the model is free to carry the appearance of
the moving cars onto them instead of being taught they are background.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from .cloud import point_pixels, project_to_range_image
from .cluster import DBSCAN
from .dynamics import fit_box
from .embed import Adam, EmbeddingNet
from .losses import rmse_loss
from .preprocess import fit_plane_lsq
from .train import TrainConfig, predict_point_labels, train_model

log = logging.getLogger(__name__)

BACKGROUND = 0
FOREGROUND = 1
UNCERTAIN = 2


@dataclass
class CascadeConfig:
    pseudo: str = "heuristic"        # or "simple"
    epsilon: float = 0.5             # motion-score cut for the dynamic branch
    cluster_eps: float = 0.8         # static DBSCAN radius, m
    cluster_min_pts: int = 10
    car_length: tuple = (2.5, 6.0)   # m
    car_width: tuple = (1.2, 2.5)
    car_height: tuple = (1.0, 2.2)
    ground_gap: float = 0.3          # |lowest point to plane|, m
    threshold: float = 0.5           # sigmoid decision point
    hidden: int = 16
    epochs: int = 10
    lr: float = 0.05
    seed: int = 0
    # second stage: semantic clustering over predicted foreground
    seg_epochs: int = 16
    seg_steps: int = 20
    seg_intervals: tuple = (1, 2, 3)   # tracks cover short gaps best
    seg_lr: float = 0.05
    seg_hidden: int = 16
    seg_features: int = 32
    seg_beta: float = 3.0              # movers change range; transport must win
    seg_gamma_w: float = 3.0           # push-pull must beat self-labeling
    seg_delta_d: float = 1.9           # two clusters -> near-antipodal means


def simple_threshold_labels(field, epsilon, n_points):
    """Per-point fg/bg labels from the motion score alone.

    Points the score field never touched (ground-filtered ones) count as
    score zero, so epsilon = 0 marks the whole cloud foreground and any
    positive epsilon leaves them background. Never emits UNCERTAIN.
    """
    scores = np.zeros(n_points)
    scores[field.point_ids] = field.scores
    labels = np.full(n_points, BACKGROUND, dtype=np.uint8)
    labels[scores >= epsilon] = FOREGROUND
    return labels


def heuristic_labels(cloud, field, plane, cfg=None):
    """Fg/bg/uncertain labels with parked-car handling.

    Dynamic points (score >= epsilon) are foreground. The remaining scored
    points are DBSCAN-clustered in the cloud's own coordinates; a cluster
    whose box has car-like extents and reaches down to within ground_gap
    of the plane is marked UNCERTAIN, everything else stays background.
    plane is the (normal, d) pair of fit_plane_lsq in the same frame as
    cloud. Deterministic given its inputs.
    """
    cfg = cfg or CascadeConfig()
    labels = np.full(len(cloud), BACKGROUND, dtype=np.uint8)
    dyn = field.scores >= cfg.epsilon
    labels[field.point_ids[dyn]] = FOREGROUND
    static_ids = field.point_ids[~dyn]
    if len(static_ids) < cfg.cluster_min_pts:
        return labels
    sxyz = cloud.xyz[static_ids]
    cl = DBSCAN(eps=cfg.cluster_eps, min_pts=cfg.cluster_min_pts).fit_predict(sxyz)
    normal, d = plane
    for cid in range(cl.max() + 1 if cl.size else 0):
        member = cl == cid
        if int(member.sum()) < 3:
            continue
        box = fit_box(sxyz[member], static_ids[member], cloud.frame_index)
        if not (cfg.car_length[0] <= box.length <= cfg.car_length[1]):
            continue
        if not (cfg.car_width[0] <= box.width <= cfg.car_width[1]):
            continue
        if not (cfg.car_height[0] <= box.height <= cfg.car_height[1]):
            continue
        bottom = float(np.min(sxyz[member] @ normal + d))
        if abs(bottom) > cfg.ground_gap:
            continue
        labels[box.point_ids] = UNCERTAIN
    return labels


def pseudo_fgbg_labels(data, cfg=None):
    """Per-frame pseudo-labels for a TrainingData bundle, by cfg.pseudo.

    Frames without a score field (excluded from alignment) come back all
    background. The heuristic's ground plane is fit per frame on the
    alignment ground mask, in sensor coordinates.
    """
    cfg = cfg or CascadeConfig()
    if cfg.pseudo not in ("simple", "heuristic"):
        raise ValueError(f"unknown pseudo-label scheme {cfg.pseudo!r}")
    out = []
    for t, cloud in enumerate(data.clouds):
        field = data.score_fields[t] if data.score_fields else None
        if field is None:
            out.append(np.full(len(cloud), BACKGROUND, dtype=np.uint8))
            continue
        if cfg.pseudo == "simple":
            out.append(simple_threshold_labels(field, cfg.epsilon, len(cloud)))
        else:
            ground = data.aligned.ground_masks[t]
            plane = fit_plane_lsq(cloud.xyz[ground])
            out.append(heuristic_labels(cloud, field, plane, cfg))
    return out


def _pixel_targets(image, labels):
    """Targets for the valid pixels of one projected frame, read off the
    owning point of each pixel. Second output masks out UNCERTAIN."""
    owner = labels[image.point_index[image.valid]]
    usable = owner != UNCERTAIN
    return owner.astype(np.float64), usable


@dataclass
class FgBgResult:
    net: EmbeddingNet
    records: list


def _fg_iou(net, data, labels, threshold):
    """Training-set foreground IoU of the current model against the
    pseudo-labels, UNCERTAIN pixels excluded. NaN when no pixel is
    foreground on either side."""
    tp = fp = fn = 0
    for t, image in enumerate(data.images):
        fld = net.forward(image)
        probs = fld.features[fld.valid][:, 0]
        target, usable = _pixel_targets(image, labels[t])
        pred = probs[usable] >= threshold
        truth = target[usable] == FOREGROUND
        tp += int(np.sum(pred & truth))
        fp += int(np.sum(pred & ~truth))
        fn += int(np.sum(~pred & truth))
    denom = tp + fp + fn
    return tp / denom if denom else float("nan")


def train_fgbg(data, labels, cfg=None, net=None):
    """Fit the binary foreground model on pseudo-labeled pixels.

    Sigmoid head, RMSE loss against {0, 1} targets; UNCERTAIN pixels never
    enter the loss. One optimizer step per frame per epoch, frames in
    order, so a zero learning rate replays identical losses every epoch.
    Aborts when the usable pixel targets are single-class, since the model
    would collapse to a constant.
    """
    cfg = cfg or CascadeConfig()
    n_fg = n_bg = 0
    for t, image in enumerate(data.images):
        target, usable = _pixel_targets(image, labels[t])
        n_fg += int(np.sum(target[usable] == FOREGROUND))
        n_bg += int(np.sum(target[usable] == BACKGROUND))
    if n_fg == 0 or n_bg == 0:
        raise ValueError(
            f"pseudo-labels are single-class: {n_fg} foreground and "
            f"{n_bg} background pixels; nothing to separate")

    if net is None:
        net = EmbeddingNet(c_in=5, hidden=cfg.hidden, c_out=1,
                           head="sigmoid", seed=cfg.seed)
    net.fit_standardizer(data.images)
    opt = Adam(net.params, lr=cfg.lr)
    records = []
    for epoch in range(cfg.epochs):
        total = 0.0
        n_frames = 0
        for t, image in enumerate(data.images):
            target, usable = _pixel_targets(image, labels[t])
            if not usable.any():
                continue
            fld = net.forward(image)
            probs = fld.features[fld.valid][:, 0]
            loss, grad = rmse_loss(probs[usable], target[usable])
            rows = np.zeros((len(probs), 1))
            rows[usable, 0] = grad
            g = np.zeros_like(fld.features)
            g[fld.valid] = rows
            opt.step(net.params, net.backward(g))
            total += loss
            n_frames += 1
        record = {"epoch": epoch, "rmse": total / max(n_frames, 1),
                  "fg_iou": _fg_iou(net, data, labels, cfg.threshold),
                  "lr": opt.lr}
        records.append(record)
        log.info("fgbg epoch %d: rmse %.4f iou %.3f", epoch,
                 record["rmse"], record["fg_iou"])
    return FgBgResult(net, records)


def predict_fg_points(net, cloud, h, w, fov, threshold=0.5):
    """Boolean foreground mask over a cloud's points.

    Each point reads the sigmoid output of the pixel it projects to;
    zero-range points are background.
    """
    image = project_to_range_image(cloud, h, w, fov)
    fld = net.forward(image)
    grid = (fld.features[:, :, 0] >= threshold) & fld.valid
    u, v, r = point_pixels(cloud.xyz, h, w, fov)
    out = np.zeros(len(cloud), dtype=bool)
    ok = r > 1e-12
    out[ok] = grid[v[ok], u[ok]]
    return out


@dataclass
class CascadeResult:
    """Everything the two-stage pipeline produced.

    labels holds one int64 array per frame: 0 background, 1 and 2 the two
    foreground clusters (cluster id + 1). Points the heuristic called
    UNCERTAIN carry whatever the trained models decided, not their
    pseudo-label. seg is None when no point was predicted foreground.
    """

    pseudo: list
    fgbg: FgBgResult
    seg: object
    fg_masks: list
    labels: list


def cascade_segment(data, cfg=None):
    """Run both stages over a sequence bundle.

    Stage one trains the binary model on cfg.pseudo labels and predicts a
    per-point foreground mask for every frame. Stage two re-enters the
    embedding trainer with those masks as point_masks: correspondence
    pairs with a background endpoint drop out of the mapping on their own,
    the tracked-object pairs survive, and the push-pull term drives the
    two clusters apart over the instance groups. Every point ends up with
    exactly one of the three labels.
    """
    cfg = cfg or CascadeConfig()
    pseudo = pseudo_fgbg_labels(data, cfg)
    fgbg = train_fgbg(data, pseudo, cfg)
    fg_masks = [predict_fg_points(fgbg.net, c, data.h, data.w, data.fov,
                                  cfg.threshold) for c in data.clouds]
    labels = [np.zeros(len(c), dtype=np.int64) for c in data.clouds]
    if not any(m.any() for m in fg_masks):
        log.warning("no foreground predicted anywhere, skipping stage two")
        return CascadeResult(pseudo, fgbg, None, fg_masks, labels)

    # masks act on pixel rows, not on pair building, so the memoized
    # correspondence sets stay valid and shared
    stage2 = replace(data, point_masks=fg_masks)
    seg_cfg = TrainConfig(mode="st+dloss", epochs=cfg.seg_epochs,
                          steps_per_epoch=cfg.seg_steps, n_clusters=2,
                          lr=cfg.seg_lr, intervals=cfg.seg_intervals,
                          beta=cfg.seg_beta, gamma_w=cfg.seg_gamma_w,
                          delta_d=cfg.seg_delta_d, seed=cfg.seed)
    net = EmbeddingNet(c_in=5, hidden=cfg.seg_hidden, c_out=cfg.seg_features,
                       head="unit", seed=cfg.seed)
    seg = train_model(stage2, seg_cfg, net=net)
    for t, cloud in enumerate(data.clouds):
        fg = fg_masks[t]
        if not fg.any():
            continue
        cl = predict_point_labels(seg.net, seg.centroids, cloud,
                                  data.h, data.w, data.fov)
        labels[t][fg] = cl[fg] + 1
    return CascadeResult(pseudo, fgbg, seg, fg_masks, labels)
