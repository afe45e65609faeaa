"""Per-point motion scoring and dynamic object proposals.

Scores compare each aligned frame against its temporal neighbors; points
that moved get clustered into box proposals that downstream tracking links
over time.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .cloud import KdIndex
from .cluster import DBSCAN, NOISE
from .validation import check_xyz

log = logging.getLogger(__name__)

# group ids used for the instance-level feature loss
GROUND = 0
SMALL_DYNAMIC = 1
LARGE_STATIC = 2
UNASSIGNED = 255


@dataclass
class DynamicsConfig:
    lam: float = 1.0              # score saturation rate, 1/m
    epsilon: float = 0.5          # dynamic threshold on the score
    m_window: int = 3             # reference frames on each side
    cluster_eps: float = 0.8      # DBSCAN radius, m
    cluster_min_pts: int = 10
    score_scale: float = 2.0      # weight of the score channel in clustering
    n_min: int = 20               # smallest box support
    max_side: float = 15.0        # m
    volume_min: float = 0.1       # m^3
    volume_max: float = 120.0
    v_split: float = 3.0          # SMALL_DYNAMIC volume cutoff, m^3


@dataclass
class DynamicScoreField:
    """Motion scores for the filtered points of one frame.

    scores align with point_ids, which index the frame's original cloud.
    """

    frame: int
    scores: np.ndarray
    point_ids: np.ndarray
    m_window: int
    lam: float


def dynamic_scores(aligned, i, cfg=None, ref_indexes=None):
    """Score the filtered points of frame i against temporal references.

    score = 1 - exp(-lam * max_t ||p - nn_t(p)||) over reference frames
    t in [i-M, i-1] union [i+1, i+M], clipped to the sequence and skipping
    excluded frames. ref_indexes may carry prebuilt KdIndex objects keyed by
    frame to share across calls.
    """
    cfg = cfg or DynamicsConfig()
    n_frames = len(aligned)
    if not (0 <= i < n_frames):
        raise ValueError(f"frame {i} out of range")
    if aligned.excluded[i]:
        raise ValueError(f"frame {i} is excluded from alignment")
    refs = [t for t in range(i - cfg.m_window, i + cfg.m_window + 1)
            if t != i and 0 <= t < n_frames and not aligned.excluded[t]]
    if not refs:
        raise ValueError(f"frame {i} has no usable reference frames")
    xyz, ids = aligned.aligned_xyz(i)
    max_d = np.zeros(len(xyz))
    for t in refs:
        if ref_indexes is not None and t in ref_indexes:
            index = ref_indexes[t]
        else:
            ref_xyz, _ = aligned.aligned_xyz(t)
            index = KdIndex(ref_xyz)
            if ref_indexes is not None:
                ref_indexes[t] = index
        d, _ = index.query(xyz)
        np.maximum(max_d, d, out=max_d)
    scores = 1.0 - np.exp(-cfg.lam * max_d)
    return DynamicScoreField(i, scores, ids, cfg.m_window, cfg.lam)


def split_dynamic(field, epsilon):
    """Boolean dynamic mask over the field's points (score >= epsilon)."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    return field.scores >= epsilon


@dataclass
class BoxInstance:
    """Upright oriented bounding box around one dynamic cluster."""

    frame: int
    center: np.ndarray       # (3,) in aligned coordinates
    heading: float           # radians in [0, pi), long axis direction
    length: float
    width: float
    height: float
    point_ids: np.ndarray    # original cloud indexes of the members

    @property
    def volume(self):
        return self.length * self.width * self.height

    def axes(self):
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([c, s, 0.0]), np.array([-s, c, 0.0])

    def contains(self, xyz, slack=1e-6):
        """Membership test in the inflated box."""
        e1, e2 = self.axes()
        rel = np.asarray(xyz) - self.center
        a = np.abs(rel @ e1) <= self.length / 2 + slack
        b = np.abs(rel @ e2) <= self.width / 2 + slack
        c = np.abs(rel[..., 2]) <= self.height / 2 + slack
        return a & b & c

    def aabb(self):
        """Axis-aligned hull -> (lo, hi) corners."""
        e1, e2 = self.axes()
        half = (np.abs(e1) * self.length / 2 + np.abs(e2) * self.width / 2)
        half[2] = self.height / 2
        return self.center - half, self.center + half


def fit_box(xyz, point_ids, frame):
    """Fit an upright box to cluster points: heading from the principal
    axis of the xy scatter, extents from min/max along the box axes.

    Guarantees length >= width; heading is reported modulo pi. A cluster
    with isotropic xy scatter gets heading 0.
    """
    xyz = check_xyz(xyz, "cluster points")
    if len(xyz) < 3:
        raise ValueError("need at least 3 points to fit a box")
    xy = xyz[:, :2]
    cov = np.cov(xy.T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] - evals[0] <= 1e-12 * max(evals[1], 1.0):
        heading = 0.0
    else:
        major = evecs[:, 1]  # eigh sorts ascending
        heading = math.atan2(major[1], major[0]) % math.pi
    e1 = np.array([math.cos(heading), math.sin(heading)])
    e2 = np.array([-math.sin(heading), math.cos(heading)])
    a = xy @ e1
    b = xy @ e2
    length = float(a.max() - a.min())
    width = float(b.max() - b.min())
    if length < width:
        length, width = width, length
        heading = (heading + math.pi / 2.0) % math.pi
        e1, e2 = e2, -e1
        a, b = b, -b
    z = xyz[:, 2]
    center_xy = e1 * (a.max() + a.min()) / 2.0 + e2 * (b.max() + b.min()) / 2.0
    center = np.array([center_xy[0], center_xy[1], (z.max() + z.min()) / 2.0])
    height = float(z.max() - z.min())
    return BoxInstance(frame, center, heading, length, width, height,
                       np.asarray(point_ids, dtype=np.int64))


def cluster_dynamic(aligned, field, cfg=None):
    """Cluster the dynamic points of one frame into box proposals.

    Clustering runs on 4-D features (x, y, z, score_scale * score) so groups
    of different motion saliency separate even when spatially adjacent.
    Noise points are left out; each surviving cluster becomes a BoxInstance.
    """
    cfg = cfg or DynamicsConfig()
    mask = split_dynamic(field, cfg.epsilon)
    if not mask.any():
        return []
    xyz, ids = aligned.aligned_xyz(field.frame)
    dyn_xyz = xyz[mask]
    dyn_ids = ids[mask]
    feats = np.column_stack([dyn_xyz, cfg.score_scale * field.scores[mask]])
    labels = DBSCAN(eps=cfg.cluster_eps, min_pts=cfg.cluster_min_pts).fit_predict(feats)
    boxes = []
    for cid in range(labels.max() + 1 if labels.size else 0):
        member = labels == cid
        if int(member.sum()) < 3:
            continue
        boxes.append(fit_box(dyn_xyz[member], dyn_ids[member], field.frame))
    return boxes


def filter_boxes(boxes, cfg=None):
    """Drop proposals outside plausible object size bounds."""
    cfg = cfg or DynamicsConfig()
    kept = []
    for b in boxes:
        if len(b.point_ids) < cfg.n_min:
            continue
        if max(b.length, b.width, b.height) > cfg.max_side:
            continue
        if not (cfg.volume_min <= b.volume <= cfg.volume_max):
            continue
        kept.append(b)
    return kept


def assign_groups(aligned, t, boxes, static_labels, cfg=None):
    """Per-point group map for frame t over the original cloud.

    ground -> GROUND; members of small dynamic boxes -> SMALL_DYNAMIC;
    points of static clusters (non-noise rows of static_labels, aligned
    with the frame's filtered static points) -> LARGE_STATIC; everything
    else stays UNASSIGNED.
    """
    cfg = cfg or DynamicsConfig()
    n = len(aligned.clouds[t])
    groups = np.full(n, UNASSIGNED, dtype=np.uint8)
    groups[aligned.ground_masks[t]] = GROUND
    static_ids, labels = static_labels
    ok = labels != NOISE
    groups[static_ids[ok]] = LARGE_STATIC
    for b in boxes:
        if b.frame != t:
            continue
        if b.volume < cfg.v_split:
            groups[b.point_ids] = SMALL_DYNAMIC
    return groups


def static_cluster_labels(aligned, t, field, cfg=None):
    """DBSCAN labels over frame t's static filtered points.

    Returns (original ids, labels); points the motion score marked dynamic
    are not considered static here.
    """
    cfg = cfg or DynamicsConfig()
    xyz, ids = aligned.aligned_xyz(t)
    static = ~split_dynamic(field, cfg.epsilon)
    sx = xyz[static]
    sid = ids[static]
    if len(sx) == 0:
        return sid, np.zeros(0, dtype=np.int64)
    labels = DBSCAN(eps=cfg.cluster_eps, min_pts=cfg.cluster_min_pts).fit_predict(sx)
    return sid, labels
