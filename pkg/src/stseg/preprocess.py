"""Per-sweep cleanup and sequence alignment: ground removal, outlier
filtering and chained ICP into the first frame."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .cloud import KdIndex, PointCloud, RigidTransform
from .validation import check_rng, check_xyz

log = logging.getLogger(__name__)


@dataclass
class GroundConfig:
    dist_thresh: float = 0.15     # plane inlier distance, m
    gate_width: float = 1.0       # candidate band above the lowest point, m
    max_angle_deg: float = 30.0   # plane normal tilt limit from +z
    iterations: int = 200
    seed: int = 0


@dataclass
class SorConfig:
    k: int = 8
    stddev_mult: float = 2.0


@dataclass
class IcpConfig:
    max_corr_dist: float = 1.0
    max_iterations: int = 50
    tolerance: float = 1e-4
    min_corr: int = 10


@dataclass
class AlignConfig:
    ground: GroundConfig = field(default_factory=GroundConfig)
    sor: SorConfig = field(default_factory=SorConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    min_points: int = 10          # frames with fewer survivors are excluded


def fit_plane_lsq(points):
    """Least-squares plane through points -> (normal, d) with ||normal|| = 1,
    plane: normal . x + d = 0."""
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    if normal[2] < 0:
        normal = -normal
    return normal, -float(normal @ centroid)


def segment_ground(cloud, cfg=None, rng=None):
    """RANSAC plane fit among low points; returns a boolean ground mask.

    Candidates are points within cfg.gate_width above the lowest z. The
    winning plane must tilt less than cfg.max_angle_deg from +z; the final
    mask marks every point within cfg.dist_thresh of the refit plane.
    """
    cfg = cfg or GroundConfig()
    rng = check_rng(cfg.seed if rng is None else rng)
    if len(cloud) < 3:
        raise ValueError("ground segmentation needs at least 3 points")
    xyz = cloud.xyz
    z_min = xyz[:, 2].min()
    cand = np.flatnonzero(xyz[:, 2] <= z_min + cfg.gate_width)
    if cand.size < 3:
        return np.zeros(len(cloud), dtype=bool)
    pts = xyz[cand]
    cos_limit = math.cos(math.radians(cfg.max_angle_deg))

    best_count = 0
    best_inliers = None
    best_plane = None
    for _ in range(cfg.iterations):
        pick = rng.choice(cand.size, size=3, replace=False)
        p0, p1, p2 = pts[pick]
        normal = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        if normal[2] < 0:
            normal = -normal
        if normal[2] < cos_limit:
            continue
        dist = np.abs(pts @ normal - normal @ p0)
        count = int((dist <= cfg.dist_thresh).sum())
        if count > best_count:
            best_count = count
            best_inliers = dist <= cfg.dist_thresh
            best_plane = (normal, -float(normal @ p0))
    if best_inliers is None or best_count < 3:
        return np.zeros(len(cloud), dtype=bool)

    normal, d = fit_plane_lsq(pts[best_inliers])
    if normal[2] < cos_limit:
        normal, d = best_plane  # refit drifted past the tilt gate
    return np.abs(xyz @ normal + d) <= cfg.dist_thresh


def sor_filter(cloud, cfg=None):
    """Statistical outlier removal.

    Keeps point i iff its mean distance to the k nearest neighbors is at
    most mu + stddev_mult * sigma, where mu and sigma are the population
    statistics of those mean distances. Returns a boolean keep mask.
    """
    cfg = cfg or SorConfig()
    n = len(cloud)
    if n == 0:
        return np.zeros(0, dtype=bool)
    k = min(cfg.k, n - 1)
    if k <= 0:
        return np.ones(n, dtype=bool)
    idx = KdIndex(cloud.xyz)
    # k+1 because the nearest hit of each point is itself
    dists, _ = idx.knn(cloud.xyz, k + 1)
    mean_d = dists[:, 1:].mean(axis=1)
    mu = mean_d.mean()
    sigma = mean_d.std()
    return mean_d <= mu + cfg.stddev_mult * sigma


def kabsch(source, target):
    """Best-fit rigid transform mapping source points onto target points."""
    sc = source.mean(axis=0)
    tc = target.mean(axis=0)
    h = (source - sc).T @ (target - tc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.diag([1.0, 1.0, d])
    rot = vt.T @ flip @ u.T
    return RigidTransform(rot, tc - rot @ sc)


@dataclass
class IcpResult:
    transform: RigidTransform
    residual: float
    converged: bool
    iterations: int
    residual_history: list = field(default_factory=list)


def icp_align(source, target, init=None, cfg=None):
    """Point-to-point ICP aligning source onto target.

    Correspondences beyond cfg.max_corr_dist are dropped each iteration. The
    best transform seen so far is kept, so the reported residual history is
    non-increasing; the loop stops converged once an iteration fails to
    improve the best residual by cfg.tolerance. converged=False means the
    loop hit max_iterations or starved of correspondences.
    """
    cfg = cfg or IcpConfig()
    src = check_xyz(source if isinstance(source, np.ndarray) else source.xyz, "source")
    tgt = check_xyz(target if isinstance(target, np.ndarray) else target.xyz, "target")
    if len(src) < cfg.min_corr or len(tgt) < cfg.min_corr:
        raise ValueError(f"icp needs at least {cfg.min_corr} points per cloud")
    tree = KdIndex(tgt)
    tf = init or RigidTransform.identity()
    best_tf = tf
    best_res = math.inf
    history = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        moved = tf.apply(src)
        dist, nn = tree.query(moved)
        ok = dist <= cfg.max_corr_dist
        if int(ok.sum()) < cfg.min_corr:
            break
        residual = float(dist[ok].mean())
        improvement = best_res - residual   # negative when this step is worse
        if residual < best_res:
            best_res = residual
            best_tf = tf
            history.append(residual)
        if improvement < cfg.tolerance and it > 1:
            converged = True
            break
        tf = kabsch(src[ok], tgt[nn[ok]])
    return IcpResult(best_tf, best_res, converged, it, history)


@dataclass
class AlignedSequence:
    """Filtered clouds of one sequence with poses into the first frame.

    clouds hold the original sweeps; ground/keep masks index into them.
    keep_masks mark the non-ground points that survived outlier removal;
    those are the points alignment and dynamic analysis operate on.
    """

    clouds: list
    ground_masks: list
    keep_masks: list
    poses: list
    excluded: np.ndarray
    icp_residuals: np.ndarray

    def __len__(self):
        return len(self.clouds)

    def filtered_ids(self, t):
        return np.flatnonzero(self.keep_masks[t])

    def filtered_xyz(self, t):
        """Sensor-frame coordinates of the kept points of frame t."""
        return self.clouds[t].xyz[self.keep_masks[t]]

    def aligned_xyz(self, t, include_ground=False):
        """Frame-1-aligned coordinates -> (xyz, original point ids)."""
        mask = self.keep_masks[t].copy()
        if include_ground:
            mask |= self.ground_masks[t]
        ids = np.flatnonzero(mask)
        return self.poses[t].apply(self.clouds[t].xyz[ids]), ids

    def aligned_ground_xyz(self, t):
        ids = np.flatnonzero(self.ground_masks[t])
        return self.poses[t].apply(self.clouds[t].xyz[ids]), ids


def align_sequence(clouds, cfg=None):
    """Ground-strip, outlier-filter and align every sweep into frame 0.

    Each frame is registered directly against the first frame's filtered
    points, initialized from the previous frame's pose so large cumulative
    displacements still start near the optimum. Frames whose filtered
    survivor count falls below cfg.min_points are flagged excluded and carry
    the previous pose.
    """
    cfg = cfg or AlignConfig()
    if not clouds:
        raise ValueError("no clouds to align")
    ground_masks, keep_masks = [], []
    for t, cloud in enumerate(clouds):
        g = segment_ground(cloud, cfg.ground,
                           rng=np.random.default_rng(cfg.ground.seed + t))
        keep = ~g
        ids = np.flatnonzero(keep)
        if ids.size:
            sor_keep = sor_filter(cloud.subset(ids), cfg.sor)
            keep = np.zeros(len(cloud), dtype=bool)
            keep[ids[sor_keep]] = True
        ground_masks.append(g)
        keep_masks.append(keep)

    n = len(clouds)
    poses = [RigidTransform.identity()]
    excluded = np.zeros(n, dtype=bool)
    residuals = np.zeros(n)
    excluded[0] = int(keep_masks[0].sum()) < cfg.min_points
    if excluded[0]:
        raise ValueError("first frame has too few filtered points to anchor")
    target = clouds[0].xyz[keep_masks[0]]
    for t in range(1, n):
        src = clouds[t].xyz[keep_masks[t]]
        if len(src) < cfg.min_points:
            excluded[t] = True
            poses.append(poses[t - 1])
            log.warning("frame %d excluded: %d filtered points", t, len(src))
            continue
        result = icp_align(src, target, init=poses[t - 1], cfg=cfg.icp)
        poses.append(result.transform)
        residuals[t] = result.residual
        if not result.converged:
            log.warning("frame %d: icp stopped without convergence "
                        "(residual %.4f)", t, result.residual)
    return AlignedSequence(list(clouds), ground_masks, keep_masks, poses,
                           excluded, residuals)
