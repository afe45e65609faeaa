"""Point-to-point correspondence labeling between frame pairs.

Static points pair with their nearest neighbor in the other aligned frame;
points inside tracked dynamic boxes pair through a per-track rigid ICP
refinement. Pairs are kept in original per-frame point ids so they survive
re-projection into range images, and can be cached to a compact binary
file so labeling runs once per sequence.
"""
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .cloud import KdIndex, RigidTransform
from .preprocess import IcpConfig, icp_align

logger = logging.getLogger(__name__)

STATIC = 0
DYNAMIC = 1

_MAGIC = b"STCR"
_VERSION = 1
_PAIR_DTYPE = np.dtype([("a", "<u4"), ("b", "<u4"), ("kind", "u1")])


@dataclass
class CorrespondConfig:
    static_max_dist: float = 0.3
    dynamic_max_dist: float = 0.5
    min_coverage: float = 0.2
    icp: IcpConfig = field(default_factory=lambda: IcpConfig(
        max_corr_dist=1.0, max_iterations=30, tolerance=1e-5, min_corr=8))


@dataclass
class CorrespondenceSet:
    """Matched point ids between two frames.

    ids are original per-frame cloud indexes; kind is STATIC or DYNAMIC.
    coverage is the matched fraction of frame-a points that entered the
    matching pools (kept non-ground plus re-included ground).
    """

    frame_a: int
    frame_b: int
    ids_a: np.ndarray
    ids_b: np.ndarray
    kinds: np.ndarray
    coverage: float
    low_quality: bool = False

    def __len__(self):
        return len(self.ids_a)

    def of_kind(self, kind):
        sel = self.kinds == kind
        return self.ids_a[sel], self.ids_b[sel]


def _nn_pairs(xyz_a, ids_a, xyz_b, ids_b, max_dist):
    """Nearest-neighbor pairs from a to b gated at max_dist."""
    if len(xyz_a) == 0 or len(xyz_b) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    dist, j = KdIndex(xyz_b).query(xyz_a)
    ok = dist <= max_dist
    return ids_a[ok], ids_b[j[ok]]


def static_correspondences(aligned, a, b, max_dist=0.3,
                           exclude_a=None, exclude_b=None):
    """Pair static points of frame a with their NN in frame b.

    Ground points take part again here: motion labeling ignores them but
    they anchor plenty of reliable static pairs. Callers pass the dynamic
    member ids of each frame through exclude_a/exclude_b.
    """
    xyz_a, ids_a = aligned.aligned_xyz(a, include_ground=True)
    xyz_b, ids_b = aligned.aligned_xyz(b, include_ground=True)
    if exclude_a is not None and len(exclude_a):
        keep = ~np.isin(ids_a, exclude_a)
        xyz_a, ids_a = xyz_a[keep], ids_a[keep]
    if exclude_b is not None and len(exclude_b):
        keep = ~np.isin(ids_b, exclude_b)
        xyz_b, ids_b = xyz_b[keep], ids_b[keep]
    return _nn_pairs(xyz_a, ids_a, xyz_b, ids_b, max_dist)


def _box_delta(box_a, box_b):
    """Rigid transform moving box_a's frame onto box_b's, heading wrapped
    to the nearest half-turn so the long-axis sign ambiguity cannot
    introduce a spurious flip."""
    dh = box_b.heading - box_a.heading
    while dh > np.pi / 2:
        dh -= np.pi
    while dh < -np.pi / 2:
        dh += np.pi
    rot = RigidTransform.rot_z(dh)
    trans = np.asarray(box_b.center) - rot.rotation @ np.asarray(box_a.center)
    return RigidTransform(rot.rotation, trans)


def dynamic_correspondences(tracks, aligned, a, b, cfg=None):
    """Per-track rigid pairs between frames a and b.

    Each track seen in both frames contributes ICP-refined NN pairs between
    its member points; a failed ICP drops the track. Returns
    (ids_a, ids_b, members_a, members_b) where the member arrays list every
    point id that belongs to any shared track (used to exclude them from
    the static pool).
    """
    cfg = cfg or CorrespondConfig()
    out_a, out_b = [], []
    members_a, members_b = [], []
    claimed_a = set()
    for track in sorted(tracks, key=lambda t: t.track_id):
        box_a = track.boxes.get(a)
        box_b = track.boxes.get(b)
        if box_a is None or box_b is None:
            continue
        ids_a = np.array([i for i in box_a.point_ids if i not in claimed_a],
                         dtype=np.int64)
        ids_b = np.asarray(box_b.point_ids, dtype=np.int64)
        members_a.append(ids_a)
        members_b.append(ids_b)
        claimed_a.update(ids_a.tolist())
        if len(ids_a) < cfg.icp.min_corr or len(ids_b) < cfg.icp.min_corr:
            continue
        xyz_a = aligned.poses[a].apply(aligned.clouds[a].xyz[ids_a])
        xyz_b = aligned.poses[b].apply(aligned.clouds[b].xyz[ids_b])
        res = icp_align(xyz_a, xyz_b, init=_box_delta(box_a, box_b),
                        cfg=cfg.icp)
        if not res.converged:
            logger.info("track %d: icp did not converge between frames "
                        "%d and %d, no pairs", track.track_id, a, b)
            continue
        pa, pb = _nn_pairs(res.transform.apply(xyz_a), ids_a, xyz_b, ids_b,
                           cfg.dynamic_max_dist)
        out_a.append(pa)
        out_b.append(pb)
    cat = lambda parts: (np.concatenate(parts) if parts
                         else np.empty(0, np.int64))
    return cat(out_a), cat(out_b), cat(members_a), cat(members_b)


def build_correspondences(aligned, tracks, a, b, cfg=None):
    """Full correspondence set between two frames: dynamic pairs from the
    shared tracks, nearest-neighbor pairs for everything else."""
    if a == b:
        raise ValueError("frame pair must be distinct")
    cfg = cfg or CorrespondConfig()
    da, db, mem_a, mem_b = dynamic_correspondences(tracks, aligned, a, b, cfg)
    sa, sb = static_correspondences(aligned, a, b, cfg.static_max_dist,
                                    exclude_a=mem_a, exclude_b=mem_b)
    ids_a = np.concatenate([sa, da])
    ids_b = np.concatenate([sb, db])
    kinds = np.concatenate([np.zeros(len(sa), np.uint8),
                            np.ones(len(da), np.uint8)])
    n_eligible = len(aligned.aligned_xyz(a, include_ground=True)[1])
    coverage = float(len(ids_a) / n_eligible) if n_eligible else 0.0
    return CorrespondenceSet(a, b, ids_a, ids_b, kinds, coverage,
                             low_quality=coverage < cfg.min_coverage)


def sample_pair(n_frames, rng, intervals=(5, 10, 15, 20, 25, 30)):
    """Draw a training frame pair (t, t-k).

    The interval k is drawn uniformly over the feasible part of the
    interval set, then t uniformly over the frames that admit it, so the
    empirical k-distribution stays flat regardless of sequence length.
    """
    feasible = [k for k in sorted(set(intervals)) if 1 <= k <= n_frames - 1]
    if not feasible:
        raise ValueError(f"no interval in {sorted(set(intervals))} fits a "
                         f"{n_frames}-frame sequence")
    k = feasible[int(rng.integers(len(feasible)))]
    t = int(rng.integers(k, n_frames))
    return t, t - k


def write_correspondence_cache(path, cset):
    """Binary pair cache: fixed header then (id_a u32, id_b u32, kind u8)
    little-endian records."""
    header = struct.pack("<4sHHIIIfB3x", _MAGIC, _VERSION, 0,
                         cset.frame_a, cset.frame_b, len(cset),
                         cset.coverage, int(cset.low_quality))
    rec = np.empty(len(cset), dtype=_PAIR_DTYPE)
    rec["a"] = cset.ids_a
    rec["b"] = cset.ids_b
    rec["kind"] = cset.kinds
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_correspondence_cache(path):
    head_size = struct.calcsize("<4sHHIIIfB3x")
    with open(path, "rb") as fh:
        head = fh.read(head_size)
        if len(head) < head_size:
            raise ValueError(f"{path}: truncated header")
        magic, version, _, fa, fb, n, coverage, low = struct.unpack(
            "<4sHHIIIfB3x", head)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a correspondence cache")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        body = fh.read(n * _PAIR_DTYPE.itemsize)
    if len(body) != n * _PAIR_DTYPE.itemsize:
        raise ValueError(f"{path}: expected {n} pairs, file truncated")
    rec = np.frombuffer(body, dtype=_PAIR_DTYPE)
    return CorrespondenceSet(fa, fb, rec["a"].astype(np.int64),
                             rec["b"].astype(np.int64),
                             rec["kind"].copy(), coverage, bool(low))


def pairs_to_pixels(cset, image_a, image_b):
    """Lift id pairs to range-image pixel pairs.

    Pairs whose point lost its pixel to a nearer point (occlusion in the
    projection) are dropped. Returns flat pixel indexes (row * w + col) for
    both frames plus the surviving kinds.
    """
    def reverse_map(image, ids):
        top = int(max(image.point_index.max(), ids.max() if len(ids) else 0))
        rev = np.full(top + 1, -1, dtype=np.int64)
        pix = image.point_index.ravel()
        own = pix >= 0
        rev[pix[own]] = np.flatnonzero(own)
        return rev

    if len(cset) == 0:
        z = np.empty(0, np.int64)
        return z, z, np.empty(0, np.uint8)
    rev_a = reverse_map(image_a, cset.ids_a)
    rev_b = reverse_map(image_b, cset.ids_b)
    pa = rev_a[cset.ids_a]
    pb = rev_b[cset.ids_b]
    ok = (pa >= 0) & (pb >= 0)
    return pa[ok], pb[ok], cset.kinds[ok]
