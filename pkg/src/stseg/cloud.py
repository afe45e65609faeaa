"""Point cloud containers, sensor-format I/O and range-view projection."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .validation import as_float_array, check_xyz

log = logging.getLogger(__name__)

INVALID = -1  # sentinel for unoccupied range-image pixels


class PointCloud:
    """One LiDAR sweep: xyz coordinates plus per-point intensity.

    Coordinates are finite float64, intensity lives in [0, 1]. Clouds may be
    empty right after loading an empty file; operations that need points
    validate non-emptiness themselves.
    """

    __slots__ = ("xyz", "intensity", "frame_index", "dropped_points")

    def __init__(self, xyz, intensity=None, frame_index=0, dropped_points=0):
        xyz = check_xyz(xyz, "xyz", allow_empty=True)
        n = xyz.shape[0]
        if intensity is None:
            intensity = np.zeros(n)
        intensity = as_float_array(intensity, "intensity")
        if intensity.shape != (n,):
            raise ValueError(f"intensity must have shape ({n},), got {intensity.shape}")
        if n and (intensity.min() < 0.0 or intensity.max() > 1.0):
            raise ValueError("intensity must lie in [0, 1]; normalize at load time")
        if frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        self.xyz = xyz
        self.intensity = intensity
        self.frame_index = int(frame_index)
        self.dropped_points = int(dropped_points)

    def __len__(self):
        return self.xyz.shape[0]

    def transformed(self, tf):
        """Return a copy with coordinates mapped through a RigidTransform."""
        return PointCloud(tf.apply(self.xyz), self.intensity.copy(),
                          self.frame_index, self.dropped_points)

    def subset(self, index):
        """Row-select a new cloud (boolean mask or integer index array)."""
        return PointCloud(self.xyz[index], self.intensity[index],
                          self.frame_index, self.dropped_points)


def read_kitti_bin(path, frame_index=0):
    """Read a KITTI-style .bin scan: float32 little-endian (x, y, z, intensity).

    Non-finite points are dropped (count kept on the cloud); intensities are
    rescaled by the file maximum when they exceed 1. A truncated file (length
    not divisible by 4 floats) raises.
    """
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise ValueError(f"{path}: size {raw.size} floats is not a multiple of 4")
    pts = raw.reshape(-1, 4).astype(np.float64)
    finite = np.all(np.isfinite(pts), axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.warning("%s: dropped %d non-finite points", path, dropped)
        pts = pts[finite]
    intensity = pts[:, 3]
    if intensity.size and intensity.max() > 1.0:
        intensity = intensity / intensity.max()
    intensity = np.clip(intensity, 0.0, 1.0)
    return PointCloud(pts[:, :3], intensity, frame_index, dropped)


def write_kitti_bin(path, cloud):
    """Write a cloud as float32 little-endian (x, y, z, intensity) rows."""
    out = np.empty((len(cloud), 4), dtype="<f4")
    out[:, :3] = cloud.xyz
    out[:, 3] = cloud.intensity
    out.tofile(path)


def read_labels(path):
    """Read per-point labels: uint32 little-endian, low 16 bits = class id,
    high 16 bits = instance id. Returns (class_ids, instance_ids)."""
    raw = np.fromfile(path, dtype="<u4")
    return (raw & 0xFFFF).astype(np.int64), (raw >> 16).astype(np.int64)


def write_labels(path, class_ids, instance_ids=None):
    class_ids = np.asarray(class_ids, dtype=np.uint32)
    if instance_ids is None:
        instance_ids = np.zeros_like(class_ids)
    instance_ids = np.asarray(instance_ids, dtype=np.uint32)
    if np.any(class_ids > 0xFFFF) or np.any(instance_ids > 0xFFFF):
        raise ValueError("class and instance ids must fit in 16 bits")
    packed = (instance_ids << 16) | class_ids
    packed.astype("<u4").tofile(path)


def write_ply(path, cloud, colors=None):
    """Export an ASCII PLY with optional per-point uint8 RGB colors."""
    n = len(cloud)
    header = ["ply", "format ascii 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (n, 3):
            raise ValueError(f"colors must have shape ({n}, 3)")
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(header) + "\n")
        for i in range(n):
            x, y, z = cloud.xyz[i]
            if colors is None:
                f.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
            else:
                r, g, b = (int(c) for c in colors[i])
                f.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) transform: x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = as_float_array(self.rotation, "rotation")
        t = as_float_array(self.translation, "translation")
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be (3,3) and translation (3,)")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if not math.isclose(np.linalg.det(R), 1.0, abs_tol=1e-9):
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity():
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def rot_z(angle, translation=(0.0, 0.0, 0.0)):
        c, s = math.cos(angle), math.sin(angle)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return RigidTransform(R, np.asarray(translation, dtype=np.float64))

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other):
        """Return the transform equal to applying `other` first, then self."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def rotation_angle(self):
        """Rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return math.acos(min(1.0, max(-1.0, c)))

    def as_row(self):
        """Flatten to the 12-float row-major (3x4) odometry pose layout."""
        return np.hstack([self.rotation, self.translation[:, None]]).ravel()

    @staticmethod
    def from_row(row):
        m = np.asarray(row, dtype=np.float64).reshape(3, 4)
        return RigidTransform(m[:, :3], m[:, 3])


def write_poses(path, poses):
    """Write one 12-float odometry row per pose."""
    with open(path, "w") as f:
        for tf in poses:
            f.write(" ".join(f"{v:.12e}" for v in tf.as_row()) + "\n")


def read_poses(path):
    poses = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                poses.append(RigidTransform.from_row([float(v) for v in line.split()]))
    return poses


@dataclass(frozen=True)
class SensorFov:
    """Vertical field of view, both halves given as positive radians."""

    up: float
    down: float

    def __post_init__(self):
        if self.up <= 0 or self.down <= 0:
            raise ValueError("fov halves must be positive magnitudes")

    @property
    def span(self):
        return self.up + self.down

    @staticmethod
    def from_degrees(up, down):
        return SensorFov(math.radians(up), math.radians(down))


def point_pixels(xyz, h, w, fov):
    """Spherical pixel coordinates for each point.

    u = floor(0.5 * (1 - atan2(y, x)/pi) * w), clamped to [0, w-1]
    v = floor((1 - (asin(z/r) + fov.down)/fov.span) * h), clamped to [0, h-1]

    Returns (u, v, r); callers decide how to treat out-of-fov rows, the v
    here is already clamped. Points with r == 0 get u = v = -1.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    r = np.linalg.norm(xyz, axis=1)
    ok = r > 1e-12
    u = np.full(len(xyz), INVALID, dtype=np.int64)
    v = np.full(len(xyz), INVALID, dtype=np.int64)
    if np.any(ok):
        yaw = np.arctan2(xyz[ok, 1], xyz[ok, 0])
        pitch = np.arcsin(np.clip(xyz[ok, 2] / r[ok], -1.0, 1.0))
        uu = np.floor(0.5 * (1.0 - yaw / np.pi) * w).astype(np.int64)
        vv = np.floor((1.0 - (pitch + fov.down) / fov.span) * h).astype(np.int64)
        u[ok] = np.clip(uu, 0, w - 1)
        v[ok] = np.clip(vv, 0, h - 1)
    return u, v, r


@dataclass
class RangeImage:
    """Spherical projection of one cloud.

    channels is H x W x 5 (x, y, z, intensity, range); invalid pixels hold
    the sentinel -1 in every channel and -1 in point_index.
    """

    channels: np.ndarray
    valid: np.ndarray
    point_index: np.ndarray
    fov: SensorFov
    n_points: int = 0
    n_zero_range: int = 0
    n_out_of_fov: int = 0

    @property
    def h(self):
        return self.channels.shape[0]

    @property
    def w(self):
        return self.channels.shape[1]

    @property
    def n_occluded(self):
        """Points that mapped to a pixel another point won."""
        owned = int(self.valid.sum())
        return self.n_points - self.n_zero_range - self.n_out_of_fov - owned


def project_to_range_image(cloud, h, w, fov, drop_out_of_fov=False):
    """Project a cloud to an H x W x 5 range image.

    Pixel contests are won by the nearest-range point (ties by lowest point
    index). Zero-range points are skipped. With drop_out_of_fov, points whose
    elevation falls outside the vertical fov are skipped instead of clamped.
    """
    if len(cloud) == 0:
        raise ValueError("cannot project an empty cloud")
    xyz = cloud.xyz
    r = np.linalg.norm(xyz, axis=1)
    keep = r > 1e-12
    n_zero = int((~keep).sum())
    n_oof = 0
    if drop_out_of_fov and np.any(keep):
        pitch = np.arcsin(np.clip(xyz[keep, 2] / r[keep], -1.0, 1.0))
        inside = (pitch >= -fov.down - 1e-12) & (pitch <= fov.up + 1e-12)
        idx = np.flatnonzero(keep)
        keep[idx[~inside]] = False
        n_oof = int((~inside).sum())

    ids = np.flatnonzero(keep)
    u, v, _ = point_pixels(xyz[ids], h, w, fov)
    pix = v * w + u
    # nearest range wins each pixel; stable tie-break on the lower point id
    order = np.lexsort((ids, r[ids], pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = ids[order[first]]
    win_pix = pix_sorted[first]

    channels = np.full((h, w, 5), float(INVALID))
    valid = np.zeros((h, w), dtype=bool)
    point_index = np.full((h, w), INVALID, dtype=np.int64)
    vv, uu = np.divmod(win_pix, w)
    channels[vv, uu, 0:3] = xyz[winners]
    channels[vv, uu, 3] = cloud.intensity[winners]
    channels[vv, uu, 4] = r[winners]
    valid[vv, uu] = True
    point_index[vv, uu] = winners
    return RangeImage(channels, valid, point_index, fov,
                      n_points=len(cloud), n_zero_range=n_zero, n_out_of_fov=n_oof)


class KdIndex:
    """Nearest-neighbor index over an (N, 3) point array."""

    def __init__(self, points):
        self.points = check_xyz(points, "points")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def nearest(self, query):
        """Single query -> (index, distance); distance ties break to the
        lowest index."""
        q = np.asarray(query, dtype=np.float64).reshape(3)
        dist, idx = self._tree.query(q)
        ties = self._tree.query_ball_point(q, dist * (1.0 + 1e-12) + 1e-300)
        if ties:
            cand = np.array(sorted(ties))
            d = np.linalg.norm(self.points[cand] - q, axis=1)
            best = cand[d <= dist + 1e-12]
            if best.size:
                idx = int(best[0])
        return int(idx), float(dist)

    def query(self, queries, workers=1):
        """Batch query -> (distances, indices)."""
        q = np.asarray(queries, dtype=np.float64)
        dist, idx = self._tree.query(q, workers=workers)
        return dist, idx

    def knn(self, queries, k):
        """Distances and indices of the k nearest neighbors per query row."""
        q = np.asarray(queries, dtype=np.float64)
        dist, idx = self._tree.query(q, k=k)
        return dist, idx

    def ball(self, query, radius):
        """Indices within radius of the query point, ascending."""
        out = self._tree.query_ball_point(np.asarray(query, dtype=np.float64), radius)
        return sorted(out)

    def ball_all(self, radius):
        """Per-point neighbor lists within radius (includes the point itself)."""
        return self._tree.query_ball_point(self.points, radius)
